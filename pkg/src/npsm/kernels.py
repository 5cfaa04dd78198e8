"""Hot numeric kernels.

Every kernel exists twice: an ``@njit`` loop version and a vectorised numpy
version. ``BACKEND`` (see ``_backend``) picks which one the public names bind
to; both are importable for benchmarking and cross-checking.
"""

import numpy as np

from ._backend import BACKEND, njit

__all__ = [
    "BACKEND",
    "im2col",
    "col2im",
    "roi_pool_forward",
    "roi_pool_backward",
    "kmeans_lloyd",
]


# ---------------------------------------------------------------------------
# im2col / col2im for "same"-padded strided convolution
# ---------------------------------------------------------------------------


def conv_out_size(n, stride):
    return (n + stride - 1) // stride


@njit(cache=True)
def _im2col_nb(x, kh, kw, stride):
    H, W, C = x.shape
    ph = kh // 2
    pw = kw // 2
    Ho = (H + stride - 1) // stride
    Wo = (W + stride - 1) // stride
    cols = np.zeros((Ho * Wo, kh * kw * C), dtype=x.dtype)
    for oy in range(Ho):
        for ox in range(Wo):
            row = oy * Wo + ox
            for i in range(kh):
                y = oy * stride + i - ph
                if y < 0 or y >= H:
                    continue
                for j in range(kw):
                    xx = ox * stride + j - pw
                    if xx < 0 or xx >= W:
                        continue
                    base = (i * kw + j) * C
                    for c in range(C):
                        cols[row, base + c] = x[y, xx, c]
    return cols


@njit(cache=True)
def _col2im_nb(cols, H, W, C, kh, kw, stride):
    ph = kh // 2
    pw = kw // 2
    Ho = (H + stride - 1) // stride
    Wo = (W + stride - 1) // stride
    gx = np.zeros((H, W, C), dtype=cols.dtype)
    for oy in range(Ho):
        for ox in range(Wo):
            row = oy * Wo + ox
            for i in range(kh):
                y = oy * stride + i - ph
                if y < 0 or y >= H:
                    continue
                for j in range(kw):
                    xx = ox * stride + j - pw
                    if xx < 0 or xx >= W:
                        continue
                    base = (i * kw + j) * C
                    for c in range(C):
                        gx[y, xx, c] += cols[row, base + c]
    return gx


def _im2col_np(x, kh, kw, stride):
    H, W, C = x.shape
    ph, pw = kh // 2, kw // 2
    Ho, Wo = conv_out_size(H, stride), conv_out_size(W, stride)
    # pad so every strided window fits, including the trailing partial one
    need_h = (Ho - 1) * stride + kh
    need_w = (Wo - 1) * stride + kw
    xp = np.zeros((need_h, need_w, C), dtype=x.dtype)
    xp[ph : ph + H, pw : pw + W] = x[: need_h - ph, : need_w - pw]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # Ho, Wo, C, kh, kw
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(Ho * Wo, kh * kw * C)


def _col2im_np(cols, H, W, C, kh, kw, stride):
    ph, pw = kh // 2, kw // 2
    Ho, Wo = conv_out_size(H, stride), conv_out_size(W, stride)
    need_h = (Ho - 1) * stride + kh
    need_w = (Wo - 1) * stride + kw
    gp = np.zeros((max(need_h, H + ph), max(need_w, W + pw), C), dtype=cols.dtype)
    c5 = cols.reshape(Ho, Wo, kh, kw, C)
    for i in range(kh):
        for j in range(kw):
            gp[i : i + stride * Ho : stride, j : j + stride * Wo : stride] += c5[:, :, i, j]
    return np.ascontiguousarray(gp[ph : ph + H, pw : pw + W])


# ---------------------------------------------------------------------------
# ROI max pooling over a K x K grid of integer bins
# ---------------------------------------------------------------------------


@njit(cache=True)
def _roi_pool_forward_nb(fm, y0, y1, x0, x1, K):
    H, W, D = fm.shape
    h = y1 - y0
    w = x1 - x0
    out = np.empty((K, K, D), dtype=fm.dtype)
    arg = np.empty((K, K, D), dtype=np.int64)
    for bi in range(K):
        r0 = y0 + (bi * h) // K
        r1 = y0 - ((-(bi + 1) * h) // K)
        if r1 <= r0:
            r1 = r0 + 1
        for bj in range(K):
            c0 = x0 + (bj * w) // K
            c1 = x0 - ((-(bj + 1) * w) // K)
            if c1 <= c0:
                c1 = c0 + 1
            for d in range(D):
                best = fm[r0, c0, d]
                bidx = r0 * W + c0
                for r in range(r0, r1):
                    for c in range(c0, c1):
                        v = fm[r, c, d]
                        if v > best:
                            best = v
                            bidx = r * W + c
                out[bi, bj, d] = best
                arg[bi, bj, d] = bidx
    return out, arg


@njit(cache=True)
def _roi_pool_backward_nb(gout, arg, H, W):
    K1, K2, D = gout.shape
    g = np.zeros(H * W * D, dtype=gout.dtype)
    for bi in range(K1):
        for bj in range(K2):
            for d in range(D):
                g[arg[bi, bj, d] * D + d] += gout[bi, bj, d]
    return g.reshape(H, W, D)


def _bin_edges(start, length, K):
    i = np.arange(K)
    lo = start + (i * length) // K
    hi = start - ((-(i + 1) * length) // K)
    hi = np.maximum(hi, lo + 1)
    return lo, hi


def _roi_pool_forward_np(fm, y0, y1, x0, x1, K):
    H, W, D = fm.shape
    rlo, rhi = _bin_edges(y0, y1 - y0, K)
    clo, chi = _bin_edges(x0, x1 - x0, K)
    out = np.empty((K, K, D), dtype=fm.dtype)
    arg = np.empty((K, K, D), dtype=np.int64)
    for bi in range(K):
        for bj in range(K):
            patch = fm[rlo[bi] : rhi[bi], clo[bj] : chi[bj]]
            ph, pw = patch.shape[:2]
            flat = patch.reshape(ph * pw, D)
            k = flat.argmax(axis=0)  # first max in row-major order
            out[bi, bj] = flat[k, np.arange(D)]
            arg[bi, bj] = (rlo[bi] + k // pw) * W + clo[bj] + k % pw
    return out, arg


def _roi_pool_backward_np(gout, arg, H, W):
    D = gout.shape[2]
    g = np.zeros(H * W * D, dtype=gout.dtype)
    idx = arg * D + np.arange(D)
    np.add.at(g, idx.ravel(), gout.ravel())
    return g.reshape(H, W, D)


# ---------------------------------------------------------------------------
# Lloyd iterations for k-means on 2-D points
# ---------------------------------------------------------------------------


@njit(cache=True)
def _kmeans_lloyd_nb(pts, centers, max_iter, tol):
    n = pts.shape[0]
    C = centers.shape[0]
    centers = centers.copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        for p in range(n):
            best = 0
            bd = np.inf
            for k in range(C):
                dx = pts[p, 0] - centers[k, 0]
                dy = pts[p, 1] - centers[k, 1]
                d = dx * dx + dy * dy
                if d < bd:
                    bd = d
                    best = k
            labels[p] = best
        _fill_empty_nb(pts, centers, labels, C)
        moved = 0.0
        for k in range(C):
            sx = 0.0
            sy = 0.0
            m = 0
            for p in range(n):
                if labels[p] == k:
                    sx += pts[p, 0]
                    sy += pts[p, 1]
                    m += 1
            nx = sx / m
            ny = sy / m
            mv = np.sqrt((nx - centers[k, 0]) ** 2 + (ny - centers[k, 1]) ** 2)
            if mv > moved:
                moved = mv
            centers[k, 0] = nx
            centers[k, 1] = ny
        if moved < tol:
            break
    return labels


@njit(cache=True)
def _fill_empty_nb(pts, centers, labels, C):
    n = pts.shape[0]
    for k in range(C):
        count = 0
        for p in range(n):
            if labels[p] == k:
                count += 1
        if count > 0:
            continue
        # steal the point farthest from its own center, from a cluster of size > 1
        best = -1
        bd = -1.0
        for p in range(n):
            own = labels[p]
            size = 0
            for q in range(n):
                if labels[q] == own:
                    size += 1
            if size < 2:
                continue
            dx = pts[p, 0] - centers[own, 0]
            dy = pts[p, 1] - centers[own, 1]
            d = dx * dx + dy * dy
            if d > bd:
                bd = d
                best = p
        labels[best] = k


def _fill_empty_np(pts, centers, labels, C):
    for k in range(C):
        if np.any(labels == k):
            continue
        sizes = np.bincount(labels, minlength=C)
        d = ((pts - centers[labels]) ** 2).sum(axis=1)
        d[sizes[labels] < 2] = -1.0
        labels[int(np.argmax(d))] = k


def _kmeans_lloyd_np(pts, centers, max_iter, tol):
    centers = centers.copy()
    C = centers.shape[0]
    labels = np.zeros(len(pts), dtype=np.int64)
    for _ in range(max_iter):
        d = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d, axis=1).astype(np.int64)
        _fill_empty_np(pts, centers, labels, C)
        new = np.stack([pts[labels == k].mean(axis=0) for k in range(C)])
        moved = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if moved < tol:
            break
    return labels


if BACKEND == "numba":
    im2col = _im2col_nb
    col2im = _col2im_nb
    roi_pool_forward = _roi_pool_forward_nb
    roi_pool_backward = _roi_pool_backward_nb
    kmeans_lloyd = _kmeans_lloyd_nb
else:
    im2col = _im2col_np
    col2im = _col2im_np
    roi_pool_forward = _roi_pool_forward_np
    roi_pool_backward = _roi_pool_backward_np
    kmeans_lloyd = _kmeans_lloyd_np
