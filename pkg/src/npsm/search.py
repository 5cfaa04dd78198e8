"""Recursive region shrinkage over clustered proposals.

One routine, :func:`unroll`, drives both inference (greedy argmax descent,
no tape) and training (teacher-forced descent with per-step losses). Keeping
them on one code path means training supervises exactly what search runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .backbone import FeatureMap, roi_pool
from .geometry import BBox, Region, intersection, iou, split_region
from .nsn import (AttentionMap, NSNState, QueryContext, attention, map_subregion_to_grid,
                  no_context_step, nsn_step, subregion_score)
from .tensor import Tensor

CONTAIN_RATIO = 0.9


@dataclass
class SearchStep:
    parent: Region
    children: list[Region]
    scores: list[float]
    chosen: int
    attention: Optional[np.ndarray]  # K x K, None for the attention-free variant
    state_after: Optional[NSNState] = None
    rects: list = field(default_factory=list)


@dataclass
class SearchTrace:
    steps: list[SearchStep]
    final_proposal: BBox
    final_index: int
    final_similarity: float = float("nan")

    def covers(self) -> list[BBox]:
        out = [s.parent.cover for s in self.steps]
        if self.steps:
            out.append(self.steps[-1].children[self.steps[-1].chosen].cover)
        return out

    def to_record(self, **extra) -> dict:
        rec = dict(extra)
        rec["steps"] = [{
            "parent": list(s.parent.cover),
            "members": list(s.parent.members),
            "children": [{"cover": list(c.cover), "members": list(c.members)} for c in s.children],
            "rects": [list(r) for r in s.rects],
            "scores": s.scores,
            "chosen": s.chosen,
            "attention": None if s.attention is None else np.asarray(s.attention, dtype=float).tolist(),
        } for s in self.steps]
        rec["final_proposal"] = list(self.final_proposal)
        rec["final_index"] = self.final_index
        rec["final_similarity"] = self.final_similarity
        return rec

    def to_line(self, **extra) -> str:
        return json.dumps(self.to_record(**extra), separators=(",", ":"))


def contains(region: Region, G: BBox) -> bool:
    """G counts as inside the region when >= 90% of its area lies in the cover."""
    area = G.area
    if area <= 0:
        return False
    return intersection(G, region.cover) / area >= CONTAIN_RATIO


def gt_child(children: Sequence[Region], G: BBox) -> Optional[int]:
    """Index of the child holding G: the containing child with the highest IoU, lowest index on ties."""
    best, best_iou = None, -1.0
    for k, ch in enumerate(children):
        if contains(ch, G):
            v = iou(ch.cover, G)
            if v > best_iou:
                best, best_iou = k, v
    return best


def shrinkage_labels(parent: Region, children: Sequence[Region], G: BBox, K: int) -> np.ndarray:
    """K x K 0/1 map: ones on the grid rectangle of the G-holding child, else all zeros."""
    lab = np.zeros((K, K), dtype=np.int64)
    k = gt_child(children, G)
    if k is not None:
        r0, r1, c0, c1 = map_subregion_to_grid(parent, children[k], K)
        lab[r0:r1, c0:c1] = 1
    return lab


def shrinkage_logits(h_t: Tensor, w_s: Tensor, b_s: Optional[Tensor] = None) -> Tensor:
    """Per-location 2-class logits from a 1x1 conv on the hidden state."""
    if w_s.shape[:2] != (1, 1) or w_s.shape[3] != 2:
        raise ops.DimensionError(f"shrinkage head must be 1 x 1 x D x 2, got {w_s.shape}")
    return ops.conv2d(h_t, w_s, b_s)


def _segmentation_logits(h: Tensor, att: AttentionMap, params: dict) -> Tensor:
    """Shrinkage-head logits with the attention logit added to the foreground channel."""
    seg = shrinkage_logits(h, params["nsn.w_s"], params["nsn.b_s"])
    K = att.z.shape[0]
    zeros = Tensor(np.zeros((K, K, 1), dtype=att.z.dtype))
    return ops.add(seg, ops.concat([zeros, ops.reshape(att.z, (K, K, 1))], axis=2))


def _mlp_child_logits(q: Tensor, x_child: Tensor, params: dict) -> Tensor:
    feat = ops.concat([ops.flatten(q), ops.flatten(x_child)], axis=0)
    hid = ops.relu(ops.linear(feat, params["mlp.w1"], params["mlp.b1"]))
    return ops.linear(hid, params["mlp.w2"], params["mlp.b2"])


def _sub_feature(x_parent: Tensor, rect, K: int) -> Tensor:
    """A child's cells cut from the parent's pooled map, re-pooled to K x K."""
    r0, r1, c0, c1 = rect
    return ops.max_pool_bins(x_parent, r0, r1, c0, c1, K)


def _fg_prob(logits2: np.ndarray) -> float:
    d = float(logits2[0] - logits2[1])
    if d > 700.0:
        return 0.0
    return 1.0 / (1.0 + math.exp(d))


@dataclass
class Unrolled:
    trace: SearchTrace
    step_losses: list  # scalar Tensors (training only)
    final_region: Region


def unroll(fm: FeatureMap, proposals: Sequence[BBox], q: Tensor, params: dict, *,
           K: int, C: int, T_max: int, variant: str = "full", cluster_seed: int = 0,
           G: Optional[BBox] = None, teacher_forcing: bool = False, keep_states: bool = False) -> Unrolled:
    """Shrink from the cover of all proposals down to one proposal.

    With ``G`` given, per-step shrinkage losses are produced, and with
    ``teacher_forcing`` the descent follows the G-holding child whenever
    one exists.
    """
    boxes = list(proposals)
    if not boxes:
        raise ValueError("search needs at least one proposal")
    parent = Region.of(boxes, range(len(boxes)))
    dtype = fm.tensor.dtype
    D = fm.tensor.shape[2]
    ctx = QueryContext(q, params, variant) if variant != "no_attention_context" else None
    state = NSNState.zeros(K, D, dtype)
    steps: list[SearchStep] = []
    losses = []
    last_map = None  # (last parent region, its attention map or pooled features)

    for _ in range(T_max):
        if len(parent.members) == 1:
            break
        children = split_region(parent, boxes, C, cluster_seed)
        rects = [map_subregion_to_grid(parent, ch, K) for ch in children]
        att_np = None
        if variant == "no_attention_context":
            x_t = roi_pool(fm, parent.cover, K)
            last_map = (parent, x_t)
            logits = [_mlp_child_logits(q, _sub_feature(x_t, r, K), params) for r in rects]
            scores = [_fg_prob(lg.data) for lg in logits]
            if G is not None:
                gk = gt_child(children, G)
                step = [ops.softmax_xent(lg, int(k == gk)) for k, lg in enumerate(logits)]
                losses.append(ops.scale(ops.add(*step), 1.0 / len(step)) if len(step) > 1 else step[0])
        else:
            x_t = roi_pool(fm, parent.cover, K)
            if variant == "full":
                state = nsn_step(x_t, q, state, params, ctx)
            else:
                state = no_context_step(x_t, q, params)
            att = attention(q, state.h, params, ctx)
            att_np = att.l.data
            scores = [subregion_score(att_np, r) for r in rects]
            last_map = (parent, att_np)
            if G is not None:
                labels = shrinkage_labels(parent, children, G, K)
                losses.append(ops.pixel_softmax_xent(_segmentation_logits(state.h, att, params), labels))
        chosen = int(np.argmax(scores))
        if teacher_forcing and G is not None:
            gk = gt_child(children, G)
            if gk is not None:
                chosen = gk
        steps.append(SearchStep(parent, children, [float(s) for s in scores], chosen, att_np,
                                state if keep_states else None, rects))
        parent = children[chosen]

    if len(parent.members) == 1:
        final_idx = parent.members[0]
    elif teacher_forcing and G is not None:
        final_idx = max(parent.members, key=lambda m: (iou(boxes[m], G), -m))
    else:
        final_idx = _best_singleton(parent, boxes, last_map, q, params, K, variant)
    final = Region.of(boxes, [final_idx])
    return Unrolled(SearchTrace(steps, boxes[final_idx], final_idx), losses, final)


def _best_singleton(region, boxes, last_map, q, params, K, variant) -> int:
    """Pick the member whose own singleton region scores highest (lowest index on ties)."""
    if last_map is None:
        return region.members[0]
    on, cells = last_map
    rects = [map_subregion_to_grid(on, Region.of(boxes, [m]), K) for m in region.members]
    if variant == "no_attention_context":
        scores = [_fg_prob(_mlp_child_logits(q, _sub_feature(cells, r, K), params).data) for r in rects]
    else:
        scores = [subregion_score(cells, r) for r in rects]
    return region.members[int(np.argmax(scores))]


def search(fm: FeatureMap, proposals: Sequence[BBox], q: Tensor, params: dict, cfg, keep_states=False) -> SearchTrace:
    """Greedy inference search configured by a :class:`~npsm.config.RunConfig`."""
    return unroll(fm, proposals, q, params, K=cfg.K, C=cfg.C, T_max=cfg.T_max, variant=cfg.variant,
                  cluster_seed=cfg.cluster_seed, keep_states=keep_states).trace
