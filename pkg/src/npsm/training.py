"""Episode losses, RMSProp and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .backbone import extract_features, query_feature, roi_pool
from .data import Dataset, Scene
from .geometry import BBox
from .identification import embed, identification_loss
from .model import Model
from .search import unroll
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class EpisodeLoss:
    shrink: float
    iden: float
    total: float
    steps: int = 0


def shrinkage_loss(logits: Sequence[Tensor], labels: Sequence[np.ndarray]) -> Tensor:
    """Per-location 2-class cross-entropy, averaged over locations and then over steps."""
    if len(logits) != len(labels):
        raise ops.DimensionError(f"shrinkage_loss: {len(logits)} logit maps vs {len(labels)} label maps")
    if not logits:
        raise ValueError("shrinkage_loss needs at least one step")
    per_step = [ops.pixel_softmax_xent(lg, lab) for lg, lab in zip(logits, labels)]
    return _mean(per_step)


def _mean(ts: Sequence[Tensor]) -> Tensor:
    if len(ts) == 1:
        return ts[0]
    return ops.scale(ops.add(*ts), 1.0 / len(ts))


class RMSProp:
    """a <- decay*a + (1-decay)*g^2 ;  p <- p - lr*g / (sqrt(a) + eps)."""

    def __init__(self, params: dict, lr: float = 0.001, decay: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.decay = decay
        self.eps = eps
        self.acc = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Optional[dict] = None):
        for k, p in self.params.items():
            g = p.grad if grads is None else grads.get(k)
            if g is None:
                continue
            p.data, self.acc[k] = rmsprop_update(p.data, g, self.acc[k], self.lr, self.decay, self.eps)


def rmsprop_update(p: np.ndarray, g: np.ndarray, acc: np.ndarray, lr: float, decay: float, eps: float = 1e-8):
    """Returns (new_params, new_accumulator); inputs are left untouched."""
    if p.shape != g.shape or p.shape != acc.shape:
        raise ops.DimensionError(f"rmsprop_update: param {p.shape}, grad {g.shape}, accumulator {acc.shape}")
    dt = p.dtype.type
    acc = dt(decay) * acc + dt(1.0 - decay) * g * g
    return p - dt(lr) * g / (np.sqrt(acc) + dt(eps)), acc


def translate(image: np.ndarray, boxes: Sequence[BBox], dx: int, dy: int):
    """Shift image content by (dx, dy) pixels with edge replication; boxes follow and are clamped."""
    H, W = image.shape[:2]
    ys = np.clip(np.arange(H) - dy, 0, H - 1)
    xs = np.clip(np.arange(W) - dx, 0, W - 1)
    out = image[ys][:, xs]
    moved = [BBox(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy).clamp(W, H) for b in boxes]
    return out, moved


def episode_loss(model: Model, image: np.ndarray, proposals: Sequence[BBox], G: BBox, identity: int,
                 query_crop: np.ndarray, teacher_forcing: Optional[bool] = None):
    """Build one taped episode. Returns (total loss tensor, EpisodeLoss, unrolled search).

    The identification loss averages the gallery-side embedding of the final
    region and the query-side embedding.
    """
    cfg = model.cfg
    p = model.params
    dtype = np.dtype(cfg.dtype)
    tf = cfg.teacher_forcing if teacher_forcing is None else teacher_forcing
    fm = extract_features(Tensor(np.asarray(image, dtype=dtype)), p, cfg.n_stages)
    q = query_feature(Tensor(np.asarray(query_crop, dtype=dtype)), p, cfg.n_stages, cfg.K)
    run = unroll(fm, proposals, q, p, K=cfg.K, C=cfg.C, T_max=cfg.T_max, variant=cfg.variant,
                 cluster_seed=cfg.cluster_seed, G=G, teacher_forcing=tf)
    if run.step_losses:
        l_shrink = _mean(run.step_losses)
    else:
        l_shrink = Tensor(np.zeros((), dtype=dtype))
    u_final = embed(roi_pool(fm, run.trace.final_proposal, cfg.K), p)
    u_query = embed(q, p)
    S = p["ident.S"]
    l_iden = _mean([identification_loss(u_final, identity, S), identification_loss(u_query, identity, S)])
    total = ops.add(l_shrink, ops.scale(l_iden, cfg.lam))
    shrink, iden = float(l_shrink.data), float(l_iden.data)
    return total, EpisodeLoss(shrink, iden, shrink + cfg.lam * iden, len(run.trace.steps)), run


def train_episode(scene: Scene, identity: int, query_crop: np.ndarray, model: Model,
                  opt: Optional[RMSProp] = None) -> EpisodeLoss:
    """One positive episode on ``scene`` followed by a single RMSProp update of every parameter."""
    person = scene.person_of(identity)
    if person is None:
        raise ValueError(f"identity {identity} does not appear in scene {scene.scene_id}")
    if opt is None:
        opt = RMSProp(model.params, lr=model.cfg.lr, decay=model.cfg.decay)
    model.zero_grad()
    with Tape() as tape:
        total, parts, _ = episode_loss(model, scene.image, scene.proposals, person.box, identity, query_crop)
    tape.backward(total)
    opt.step()
    model.zero_grad()
    return parts


@dataclass
class Episode:
    scene_id: int
    identity: int
    query_scene: int


def plan_epoch(ds: Dataset, seed: int, epoch: int, queries: int = 1) -> list[Episode]:
    """Every (training scene, identity) occurrence ``queries`` times, in shuffled order.

    Each query crop comes from a random other training scene holding the identity.
    """
    rng = np.random.default_rng([seed, epoch])
    train = ds.split("train")
    holders: dict[int, list[int]] = {}
    for s in train:
        for ident in s.identities():
            holders.setdefault(ident, []).append(s.scene_id)
    occ = [(s.scene_id, ident) for s in train for ident in s.identities() for _ in range(queries)]
    out = []
    for k in rng.permutation(len(occ)):
        sid, ident = occ[k]
        others = [o for o in holders[ident] if o != sid]
        qs = others[int(rng.integers(len(others)))] if others else sid
        out.append(Episode(sid, ident, qs))
    return out


def episode_inputs(ds: Dataset, ep: Episode, rng: Optional[np.random.Generator] = None, augment: bool = False):
    scene: Scene = ds.scene(ep.scene_id)
    G = scene.person_of(ep.identity).box
    qscene = ds.scene(ep.query_scene)
    crop = qscene.crop(qscene.person_of(ep.identity).box)
    image, proposals = scene.image, list(scene.proposals)
    if augment and rng is not None:
        H = image.shape[0]
        amp = max(1, int(round(0.05 * H)))
        dx, dy = (int(v) for v in rng.integers(-amp, amp + 1, size=2))
        image, moved = translate(image, proposals + [G], dx, dy)
        G = moved[-1]
        proposals = [b for b in moved[:-1] if b.is_valid()]
    return image, proposals, G, crop


def train(model: Model, ds: Dataset, epochs: Optional[int] = None,
          log: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train in place. Returns one record per epoch (also emitted through ``log``)."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    opt = RMSProp(model.params, lr=cfg.lr, decay=cfg.decay)
    aug_rng = np.random.default_rng([cfg.seed, 99])
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.lr * cfg.decay ** epoch
        sums = np.zeros(3)
        plan = plan_epoch(ds, cfg.seed, epoch, cfg.queries_per_occurrence)
        model.zero_grad()
        pending = 0
        for ep in plan:
            image, proposals, G, crop = episode_inputs(ds, ep, aug_rng, cfg.augment)
            with Tape() as tape:
                total, parts, _ = episode_loss(model, image, proposals, G, ep.identity, crop)
            tape.backward(total)
            sums += (parts.shrink, parts.iden, parts.total)
            pending += 1
            if pending == cfg.batch_size:
                _apply(opt, model, pending)
                pending = 0
        if pending:
            _apply(opt, model, pending)
        n = max(1, len(plan))
        rec = {"epoch": epoch + 1, "L_shrink": sums[0] / n, "L_iden": sums[1] / n, "total": sums[2] / n,
               "lr": opt.lr, "wall": time.perf_counter() - t0}
        history.append(rec)
        line = format_log_line(rec)
        logger.info(line)
        if log is not None:
            log(line)
    return history


def _apply(opt: RMSProp, model: Model, n: int):
    if n > 1:
        for p in model.params.values():
            if p.grad is not None:
                p.grad = p.grad / p.grad.dtype.type(n)
    opt.step()
    model.zero_grad()


def format_log_line(rec: dict) -> str:
    return (f"epoch={rec['epoch']} L_shrink={rec['L_shrink']:.6f} L_iden={rec['L_iden']:.6f} "
            f"total={rec['total']:.6f} lr={rec['lr']:.6g} wall={rec['wall']:.2f}")
