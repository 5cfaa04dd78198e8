"""Search every gallery image, rank by cosine similarity, score mAP and top-1."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .backbone import FeatureMap, extract_features, query_feature, roi_pool
from .data import Dataset, QueryTask, make_tasks
from .geometry import BBox, iou
from .identification import cosine_similarity, embed
from .model import Model
from .search import SearchTrace, search
from .tensor import Tensor

IOU_THRESHOLD = 0.5

# scorer(task, scene_id) -> (final box, similarity)
Scorer = Callable[[QueryTask, int], tuple]


@dataclass
class RankedEntry:
    scene: int
    box: BBox
    score: float


@dataclass
class QueryResult:
    task: QueryTask
    ranked: list[RankedEntry]

    def boxes_per_image(self) -> dict:
        return {e.scene: e.box for e in self.ranked}


@dataclass
class EvalReport:
    mAP: float
    top1: float
    aps: list[float]
    top1_hits: list[int]
    gallery_size: Optional[int]
    fingerprint: str
    config_text: str = ""
    query_keys: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"gallery_size: {self.gallery_size if self.gallery_size is not None else 'all'}",
            f"queries: {len(self.aps)}",
            f"mAP: {self.mAP:.6f}",
            f"top1: {self.top1:.6f}",
            f"fingerprint: {self.fingerprint}",
        ]
        for cl in self.config_text.strip().splitlines():
            lines.append(f"config.{cl.replace(' = ', ': ', 1)}")
        lines.append("")
        lines.append("query\tAP\ttop1")
        for k, ap, hit in zip(self.query_keys, self.aps, self.top1_hits):
            lines.append(f"{k}\t{ap:.6f}\t{hit}")
        return "\n".join(lines) + "\n"


def rank(entries: Iterable[RankedEntry]) -> list[RankedEntry]:
    """Similarity descending, ties by scene id ascending."""
    return sorted(entries, key=lambda e: (-e.score, e.scene))


def is_true_positive(entry: RankedEntry, identity: int, ds: Dataset) -> bool:
    person = ds.scene(entry.scene).person_of(identity)
    return person is not None and iou(entry.box, person.box) >= IOU_THRESHOLD


def average_precision(ranked: Sequence[RankedEntry], identity: int, ds: Dataset,
                      n_positives: Optional[int] = None) -> float:
    """Mean precision at the ranks of true positives; missed positive scenes count in the denominator."""
    if n_positives is None:
        n_positives = sum(1 for e in ranked if ds.scene(e.scene).person_of(identity) is not None)
    if n_positives <= 0:
        raise ValueError("average precision needs at least one positive scene")
    hits, total = 0, 0.0
    for r, e in enumerate(ranked, 1):
        if is_true_positive(e, identity, ds):
            hits += 1
            total += hits / r
    return total / n_positives


def ap_from_flags(tp_flags: Sequence[bool], n_positives: int) -> float:
    """Same rule as :func:`average_precision` on a precomputed TP flag list."""
    if n_positives <= 0:
        raise ValueError("average precision needs at least one positive scene")
    hits, total = 0, 0.0
    for r, tp in enumerate(tp_flags, 1):
        if tp:
            hits += 1
            total += hits / r
    return total / n_positives


def evaluate_query(task: QueryTask, scorer: Scorer) -> QueryResult:
    entries = []
    for sid in task.gallery:
        box, score = scorer(task, sid)
        entries.append(RankedEntry(sid, BBox(*box), float(score)))
    return QueryResult(task, rank(entries))


def evaluate_tasks(tasks: Sequence[QueryTask], scorer: Scorer, ds: Dataset, gallery_size=None,
                   fingerprint: str = "", config_text: str = "") -> EvalReport:
    aps, hits, keys = [], [], []
    for task in tasks:
        res = evaluate_query(task, scorer)
        aps.append(average_precision(res.ranked, task.identity, ds, n_positives=len(task.positives)))
        hits.append(int(is_true_positive(res.ranked[0], task.identity, ds)))
        keys.append(task.key)
    m = float(np.mean(aps)) if aps else 0.0
    t = float(np.mean(hits)) if hits else 0.0
    return EvalReport(m, t, aps, hits, gallery_size, fingerprint, config_text, keys)


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------


class ModelScorer:
    """Runs the search on a gallery image and scores the final box by cosine similarity.

    Backbone features of each scene and query embeddings are cached; both are
    independent of the other side of the pair.
    """

    def __init__(self, model: Model, ds: Dataset, final: str = "search", seed: int = 0):
        self.model = model
        self.ds = ds
        self.final = final
        self.rng = np.random.default_rng(seed)
        self._fm: dict[int, FeatureMap] = {}
        self._q: dict[tuple, tuple] = {}
        self.traces: dict[tuple, SearchTrace] = {}
        self.keep_traces = False

    def _dtype(self):
        return np.dtype(self.model.cfg.dtype)

    def features(self, sid: int) -> FeatureMap:
        fm = self._fm.get(sid)
        if fm is None:
            cfg = self.model.cfg
            img = Tensor(self.ds.scene(sid).image.astype(self._dtype()))
            fm = self._fm[sid] = extract_features(img, self.model.params, cfg.n_stages)
        return fm

    def query(self, scene_id: int, identity: int):
        key = (scene_id, identity)
        hit = self._q.get(key)
        if hit is None:
            cfg = self.model.cfg
            s = self.ds.scene(scene_id)
            crop = Tensor(s.crop(s.person_of(identity).box).astype(self._dtype()))
            q = query_feature(crop, self.model.params, cfg.n_stages, cfg.K)
            hit = self._q[key] = (q, embed(q, self.model.params).data)
        return hit

    def trace(self, task: QueryTask, sid: int) -> SearchTrace:
        q, _ = self.query(task.query_scene, task.identity)
        return search(self.features(sid), self.ds.scene(sid).proposals, q, self.model.params, self.model.cfg)

    def __call__(self, task: QueryTask, sid: int):
        cfg = self.model.cfg
        _, uq = self.query(task.query_scene, task.identity)
        fm = self.features(sid)
        props = self.ds.scene(sid).proposals
        if self.final == "random":
            box = props[int(self.rng.integers(len(props)))]
        else:
            tr = self.trace(task, sid)
            box = tr.final_proposal
        u = embed(roi_pool(fm, box, cfg.K), self.model.params).data
        sim = cosine_similarity(uq, u)
        if self.final != "random" and self.keep_traces:
            tr.final_similarity = sim
            self.traces[(task.key, sid)] = tr
        return box, sim


class OracleScorer:
    """Ground-truth localisation and identity similarity; isolates the evaluator from the model."""

    def __init__(self, ds: Dataset):
        self.ds = ds

    def __call__(self, task: QueryTask, sid: int):
        s = self.ds.scene(sid)
        p = s.person_of(task.identity)
        if p is not None:
            return p.box, 1.0
        return (s.persons[0].box if s.persons else s.proposals[0]), 0.0


def evaluate(model: Model, ds: Dataset, gallery_size: Optional[int] = 10, task_seed: int = 0,
             final: str = "search", max_queries: Optional[int] = None) -> EvalReport:
    tasks = make_tasks(ds, gallery_size, seed=task_seed, max_queries=max_queries)
    scorer = ModelScorer(model, ds, final=final, seed=task_seed)
    return evaluate_tasks(tasks, scorer, ds, gallery_size, model.fingerprint(), model.cfg.to_text())


def sweep(model: Model, ds: Dataset, gallery_sizes: Sequence[int], task_seed: int = 0,
          max_queries: Optional[int] = None) -> list[EvalReport]:
    """One report per gallery size over the same query set; backbone features are shared."""
    scorer = ModelScorer(model, ds, seed=task_seed)
    fp, ctext = model.fingerprint(), model.cfg.to_text()
    out = []
    for g in gallery_sizes:
        tasks = make_tasks(ds, g, seed=task_seed, max_queries=max_queries)
        out.append(evaluate_tasks(tasks, scorer, ds, g, fp, ctext))
    return out
