"""Seeded synthetic person-search scenes, their on-disk layout, and query tasks.

A person is a two-tone rectangle: the upper half is colour A with horizontal
stripes of colour B at the identity's stripe period, the lower half is solid
colour B. Distractors are figures with no identity whose colour A is copied
from a real identity.

On disk::

    DIR/manifest.json            generator config, seed, identity appearances
    DIR/{train,test}/NNNN.ppm    binary P6 images
    DIR/{train,test}/annotations.jsonl
                                 one JSON object per scene:
                                 {"scene", "persons": [[id, x1, y1, x2, y2]...],
                                  "proposals": [[x1, y1, x2, y2]...]}

Distractors carry identity -1 in the annotations.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import BBox, iou

FORMAT_VERSION = 1


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class Identity:
    id: int
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    stripe_period: int

    def appearance(self) -> np.ndarray:
        return np.asarray(self.color_a + self.color_b, dtype=np.float64)


def appearance_distance(a: Identity, b: Identity) -> float:
    """Largest per-channel gap over the six colour channels."""
    return float(np.abs(a.appearance() - b.appearance()).max())


@dataclass(frozen=True)
class Person:
    identity: int  # -1 for a distractor
    box: BBox


@dataclass
class Scene:
    scene_id: int
    image: np.ndarray  # H x W x 3 float32, values k/255
    persons: list[Person]
    proposals: list[BBox]
    split: str

    def person_of(self, identity: int) -> Optional[Person]:
        for p in self.persons:
            if p.identity == identity:
                return p
        return None

    def identities(self) -> list[int]:
        return [p.identity for p in self.persons if p.identity >= 0]

    def crop(self, box: BBox) -> np.ndarray:
        x1, y1, x2, y2 = (int(round(v)) for v in box)
        return self.image[y1:y2, x1:x2]


@dataclass
class GenConfig:
    seed: int = 7
    n_scenes: int = 250
    n_identities: int = 10
    image_size: int = 128
    persons_per_scene: tuple = (1, 3)
    distractors_per_scene: tuple = (0, 1)
    distractor_similarity: float = 0.5
    proposals: tuple = (8, 24)
    copies_per_person: int = 2
    jitter: float = 0.1
    color_floor: float = 0.15
    test_fraction: float = 0.25
    person_width: tuple = (18, 30)
    person_height: tuple = (40, 64)

    def __post_init__(self):
        for k in ("persons_per_scene", "distractors_per_scene", "proposals", "person_width", "person_height"):
            setattr(self, k, tuple(int(v) for v in getattr(self, k)))


@dataclass
class Dataset:
    config: GenConfig
    identities: list[Identity]
    scenes: list[Scene]

    def split(self, name: str) -> list[Scene]:
        return [s for s in self.scenes if s.split == name]

    def scene(self, scene_id: int) -> Scene:
        s = self.scenes[scene_id]
        assert s.scene_id == scene_id
        return s


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _sample_identities(rng, n, floor) -> list[Identity]:
    out: list[Identity] = []
    periods = (4, 6, 8)
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 100_000:
            raise InfeasibleConfig(f"cannot place {n} identities {floor} apart in colour space")
        a = tuple(float(v) for v in np.round(rng.uniform(0.05, 0.95, 3), 3))
        b = tuple(float(v) for v in np.round(rng.uniform(0.05, 0.95, 3), 3))
        if np.abs(np.subtract(a, b)).max() < 0.3:
            continue  # the two tones of one figure must be distinguishable
        cand = Identity(len(out), a, b, int(periods[rng.integers(len(periods))]))
        if all(appearance_distance(cand, o) >= floor for o in out):
            out.append(cand)
    return out


def _distractor(rng, identities, similarity, floor) -> Identity:
    for _ in range(10_000):
        src = identities[rng.integers(len(identities))]
        rand = rng.uniform(0.05, 0.95, 3)
        b = tuple(float(v) for v in np.round(similarity * np.asarray(src.color_b) + (1 - similarity) * rand, 3))
        cand = Identity(-1, src.color_a, b, int(rng.choice((4, 6, 8))))
        if all(appearance_distance(cand, o) >= floor for o in identities):
            return cand
    raise InfeasibleConfig("cannot draw a distractor far enough from every identity")


def _assign_identities(rng, n_scenes, n_ids, lo, hi) -> list[list[int]]:
    """Per-scene identity lists; each identity lands in >= 2 scenes of the split."""
    counts = rng.integers(lo, hi + 1, size=n_scenes)
    if n_scenes * hi < 2 * n_ids or n_scenes < 2 or hi > n_ids:
        raise InfeasibleConfig(f"{n_scenes} scenes with {lo}-{hi} persons cannot host {n_ids} identities twice")
    for s in range(n_scenes):  # a short draw is topped up scene by scene
        while counts.sum() < 2 * n_ids and counts[s] < hi:
            counts[s] += 1
    scenes = _place_twice_round_robin(counts, n_ids) or _place_twice_greedy(counts, n_ids)
    for s in range(n_scenes):
        free = [i for i in range(n_ids) if i not in scenes[s]]
        need = int(counts[s]) - len(scenes[s])
        if need > 0:
            scenes[s].extend(int(v) for v in rng.choice(free, size=need, replace=False))
    return scenes


def _place_twice_round_robin(counts, n_ids):
    scenes: list[list[int]] = [[] for _ in counts]
    ptr = 0
    for ident in range(n_ids):
        for _ in range(2):
            for _ in range(len(counts)):
                s = ptr % len(counts)
                ptr += 1
                if len(scenes[s]) < counts[s] and ident not in scenes[s]:
                    scenes[s].append(ident)
                    break
            else:
                return None
    return scenes


def _place_twice_greedy(counts, n_ids):
    """Fallback: each placement goes to the scene with the most spare slots (lowest index on ties)."""
    scenes: list[list[int]] = [[] for _ in counts]
    for ident in range(n_ids):
        for _ in range(2):
            spare = [(int(counts[s]) - len(scenes[s]), -s) for s in range(len(counts)) if ident not in scenes[s]]
            best = max(spare, default=(0, 0))
            if best[0] <= 0:
                raise InfeasibleConfig("identity assignment ran out of scene capacity")
            scenes[-best[1]].append(ident)
    return scenes


def _place_boxes(rng, n, size, wr, hr) -> list[BBox]:
    boxes: list[BBox] = []
    for _ in range(n):
        for _ in range(500):
            w = int(rng.integers(wr[0], wr[1] + 1))
            h = int(rng.integers(hr[0], hr[1] + 1))
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            b = BBox(float(x1), float(y1), float(x1 + w), float(y1 + h))
            grown = BBox(b.x1 - 2, b.y1 - 2, b.x2 + 2, b.y2 + 2)
            if all(iou(grown, o) == 0.0 for o in boxes):
                boxes.append(b)
                break
        else:
            raise InfeasibleConfig(f"could not place {n} non-overlapping figures in a {size}px image")
    return boxes


def _background(rng, size) -> np.ndarray:
    base = rng.uniform(0.25, 0.6)
    tint = rng.uniform(-0.05, 0.05, 3)
    gy, gx = rng.uniform(-0.1, 0.1, 2)
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = base + tint + (gy * yy + gx * xx)[..., None]
    return img + rng.normal(0.0, 0.02, (size, size, 3))


def _draw_figure(img, box: BBox, ident: Identity):
    x1, y1, x2, y2 = (int(v) for v in box)
    h = y2 - y1
    top = y1 + h // 2
    a, b = np.asarray(ident.color_a), np.asarray(ident.color_b)
    img[y1:y2, x1:x2] = b
    rows = np.arange(y1, top)
    on = ((rows - y1) % ident.stripe_period) < ident.stripe_period // 2
    img[rows[on], x1:x2] = a


def _jitter(rng, box: BBox, amount, size) -> BBox:
    w, h = box.width, box.height
    d = rng.uniform(-amount, amount, 4) * np.array([w, h, w, h])
    j = BBox(box.x1 + d[0], box.y1 + d[1], box.x2 + d[2], box.y2 + d[3]).clamp(size, size)
    return BBox(*(float(np.round(v, 1)) for v in j))


def _noise_range(person_range, lo_frac, hi_frac, size):
    """Half-open integer range for noise-box sides, scaled from the figure size range."""
    lo = max(1, int(person_range[0] * lo_frac))
    hi = min(size, int(person_range[1] * hi_frac))
    return lo, max(lo, hi) + 1


def _proposals(rng, cfg: GenConfig, figures: Sequence[BBox]) -> list[BBox]:
    size = cfg.image_size
    props: list[BBox] = []
    for box in figures:
        for c in range(cfg.copies_per_person):
            for _ in range(1000):
                p = _jitter(rng, box, cfg.jitter, size)
                if p.is_valid() and (c > 0 or iou(p, box) >= 0.7):
                    break
            else:  # pragma: no cover - jitter <= 0.1 always admits an IoU >= 0.7 draw
                p = box
            props.append(p)
    n_total = int(rng.integers(cfg.proposals[0], cfg.proposals[1] + 1))
    while len(props) < n_total:
        w = float(rng.integers(*_noise_range(cfg.person_width, 2 / 3, 4 / 3, size)))
        h = float(rng.integers(*_noise_range(cfg.person_height, 0.6, 9 / 8, size)))
        x1 = float(rng.integers(0, size - int(w) + 1))
        y1 = float(rng.integers(0, size - int(h) + 1))
        props.append(BBox(x1, y1, x1 + w, y1 + h))
    order = rng.permutation(len(props))
    return [props[i] for i in order]


def generate(seed: int = 7, n_scenes: int = 250, n_identities: int = 10,
             persons_per_scene_range=(1, 3), distractor_similarity: float = 0.5, **kw) -> Dataset:
    """Build a dataset; a pure function of its arguments."""
    cfg = GenConfig(seed=seed, n_scenes=n_scenes, n_identities=n_identities,
                    persons_per_scene=tuple(persons_per_scene_range),
                    distractor_similarity=distractor_similarity, **kw)
    return generate_from_config(cfg)


def generate_from_config(cfg: GenConfig) -> Dataset:
    if cfg.n_identities < 2:
        raise InfeasibleConfig("need at least two identities")
    lo, hi = cfg.persons_per_scene
    dlo, dhi = cfg.distractors_per_scene
    if not (1 <= lo <= hi and 0 <= dlo <= dhi and cfg.proposals[0] >= 1 and cfg.proposals[0] <= cfg.proposals[1]):
        raise InfeasibleConfig(f"invalid ranges in {cfg}")
    max_fig_area = cfg.person_width[1] * cfg.person_height[1] * (hi + dhi)
    if max_fig_area > 0.5 * cfg.image_size ** 2:
        raise InfeasibleConfig(f"{hi + dhi} figures cannot fit a {cfg.image_size}px image without heavy overlap")
    if cfg.copies_per_person * (hi + dhi) > cfg.proposals[1]:
        raise InfeasibleConfig("proposal budget smaller than the jittered copies it must hold")

    rng = np.random.default_rng(cfg.seed)
    identities = _sample_identities(rng, cfg.n_identities, cfg.color_floor)
    n_test = int(cfg.n_scenes * cfg.test_fraction)
    n_train = cfg.n_scenes - n_test
    if n_train < 2 or n_test < 2:
        raise InfeasibleConfig("each split needs at least two scenes")
    ids_per_scene = (_assign_identities(rng, n_train, cfg.n_identities, lo, hi)
                     + _assign_identities(rng, n_test, cfg.n_identities, lo, hi))

    scenes = []
    size = cfg.image_size
    for sid in range(cfg.n_scenes):
        ids = ids_per_scene[sid]
        n_dis = int(rng.integers(dlo, dhi + 1))
        boxes = _place_boxes(rng, len(ids) + n_dis, size, cfg.person_width, cfg.person_height)
        img = _background(rng, size)
        persons = []
        for k, box in enumerate(boxes):
            if k < len(ids):
                ident = identities[ids[k]]
                persons.append(Person(ident.id, box))
            else:
                ident = _distractor(rng, identities, cfg.distractor_similarity, cfg.color_floor)
                persons.append(Person(-1, box))
            _draw_figure(img, box, ident)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        proposals = _proposals(rng, cfg, boxes)
        scenes.append(Scene(sid, (img / np.float32(255.0)).astype(np.float32), persons, proposals,
                            "train" if sid < n_train else "test"))
    return Dataset(cfg, identities, scenes)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image as float32 in [0, 1]."""
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    arr = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return (arr / np.float32(255.0)).astype(np.float32)


def write_pgm(path, values: np.ndarray):
    arr = np.asarray(values, dtype=np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes())


def save_dataset(ds: Dataset, out_dir):
    out = Path(out_dir)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": asdict(ds.config),
        "identities": [asdict(i) for i in ds.identities],
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    for split in ("train", "test"):
        d = out / split
        d.mkdir(exist_ok=True)
        lines = []
        for s in ds.split(split):
            write_ppm(d / f"{s.scene_id:04d}.ppm", s.image)
            lines.append(json.dumps({
                "scene": s.scene_id,
                "persons": [[p.identity, *p.box] for p in s.persons],
                "proposals": [list(b) for b in s.proposals],
            }, separators=(",", ":")))
        (d / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found (not a dataset directory)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"dataset format version {manifest.get('format_version')} unsupported")
    cfg = GenConfig(**manifest["config"])
    identities = [Identity(i["id"], tuple(i["color_a"]), tuple(i["color_b"]), i["stripe_period"])
                  for i in manifest["identities"]]
    scenes = []
    for split in ("train", "test"):
        d = root / split
        for line in (d / "annotations.jsonl").read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            sid = rec["scene"]
            persons = [Person(int(p[0]), BBox(*map(float, p[1:]))) for p in rec["persons"]]
            props = [BBox(*map(float, b)) for b in rec["proposals"]]
            scenes.append(Scene(sid, read_ppm(d / f"{sid:04d}.ppm"), persons, props, split))
    scenes.sort(key=lambda s: s.scene_id)
    return Dataset(cfg, identities, scenes)


# ---------------------------------------------------------------------------
# query tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryTask:
    query_scene: int
    identity: int
    gallery: tuple[int, ...]
    positives: tuple[int, ...]  # gallery scenes containing the identity

    @property
    def key(self) -> str:
        return f"{self.query_scene}:{self.identity}"


def query_occurrences(ds: Dataset) -> list[tuple[int, int]]:
    """Every (test scene, identity) pair, in scene order."""
    return [(s.scene_id, ident) for s in ds.split("test") for ident in s.identities()]


def make_tasks(ds: Dataset, gallery_size: Optional[int] = None, seed: int = 0,
               max_queries: Optional[int] = None) -> list[QueryTask]:
    """One task per test identity occurrence; ``gallery_size=None`` means every other test scene."""
    test = [s.scene_id for s in ds.split("test")]
    if gallery_size is not None and gallery_size > len(test) - 1:
        raise ValueError(f"gallery size {gallery_size} exceeds the {len(test) - 1} scenes available per query")
    by_id: dict[int, set] = {}
    for s in ds.split("test"):
        for ident in s.identities():
            by_id.setdefault(ident, set()).add(s.scene_id)
    tasks = []
    occ = query_occurrences(ds)
    if max_queries is not None:
        occ = occ[:max_queries]
    for qi, (qs, ident) in enumerate(occ):
        pool = [sid for sid in test if sid != qs]
        pos_all = sorted(by_id[ident] - {qs})
        if not pos_all:
            raise ValueError(f"identity {ident} has no positive gallery scene besides {qs}")
        if gallery_size is None:
            gallery = pool
        else:
            rng = np.random.default_rng([seed, qi, gallery_size])
            gallery = [pool[i] for i in rng.choice(len(pool), size=gallery_size, replace=False)]
            if not any(g in by_id[ident] for g in gallery):
                gallery[int(rng.integers(gallery_size))] = pos_all[int(rng.integers(len(pos_all)))]
            gallery.sort()
        positives = tuple(g for g in gallery if g in by_id[ident])
        tasks.append(QueryTask(qs, ident, tuple(gallery), positives))
    return tasks
