import json

import numpy as np
import pytest

from conftest import small_cfg, small_model
from npsm.backbone import extract_features, query_feature
from npsm.geometry import BBox, Region, iou
from npsm.nsn import map_subregion_to_grid
from npsm.search import contains, gt_child, search, shrinkage_labels, unroll
from npsm.tensor import Tensor


def random_scene(rng, size=48, n=None):
    n = int(rng.integers(1, 12)) if n is None else n
    boxes = []
    for _ in range(n):
        w, h = rng.uniform(4, 20), rng.uniform(6, 30)
        x, y = rng.uniform(0, size - w), rng.uniform(0, size - h)
        boxes.append(BBox(x, y, x + w, y + h))
    return rng.uniform(size=(size, size, 3)), boxes


def run_search(model, rng, **kw):
    img, boxes = random_scene(rng, **kw)
    cfg = model.cfg
    fm = extract_features(Tensor(img), model.params, cfg.n_stages)
    q = query_feature(Tensor(rng.uniform(size=(16, 8, 3))), model.params, cfg.n_stages, cfg.K)
    return search(fm, boxes, q, model.params, cfg), boxes


def check_chain(tr, boxes, T_max):
    assert len(tr.steps) <= T_max
    prev = None
    for st in tr.steps:
        if prev is not None:
            assert st.parent == prev
        kids = st.children
        assert sorted(m for k in kids for m in k.members) == list(st.parent.members)
        for k in kids:
            assert st.parent.cover.contains_box(k.cover)
        assert len(st.scores) == len(kids) and 0 <= st.chosen < len(kids)
        assert st.chosen == int(np.argmax(st.scores))
        prev = kids[st.chosen]
    last = prev.members if prev is not None else tuple(range(len(boxes)))
    assert tr.final_index in last
    assert tr.final_proposal == boxes[tr.final_index]


@pytest.mark.parametrize("variant", ["full", "no_context", "no_attention_context"])
def test_containment_chain_random_traces(variant):
    rng = np.random.default_rng(1)
    model = small_model(variant=variant)
    for _ in range(60):
        tr, boxes = run_search(model, rng)
        check_chain(tr, boxes, model.cfg.T_max)
        for st in tr.steps:
            assert (st.attention is None) == (variant == "no_attention_context")


def test_single_proposal_needs_no_step(rng):
    tr, boxes = run_search(small_model(), rng, n=1)
    assert tr.steps == [] and tr.final_index == 0


def test_t_max_one_still_returns_a_member(rng):
    tr, boxes = run_search(small_model(T_max=1), rng, n=10)
    assert len(tr.steps) == 1
    assert tr.final_index in tr.steps[0].children[tr.steps[0].chosen].members


def test_contains_uses_ninety_percent_area():
    G = BBox(0, 0, 10, 10)
    assert contains(Region(BBox(0, 0, 10, 9), (0,)), G)
    assert not contains(Region(BBox(0, 0, 10, 8.9), (0,)), G)


def test_gt_child_and_labels():
    boxes = [BBox(0, 0, 10, 20), BBox(1, 1, 11, 21), BBox(30, 0, 40, 20), BBox(50, 30, 60, 50)]
    parent = Region.of(boxes, range(4))
    kids = [Region.of(boxes, [0, 1]), Region.of(boxes, [2]), Region.of(boxes, [3])]
    G = BBox(0, 0, 10, 20)
    assert gt_child(kids, G) == 0
    lab = shrinkage_labels(parent, kids, G, 6)
    r0, r1, c0, c1 = map_subregion_to_grid(parent, kids[0], 6)
    want = np.zeros((6, 6), int)
    want[r0:r1, c0:c1] = 1
    assert np.array_equal(lab, want)
    assert not shrinkage_labels(parent, kids, BBox(15, 40, 25, 50), 6).any()


def test_gt_child_prefers_highest_iou_then_lowest_index():
    G = BBox(0, 0, 10, 10)
    kids = [Region(BBox(0, 0, 20, 20), (0,)), Region(BBox(0, 0, 11, 11), (1,)), Region(BBox(0, 0, 11, 11), (2,))]
    assert gt_child(kids, G) == 1


def test_teacher_forcing_follows_gt_child(rng):
    model = small_model()
    cfg = model.cfg
    for _ in range(20):
        img, boxes = random_scene(rng, n=9)
        G = boxes[int(rng.integers(len(boxes)))]
        fm = extract_features(Tensor(img), model.params, cfg.n_stages)
        q = query_feature(Tensor(img[:16, :8]), model.params, cfg.n_stages, cfg.K)
        run = unroll(fm, boxes, q, model.params, K=cfg.K, C=cfg.C, T_max=cfg.T_max, G=G, teacher_forcing=True)
        assert len(run.step_losses) == len(run.trace.steps)
        for st in run.trace.steps:
            g = gt_child(st.children, G)
            if g is not None:
                assert st.chosen == g
        if all(gt_child(st.children, G) is not None for st in run.trace.steps):
            assert iou(G, run.trace.final_proposal) == 1.0


def test_trace_serialises_to_one_json_line(rng):
    tr, boxes = run_search(small_model(), rng, n=8)
    line = tr.to_line(query="3:1", scene=5)
    assert "\n" not in line
    rec = json.loads(line)
    assert rec["query"] == "3:1" and len(rec["steps"]) == len(tr.steps)
    assert rec["final_index"] == tr.final_index
    if tr.steps:
        att = np.asarray(rec["steps"][0]["attention"])
        assert att.shape == (3, 3) and abs(att.sum() - 1) < 1e-9


def test_search_is_deterministic(rng):
    model = small_model()
    img, boxes = random_scene(rng, n=10)
    cfg = model.cfg
    fm = extract_features(Tensor(img), model.params, cfg.n_stages)
    q = query_feature(Tensor(img[:20, :10]), model.params, cfg.n_stages, cfg.K)
    a, b = (search(fm, boxes, q, model.params, cfg).to_line() for _ in range(2))
    assert a == b


def test_search_rejects_empty_proposals(rng):
    model = small_model()
    fm = extract_features(Tensor(rng.uniform(size=(16, 16, 3))), model.params, 2)
    q = query_feature(Tensor(rng.uniform(size=(8, 8, 3))), model.params, 2, 3)
    with pytest.raises(ValueError):
        search(fm, [], q, model.params, small_cfg())
