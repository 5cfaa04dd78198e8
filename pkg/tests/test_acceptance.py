"""Acceptance criteria, one test each. Every test records a pass/fail line
(printed in the terminal summary) before asserting."""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, small_model
from npsm.config import RunConfig
from npsm.data import generate, make_tasks
from npsm.evaluation import OracleScorer, RankedEntry, average_precision, evaluate, evaluate_tasks, sweep
from npsm.geometry import BBox, centers_of, cluster_proposals, iou
from npsm.model import Model
from npsm.nsn import NSNState, attention, nsn_param_shapes, nsn_step, subregion_score
from npsm.tensor import Tensor, grad_check, grad_check_report
from npsm.training import episode_inputs, episode_loss, plan_epoch, train, train_episode
from test_geometry import brute_force_partition, same_partition
from test_nsn import attention_oracle, nsn_oracle, random_params
from test_search import check_chain, run_search
from test_tensor_ops import OP_CASES

VARIANTS = ("full", "no_context", "no_attention_context")
ABLATION_SEEDS = (7, 8, 9)


def record(n, ok, detail):
    ACCEPTANCE_LINES.append((n, "PASS" if ok else "FAIL", detail))


# -- shared default-benchmark runs -------------------------------------------


@pytest.fixture(scope="module")
def default_ds():
    return generate(seed=7)


_trained: dict = {}


def trained(ds, variant="full", seed=7):
    """Default-config model for (variant, seed), trained once per session."""
    key = (variant, seed)
    if key not in _trained:
        cfg = RunConfig(variant=variant, seed=seed)
        model = Model.init(cfg, len(ds.identities))
        untrained = evaluate(model, ds, 10)
        t0 = time.perf_counter()
        hist = train(model, ds)
        _trained[key] = dict(model=model, history=hist, untrained=untrained, train_s=time.perf_counter() - t0)
    return _trained[key]


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_gradient_integrity(tiny_ds):
    t0 = time.perf_counter()
    op_worst = 0.0
    for name, case in OP_CASES.items():
        for seed in range(10):
            f, shape = case(seed)
            x = Tensor(np.random.default_rng(seed).standard_normal(shape))
            op_worst = max(op_worst, grad_check(f, x, eps=1e-5))
    ep_worst, n_kinks = 0.0, 0
    for seed in range(10):
        model = small_model(seed=seed)
        for ep in plan_epoch(tiny_ds, seed, 0):
            img, props, G, crop = episode_inputs(tiny_ds, ep)
            if len(episode_loss(model, img, props, G, ep.identity, crop)[2].trace.steps) == 3:
                break
        else:
            pytest.fail(f"seed {seed}: no 3-step episode")
        for name in sorted(model.params):
            def f(t, name=name):
                saved = model.params[name]
                model.params[name] = t
                try:
                    return episode_loss(model, img, props, G, ep.identity, crop)[0]
                finally:
                    model.params[name] = saved

            err, k = grad_check_report(f, model.params[name], eps=1e-5, max_coords=24, seed=seed, kinks=True)
            ep_worst, n_kinks = max(ep_worst, err), n_kinks + k
    wall = time.perf_counter() - t0
    ok = op_worst < 1e-4 and ep_worst < 1e-4 and wall < 120
    record(1, ok, f"ops max rel err {op_worst:.1e} ({len(OP_CASES)} ops x 10 seeds); 3-step episode "
                  f"{ep_worst:.1e} (10 seeds, {n_kinks} kinked entries); {wall:.0f}s")
    assert ok


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_nsn_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(20):
        rng = np.random.default_rng(100 + case)
        K, D = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        params = random_params(rng, D)
        x, q, h, c = (rng.standard_normal((K, K, D)) for _ in range(4))
        st = nsn_step(Tensor(x), Tensor(q), NSNState(Tensor(h), Tensor(c)), params)
        P = {k: v.data for k, v in params.items()}
        h2, c2 = nsn_oracle(x, q, h, c, P)
        att = attention(Tensor(q), st.h, params).l.data
        worst = max(worst, np.abs(st.h.data - h2).max(), np.abs(st.c.data - c2).max(),
                    np.abs(att - attention_oracle(q, h2, P)).max())
    wall = time.perf_counter() - t0
    ok = worst < 1e-10 and wall < 10
    record(2, ok, f"max abs diff {worst:.1e} over 20 instances; {wall:.1f}s")
    assert ok


# -- 3 -----------------------------------------------------------------------


def test_criterion_3_attention_contracts(tiny_ds):
    t0 = time.perf_counter()
    model = small_model(seed=1, K=4)
    rng = np.random.default_rng(0)
    probes = [tuple(Tensor(rng.standard_normal((4, 4, 2))) for _ in range(2)) for _ in range(5)]
    worst = 0.0
    updates = 0
    for ep in plan_epoch(tiny_ds, 0, 0)[:25]:
        img, props, G, crop = episode_inputs(tiny_ds, ep)
        train_episode(tiny_ds.scene(ep.scene_id), ep.identity, crop, model)
        updates += 1
        for q, h in probes:
            worst = max(worst, abs(attention(q, h, model.params).l.data.sum() - 1.0))
    K = 4
    zero = {k: Tensor(np.zeros(s)) for k, s in nsn_param_shapes(2).items()}
    l = attention(Tensor(np.ones((K, K, 2))), Tensor(np.ones((K, K, 2))), zero).l.data
    rects = [(r0, r1, c0, c1) for r0 in range(K) for r1 in range(r0 + 1, K + 1)
             for c0 in range(K) for c1 in range(c0 + 1, K + 1)]
    uni = max(abs(subregion_score(l, r) - 1 / K**2) for r in rects)
    wall = time.perf_counter() - t0
    ok = worst < 1e-9 and uni < 1e-15 and wall < 10
    record(3, ok, f"|sum-1| max {worst:.1e} over {updates} updates; uniform S dev {uni:.1e} "
                  f"over {len(rects)} subregions; {wall:.1f}s")
    assert ok


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_geometry_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    models = [small_model(seed=s, variant=v) for s, v in enumerate(VARIANTS)]
    chains = 0
    for n in range(1000):
        model = models[n % 3]
        tr, boxes = run_search(model, rng)
        check_chain(tr, boxes, model.cfg.T_max)
        chains += 1
    exact = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        bs = []
        for ax, ay in [(10, 10), (80, 15), (40, 90)]:
            for _ in range(int(r.integers(2, 4))):
                cx, cy = ax + r.uniform(-5, 5), ay + r.uniform(-5, 5)
                bs.append(BBox(cx - 4, cy - 8, cx + 4, cy + 8))
        a = np.asarray(cluster_proposals(bs, 3, seed=seed).labels)
        b = np.asarray(cluster_proposals(bs, 3, seed=seed).labels)
        exact += int(np.array_equal(a, b) and same_partition(a, brute_force_partition(centers_of(bs), 3)))
    ious = (iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)), iou(BBox(0, 0, 1, 1), BBox(2, 2, 3, 3)),
            iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)))
    wall = time.perf_counter() - t0
    ok = chains == 1000 and exact == 20 and ious == (1.0, 0.0, 1 / 7) and wall < 60
    record(4, ok, f"{chains} chains hold; clustering {exact}/20 deterministic and brute-force exact; "
                  f"IoU cases {ious[0]}, {ious[1]}, {ious[2]:.6f}; {wall:.1f}s")
    assert ok


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_evaluator(default_ds, tiny_ds):
    t0 = time.perf_counter()
    maps = []
    for ds, sizes in ((default_ds, (None, 10, 25, 50)), (tiny_ds, (None, 3)),
                      (generate(seed=11, n_scenes=60, n_identities=5), (None, 5, 10))):
        for size in sizes:
            maps.append(evaluate_tasks(make_tasks(ds, size), OracleScorer(ds), ds, size).mAP)
    test = tiny_ds.split("test")
    pos = next(s for s in test if s.identities())
    ident = pos.identities()[0]
    neg = next(s for s in test if ident not in s.identities())
    ap = average_precision([RankedEntry(neg.scene_id, neg.proposals[0], 0.9),
                            RankedEntry(pos.scene_id, pos.person_of(ident).box, 0.4)], ident, tiny_ds,
                           n_positives=1)
    wall = time.perf_counter() - t0
    ok = all(m == 1.0 for m in maps) and ap == 0.5 and wall < 30
    record(5, ok, f"oracle mAP {min(maps)}..{max(maps)} on {len(maps)} benchmarks; 2-image AP {ap}; {wall:.1f}s")
    assert ok


# -- 6 -----------------------------------------------------------------------


def test_criterion_6_end_to_end(default_ds):
    t0 = time.perf_counter()
    run = trained(default_ds)
    model = run["model"]
    rep = evaluate(model, default_ds, 10)
    rand = evaluate(model, default_ds, 10, final="random")
    wall = time.perf_counter() - t0
    unt = run["untrained"]
    ok = rep.top1 >= 0.80 and rep.mAP >= 0.70 and unt.top1 <= 0.25 and rand.top1 <= 0.15 and wall < 900
    record(6, ok, f"trained top1 {rep.top1:.3f} mAP {rep.mAP:.3f}; untrained top1 {unt.top1:.3f}; "
                  f"random-final top1 {rand.top1:.3f}; train {run['train_s']:.0f}s, total {wall:.0f}s")
    rng = np.random.default_rng(0)

    def chance(task, sid):
        props = default_ds.scene(sid).proposals
        return props[int(rng.integers(len(props)))], float(rng.uniform())

    ch = evaluate_tasks(make_tasks(default_ds, 10), chance, default_ds, 10)
    ACCEPTANCE_LINES.append((6, "INFO", f"random box with random score: top1 {ch.top1:.3f} mAP {ch.mAP:.3f}"))
    assert ok


def test_training_loss_halves(default_ds):
    hist = trained(default_ds)["history"]
    assert hist[-1]["total"] < 0.5 * hist[0]["total"]


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_ablation_ordering(default_ds):
    t0 = time.perf_counter()
    maps = {v: [] for v in VARIANTS}
    for seed in ABLATION_SEEDS:
        for v in VARIANTS:
            maps[v].append(evaluate(trained(default_ds, v, seed)["model"], default_ds, 10).mAP)
    med = {v: float(np.median(m)) for v, m in maps.items()}
    wall = time.perf_counter() - t0
    ok = med["full"] > med["no_context"] > med["no_attention_context"] and wall < 2700
    record(7, ok, "median mAP " + ", ".join(f"{v} {med[v]:.3f}" for v in VARIANTS)
           + f" (seeds {ABLATION_SEEDS}); {wall:.0f}s")
    assert ok


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_gallery_monotone(default_ds):
    model = trained(default_ds)["model"]
    t0 = time.perf_counter()
    reps = sweep(model, default_ds, [10, 25, 50])
    m = [r.mAP for r in reps]
    wall = time.perf_counter() - t0
    ok = m[0] >= m[1] >= m[2] and wall < 600
    record(8, ok, f"mAP gallery 10 {m[0]:.3f}, 25 {m[1]:.3f}, 50 {m[2]:.3f}; eval {wall:.0f}s")
    assert ok


# -- 9 -----------------------------------------------------------------------


def test_criterion_9_determinism(tiny_ds, tmp_path):
    t0 = time.perf_counter()
    blobs = []
    for _ in range(2):
        m = small_model(seed=4, epochs=2, dtype="float32")
        train(m, tiny_ds)
        m.save(tmp_path / f"m{len(blobs)}.npsm")
        blobs.append((tmp_path / f"m{len(blobs)}.npsm").read_bytes())
    loaded = Model.load(tmp_path / "m0.npsm")
    exact = all(np.array_equal(loaded.params[k].data, m.params[k].data) and
                loaded.params[k].data.dtype == m.params[k].data.dtype for k in m.params)
    same_again = loaded.to_bytes() == blobs[0]
    wall = time.perf_counter() - t0
    ok = blobs[0] == blobs[1] and exact and same_again and wall < 60
    record(9, ok, f"two trainings byte-identical: {blobs[0] == blobs[1]}; round trip bit-exact: "
                  f"{exact and same_again}; {wall:.1f}s")
    assert ok
