"""Command-line entry point: ``npsm {gen,train,search,eval,ablate,inspect}``.

Every command exits 0 on success. Failures print one ``npsm: error: ...``
line on stderr and exit 1 (argument errors exit 2, as argparse does).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, VARIANTS
from .data import (InfeasibleConfig, QueryTask, generate, load_dataset, make_tasks, save_dataset,
                   write_pgm)
from .evaluation import ModelScorer, evaluate_tasks
from .model import Model, ModelFileError
from .training import train


class CLIError(Exception):
    pass


def _set_workers(n: int | None):
    """Cap every thread pool we may touch."""
    if n is None:
        return
    if n < 1:
        raise CLIError(f"--workers must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass


def _load_config(path, seed) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _parse_sizes(text: str) -> list[int]:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CLIError(f"bad --gallery-size {text!r}; expected N or N,N,...") from None
    if not sizes or min(sizes) < 1:
        raise CLIError(f"bad --gallery-size {text!r}")
    return sizes


def _report_paths(path: Path, sizes: list[int]) -> list[Path]:
    if len(sizes) == 1:
        return [path]
    return [path.with_name(f"{path.stem}_g{g}{path.suffix}") for g in sizes]


def _evaluate_and_write(model: Model, ds, sizes, task_seed, report: Path | None, max_queries=None):
    scorer = ModelScorer(model, ds, seed=task_seed)
    fp, ctext = model.fingerprint(), model.cfg.to_text()
    reports = []
    for g in sizes:
        tasks = make_tasks(ds, g, seed=task_seed, max_queries=max_queries)
        reports.append(evaluate_tasks(tasks, scorer, ds, g, fp, ctext))
    if report is not None:
        report.parent.mkdir(parents=True, exist_ok=True)
        for path, rep in zip(_report_paths(report, sizes), reports):
            path.write_text(rep.to_text())
    for rep in reports:
        print(f"gallery_size={rep.gallery_size} mAP={rep.mAP:.4f} top1={rep.top1:.4f} queries={len(rep.aps)}")
    return reports


# -- commands ---------------------------------------------------------------


def cmd_gen(args):
    ds = generate(seed=7 if args.seed is None else args.seed, n_scenes=args.scenes, n_identities=args.identities)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.scenes)} scenes ({len(ds.split('train'))} train, {len(ds.split('test'))} test) to {args.out}")


def _train_model(cfg: RunConfig, ds, log_path: Path | None) -> Model:
    n_id = len(ds.identities)
    model = Model.init(cfg, n_id)
    fh = open(log_path, "w") if log_path else None
    try:
        def emit(line):
            print(line, flush=True)
            if fh:
                fh.write(line + "\n")
                fh.flush()

        train(model, ds, log=emit)
    finally:
        if fh:
            fh.close()
    return model


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    ds = load_dataset(args.data)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    model = _train_model(cfg, ds, log_path)
    model.save(out)
    print(f"model {out} fingerprint {model.fingerprint()}")


def _parse_query(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise CLIError(f"bad --query {text!r}; expected SCENE:PERSON (scene id and identity id)") from None


def cmd_search(args):
    model = Model.load(args.model)
    ds = load_dataset(args.gallery)
    qs, ident = _parse_query(args.query)
    if not 0 <= qs < len(ds.scenes) or ds.scene(qs).person_of(ident) is None:
        raise CLIError(f"scene {qs} has no person with identity {ident}")
    if args.scenes:
        targets = [int(s) for s in args.scenes.split(",")]
    else:
        targets = [s.scene_id for s in ds.split("test") if s.scene_id != qs]
    for sid in targets:
        if not 0 <= sid < len(ds.scenes):
            raise CLIError(f"no gallery scene {sid}")
    task = QueryTask(qs, ident, tuple(targets), ())
    scorer = ModelScorer(model, ds)
    scorer.keep_traces = True
    out = Path(args.trace_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    with open(out, "w") as fh:
        for sid in targets:
            box, sim = scorer(task, sid)
            tr = scorer.traces[(task.key, sid)]
            fh.write(tr.to_line(query=task.key, scene=sid, K=model.cfg.K) + "\n")
            rows.append((sim, sid, box))
    rows.sort(key=lambda r: (-r[0], r[1]))
    for sim, sid, box in rows[:5]:
        print(f"scene={sid} similarity={sim:.4f} box={tuple(round(v, 1) for v in box)}")
    print(f"wrote {len(targets)} traces to {out}")


def cmd_eval(args):
    model = Model.load(args.model)
    ds = load_dataset(args.data)
    sizes = _parse_sizes(args.gallery_size) if args.gallery_size else list(model.cfg.gallery_sizes)
    seed = model.cfg.task_seed if args.seed is None else args.seed
    _evaluate_and_write(model, ds, sizes, seed, Path(args.report) if args.report else None, args.max_queries)


def cmd_ablate(args):
    cfg = _load_config(args.config, args.seed).replace(variant=args.variant)
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    ds = load_dataset(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = _train_model(cfg, ds, out_dir / f"{args.variant}.log")
    model.save(out_dir / f"{args.variant}.npsm")
    sizes = _parse_sizes(args.gallery_size) if args.gallery_size else list(cfg.gallery_sizes)
    _evaluate_and_write(model, ds, sizes, cfg.task_seed, out_dir / f"{args.variant}_report.txt", args.max_queries)


def heatmap_image(att: np.ndarray, width: int, height: int) -> np.ndarray:
    """Quantise ``round(255 * l / max l)`` and upscale the K x K map (nearest cell) to width x height."""
    att = np.asarray(att, dtype=np.float64)
    top = att.max()
    q = np.round(255.0 * att / top) if top > 0 else np.zeros_like(att)
    K1, K2 = att.shape
    rows = np.minimum((np.arange(height) * K1) // max(height, 1), K1 - 1)
    cols = np.minimum((np.arange(width) * K2) // max(width, 1), K2 - 1)
    return q.astype(np.uint8)[rows][:, cols]


def cmd_inspect(args):
    path = Path(args.trace)
    if not path.exists():
        raise CLIError(f"trace file {path} not found")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if args.line is not None:
        if not 0 <= args.line < len(lines):
            raise CLIError(f"--line {args.line} out of range (trace has {len(lines)} lines)")
        lines = [lines[args.line]]
    out = Path(args.emit_heatmaps)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for li, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CLIError(f"{path}: line {li + 1} is not JSON ({exc.msg})") from None
        tag = rec.get("scene", li)
        for t, step in enumerate(rec["steps"]):
            if step["attention"] is None:
                raise CLIError("trace has no attention maps (attention-free variant)")
            x1, y1, x2, y2 = step["parent"]
            w, h = max(1, int(round(x2 - x1))), max(1, int(round(y2 - y1)))
            write_pgm(out / f"scene{tag}_step{t}.pgm", heatmap_image(step["attention"], w, h))
            n += 1
    print(f"wrote {n} heatmaps to {out}")


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed overriding the config (all randomness)")
    common.add_argument("--workers", type=int, default=None, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="npsm", description="Neural person search on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, default=250)
    g.add_argument("--identities", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--out", required=True, help="model file to write")
    t.add_argument("--log", help="training log (default: model path with .log)")
    t.add_argument("--epochs", type=int, help="override the config's epoch count")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", parents=[common], help="search gallery scenes for one query")
    s.add_argument("--model", required=True)
    s.add_argument("--query", required=True, help="SCENE:PERSON, scene id and identity id")
    s.add_argument("--gallery", required=True, help="dataset directory")
    s.add_argument("--scenes", help="comma-separated gallery scene ids (default: every other test scene)")
    s.add_argument("--trace-out", required=True)
    s.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", parents=[common], help="mAP / top-1 over generated query tasks")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--gallery-size", help="N or N,N,... (default: from the model's config)")
    e.add_argument("--report", help="report file; several sizes get a _gN suffix")
    e.add_argument("--max-queries", type=int)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate one ablation variant")
    a.add_argument("--variant", required=True, choices=VARIANTS)
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out-dir", required=True)
    a.add_argument("--epochs", type=int)
    a.add_argument("--gallery-size")
    a.add_argument("--max-queries", type=int)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", parents=[common], help="export attention heatmaps from a trace")
    i.add_argument("--trace", required=True)
    i.add_argument("--emit-heatmaps", required=True, metavar="DIR")
    i.add_argument("--line", type=int, help="only this trace line (0-based)")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_workers(args.workers)
        args.func(args)
    except (CLIError, ConfigError, ModelFileError, InfeasibleConfig, FileNotFoundError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"npsm: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
