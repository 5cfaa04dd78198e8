import json
import subprocess
import sys

import numpy as np
import pytest

from npsm.cli import heatmap_image, main
from npsm.model import Model

SMALL = "K = 3\nD = 4\nT_max = 3\nn_stages = 2\nepochs = 1\nmlp_hidden = 4\n"


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--seed", "5", "--scenes", "24", "--identities", "3", "--out", str(d / "data")]) == 0
    (d / "small.cfg").write_text(SMALL)
    assert main(["train", "--data", str(d / "data"), "--config", str(d / "small.cfg"),
                 "--out", str(d / "m.npsm")]) == 0
    return d


def test_gen_is_byte_identical(workspace, tmp_path):
    assert main(["gen", "--seed", "5", "--scenes", "24", "--identities", "3", "--out", str(tmp_path / "again")]) == 0
    assert tree_bytes(workspace / "data") == tree_bytes(tmp_path / "again")
    manifest = json.loads((tmp_path / "again" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 5


def test_train_writes_model_and_log(workspace):
    m = Model.load(workspace / "m.npsm")
    assert m.cfg.K == 3 and m.cfg.epochs == 1
    log = (workspace / "m.log").read_text().splitlines()
    assert len(log) == 1 and log[0].startswith("epoch=1 ")


def test_train_is_deterministic_under_seed(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data"), "--config", str(workspace / "small.cfg"), "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a.npsm")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.npsm")]) == 0
    assert (tmp_path / "a.npsm").read_bytes() == (tmp_path / "b.npsm").read_bytes()


def first_query(workspace):
    ann = (workspace / "data" / "test" / "annotations.jsonl").read_text().splitlines()
    rec = json.loads(ann[0])
    ident = next(p[0] for p in rec["persons"] if p[0] >= 0)
    return rec["scene"], ident


def test_search_then_inspect(workspace, tmp_path, capsys):
    sid, ident = first_query(workspace)
    trace = tmp_path / "t.jsonl"
    assert main(["search", "--model", str(workspace / "m.npsm"), "--query", f"{sid}:{ident}",
                 "--gallery", str(workspace / "data"), "--trace-out", str(trace)]) == 0
    lines = trace.read_text().splitlines()
    assert len(lines) == 5  # every other test scene
    rec = json.loads(lines[0])
    assert rec["query"] == f"{sid}:{ident}" and "final_similarity" in rec
    T = len(rec["steps"])
    out = tmp_path / "heat"
    assert main(["inspect", "--trace", str(trace), "--line", "0", "--emit-heatmaps", str(out)]) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == T
    for t, p in enumerate(sorted(pgms, key=lambda q: int(q.stem.split("step")[1]))):
        x1, y1, x2, y2 = rec["steps"][t]["parent"]
        blob = p.read_bytes()
        assert blob.startswith(f"P5\n{round(x2 - x1)} {round(y2 - y1)}\n255\n".encode())
        pix = np.frombuffer(blob.split(b"\n", 3)[3], dtype=np.uint8)
        assert pix.max() == 255


def test_heatmap_quantisation_and_upscale():
    att = np.array([[0.1, 0.2], [0.3, 0.4]])
    img = heatmap_image(att, 4, 2)
    assert img.shape == (2, 4)
    assert img[0].tolist() == [64, 64, 128, 128] and img[1].tolist() == [191, 191, 255, 255]


def test_eval_writes_reports(workspace, tmp_path):
    rep = tmp_path / "r.txt"
    assert main(["eval", "--model", str(workspace / "m.npsm"), "--data", str(workspace / "data"),
                 "--gallery-size", "2,4", "--report", str(rep)]) == 0
    for g in (2, 4):
        text = (tmp_path / f"r_g{g}.txt").read_text()
        assert text.startswith(f"gallery_size: {g}\n")
        assert f"fingerprint: {Model.load(workspace / 'm.npsm').fingerprint()}" in text
        assert "config.K: 3" in text


def test_ablate_runs_variant(workspace, tmp_path):
    assert main(["ablate", "--variant", "no_attention_context", "--data", str(workspace / "data"),
                 "--config", str(workspace / "small.cfg"), "--out-dir", str(tmp_path),
                 "--gallery-size", "3"]) == 0
    assert Model.load(tmp_path / "no_attention_context.npsm").cfg.variant == "no_attention_context"
    assert (tmp_path / "no_attention_context_report.txt").read_text().startswith("gallery_size: 3")


@pytest.mark.parametrize("argv", [
    ["eval", "--model", "/nonexistent.npsm", "--data", "/nonexistent"],
    ["train", "--data", "/nonexistent", "--out", "/tmp/x.npsm"],
    ["inspect", "--trace", "/nonexistent.jsonl", "--emit-heatmaps", "/tmp/h"],
])
def test_failures_exit_nonzero_with_one_line(argv, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("npsm: error: ") and err.count("\n") == 1


def test_bad_config_and_query_fail_cleanly(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("K = 3\nbogus = 1\n")
    assert main(["train", "--data", str(workspace / "data"), "--config", str(bad),
                 "--out", str(tmp_path / "m.npsm")]) == 1
    assert "unknown key 'bogus'" in capsys.readouterr().err
    assert main(["search", "--model", str(workspace / "m.npsm"), "--query", "nope",
                 "--gallery", str(workspace / "data"), "--trace-out", str(tmp_path / "t")]) == 1
    wrong = tmp_path / "v.npsm"
    blob = bytearray((workspace / "m.npsm").read_bytes())
    blob[4] = 9
    wrong.write_bytes(bytes(blob))
    assert main(["eval", "--model", str(wrong), "--data", str(workspace / "data")]) == 1
    assert "version" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "npsm", "eval", "--model", str(tmp_path / "no"),
                          "--data", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 1 and res.stderr.startswith("npsm: error:")
    res = subprocess.run([sys.executable, "-m", "npsm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "inspect" in res.stdout
