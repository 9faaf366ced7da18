import json

import numpy as np
import pytest

from occflow import io
from occflow.cli import main


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"seed": 0, "fit": {"total_iters": 4, "warmup_iters": 1, "camera_tiles": 2,
                                                  "lidar_rays": 64}}))
    ws = root / "ws"
    assert main(["synth", "--config", str(cfg), "--out", str(ws)]) == 0
    return root, cfg, ws


def test_synth_writes_loadable_workspace(run):
    _, _, ws = run
    w = io.load_workspace(ws)
    assert w.frames.num_frames == 5 and len(w.frames.cameras) == 3
    assert w.reference is not None and w.reference.sdf.spec.dims == (64, 64, 32)
    assert (ws / "config.json").is_file()


def test_fit_then_eval_and_render(run, capsys):
    root, cfg, ws = run
    out = root / "fit"
    assert main(["fit", "--workspace", str(ws), "--config", str(cfg), "--out", str(out)]) == 0
    rows = (out / "loss.log").read_text().splitlines()
    assert len(rows) == 4 and all(len(r.split()) == 13 for r in rows)
    assert main(["eval", "--workspace", str(ws), "--sdf", str(out / "sdf.occf"), "--flow", str(out / "flow.occf"),
                 "--metrics", "depth,rayiou"]) == 0
    lines = (ws / "metrics.txt").read_text().splitlines()
    names = [ln.split()[0] for ln in lines]
    assert "abs_rel" in names and "ray_iou" in names and "mave" not in names
    assert all(len(ln.split()) == 2 for ln in lines)
    assert "abs_rel" in (ws / "log.txt").read_text()
    prefix = root / "render" / "front"
    assert main(["render", "--workspace", str(ws), "--sdf", str(out / "sdf.occf"), "--flow", str(out / "flow.occf"),
                 "--camera", "front", "--frame", "3", "--out", str(prefix), "--samples", "32"]) == 0
    depth = io.load_pfm(f"{prefix}_depth.pfm")
    assert depth.shape == (120, 160)
    assert io.load_flo(f"{prefix}_flow.flo").shape == (120, 160, 2)


def test_eval_oracle_grids_is_near_perfect(run):
    _, _, ws = run
    truth = ws / "truth"
    out = ws / "oracle_metrics.txt"
    assert main(["eval", "--workspace", str(ws), "--sdf", str(truth / "sdf.occf"), "--flow", str(truth / "flow.occf"),
                 "--metrics", "depth,rayiou,mave", "--out", str(out)]) == 0
    m = {k: float(v) for k, v in (ln.split() for ln in out.read_text().splitlines())}
    assert m["abs_rel"] < 0.02
    assert m["ray_iou"] == 1.0
    assert m["mave"] == 0.0


def test_stage1_only_flow_is_zero(run):
    root, cfg, ws = run
    out = root / "s1"
    assert main(["fit", "--workspace", str(ws), "--config", str(cfg), "--stage1-only", "--out", str(out)]) == 0
    assert np.all(io.load_grid(out / "flow.occf").values == 0)


def test_usage_and_validation_errors(run, tmp_path):
    root, cfg, ws = run
    assert main([]) == 1
    assert main(["frobnicate"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"fit": {"nope": 1}}))
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert main(["fit", "--workspace", str(tmp_path / "missing"), "--config", str(cfg), "--out", str(tmp_path)]) == 1
    truth = ws / "truth"
    assert main(["eval", "--workspace", str(ws), "--sdf", str(truth / "sdf.occf"), "--flow", str(truth / "flow.occf"),
                 "--metrics", "psnr"]) == 1
    # an SDF passed where the flow grid belongs
    assert main(["eval", "--workspace", str(ws), "--sdf", str(truth / "sdf.occf"), "--flow", str(truth / "sdf.occf")]) == 1
    assert main(["render", "--workspace", str(ws), "--sdf", str(truth / "sdf.occf"), "--flow", str(truth / "flow.occf"),
                 "--camera", "rear", "--frame", "0", "--out", str(tmp_path / "r")]) == 1


def test_runtime_error_exit_code(run, tmp_path, monkeypatch):
    import occflow.cli as cli

    def boom(args):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "kernels", boom)
    assert main(["kernels", "selftest"]) == 2


def test_kernels_selftest(capsys):
    assert main(["kernels", "selftest"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 6 and "FAIL" not in out
