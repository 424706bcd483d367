"""End-to-end staged run through the command line on a tiny configuration."""

import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from advgen.cli import main
from advgen.image import ImageTensor, UNIT, load_image, save_image

TINY = """
data: {n_identities: 6, per_identity: 2, image_size: 32, split: [0.5, 0.25, 0.25]}
pad: {epochs: 1}
embedder: {epochs: 1}
decomposer: {epochs: 1}
idgan: {epochs: 1, batch_size: 4}
advgen: {epochs: 1, batch_size: 4, eot_samples: 1}
eval: {methods: [fgsm, cw, advgen], cw_iterations: 2, cw_search_steps: 1}
"""


def invoke(base, *args, config=None):
    pre = ["--runs", str(base / "runs")] + (["--config", str(config)] if config else [])
    res = CliRunner().invoke(main, pre + [str(a) for a in args])
    run = next((line.split(": ", 1)[1] for line in res.output.splitlines() if line.startswith("run directory")), None)
    return res, run


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = base / "tiny.yaml"
    cfg.write_text(TINY)
    runs = {}
    res, runs["data"] = invoke(base, "gen-data", config=cfg)
    assert res.exit_code == 0, res.output
    for stage in ("train-pad", "train-embedder", "train-decomposer"):
        res, runs[stage] = invoke(base, stage, "--from", runs["data"], config=cfg)
        assert res.exit_code == 0, res.output
    up = [runs["data"], runs["train-pad"], runs["train-embedder"], runs["train-decomposer"]]
    res, runs["idgan"] = invoke(base, "train-idgan", *sum((["--from", u] for u in up), []), config=cfg)
    assert res.exit_code == 0, res.output
    up.append(runs["idgan"])
    res, runs["advgen"] = invoke(base, "train-advgen", *sum((["--from", u] for u in up), []), config=cfg)
    assert res.exit_code == 0, res.output
    up.append(runs["advgen"])
    for method in ("fgsm", "cw", "advgen"):
        res, runs[method] = invoke(base, "attack", "--method", method, *sum((["--from", u] for u in up), []),
                                   config=cfg)
        assert res.exit_code == 0, res.output
    up += [runs["fgsm"], runs["cw"], runs["advgen"]]
    res, runs["evaluate"] = invoke(base, "evaluate", *sum((["--from", u] for u in up), []), config=cfg)
    assert res.exit_code == 0, res.output
    return base, cfg, runs, res.output


def test_staged_run_produces_reports(staged):
    base, cfg, runs, out = staged
    assert "| advgen |" in out and "| fgsm |" in out and "| cw |" in out
    reports = Path(runs["evaluate"]) / "reports"
    assert (reports / "report.csv").is_file() and (reports / "report.md").is_file()
    side = json.loads(next((Path(runs["advgen"]) / "images" / "advgen").glob("*.json")).read_text())
    assert side["method"] == "advgen" and side["budget"]["norm"] == "inf"


def test_report_merges_and_detects_mixed_configs(staged, tmp_path):
    base, cfg, runs, _ = staged
    res, _ = invoke(base, "report", runs["evaluate"], "--out", tmp_path / "merged")
    assert res.exit_code == 0, res.output
    assert (tmp_path / "merged" / "report.csv").is_file()
    other = tmp_path / "other"
    other.mkdir()
    (other / "summary.json").write_text(json.dumps({"config_hash": "deadbeef"}))
    res, _ = invoke(base, "report", runs["evaluate"], other)
    assert res.exit_code == 6 and "integrity error" in res.output
    res, _ = invoke(base, "report", runs["evaluate"], other, "--force")
    assert res.exit_code == 0


def test_missing_upstream_is_a_dependency_error(staged):
    base, cfg, runs, _ = staged
    res, _ = invoke(base, "train-idgan", "--from", runs["data"], config=cfg)
    assert res.exit_code == 5 and "train-embedder" in res.output
    res, _ = invoke(base, "evaluate", "--from", runs["data"], "--from", runs["train-pad"],
                    "--from", runs["train-embedder"], config=cfg)
    assert res.exit_code == 5


def test_bad_config_and_data_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("advgen: {eps1: -1}\n")
    res, _ = invoke(tmp_path, "gen-data", config=bad)
    assert res.exit_code == 3 and "advgen.eps1" in res.output
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "manifest_all.csv").write_text("path,identity,liveness,medium\n")
    res, _ = invoke(tmp_path, "train-pad", "--from", empty)
    assert res.exit_code == 4


def test_channel_preview(tmp_path):
    src, out = tmp_path / "in.png", tmp_path / "out.png"
    save_image(ImageTensor(np.random.default_rng(0).random((32, 32, 3)), UNIT), src)
    res, _ = invoke(tmp_path, "--seed", 3, "channel", src, out, "--medium", "replay")
    assert res.exit_code == 0, res.output
    assert load_image(out).data.shape == (32, 32, 3)
    corrupt = tmp_path / "bad.png"
    corrupt.write_bytes(b"not a png")
    res, _ = invoke(tmp_path, "channel", corrupt, out)
    assert res.exit_code == 4
