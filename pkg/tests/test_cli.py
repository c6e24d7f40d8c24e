import csv
import json

import numpy as np
import pytest

from debiasdiff import cli, io
from debiasdiff.autodiff import NumericalError
from debiasdiff.config import DEFAULTS, load_config, parse_config, violations

SMALL = {
    "dataset": {"n": 400, "n_test": 400},
    "pretrain": {"steps": 60},
    "grouper": {"steps": 30, "M": 4},
    "invtrain": {"steps": 40},
    "eval": {"samples_per_prompt": 32, "seeds": [0, 1], "aug_samples": 100, "aug_seeds": [0]},
}


def write_config(tmp_path, doc, name="config.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc, indent=2))
    return p


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root, SMALL)
    out = root / "run"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_validate_defaults(capsys):
    assert cli.main(["validate"]) == 0
    assert "ok" in capsys.readouterr().out
    assert violations(json.loads(json.dumps(DEFAULTS))) == []


def test_validate_reports_field_and_range(tmp_path, capsys):
    p = write_config(tmp_path, {"invtrain": {"delta": 1.5}})
    assert cli.main(["validate", "--config", str(p)]) == 2
    out = capsys.readouterr().out
    assert "invtrain.delta=1.5" in out and "0 <= delta <= 1" in out


def test_validate_reports_every_violation(tmp_path, capsys):
    p = write_config(tmp_path, {"invtrain": {"delta": 1.5}, "grouper": {"E": 1}, "schedule": {"T": 4}, "bogus": 1})
    assert cli.main(["validate", "--config", str(p)]) == 2
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 4
    assert any("grouper.E" in line for line in out) and any("bogus" in line for line in out)


def test_parse_error_has_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "seed": 0,\n  "dataset": {"n": }\n}\n')
    assert cli.main(["validate", "--config", str(p)]) == 2
    assert "line 3" in capsys.readouterr().out


def test_config_error_exit_code(tmp_path):
    p = write_config(tmp_path, {"grouper": {"E": 0}})
    assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path / "r")]) == 2


def test_env_overrides_path_only(tmp_path, monkeypatch):
    monkeypatch.setenv("DEBIASDIFF_RUN_DIR", str(tmp_path / "elsewhere"))
    cfg = load_config(None)
    assert cfg["paths"]["run_dir"] == str(tmp_path / "elsewhere")
    assert cfg["invtrain"] == DEFAULTS["invtrain"]


def test_missing_upstream_names_stage(tmp_path, capsys):
    assert cli.main(["pretrain", "--out", str(tmp_path / "empty")]) == 3
    assert "run `synth` first" in capsys.readouterr().err
    assert cli.main(["evaluate", "--out", str(tmp_path / "empty")]) == 3


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "r"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0

    def boom(*a, **k):
        raise NumericalError("pretraining loss became non-finite at step 3")

    monkeypatch.setattr(cli.diffusion, "pretrain_biased", boom)
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 4


def test_run_layout_and_stamps(small_run):
    _, out = small_run
    for name in ("dataset.json", "dataset_test.json", "denoiser.json", "groups.json", "guidance.json",
                 "report.json", "augment.json", "pretrain_loss.csv", "guidance_loss.csv", "summary.csv"):
        assert (out / name).exists(), name
    for name in ("dataset.json", "denoiser.json", "groups.json", "guidance.json", "report.json", "augment.json"):
        doc = io.read_json(out / name)
        assert {"version", "config_hash", "seed"} <= set(doc), name
    samples = sorted((out / "samples").iterdir())
    assert len(samples) == 2 * 2 * 2
    doc = io.read_json(samples[0])
    assert {"y", "delta", "w_cfg", "seed", "samples"} <= set(doc)
    groups = io.read_json(out / "groups.json")
    W = np.array(groups["W"])
    np.testing.assert_allclose(W.sum(1), 1.0, atol=1e-9)
    assert len(groups["hard"]) == W.shape[0] and "J_final" in groups


def test_stage_rerun_is_cached_and_identical(small_run, tmp_path):
    cfg, out = small_run
    before = (out / "guidance.json").read_bytes()
    assert cli.main(["train-guidance", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "guidance.json").read_bytes() == before


def test_full_rerun_byte_identical(small_run, tmp_path):
    cfg, out = small_run
    other = tmp_path / "again"
    assert cli.main(["run", "--config", str(cfg), "--out", str(other)]) == 0
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(other) for p in other.rglob("*") if p.is_file())
    for rel in files:
        assert (out / rel).read_bytes() == (other / rel).read_bytes(), rel


def test_seed_override_changes_stage_hash(small_run, tmp_path):
    cfg, _ = small_run
    out = tmp_path / "s"
    assert cli.main(["synth", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["pretrain", "--config", str(cfg), "--out", str(out), "--seed", "5"]) == 0
    doc = io.read_json(out / "denoiser.json")
    assert doc["seed"] == 5


def test_models_differ_only_in_model_and_metrics(small_run):
    _, out = small_run
    with open(out / "summary.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["model"] for r in rows] == ["biased", "invdiff"]
    assert rows[0]["run_id"] == rows[1]["run_id"]
    assert rows[0]["lambda"] == rows[1]["lambda"] and rows[0]["E"] == rows[1]["E"]
    assert list(rows[0]) == cli.SUMMARY_COLUMNS


def test_report_refuses_version_mismatch(small_run, tmp_path, capsys):
    _, out = small_run
    root = tmp_path / "mixed"
    (root / "a").mkdir(parents=True)
    (root / "b").mkdir()
    report = json.loads((out / "report.json").read_text())
    (root / "a" / "report.json").write_text(json.dumps(report))
    report["version"] = 2
    (root / "b" / "report.json").write_text(json.dumps(report))
    assert cli.main(["report", "--out", str(root)]) == 3
    assert "version" in capsys.readouterr().err


def _sweep(tmp_path, axis, values, extra=None):
    doc = json.loads(json.dumps(SMALL))
    doc.update(extra or {})
    cfg = write_config(tmp_path, doc)
    out = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out), "--axis", axis, "--values", values]) == 0
    with open(out / "sweep.csv") as fh:
        return out, list(csv.DictReader(fh))


def test_sweep_delta_cardinality(tmp_path):
    out, rows = _sweep(tmp_path, "invtrain.delta", "0.1,0.3,0.6,0.9")
    assert len(rows) == 4
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["delta=0.1", "delta=0.3", "delta=0.6", "delta=0.9"]
    assert [float(r["delta"]) for r in rows] == [0.1, 0.3, 0.6, 0.9]


def test_sweep_lambda_shares_initial_erm(tmp_path):
    out, rows = _sweep(tmp_path, "invtrain.lambda", "0.2,1,20")
    firsts = {(out / r["run_id"] / "guidance_loss.csv").read_text().splitlines()[1].split(",")[1] for r in rows}
    assert len(firsts) == 1


def test_sweep_E_populates_purity(tmp_path):
    _, rows = _sweep(tmp_path, "grouper.E", "2,4,8")
    assert [int(r["E"]) for r in rows] == [2, 4, 8]
    assert all(0.0 < float(r["purity"]) <= 1.0 for r in rows)


def test_sweep_rejects_non_numeric_axis(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    args = ["sweep", "--config", str(cfg), "--out", str(tmp_path / "s"), "--values", "1,2"]
    assert cli.main(args + ["--axis", "paths.run_dir"]) == 2
    assert cli.main(args + ["--axis", "grouper.harden"]) == 2
    assert cli.main(args + ["--axis", "invtrain.nope"]) == 2


def test_harden_flag_recorded(tmp_path):
    cfg = write_config(tmp_path, SMALL)
    out = tmp_path / "h"
    for stage in ("synth", "pretrain"):
        assert cli.main([stage, "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["infer-groups", "--config", str(cfg), "--out", str(out), "--harden"]) == 0
    assert io.read_json(out / "groups.json")["harden"] is True
    assert cli.main(["train-guidance", "--config", str(cfg), "--out", str(out), "--harden"]) == 0


def test_unknown_fields_reported():
    _, problems = parse_config('{"dataset": {"nn": 3}}')
    assert problems == ["dataset.nn: unknown field"]
