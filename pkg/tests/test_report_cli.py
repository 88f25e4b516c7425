import csv
import io
import json

import numpy as np
import pytest

from depthbench import cli
from depthbench.report import (ConfigError, ExperimentConfig, compare_models, emit_comparison, emit_report,
                               load_config, read_report, report_from_dict, run_experiment)
from depthbench.train import MetricsReport

MONO_SMALL = ["--height", "16", "--width", "16", "--train-count", "4", "--val-count", "3", "--steps", "2"]
STEREO_SMALL = ["--height", "32", "--width", "64", "--train-count", "4", "--val-count", "3", "--steps", "2"]


def _run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def mono_reports(tmp_path_factory):
    root = tmp_path_factory.mktemp("mono")
    paths = []
    for variant in ("4-1-4", "3-1-3", "3-1-3-swish"):
        assert cli.main(["--out", str(root), "--seed", "2", "train", "--task", "mono", "--variant", variant] + MONO_SMALL) == 0
        paths.append(root / f"mono-{variant}" / "report.json")
    return paths


@pytest.fixture(scope="module")
def stereo_report(tmp_path_factory):
    root = tmp_path_factory.mktemp("stereo")
    assert cli.main(["train", "--task", "stereo", "--variant", "none", "--out", str(root)] + STEREO_SMALL) == 0
    return root / "stereo-none"


def test_mono_train_writes_artifacts(mono_reports):
    rep = json.loads(mono_reports[1].read_text())
    assert rep["schema_version"] == 1
    assert rep["parameters"] == {"trainable": 488193, "non_trainable": 896, "total": 489089}
    assert set(rep["aggregates"]["ssim"]) == {"mean", "median", "q25", "q75", "min", "max"}
    assert len(rep["per_sample"]["ssim"]) == 3
    assert rep["reference_values"]["ssim"] == 0.9903
    for name in ("history.csv", "per_sample.csv", "model.ckpt"):
        assert (mono_reports[1].parent / name).exists()
    rows = list(csv.reader(io.StringIO((mono_reports[1].parent / "history.csv").read_text())))
    assert rows[0] == ["step", "loss"] and len(rows) == 3


def test_stereo_train_reports_every_stage(stereo_report):
    rep = json.loads((stereo_report / "report.json").read_text())
    for k in (1, 2, 3, 4):
        assert f"three_pixel_error_stage{k}" in rep["aggregates"]
    macs = rep["macs_per_stage"]
    assert macs["stage1"] < macs["stage2"] < macs["stage3"] <= macs["stage4"]
    assert rep["parameters"]["trainable"] == 34629


def test_usage_errors_exit_2(capsys, tmp_path):
    assert _run(["train", "--task", "mono", "--variant", "9-1-9"], capsys)[0] == 2
    assert _run([], capsys)[0] == 2
    assert _run(["frobnicate"], capsys)[0] == 2
    assert _run(["compare", tmp_path / "missing.json", tmp_path / "other.json"], capsys)[0] == 2
    assert _run(["--config", tmp_path / "none.ini", "count-params"], capsys)[0] == 2
    assert _run(["--help"], capsys)[0] == 0


def test_runtime_errors_exit_1(capsys, tmp_path, mono_reports, stereo_report):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 20)
    assert _run(["eval", bad], capsys)[0] == 1
    assert _run(["compare", mono_reports[0], stereo_report / "report.json"], capsys)[0] == 1


def test_count_params(capsys):
    code, out, _ = _run(["count-params", "--task", "stereo", "--variant", "spn8"], capsys)
    assert code == 0 and json.loads(out)["parameters"]["trainable"] == 43269


def test_compare_mono_variants(capsys, tmp_path, mono_reports):
    code, out, _ = _run(["--out", tmp_path, "compare"] + list(mono_reports), capsys)
    assert code == 0
    table = json.loads((tmp_path / "comparison.json").read_text())
    rows = table["rows"]
    assert [r["trainable"] for r in rows] == sorted(r["trainable"] for r in rows)
    assert rows[-1]["reduction_pct"] == 0.0
    assert abs(rows[0]["reduction_pct"] - 100 * (1 - 488193 / 1964545)) < 1e-6
    assert len(out.strip().splitlines()) == 4


def test_compare_is_order_invariant_and_identity(mono_reports):
    reports = [read_report(p) for p in mono_reports]
    assert compare_models(reports) == compare_models(reports[::-1])
    same = compare_models([reports[0], reports[0]])
    assert [r["reduction_pct"] for r in same["rows"]] == [0.0, 0.0]
    assert same["rows"][0] == same["rows"][1]
    with pytest.raises(ValueError):
        compare_models(reports[:1])


def test_compare_quartiles_match_recomputation():
    rng = np.random.default_rng(0)
    reports = []
    for i, params in enumerate([34629, 34827, 35277, 36933, 43269]):
        vals = list(rng.uniform(0, 1, 7))
        reports.append(MetricsReport("stereo", {"three_pixel_error_stage3": vals}, experiment_id=f"r{i}",
                                     parameters={"trainable": params, "total": params + 338}))
    table = compare_models(reports[::-1])
    assert len(table["rows"]) == 5
    for row, rep in zip(table["rows"], reports):
        v = np.array(rep.per_sample["three_pixel_error_stage3"])
        assert row["three_pixel_error_stage3.q25"] == float(f"{np.percentile(v, 25):.9g}")
        assert row["three_pixel_error_stage3.median"] == float(f"{np.median(v):.9g}")
    assert emit_comparison(table, "csv").decode().count("\n") == 6


def test_emit_report_formats(mono_reports):
    rep = read_report(mono_reports[0])
    js = emit_report(rep, "json")
    assert emit_report(report_from_dict(json.loads(js)), "json") == js
    rows = emit_report(rep, "csv").decode().strip().splitlines()
    assert len(rows) == len(rep.per_sample["ssim"]) + 1
    with pytest.raises(ValueError):
        emit_report(rep, "xml")


def test_nine_significant_digits():
    vals = [1 / 3, 2 / 3, np.pi]
    rep = MetricsReport("mono", {"ssim": vals})
    parsed = json.loads(emit_report(rep, "json"))
    for k, v in rep.aggregates["ssim"].items():
        assert parsed["aggregates"]["ssim"][k] == float(f"{v:.9g}")
        assert abs(parsed["aggregates"]["ssim"][k] - v) <= 5e-9 * abs(v)
    assert "0.333333333" in emit_report(rep, "csv").decode()


def test_report_subcommand(capsys, mono_reports):
    code, out, _ = _run(["report", mono_reports[0], "--format", "csv"], capsys)
    assert code == 0 and out.startswith("sample,l1,ssim")


def test_gen_data_then_train_from_manifest(capsys, tmp_path):
    data_dir = tmp_path / "data"
    assert _run(["--seed", "4", "--out", data_dir, "gen-data", "--task", "mono", "--count", "5",
                 "--height", "16", "--width", "16"], capsys)[0] == 0
    assert (data_dir / "manifest.txt").exists()
    code, out, _ = _run(["train", "--task", "mono", "--data", data_dir / "manifest.txt", "--steps", "1",
                         "--out", tmp_path / "runs"], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "runs" / "mono-3-1-3" / "report.json").read_text())
    assert len(rep["per_sample"]["ssim"]) == 1  # 20% of 5 held out


def test_eval_checkpoint(capsys, stereo_report, tmp_path):
    code, out, _ = _run(["--out", tmp_path, "eval", stereo_report / "model.ckpt", "--count", "2",
                         "--height", "32", "--width", "64"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert len(rep["per_sample"]["three_pixel_error_stage1"]) == 2
    assert (tmp_path / "per_sample.csv").exists()


def test_config_file(tmp_path, capsys):
    ini = tmp_path / "exp.ini"
    ini.write_text("[experiment]\ntask = stereo\nvariant = spn4\nmax_disparity = 32\n\n"
                   "[data]\nheight = 32\nwidth = 64\ntrain_count = 4\nval_count = 2\n\n"
                   "[train]\nmax_steps = 1\nlr = 0.001\n")
    cfg = load_config(ini.read_text())
    assert cfg.variant == "spn4" and cfg.train.lr == 0.001 and cfg.data.height == 32
    code, out, _ = _run(["--config", ini, "--out", tmp_path / "runs", "train"], capsys)
    assert code == 0 and json.loads(out)["parameters"]["trainable"] == 36933
    with pytest.raises(ConfigError):
        load_config("[experiment]\nflavour = x\n")
    with pytest.raises(ConfigError):
        load_config("[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        load_config("[train]\nlr = fast\n")


def test_run_experiment_is_deterministic(tmp_path):
    cfg = ExperimentConfig(task="mono", variant="3-1-3")
    cfg.data.height = cfg.data.width = 16
    cfg.data.train_count, cfg.data.val_count = 4, 2
    cfg.train.max_steps = 2
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for name in ("report.json", "history.csv", "per_sample.csv", "model.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
