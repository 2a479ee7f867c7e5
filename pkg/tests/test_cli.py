import json
import time

import numpy as np

from ggd import cli
from ggd.datakit import load_dataset


def run(argv):
    return cli.main([str(a) for a in argv])


def test_parse_gen_biased_mnist():
    cmd = cli.parse_args(["gen-biased-mnist", "--idx-images", "p1", "--idx-labels", "p2",
                          "--rho", "0.99", "--seed", "0", "--out", "d/"])
    assert cmd.name == "gen-biased-mnist"
    assert cmd.args["rho"] == 0.99 and cmd.args["seed"] == 0 and cmd.args["out"] == "d/"


def test_rho_out_of_range(capsys):
    code = run(["gen-synthetic", "--n", "10", "--rho", "1.5", "--out", "x"])
    assert code == 2
    assert "rho must be in [0,1]" in capsys.readouterr().err


def test_unknown_flag_and_missing_required(capsys):
    assert run(["gen-synthetic", "--n", "10", "--rho", "0.5", "--out", "x", "--bogus"]) == 2
    assert run(["train", "--out", "x"]) == 2
    assert "--config" in capsys.readouterr().err


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "gen-biased-mnist" in capsys.readouterr().out


def test_malformed_config_names_position(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"spec_version": 1,\n  "base": {"type": "mlp"},,\n}')
    assert run(["train", "--config", cfg, "--out", tmp_path / "o"]) == 1
    err = capsys.readouterr().err
    assert "line 2" in err and "column" in err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"spec_version": 1, "data": {"train": "t.ggds"}, "base": {}, "epoch": 3}))
    assert run(["train", "--config", cfg, "--out", tmp_path / "o"]) == 1
    assert "unknown key(s) epoch" in capsys.readouterr().err


def test_failed_command_flags_partial(tmp_path, capsys):
    out = tmp_path / "o"
    code = run(["eval", "--model", tmp_path / "missing.ggdm", "--data", f"a={tmp_path / 'x'}", "--out", out])
    assert code == 1
    assert not list(out.glob("*.csv"))


def _synthetic_pipeline(tmp_path, tag):
    d = tmp_path / tag
    for name, rho, seed in (("train", 0.95, 1), ("ood", 0.25, 2), ("id", 0.95, 3)):
        assert run(["gen-synthetic", "--n", 600, "--d-core", 6, "--d-bias", 4, "--classes", 4,
                    "--rho", rho, "--seed", seed, "--out", d / name]) == 0
    runs = {}
    for method, extra in (("baseline", {"biased": [], "lambda": {"kind": "constant", "value": 0.0}}),
                          ("ggd_cr", {"biased": [{"type": "mlp", "selector": "bias_block", "bias_start": 6,
                                                  "kind": "explicit_feature"}]})):
        cfg = {"spec_version": 1, "name": method, "scheme": "cr",
               "data": {"train": "train/dataset.ggds", "eval": {"ood": "ood/dataset.ggds", "id": "id/dataset.ggds"}},
               "base": {"type": "mlp", "hidden": [16]}, "optimizer": {"name": "adam", "lr": 0.01},
               "batch_size": 64, "epochs": 5, **extra}
        (d / f"{method}.json").write_text(json.dumps(cfg))
        assert run(["train", "--config", d / f"{method}.json", "--seed", 4, "--out", d / method]) == 0
        runs[method] = d / method
    return d, runs


def test_synthetic_pipeline_end_to_end(tmp_path):
    t0 = time.time()
    d, runs = _synthetic_pipeline(tmp_path, "a")
    for r in runs.values():
        assert (r / "model.ggdm").exists() and (r / "metrics.jsonl").exists() and (r / "summary.json").exists()
        assert not list(r.glob("*.partial"))
    assert run(["eval", "--model", runs["ggd_cr"] / "model.ggdm", "--data", f"ood={d / 'ood/dataset.ggds'}",
                "--data", f"id={d / 'id/dataset.ggds'}", "--name", "ggd_cr", "--out", d / "eval"]) == 0
    grid = (d / "eval" / "grid.csv").read_text().splitlines()
    assert grid[0] == "method,id,ood" and grid[1].startswith("ggd_cr,")
    assert (d / "eval" / "confusion_vs_bias_ood.csv").exists()
    assert run(["report", "--logs", runs["baseline"] / "metrics.jsonl", runs["ggd_cr"] / "metrics.jsonl",
                "--out", d / "report"]) == 0
    rows = (d / "report" / "report.csv").read_text().splitlines()
    assert rows[0] == "method,id,ood" and [r.split(",")[0] for r in rows[1:]] == ["baseline", "ggd_cr"]
    assert time.time() - t0 < 60
    # the de-biased run leans less on the spurious block out of distribution
    base_ood = float(rows[1].split(",")[2])
    ggd_ood = float(rows[2].split(",")[2])
    assert ggd_ood > base_ood


def test_rerun_byte_identical(tmp_path):
    _, a = _synthetic_pipeline(tmp_path, "a")
    _, b = _synthetic_pipeline(tmp_path, "b")
    for m in a:
        assert (a[m] / "metrics.jsonl").read_bytes() == (b[m] / "metrics.jsonl").read_bytes()
        assert (a[m] / "model.ggdm").read_bytes() == (b[m] / "model.ggdm").read_bytes()


def test_gen_biased_mnist_from_idx(tmp_path, idx_files):
    out = tmp_path / "bm"
    assert run(["gen-biased-mnist", "--idx-images", idx_files[0], "--idx-labels", idx_files[1], "--rho", 0.99,
                "--range", "0:200", "--downsample", 2, "--saturation", 0.5, "--seed", 3, "--out", out]) == 0
    ds = load_dataset(out / "dataset.ggds")
    assert ds.images.shape == (200, 3, 14, 14) and ds.rho == 0.99 and ds.seed == 3
    assert run(["gen-biased-mnist", "--idx-images", idx_files[0], "--idx-labels", idx_files[1], "--rho", 0.99,
                "--range", "0:200", "--downsample", 2, "--saturation", 0.5, "--seed", 3, "--out", tmp_path / "bm2"]) == 0
    assert (out / "dataset.ggds").read_bytes() == (tmp_path / "bm2" / "dataset.ggds").read_bytes()


def test_gen_long_tail_from_idx(tmp_path, idx_files):
    out = tmp_path / "lt"
    assert run(["gen-long-tail", "--idx-images", idx_files[0], "--idx-labels", idx_files[1], "--mu", 0.1,
                "--head-count", 300, "--seed", 0, "--out", out]) == 0
    ds = load_dataset(out / "dataset.ggds")
    assert np.bincount(ds.labels)[[0, 9]].tolist() == [300, 30]
    assert run(["gen-long-tail", "--idx-images", idx_files[0], "--idx-labels", idx_files[1], "--mu", 0,
                "--head-count", 300, "--out", out]) == 2


def test_inputs_not_mutated(tmp_path, idx_files):
    before = idx_files[0].read_bytes()
    run(["gen-long-tail", "--idx-images", idx_files[0], "--idx-labels", idx_files[1], "--mu", 0.5,
         "--head-count", 100, "--out", tmp_path / "o"])
    assert idx_files[0].read_bytes() == before
