import csv
import json
import os

import numpy as np
import pytest

from flowguide import checks
from flowguide.cli import (EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, METRIC_COLUMNS, SWEEP_COLUMNS, InputError, main,
                           read_samples)
from flowguide.config import SEED_ENV, ConfigError, RunConfig, TaskConfig, config_hash, load_run_config
from flowguide.oracles import default_task, sample_task

TINY = {"train": {"total_steps": 12, "batch_size": 16, "eval_every": 6, "checkpoint_every": 6,
                  "net": {"depth": 1, "width": 16, "time_embed_dim": 8, "cond_width": 16},
                  "guidance": {"warmup_steps": 4}, "align": {"projector_hidden": 8, "tap_layer": 1}},
        "eval_samples": 50}


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)


def _write_config(tmp_path, data=TINY):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- config loading ----------------------------------------------------------------

def test_defaults_without_file():
    cfg = load_run_config(None)
    assert cfg == RunConfig()
    assert cfg.sampler.kind == "euler_maruyama" and cfg.sampler.steps == 50 and cfg.sampler.cfg_scale == 1.45


def test_file_and_overrides(tmp_path):
    cfg = load_run_config(_write_config(tmp_path), ["train.lr=3e-4", "guidance.w=1.45", "sampler.kind=euler"])
    assert cfg.train.lr == 3e-4 and cfg.train.guidance.w == 1.45 and cfg.sampler.kind == "euler"
    assert cfg.train.total_steps == 12 and cfg.train.net.width == 16


def test_override_value_parsing():
    cfg = load_run_config(None, ["train.betas=[0.8,0.99]", "train.align.tap_layer=null", "output_dir=runs/x"])
    assert cfg.train.betas == (0.8, 0.99) and cfg.train.align.tap_layer is None and cfg.output_dir == "runs/x"


@pytest.mark.parametrize("override", ["train.nope=1", "nope=1", "guidance.nope=2", "train.lr", "train.lr=abc",
                                      "train.total_steps=1.5", "guidance.w=-1"])
def test_bad_overrides(override):
    with pytest.raises(ConfigError):
        load_run_config(None, [override])


def test_unknown_keys_in_file(tmp_path):
    for bad in ({"bogus": 1}, {"train": {"net": {"layers": 3}}}, {"sampler": {"kind": "heun"}}):
        with pytest.raises(ConfigError):
            load_run_config(_write_config(tmp_path, bad))


def test_inconsistent_dims(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(None, ["task.cond_dim=4"])


def test_seed_precedence(tmp_path, monkeypatch):
    path = _write_config(tmp_path, {"train": {"seed": 1}})
    assert load_run_config(path).train.seed == 1
    assert load_run_config(path, seed=2).train.seed == 2
    monkeypatch.setenv(SEED_ENV, "3")
    assert load_run_config(path, seed=2).train.seed == 3
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_config_hash_stable_and_sensitive():
    a, b = load_run_config(None), load_run_config(None)
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(load_run_config(None, ["train.seed=5"]))


def test_task_config_build():
    assert TaskConfig().build().K == 4
    assert TaskConfig(kind="checkerboard").build().K == 2
    with pytest.raises(ConfigError):
        TaskConfig(kind="swiss").build()


# -- train -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("run")
    path = base / "cfg.json"
    path.write_text(json.dumps(TINY))
    out = base / "out"
    assert main(["train", "--config", str(path), "--out", str(out), "--log-every", "3"]) == EXIT_OK
    return out


def test_train_outputs(run_dir):
    files = sorted(os.listdir(run_dir))
    assert files == ["ckpt_0000006.ckpt", "ckpt_0000012.ckpt", "config.json", "final.ckpt", "metrics.csv"]
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["seed"] == 0 and len(resolved["config_hash"]) == 16
    assert resolved["config"]["train"]["total_steps"] == 12
    rows = _read_csv(run_dir / "metrics.csv")
    assert list(rows[0]) == METRIC_COLUMNS
    assert [int(r["step"]) for r in rows] == [3, 6, 9, 12]
    assert rows[1]["fd"] != "" and rows[0]["fd"] == ""
    assert all(np.isfinite(float(r["total_loss"])) for r in rows)


def test_train_byte_identical_rerun(run_dir, tmp_path):
    cfg = run_dir.parent / "cfg.json"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--log-every", "3"]) == EXIT_OK
    for name in ("metrics.csv", "config.json", "final.ckpt"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()


def test_train_invalid_override_exit_code(tmp_path, capsys):
    assert main(["train", "--set", "guidance.w=-1", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == EXIT_USAGE


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["sweep", "x.ckpt"]) == EXIT_USAGE


def test_train_nan_is_runtime_failure(tmp_path):
    cfg = _write_config(tmp_path)
    with np.errstate(all="ignore"):
        code = main(["train", "--config", cfg, "--set", "train.lr=1e30", "--set", "train.total_steps=60",
                     "--out", str(tmp_path / "o")])
    assert code == EXIT_RUNTIME


# -- sample ------------------------------------------------------------------------

def test_sample_defaults(run_dir, tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sample", str(run_dir / "final.ckpt"), "--n", "5", "--out", str(out)]) == EXIT_OK
    assert "NFE=100" in capsys.readouterr().out
    rows = _read_csv(out)
    assert len(rows) == 20
    assert list(rows[0]) == ["label", "x0", "x1", "seed", "steps", "cfg_scale", "sampler", "config_hash"]
    r = rows[0]
    assert (r["sampler"], r["steps"], float(r["cfg_scale"]), r["seed"]) == ("euler_maruyama", "50", 1.45, "0")
    resolved = json.loads((run_dir / "config.json").read_text())
    assert r["config_hash"] == resolved["config_hash"]
    assert sorted({int(x["label"]) for x in rows}) == [0, 1, 2, 3]


def test_sample_cfg_one_single_pass(run_dir, tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sample", str(run_dir / "final.ckpt"), "--n", "3", "--cfg", "1.0", "--steps", "50",
                 "--out", str(out)]) == EXIT_OK
    assert "NFE=50" in capsys.readouterr().out
    assert main(["sample", str(run_dir / "final.ckpt"), "--n", "3", "--sampler", "euler", "--steps", "25",
                 "--out", str(out)]) == EXIT_OK
    assert _read_csv(out)[0]["sampler"] == "euler"


def test_sample_deterministic_and_online_differs(run_dir, tmp_path):
    ck = str(run_dir / "final.ckpt")
    main(["sample", ck, "--n", "4", "--out", str(tmp_path / "a.csv")])
    main(["sample", ck, "--n", "4", "--out", str(tmp_path / "b.csv")])
    main(["sample", ck, "--n", "4", "--online", "--out", str(tmp_path / "c.csv")])
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_sample_errors(run_dir, tmp_path):
    out = str(tmp_path / "s.csv")
    assert main(["sample", str(tmp_path / "nope.ckpt"), "--out", out]) == EXIT_USAGE
    assert main(["sample", str(run_dir / "final.ckpt"), "--sampler", "heun", "--out", out]) == EXIT_USAGE
    assert main(["sample", str(run_dir / "final.ckpt"), "--n", "0", "--out", out]) == EXIT_USAGE
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert main(["sample", str(bad), "--out", out]) == EXIT_USAGE


# -- eval --------------------------------------------------------------------------

def _task_samples_csv(path, n_per=10_000, seed=0):
    task = default_task()
    labels = np.repeat(np.arange(task.K), n_per)
    x = sample_task(task, np.random.default_rng(seed), labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "x0", "x1", "seed"])
        for lab, row in zip(labels, x):
            w.writerow([lab, repr(float(row[0])), repr(float(row[1])), seed])


def test_eval_task_samples_small_fd(tmp_path):
    src = tmp_path / "s.csv"
    _task_samples_csv(src)
    out = tmp_path / "ev"
    assert main(["eval", str(src), "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "report.json").read_text())
    agg = next(r for r in report["rows"] if r["label"] == "aggregate")
    assert agg["fd"] < 0.01 and agg["accuracy"] > 0.99
    assert report["metadata"]["seed"] == "0" and "task_hash" in report["metadata"]
    first = (out / "report.csv").read_bytes()
    assert main(["eval", str(src), "--out", str(out)]) == EXIT_OK
    assert (out / "report.csv").read_bytes() == first


def test_eval_uses_checkpoint_task(run_dir, tmp_path):
    src = tmp_path / "s.csv"
    main(["sample", str(run_dir / "final.ckpt"), "--n", "20", "--out", str(src)])
    assert main(["eval", str(src), "--checkpoint", str(run_dir / "final.ckpt"), "--out", str(tmp_path / "e")]) == 0
    meta = json.loads((tmp_path / "e" / "report.json").read_text())["metadata"]
    assert meta["config_hash"] == json.loads((run_dir / "config.json").read_text())["config_hash"]


def test_eval_empty_file(tmp_path, capsys):
    src = tmp_path / "e.csv"
    src.write_text("")
    assert main(["eval", str(src), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "empty" in capsys.readouterr().err
    src.write_text("label,x0,x1\n")
    assert main(["eval", str(src), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_eval_malformed_rows_report_line_numbers(tmp_path, capsys):
    src = tmp_path / "m.csv"
    src.write_text("label,x0,x1\n0,1.0,2.0\n1,abc,2.0\n2,1.0\n3,nan,0\n0,3.0,3.0\n")
    assert main(["eval", str(src), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "m.csv:3" in err and "m.csv:4" in err and "m.csv:5" in err
    with pytest.raises(InputError):
        read_samples(str(src))


def test_eval_label_out_of_range(tmp_path, capsys):
    src = tmp_path / "m.csv"
    src.write_text("label,x0,x1\n0,1.0,2.0\n1,0.0,0.0\n7,1.0,1.0\n")
    assert main(["eval", str(src), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "line(s) 4" in capsys.readouterr().err


def test_eval_dimension_mismatch(tmp_path):
    src = tmp_path / "m.csv"
    src.write_text("label,x0\n0,1.0\n0,2.0\n")
    assert main(["eval", str(src), "--out", str(tmp_path / "o")]) == EXIT_USAGE


# -- sweep -------------------------------------------------------------------------

def test_sweep_cfg_rows(run_dir, tmp_path):
    out = tmp_path / "sw.csv"
    assert main(["sweep", str(run_dir / "final.ckpt"), "--axis", "cfg_scale", "--values", "1.0,1.45,4.0,6.0",
                 "--n", "20", "--steps", "5", "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert list(rows[0]) == SWEEP_COLUMNS
    assert [float(r["cfg_scale"]) for r in rows] == [1.0, 1.45, 4.0, 6.0]
    assert [int(r["nfe"]) for r in rows] == [5, 10, 10, 10]
    assert len({r["seed"] for r in rows}) == 1


def test_sweep_steps_rows(run_dir, tmp_path):
    out = tmp_path / "sw.csv"
    assert main(["sweep", str(run_dir / "final.ckpt"), "--axis", "steps", "--values", "5,25,50,120,250",
                 "--n", "5", "--cfg", "1.0", "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert [int(r["steps"]) for r in rows] == [5, 25, 50, 120, 250]
    assert [int(r["nfe"]) for r in rows] == [5, 25, 50, 120, 250]


def test_single_value_sweep_equals_sample_then_eval(run_dir, tmp_path):
    ck = str(run_dir / "final.ckpt")
    main(["sweep", ck, "--axis", "cfg_scale", "--values", "1.45", "--n", "30", "--steps", "10",
          "--out", str(tmp_path / "sw.csv")])
    main(["sample", ck, "--n", "30", "--steps", "10", "--out", str(tmp_path / "s.csv")])
    main(["eval", str(tmp_path / "s.csv"), "--checkpoint", ck, "--out", str(tmp_path / "e")])
    sweep = _read_csv(tmp_path / "sw.csv")[0]
    agg = next(r for r in _read_csv(tmp_path / "e" / "report.csv") if r["label"] == "aggregate")
    # the samples CSV stores repr() floats, so the round trip is lossless
    assert float(sweep["fd"]) == float(agg["fd"])
    assert float(sweep["accuracy"]) == float(agg["accuracy"])


def test_sweep_errors(run_dir, tmp_path):
    ck = str(run_dir / "final.ckpt")
    out = str(tmp_path / "sw.csv")
    assert main(["sweep", ck, "--axis", "steps", "--values", "", "--out", out]) == EXIT_USAGE
    assert main(["sweep", ck, "--axis", "steps", "--values", "2.5", "--out", out]) == EXIT_USAGE
    assert main(["sweep", ck, "--axis", "eta", "--values", "1", "--out", out]) == EXIT_USAGE


# -- oracle-check --------------------------------------------------------------------

def test_oracle_check_fast_suites_pass(tmp_path, capsys):
    out = tmp_path / "oc.json"
    assert main(["oracle-check", "--suite", "stop_gradient", "--suite", "ema", "--suite", "metrics",
                 "--out", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "all suites pass" in text
    payload = json.loads(out.read_text())
    assert {p["suite"] for p in payload} == {"stop_gradient", "ema", "metrics"}
    assert all(p["passed"] for p in payload)


def test_oracle_check_detects_sign_flip(capsys):
    assert main(["oracle-check", "--suite", "stop_gradient", "--mutate", "amg_sign_flip"]) == EXIT_RUNTIME
    assert "FAILED" in capsys.readouterr().out


def test_mutation_is_scoped():
    from flowguide import objectives
    original = objectives.amg_target
    with checks.mutated(["amg_sign_flip"]):
        assert objectives.amg_target is not original
    assert objectives.amg_target is original


def test_oracle_check_unknown_suite():
    assert main(["oracle-check", "--suite", "bogus"]) == EXIT_USAGE


@pytest.mark.slow
def test_oracle_check_full_under_two_minutes(capsys):
    import time
    start = time.perf_counter()
    assert main(["oracle-check"]) == EXIT_OK
    assert time.perf_counter() - start < 120
