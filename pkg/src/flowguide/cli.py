"""Command-line entry point: train, sample, eval, sweep, oracle-check.

Exit codes: 0 success, 1 usage/config/input error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import checks
from .config import (ConfigError, RunConfig, TaskConfig, build_dataclass, config_hash, load_run_config,
                     to_dict)
from .metrics import evaluate_samples
from .nets import VelocityNet
from .oracles import encode_condition, encoder_for
from .samplers import SAMPLER_KINDS, SamplerConfig, sample_model
from .tensor_core import NonFiniteError
from .trainer import (CheckpointError, StepLosses, TrainState, _atomic_write, load_checkpoint,
                      read_manifest, save_checkpoint, train)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class InputError(ValueError):
    """Malformed user-supplied files."""


def write_text(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    _atomic_write(path, text.encode("utf-8"))


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def sample_conditions(state: TrainState, task, n_per_condition: int, sampler: SamplerConfig,
                      seed: int, use_ema: bool = True) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw ``n_per_condition`` samples for every label. Returns (x, labels, NFE)."""
    net = VelocityNet(state.config.net)
    encoder = encoder_for(task, state.config.net.patches, state.config.align.feature_dim)
    labels = np.repeat(np.arange(task.K), n_per_condition)
    conds = encode_condition(encoder, labels)
    params = state.ema.shadow if use_ema else state.params
    x, nfe = sample_model(net, params, conds, sampler, seed=seed)
    return x, labels, nfe


def load_run(path: str) -> tuple[TrainState, TaskConfig, str]:
    """Checkpoint plus the task it was trained on and the run's config hash."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    manifest, _ = read_manifest(path)
    state = load_checkpoint(path)
    task_cfg = build_dataclass(TaskConfig, manifest["task"]) if manifest.get("task") else TaskConfig()
    return state, task_cfg, manifest.get("extra", {}).get("config_hash", "")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ["step", "total_loss", "amg_loss", "align_loss", "fd", "kl", "accuracy"]


def run_training(cfg: RunConfig, out_dir: str, log_every: int = 100) -> TrainState:
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(cfg)
    resolved = {"config": to_dict(cfg), "seed": cfg.train.seed, "config_hash": chash}
    write_text(os.path.join(out_dir, "config.json"), json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    task = cfg.task.build()
    task_dict = to_dict(cfg.task)
    rows: dict[int, list] = {}

    def metrics_path_write():
        write_text(os.path.join(out_dir, "metrics.csv"),
                   _csv_text(METRIC_COLUMNS, [rows[k] for k in sorted(rows)]))

    def on_step(state: TrainState, losses: StepLosses):
        if state.step % log_every == 0 or state.step == cfg.train.total_steps:
            rows[state.step] = [state.step, losses.total, losses.amg, losses.align, "", "", ""]

    def on_eval(state: TrainState):
        x, labels, _ = sample_conditions(state, task, cfg.eval_samples, cfg.sampler, cfg.sampler.seed)
        agg = evaluate_samples(x, labels, task).aggregate
        row = rows.setdefault(state.step, [state.step, "", "", "", "", "", ""])
        row[4:] = [agg.fd, agg.kl, agg.accuracy]

    def on_checkpoint(state: TrainState):
        save_checkpoint(state, os.path.join(out_dir, f"ckpt_{state.step:07d}.ckpt"), task_dict,
                        {"config_hash": chash})
        metrics_path_write()

    state = train(cfg.train, task, on_step=on_step, on_eval=on_eval, on_checkpoint=on_checkpoint)
    save_checkpoint(state, os.path.join(out_dir, "final.ckpt"), task_dict, {"config_hash": chash})
    metrics_path_write()
    return state


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.set or [], args.seed)
    out_dir = args.out or cfg.output_dir
    start = time.perf_counter()
    state = run_training(cfg, out_dir, args.log_every)
    print(f"trained {state.step} steps in {time.perf_counter() - start:.1f}s -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample / eval
# ---------------------------------------------------------------------------

def _sampler_from_args(args) -> SamplerConfig:
    if args.sampler not in SAMPLER_KINDS:
        raise ConfigError(f"unknown sampler {args.sampler!r}; choose from {SAMPLER_KINDS}")
    return SamplerConfig(kind=args.sampler, steps=args.steps, cfg_scale=args.cfg, seed=args.seed)


def samples_csv(x: np.ndarray, labels: np.ndarray, sampler: SamplerConfig, chash: str) -> str:
    header = ["label"] + [f"x{i}" for i in range(x.shape[1])] + ["seed", "steps", "cfg_scale", "sampler",
                                                                   "config_hash"]
    rows = [[int(lab)] + [float(v) for v in row] + [sampler.seed, sampler.steps, float(sampler.cfg_scale),
                                                     sampler.kind, chash]
            for lab, row in zip(labels, x)]
    return _csv_text(header, rows)


def cmd_sample(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    sampler = _sampler_from_args(args)
    state, task_cfg, chash = load_run(args.checkpoint)
    task = task_cfg.build()
    x, labels, nfe = sample_conditions(state, task, args.n, sampler, sampler.seed, use_ema=not args.online)
    write_text(args.out, samples_csv(x, labels, sampler, chash))
    print(f"wrote {len(x)} samples (NFE={nfe}) -> {args.out}")
    return EXIT_OK


def read_samples(path: str) -> tuple[np.ndarray, np.ndarray, dict]:
    """Parse a samples CSV; malformed rows raise InputError naming the line."""
    try:
        with open(path, newline="") as f:
            lines = list(csv.reader(f))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise InputError(f"{path}: empty file")
    header = lines[0]
    if "label" not in header:
        raise InputError(f"{path}:1: header has no 'label' column")
    coord_cols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if not coord_cols:
        raise InputError(f"{path}:1: header has no coordinate columns x0, x1, ...")
    li = header.index("label")
    xs, labels, errors = [], [], []
    meta = {}
    for lineno, row in enumerate(lines[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            errors.append(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            continue
        try:
            lab = int(row[li])
            coords = [float(row[i]) for i in coord_cols]
        except ValueError as exc:
            errors.append(f"{path}:{lineno}: {exc}")
            continue
        if not all(np.isfinite(coords)):
            errors.append(f"{path}:{lineno}: non-finite coordinate")
            continue
        labels.append(lab)
        xs.append(coords)
        if not meta:
            meta = {h: row[i] for i, h in enumerate(header) if i != li and i not in coord_cols}
    if errors:
        raise InputError("malformed rows:\n" + "\n".join(errors[:20]))
    if not xs:
        raise InputError(f"{path}: no sample rows")
    return np.array(xs), np.array(labels), meta


def _task_from_args(args) -> TaskConfig:
    if args.task:
        try:
            with open(args.task) as f:
                return build_dataclass(TaskConfig, json.load(f), "task")
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read task file {args.task}: {exc}") from exc
    if args.checkpoint:
        return load_run(args.checkpoint)[1]
    return TaskConfig()


def cmd_eval(args) -> int:
    task_cfg = _task_from_args(args)
    task = task_cfg.build()
    x, labels, meta = read_samples(args.samples)
    if x.shape[1] != task.dim:
        raise InputError(f"samples are {x.shape[1]}-D but the task is {task.dim}-D")
    bad = np.flatnonzero((labels < 0) | (labels >= task.K))
    if bad.size:
        raise InputError(f"label out of range on line(s) {', '.join(str(i + 2) for i in bad[:20])}")
    meta = dict(meta, source=os.path.basename(args.samples), task_hash=config_hash(task_cfg))
    report = evaluate_samples(x, labels, task, meta)
    os.makedirs(args.out, exist_ok=True)
    write_text(os.path.join(args.out, "report.csv"), report.to_csv())
    write_text(os.path.join(args.out, "report.json"), report.to_json() + "\n")
    agg = report.aggregate
    print(f"aggregate FD={agg.fd:.4f} KL={agg.kl:.4f} acc={agg.accuracy:.4f} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["axis", "value", "sampler", "steps", "cfg_scale", "seed", "nfe", "fd", "kl", "accuracy",
                 "mode_coverage", "config_hash"]


def sweep_rows(state: TrainState, task, base: SamplerConfig, axis: str, values, n: int,
               chash: str = "", use_ema: bool = True) -> list[list]:
    rows = []
    for value in values:
        if axis == "cfg_scale":
            sc = replace(base, cfg_scale=float(value))
        else:
            if float(value) != int(value):
                raise ConfigError(f"steps must be integers, got {value}")
            sc = replace(base, steps=int(value))
        x, labels, nfe = sample_conditions(state, task, n, sc, base.seed, use_ema)
        agg = evaluate_samples(x, labels, task).aggregate
        rows.append([axis, value, sc.kind, sc.steps, sc.cfg_scale, base.seed, nfe, agg.fd, agg.kl,
                     agg.accuracy, agg.mode_coverage, chash])
    return rows


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    base = _sampler_from_args(args)
    state, task_cfg, chash = load_run(args.checkpoint)
    rows = sweep_rows(state, task_cfg.build(), base, args.axis, values, args.n, chash, not args.online)
    write_text(args.out, _csv_text(SWEEP_COLUMNS, rows))
    for r in rows:
        print(f"{args.axis}={r[1]:g}: FD={r[7]:.4f} acc={r[9]:.4f} NFE={r[6]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# oracle-check
# ---------------------------------------------------------------------------

def cmd_oracle_check(args) -> int:
    suites = args.suite or None
    if suites:
        unknown = set(suites) - set(checks.SUITES)
        if unknown:
            raise ConfigError(f"unknown suite(s) {sorted(unknown)}; choose from {list(checks.SUITES)}")
    results = checks.run_oracle_checks(args.mutate or (), suites)
    for r in results:
        print(r.line())
    if args.out:
        payload = [{"suite": r.suite, "name": r.name, "passed": r.passed, "measured": r.measured, "tolerance": r.tolerance,
                    "seconds": r.seconds} for r in results]
        write_text(args.out, json.dumps(payload, indent=2) + "\n")
    ok = all(r.passed for r in results)
    print("all suites pass" if ok else "oracle check FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_sampler_args(p: argparse.ArgumentParser) -> None:
    d = SamplerConfig()
    p.add_argument("--sampler", default=d.kind, help=f"one of {', '.join(SAMPLER_KINDS)}")
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--cfg", type=float, default=d.cfg_scale)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--n", type=int, default=1000, help="samples per condition")
    p.add_argument("--online", action="store_true", help="use online weights instead of EMA")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowguide")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a velocity model")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.lr=3e-4")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (default: output_dir from config)")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample from a checkpoint")
    p.add_argument("checkpoint")
    _add_sampler_args(p)
    p.add_argument("--out", default="samples.csv")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a samples CSV")
    p.add_argument("samples")
    p.add_argument("--task", help="JSON task config (default: from --checkpoint, else the default task)")
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="eval")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sweep cfg_scale or steps")
    p.add_argument("checkpoint")
    p.add_argument("--axis", choices=("cfg_scale", "steps"), required=True)
    p.add_argument("--values", required=True, help="comma-separated list")
    _add_sampler_args(p)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="run the self-check suites")
    p.add_argument("--suite", action="append", help="run only the named suite(s)")
    p.add_argument("--mutate", action="append", choices=checks.MUTATIONS, help=argparse.SUPPRESS)
    p.add_argument("--out", help="optional JSON results file")
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, InputError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
