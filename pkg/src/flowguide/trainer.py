"""Training loop: model-guided flow matching plus alignment, AdamW, EMA,
and the single-file checkpoint format."""
from __future__ import annotations

import copy
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .guidance import EmaState, drop_condition_batch, effective_w, ema_init, ema_update
from .nets import VelocityNet, VelocityNetConfig, null_condition
from .objectives import (AlignConfig, GuidanceConfig, Projector, align_loss, amg_loss, amg_target,
                         fm_loss, interpolate, total_loss)
from .oracles import FrozenDualEncoder, encode_signal, encoder_for, sample_batch
from .tensor_core import Tensor

log = logging.getLogger(__name__)

OBJECTIVES = ("amg", "fm_cfg_baseline")
FORMAT_VERSION = 1
MAGIC = b"FLOWGCK\x00"


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "amg"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 64
    total_steps: int = 20000
    seed: int = 0
    ema_decay: float = 0.999
    eval_every: int = 0
    checkpoint_every: int = 0
    net: VelocityNetConfig = field(default_factory=VelocityNetConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    align: AlignConfig = field(default_factory=AlignConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must lie in [0, 1)")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        self.align.resolve_tap(self.net.depth)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adam_init(params: dict[str, np.ndarray]) -> OptimizerState:
    return OptimizerState({k: np.zeros_like(p) for k, p in params.items()},
                          {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], opt: OptimizerState,
               lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0, eps: float = 1e-8,
               ) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Bias-corrected Adam with decoupled weight decay (applied before the moment update).

    p <- p * (1 - lr * wd)
    m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
    p <- p - (lr / c1) * m / (sqrt(v) / sqrt(c2) + eps),  c_i = 1 - b_i^step

    Moment buffers in ``opt`` are updated in place; params are returned as new arrays.
    """
    b1, b2 = betas
    step = opt.step + 1
    step_size = lr / (1.0 - b1 ** step)
    inv_sqrt_c2 = 1.0 / np.sqrt(1.0 - b2 ** step)
    new_p = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not np.isfinite(g).all():
            raise tc.NonFiniteError(f"non-finite gradient for {k}")
        if weight_decay:
            p = p * (1.0 - lr * weight_decay)
        m, v = opt.m[k], opt.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v)
        denom *= inv_sqrt_c2
        denom += eps
        upd = m / denom
        upd *= step_size
        new_p[k] = p - upd
    opt.step = step
    return new_p, opt


@dataclass
class TrainState:
    config: TrainConfig
    params: dict[str, np.ndarray]
    ema: EmaState
    opt: OptimizerState
    rng: np.random.Generator
    step: int = 0


@dataclass
class StepLosses:
    total: float
    amg: float
    align: float


class Trainer:
    """Holds the network, projector and frozen encoder for one config/task pair."""

    def __init__(self, config: TrainConfig, task, encoder: FrozenDualEncoder | None = None):
        if config.net.data_dim != task.dim or config.net.cond_dim != task.cond_dim:
            raise ValueError("network data_dim / cond_dim do not match the task")
        self.config = config
        self.task = task
        self.net = VelocityNet(config.net)
        self.encoder = encoder or encoder_for(task, config.net.patches, config.align.feature_dim)
        self.tap = config.align.resolve_tap(config.net.depth)
        self.projector = Projector(config.net.hidden_patch_dim, config.align.projector_hidden,
                                   self.encoder.feature_dim)
        self.null = null_condition(task.cond_dim)

    def init_state(self) -> TrainState:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        init_rng = np.random.default_rng([cfg.seed, 1])
        params = self.net.init_params(init_rng)
        params.update(self.projector.init_params(init_rng))
        return TrainState(cfg, params, ema_init(params, cfg.ema_decay), adam_init(params), rng, 0)

    def train_step(self, state: TrainState) -> StepLosses:
        """One optimisation step; mutates ``state`` in place."""
        cfg = self.config
        rng = state.rng
        B = cfg.batch_size
        x0, _, emb = sample_batch(self.task, self.encoder, rng, B)
        t = rng.random(B).astype(np.float32)
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        s = interpolate(x0, eps, t)
        v_online, _ = drop_condition_batch(emb, cfg.guidance.psi, rng)

        w = effective_w(state.step, cfg.guidance) if cfg.objective == "amg" else 0.0
        if w > 0:
            # both EMA branches every step: true condition and null, same x_t and t
            both = self.net.forward(state.ema.shadow, np.concatenate([s.x_t, s.x_t]),
                                    np.concatenate([emb, np.zeros_like(emb)]), np.concatenate([t, t]))
            u_cond, u_uncond = both.data[:B], both.data[B:]
            target = amg_target(s.u, tc.stop_gradient(u_cond), tc.stop_gradient(u_uncond), w,
                                cfg.guidance.variant)
        else:
            target = s.u

        P = {k: Tensor(p, requires_grad=True) for k, p in state.params.items()}
        lam = cfg.align.lam
        if lam > 0:
            u_hat, hidden = self.net.forward(P, s.x_t, v_online, t, tap_layer=self.tap)
            g0 = encode_signal(self.encoder, x0)
            al = align_loss(g0, hidden, self.projector.bind(P))
        else:
            u_hat = self.net.forward(P, s.x_t, v_online, t)
            al = None
        main = amg_loss(u_hat, target) if cfg.objective == "amg" else fm_loss(u_hat, target)
        loss = total_loss(main, al, lam) if al is not None else main
        if not np.isfinite(loss.data).all():
            raise tc.NonFiniteError(f"non-finite loss at step {state.step}")

        names = list(P)
        grads = tc.backward(loss, [P[k] for k in names])
        state.params, state.opt = adamw_step(state.params, dict(zip(names, grads)), state.opt,
                                             cfg.lr, cfg.betas, cfg.weight_decay, cfg.adam_eps)
        state.ema = ema_update(state.ema, state.params)
        state.step += 1
        return StepLosses(float(loss.data), float(main.data), float(al.data) if al is not None else 0.0)


def train(config: TrainConfig, task, state: TrainState | None = None, steps: int | None = None,
          on_step: Callable[[TrainState, StepLosses], None] | None = None,
          on_eval: Callable[[TrainState], None] | None = None,
          on_checkpoint: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run up to ``config.total_steps`` (or ``steps`` more) optimisation steps."""
    trainer = Trainer(config, task)
    state = trainer.init_state() if state is None else state
    end = config.total_steps if steps is None else state.step + steps
    while state.step < end:
        losses = trainer.train_step(state)
        if on_step is not None:
            on_step(state, losses)
        if on_eval is not None and config.eval_every and state.step % config.eval_every == 0:
            on_eval(state)
        if on_checkpoint is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def config_to_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    return d


def config_from_dict(d: dict) -> TrainConfig:
    from .config import build_dataclass
    return build_dataclass(TrainConfig, d)


def _tensor_sections(state: TrainState) -> list[tuple[str, np.ndarray]]:
    out = []
    for k in sorted(state.params):
        out.append(("params/" + k, state.params[k]))
    for k in sorted(state.ema.shadow):
        out.append(("ema/" + k, state.ema.shadow[k]))
    for k in sorted(state.opt.m):
        out.append(("adam_m/" + k, state.opt.m[k]))
    for k in sorted(state.opt.v):
        out.append(("adam_v/" + k, state.opt.v[k]))
    return out


def save_checkpoint(state: TrainState, path: str, task: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write one file: magic, manifest length, JSON manifest, raw float32 LE payloads."""
    directory, offset, blobs = [], 0, []
    for name, arr in _tensor_sections(state):
        if arr.dtype != np.float32:
            raise CheckpointError(f"{name} is {arr.dtype}; checkpoints store float32")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(state.config),
        "step": state.step,
        "ema_step": state.ema.step,
        "opt_step": state.opt.step,
        "rng_state": state.rng.bit_generator.state,
        "tensors": directory,
        "task": task,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)
    _atomic_write(path, payload)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str) -> tuple[dict, bytes]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(blob) < start + hlen:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(blob[start:start + hlen].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format_version {manifest.get('format_version')} "
                              f"is not supported (expected {FORMAT_VERSION})")
    return manifest, blob[start + hlen:]


def load_checkpoint(path: str) -> TrainState:
    manifest, body = read_manifest(path)
    config = config_from_dict(manifest["config"])
    tensors = {}
    for entry in manifest["tensors"]:
        lo, n = entry["offset"], entry["length"]
        if lo + n > len(body):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        shape = tuple(entry["shape"])
        arr = np.frombuffer(body, dtype="<f4", count=n // 4, offset=lo).astype(np.float32)
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: {entry['name']} length does not match shape {shape}")
        tensors[entry["name"]] = arr.reshape(shape)

    def section(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    params = section("params/")
    shapes = expected_shapes(config)
    for prefix in ("params/", "ema/", "adam_m/", "adam_v/"):
        got = {k: v.shape for k, v in section(prefix).items()}
        if got != shapes:
            raise CheckpointError(f"{path}: {prefix[:-1]} tensors do not match the configured network")
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    ema = EmaState(section("ema/"), config.ema_decay, manifest["ema_step"])
    opt = OptimizerState(section("adam_m/"), section("adam_v/"), manifest["opt_step"])
    return TrainState(config, params, ema, opt, rng, manifest["step"])


def expected_shapes(config: TrainConfig) -> dict[str, tuple[int, ...]]:
    rng = np.random.default_rng(0)
    net = VelocityNet(config.net)
    shapes = {k: v.shape for k, v in net.init_params(rng).items()}
    feat = config.align.feature_dim or config.net.patch_dim
    proj = Projector(config.net.hidden_patch_dim, config.align.projector_hidden, feat)
    shapes.update({k: v.shape for k, v in proj.init_params(rng).items()})
    return shapes


def copy_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)
