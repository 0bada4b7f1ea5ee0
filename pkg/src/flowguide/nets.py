"""Velocity networks u(x_t, v, t).

Both architectures inject the condition only through AdaLN modulation: a
small MLP maps concat(time_embed(t), v) to a conditioning vector, and every
block turns that vector into (shift, scale, gate) with a zero-initialised
linear map. The output projection is zero-initialised as well, so a fresh
network predicts exactly zero everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

ARCHS = ("mlp", "adaln_transformer")

# time is in [0, 1]; scale it up so the sinusoid frequencies look like the
# usual integer-timestep embedding
TIME_SCALE = 1000.0
MAX_PERIOD = 10000.0


@dataclass(frozen=True)
class VelocityNetConfig:
    arch: str = "mlp"
    depth: int = 4
    width: int = 128
    heads: int = 4
    data_dim: int = 2
    cond_dim: int = 8
    time_embed_dim: int = 32
    # width of the conditioning vector that feeds every AdaLN modulation
    cond_width: int = 64
    # the data vector is cut into this many equal patches; the transformer
    # uses them as tokens, and the alignment loss compares per patch
    patches: int = 1

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHS}")
        for name in ("depth", "width", "heads", "data_dim", "cond_dim", "time_embed_dim", "cond_width",
                     "patches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if self.data_dim % self.patches:
            raise ValueError("data_dim must be divisible by patches")
        if self.arch == "mlp" and self.width % self.patches:
            raise ValueError("width must be divisible by patches for the mlp tap")

    @property
    def patch_dim(self) -> int:
        return self.data_dim // self.patches

    @property
    def hidden_patch_dim(self) -> int:
        """Width of one hidden patch as seen by the alignment projector."""
        return self.width if self.arch == "adaln_transformer" else self.width // self.patches


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t``: sines in the first half, cosines in the second.

    Frequency k (0-based, of ``dim // 2``) is ``TIME_SCALE * MAX_PERIOD ** (-k / (dim // 2))``.
    A scalar ``t`` gives shape ``(dim,)``; a vector gives ``(len(t), dim)``.
    """
    if dim % 2:
        raise ValueError("time embedding dimension must be even")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    half = dim // 2
    freqs = TIME_SCALE * MAX_PERIOD ** (-np.arange(half, dtype=np.float64) / half)
    args = t_arr[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


def null_condition(cond_dim: int) -> np.ndarray:
    if cond_dim < 1:
        raise ValueError("cond_dim must be >= 1")
    return np.zeros(cond_dim, dtype=np.float32)


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    return (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(dtype)


def _sincos_positions(n: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = MAX_PERIOD ** (-np.arange(half, dtype=np.float64) / max(half, 1))
    args = np.arange(n, dtype=np.float64)[:, None] * freqs
    pos = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if pos.shape[1] < dim:
        pos = np.pad(pos, ((0, 0), (0, dim - pos.shape[1])))
    return pos


class VelocityNet:
    """Parameter layout and forward pass for one :class:`VelocityNetConfig`.

    Parameters live in a plain ``dict[str, ndarray]``; ``forward`` wraps
    whatever it is given, so passing Tensors with ``requires_grad`` builds a
    graph and passing arrays evaluates without one.
    """

    def __init__(self, config: VelocityNetConfig):
        self.config = config
        self._mods_per_block = 3 if config.arch == "mlp" else 6
        self._pos = _sincos_positions(config.patches, config.width)

    # -- parameters -------------------------------------------------------
    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        c = self.config
        w = c.width
        p: dict[str, np.ndarray] = {}
        cin = c.time_embed_dim + c.cond_dim
        cw = c.cond_width
        p["cond.w1"] = _linear_init(rng, cin, cw, dtype)
        p["cond.b1"] = np.zeros(cw, dtype)
        p["cond.w2"] = _linear_init(rng, cw, cw, dtype)
        p["cond.b2"] = np.zeros(cw, dtype)
        in_dim = c.data_dim if c.arch == "mlp" else c.patch_dim
        p["in.w"] = _linear_init(rng, in_dim, w, dtype)
        p["in.b"] = np.zeros(w, dtype)
        # every block's (shift, scale, gate) plus the final layer's (shift, scale)
        # come from one zero-initialised map of the conditioning vector
        n_mod = (c.depth * self._mods_per_block + 2) * w
        p["adaln.w"] = np.zeros((cw, n_mod), dtype)
        p["adaln.b"] = np.zeros(n_mod, dtype)
        for i in range(c.depth):
            pre = f"block{i}."
            if c.arch == "mlp":
                p[pre + "fc1.w"] = _linear_init(rng, w, w, dtype)
                p[pre + "fc1.b"] = np.zeros(w, dtype)
                p[pre + "fc2.w"] = _linear_init(rng, w, w, dtype)
                p[pre + "fc2.b"] = np.zeros(w, dtype)
            else:
                p[pre + "qkv.w"] = _linear_init(rng, w, 3 * w, dtype)
                p[pre + "qkv.b"] = np.zeros(3 * w, dtype)
                p[pre + "proj.w"] = _linear_init(rng, w, w, dtype)
                p[pre + "proj.b"] = np.zeros(w, dtype)
                p[pre + "fc1.w"] = _linear_init(rng, w, 4 * w, dtype)
                p[pre + "fc1.b"] = np.zeros(4 * w, dtype)
                p[pre + "fc2.w"] = _linear_init(rng, 4 * w, w, dtype)
                p[pre + "fc2.b"] = np.zeros(w, dtype)
        out_dim = c.data_dim if c.arch == "mlp" else c.patch_dim
        p["out.w"] = np.zeros((w, out_dim), dtype)
        p["out.b"] = np.zeros(out_dim, dtype)
        return p

    # -- forward ----------------------------------------------------------
    def forward(self, params: Mapping[str, Tensor | np.ndarray], x_t, v, t,
                tap_layer: int | None = None):
        """Predict the velocity at ``x_t``.

        ``x_t`` is ``(B, data_dim)``; ``v`` is ``(cond_dim,)`` or
        ``(B, cond_dim)``; ``t`` is a scalar or ``(B,)``. With ``tap_layer``
        set, also returns the hidden patches after that many blocks, shaped
        ``(B, patches, hidden_patch_dim)``.
        """
        c = self.config
        P = {k: (val if isinstance(val, Tensor) else Tensor(val)) for k, val in params.items()}
        dtype = P["in.w"].dtype
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=dtype))
        if x.ndim != 2 or x.shape[1] != c.data_dim:
            raise ValueError(f"x_t must have shape (B, {c.data_dim}), got {x.shape}")
        B = x.shape[0]
        v_arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=dtype)
        if v_arr.ndim == 1:
            v_arr = np.broadcast_to(v_arr, (B, v_arr.shape[0]))
        if v_arr.shape != (B, c.cond_dim):
            raise ValueError(f"condition must have shape ({B}, {c.cond_dim}), got {v_arr.shape}")
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            t_arr = np.full(B, float(t_arr))
        if t_arr.shape != (B,):
            raise ValueError(f"t must be a scalar or shape ({B},), got {t_arr.shape}")
        if tap_layer is not None and not 1 <= tap_layer <= c.depth:
            raise ValueError(f"tap_layer must be in [1, {c.depth}]")

        cond_in = Tensor(np.concatenate([time_embed(t_arr, c.time_embed_dim).astype(dtype), v_arr], axis=1))
        cond = tc.gelu(cond_in @ P["cond.w1"] + P["cond.b1"]) @ P["cond.w2"] + P["cond.b2"]
        mods = tc.gelu(cond) @ P["adaln.w"] + P["adaln.b"]

        if c.arch == "mlp":
            u, hidden = self._mlp_trunk(P, x, mods, tap_layer)
        else:
            u, hidden = self._transformer_trunk(P, x, mods, tap_layer)
        if tap_layer is None:
            return u
        return u, hidden

    def _mlp_trunk(self, P, x, mods, tap_layer):
        c = self.config
        w = c.width
        h = x @ P["in.w"] + P["in.b"]
        hidden = None
        for i in range(c.depth):
            pre = f"block{i}."
            o = 3 * w * i
            shift, scale, gate = mods[:, o:o + w], mods[:, o + w:o + 2 * w], mods[:, o + 2 * w:o + 3 * w]
            y = tc.layer_norm(h) * (scale + 1.0) + shift
            y = tc.gelu(y @ P[pre + "fc1.w"] + P[pre + "fc1.b"]) @ P[pre + "fc2.w"] + P[pre + "fc2.b"]
            h = h + gate * y
            if tap_layer == i + 1:
                hidden = h.reshape(h.shape[0], c.patches, w // c.patches)
        o = 3 * w * c.depth
        y = tc.layer_norm(h) * (mods[:, o + w:o + 2 * w] + 1.0) + mods[:, o:o + w]
        return y @ P["out.w"] + P["out.b"], hidden

    def _transformer_trunk(self, P, x, mods, tap_layer):
        c = self.config
        w, n, nh = c.width, c.patches, c.heads
        dh = w // nh
        B = x.shape[0]
        tokens = x.reshape(B, n, c.patch_dim)
        h = tokens @ P["in.w"] + P["in.b"] + Tensor(self._pos.astype(x.dtype))
        hidden = None
        inv_sqrt = 1.0 / math.sqrt(dh)
        mods = mods.reshape(B, 1, mods.shape[1])
        for i in range(c.depth):
            pre = f"block{i}."
            mod = mods[:, :, 6 * w * i:6 * w * (i + 1)]
            sh_a, sc_a, g_a = mod[:, :, :w], mod[:, :, w:2 * w], mod[:, :, 2 * w:3 * w]
            sh_m, sc_m, g_m = mod[:, :, 3 * w:4 * w], mod[:, :, 4 * w:5 * w], mod[:, :, 5 * w:]

            y = tc.layer_norm(h) * (sc_a + 1.0) + sh_a
            qkv = (y @ P[pre + "qkv.w"] + P[pre + "qkv.b"]).reshape(B, n, 3, nh, dh)
            qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, heads, n, dh)
            q, k, v = qkv[0], qkv[1], qkv[2]
            attn = tc.softmax((q @ k.transpose(0, 1, 3, 2)) * inv_sqrt, axis=-1)
            y = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n, w)
            y = y @ P[pre + "proj.w"] + P[pre + "proj.b"]
            h = h + g_a * y

            y = tc.layer_norm(h) * (sc_m + 1.0) + sh_m
            y = tc.gelu(y @ P[pre + "fc1.w"] + P[pre + "fc1.b"]) @ P[pre + "fc2.w"] + P[pre + "fc2.b"]
            h = h + g_m * y
            if tap_layer == i + 1:
                hidden = h
        o = 6 * w * c.depth
        y = tc.layer_norm(h) * (mods[:, :, o + w:o + 2 * w] + 1.0) + mods[:, :, o:o + w]
        out = y @ P["out.w"] + P["out.b"]
        return out.reshape(B, c.data_dim), hidden
