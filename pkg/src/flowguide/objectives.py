"""Interpolant, flow-matching / model-guided regression losses, and the
representation alignment loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

VARIANTS = ("appendix", "main_text")
DEFAULT_W = 1.45
DEFAULT_LAMBDA = 0.5
LAMBDA_GRID = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = DEFAULT_W
    psi: float = 0.1
    warmup_steps: int = 1000
    variant: str = "appendix"
    cfg_scale: float = 1.45

    def __post_init__(self):
        if not self.w >= 0:
            raise ValueError(f"guidance scale w must be >= 0, got {self.w}")
        if not 0.0 <= self.psi <= 1.0:
            raise ValueError(f"psi must lie in [0, 1], got {self.psi}")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not self.cfg_scale >= 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass(frozen=True)
class AlignConfig:
    lam: float = DEFAULT_LAMBDA
    # None -> depth // 2 (at least 1)
    tap_layer: int | None = None
    projector_hidden: int = 64
    # width of each G0 patch; None -> patch_dim of the data
    feature_dim: int | None = None

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.tap_layer is not None and self.tap_layer < 1:
            raise ValueError("tap_layer must be >= 1")
        if self.projector_hidden < 1:
            raise ValueError("projector_hidden must be >= 1")

    def resolve_tap(self, depth: int) -> int:
        tap = self.tap_layer if self.tap_layer is not None else max(1, depth // 2)
        if tap > depth:
            raise ValueError(f"tap_layer {tap} exceeds network depth {depth}")
        return tap


@dataclass(frozen=True)
class InterpolantSample:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    u: np.ndarray


def interpolate(x0, eps, t) -> InterpolantSample:
    """x_t = (1 - t) x0 + t eps with target flow u = x0 - eps.

    ``t`` may be a scalar or one value per row of ``x0``.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 and eps shapes differ: {x0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=x0.dtype if x0.dtype.kind == "f" else np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    tb = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim)) if t.ndim else t
    x_t = (1 - tb) * x0 + tb * eps
    return InterpolantSample(x0=x0, eps=eps, t=t, x_t=x_t, u=x0 - eps)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def fm_loss(u_hat, u) -> Tensor:
    """Mean squared error over every element of the batch."""
    u_hat = _as_tensor(u_hat)
    u = _as_tensor(u, u_hat)
    if u_hat.shape != u.shape:
        raise ValueError(f"shape mismatch: {u_hat.shape} vs {u.shape}")
    d = u_hat - u
    return (d * d).mean()


def amg_target(u, u_cond_ema, u_uncond_ema, w: float, variant: str = "appendix") -> Tensor:
    """Model-guided regression target u'.

    appendix:  u + w * sg(u_cond - u_uncond)
    main_text: u + w * sg(u_cond) - sg(u_uncond)

    The result is a constant: nothing upstream of it receives a gradient.
    """
    if not w >= 0:
        raise ValueError(f"guidance scale must be >= 0, got {w}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    u_t = tc.stop_gradient(_as_tensor(u))
    uc = tc.stop_gradient(_as_tensor(u_cond_ema, u_t))
    uu = tc.stop_gradient(_as_tensor(u_uncond_ema, u_t))
    if not (u_t.shape == uc.shape == uu.shape):
        raise ValueError("u, u_cond and u_uncond must share a shape")
    if variant == "appendix":
        out = u_t.data + w * (uc.data - uu.data)
    else:
        out = u_t.data + w * uc.data - uu.data
    return Tensor(out)


def amg_loss(u_theta_cond, u_prime) -> Tensor:
    return fm_loss(u_theta_cond, u_prime)


class Projector:
    """Two-layer MLP h_phi mapping hidden patches to feature space."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, prefix: str = "proj."):
        self.in_dim, self.hidden, self.out_dim = in_dim, hidden, out_dim
        self.prefix = prefix

    def init_params(self, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
        p = self.prefix
        return {
            p + "w1": (rng.standard_normal((self.in_dim, self.hidden)) / math.sqrt(self.in_dim)).astype(dtype),
            p + "b1": np.zeros(self.hidden, dtype),
            p + "w2": (rng.standard_normal((self.hidden, self.out_dim)) / math.sqrt(self.hidden)).astype(dtype),
            p + "b2": np.zeros(self.out_dim, dtype),
        }

    def bind(self, params) -> Callable[[Tensor], Tensor]:
        p = self.prefix
        P = {k: (params[k] if isinstance(params[k], Tensor) else Tensor(params[k]))
             for k in (p + "w1", p + "b1", p + "w2", p + "b2")}

        def apply(h: Tensor) -> Tensor:
            return tc.gelu(h @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]

        return apply


def _norm(x: Tensor) -> Tensor:
    return tc.power((x * x).sum(axis=-1), 0.5)


def align_loss(g0, hidden, projector: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """Negative mean cosine similarity between target patches and projected hidden patches.

    ``g0`` is ``(..., d)`` and treated as fixed; ``hidden`` is ``(..., k)`` with
    the same leading shape. Gradients reach the projector and ``hidden`` only.
    """
    h = hidden if isinstance(hidden, Tensor) else Tensor(hidden)
    g = tc.stop_gradient(_as_tensor(g0, h))
    proj = projector(h) if projector is not None else h
    if proj.shape != g.shape:
        raise ValueError(f"projected hidden {proj.shape} does not match targets {g.shape}")
    g_norm = np.sqrt((g.data * g.data).sum(axis=-1))
    if np.any(g_norm == 0):
        raise ValueError("zero-norm target patch in alignment loss")
    p_norm = _norm(proj)
    if np.any(p_norm.data == 0):
        raise ValueError("zero-norm projected patch in alignment loss")
    cos = (g * proj).sum(axis=-1) / (p_norm * Tensor(g_norm.astype(proj.dtype)))
    return -cos.mean()


def total_loss(amg, align, lam: float):
    if not lam >= 0:
        raise ValueError("lambda must be >= 0")
    return amg + lam * align
