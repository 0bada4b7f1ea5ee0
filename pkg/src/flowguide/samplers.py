"""Euler (ODE) and Euler-Maruyama (SDE) samplers running from noise at t=1
to data at t=0.

Sign convention: the network predicts u = x0 - eps, which points from noise
towards data, while d x_t / dt = eps - x0 = -u. Stepping backwards in time by
dt therefore gives x <- x + dt * u.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .guidance import cfg_combine
from .nets import VelocityNet, null_condition

SAMPLER_KINDS = ("euler", "euler_maruyama")

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "euler_maruyama"
    steps: int = 50
    cfg_scale: float = 1.45
    # diffusion coefficient g(t) = diffusion_scale * t; ignored by euler
    diffusion_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler {self.kind!r}, expected one of {SAMPLER_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.cfg_scale >= 0:
            raise ValueError("cfg_scale must be >= 0")
        if not self.diffusion_scale >= 0:
            raise ValueError("diffusion_scale must be >= 0")

    def diffusion(self) -> Callable[[float], float]:
        if self.kind == "euler":
            return lambda t: 0.0
        scale = self.diffusion_scale
        return lambda t: scale * t


def _time_grid(steps: int) -> np.ndarray:
    return 1.0 - np.arange(steps) / steps


def _check(x: np.ndarray, i: int) -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite state at sampler step {i}")


def euler_sample(velocity_fn: VelocityFn, x1: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dx = u dt' (t' = 1 - t) on a uniform grid from t=1 to t=0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x1, copy=True)
    _check(x, 0)
    dt = x.dtype.type(1.0 / steps) if x.dtype.kind == "f" else 1.0 / steps
    for i, t in enumerate(_time_grid(steps)):
        x = x + dt * velocity_fn(x, float(t))
        _check(x, i + 1)
    return x


def interpolant_score(x: np.ndarray, t: float, u: np.ndarray) -> np.ndarray:
    """Score of the interpolant marginal implied by the velocity.

    From x_t = (1-t) x0 + t eps and u = E[x0 - eps | x_t]:
    E[eps | x_t] = x_t - (1-t) u, and score = -E[eps | x_t] / t.
    Exact when u is the true conditional expectation (e.g. the Gaussian oracle).
    """
    if t <= 0:
        raise ValueError("score is undefined at t = 0")
    return -(x - (1.0 - t) * u) / t


def euler_maruyama_sample(velocity_fn: VelocityFn, x1: np.ndarray, steps: int,
                          g: Callable[[float], float], rng: np.random.Generator,
                          score_proxy: Callable[[np.ndarray, float, np.ndarray], np.ndarray] | None = None,
                          ) -> np.ndarray:
    """Reverse-time SDE with the same marginals as the flow ODE.

    Step from t to t - dt:
        x <- x + dt * (u + g(t)^2 / 2 * score) + g(t) * sqrt(dt) * xi
    With g == 0 this is exactly :func:`euler_sample`.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    score_proxy = interpolant_score if score_proxy is None else score_proxy
    x = np.array(x1, copy=True)
    _check(x, 0)
    dtype = x.dtype.type
    dt = 1.0 / steps
    sqrt_dt = np.sqrt(dt)
    for i, t in enumerate(_time_grid(steps)):
        t = float(t)
        gt = g(t)
        if gt < 0:
            raise ValueError(f"diffusion coefficient negative at t={t}")
        u = velocity_fn(x, t)
        nxt = x + dtype(dt) * u
        if gt > 0:
            score = score_proxy(x, t, u)
            noise = rng.standard_normal(x.shape).astype(x.dtype)
            nxt = nxt + dtype(dt * 0.5 * gt * gt) * score + dtype(gt * sqrt_dt) * noise
        x = nxt
        _check(x, i + 1)
    return x


class GuidedVelocity:
    """CFG-mixed network velocity with a forward-evaluation counter.

    At ``cfg_scale == 1`` only the conditional branch is evaluated.
    """

    def __init__(self, net: VelocityNet, params, cond: np.ndarray, cfg_scale: float):
        if not cfg_scale >= 0:
            raise ValueError("cfg_scale must be >= 0")
        self.net = net
        self.params = params
        self.cond = cond
        self.cfg_scale = cfg_scale
        self.null = null_condition(net.config.cond_dim)
        self.nfe = 0

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        s = self.cfg_scale
        if s == 0:
            self.nfe += 1
            return self._eval(x, self.null, t)
        u_cond = self._eval(x, self.cond, t)
        self.nfe += 1
        if s == 1:
            return u_cond
        u_uncond = self._eval(x, self.null, t)
        self.nfe += 1
        return cfg_combine(u_cond, u_uncond, s)

    def _eval(self, x, v, t):
        return self.net.forward(self.params, x, v, t).data


def guided_velocity(net: VelocityNet, params, x, t, v, s) -> np.ndarray:
    return GuidedVelocity(net, params, v, s)(x, t)


def sample(velocity_fn: VelocityFn, x1: np.ndarray, config: SamplerConfig,
           rng: np.random.Generator | None = None) -> np.ndarray:
    if config.kind == "euler":
        return euler_sample(velocity_fn, x1, config.steps)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    return euler_maruyama_sample(velocity_fn, x1, config.steps, config.diffusion(), rng)


def sample_model(net: VelocityNet, params, conditions: np.ndarray, config: SamplerConfig,
                 seed: int | None = None) -> tuple[np.ndarray, int]:
    """Draw one sample per row of ``conditions``. Returns (samples, NFE)."""
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    dtype = next(iter(params.values())).dtype
    x1 = rng.standard_normal((conditions.shape[0], net.config.data_dim)).astype(dtype)
    fn = GuidedVelocity(net, params, conditions.astype(dtype), config.cfg_scale)
    out = sample(fn, x1, config, rng)
    return out, fn.nfe
