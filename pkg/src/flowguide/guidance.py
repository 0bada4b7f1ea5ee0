"""EMA shadow weights, condition dropout, the guidance-scale warmup, and
inference-time CFG mixing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import null_condition
from .objectives import GuidanceConfig

# long-schedule decay; TrainConfig defaults to 0.999, which suits 20k-step runs
REFERENCE_EMA_DECAY = 0.9999


@dataclass
class EmaState:
    shadow: dict[str, np.ndarray]
    decay: float
    step: int = 0

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"EMA decay must lie in [0, 1], got {self.decay}")


def ema_init(params: dict[str, np.ndarray], decay: float) -> EmaState:
    return EmaState({k: np.array(v, copy=True) for k, v in params.items()}, decay, 0)


def ema_update(ema: EmaState, params: dict[str, np.ndarray]) -> EmaState:
    """shadow <- decay * shadow + (1 - decay) * params, elementwise."""
    if ema.shadow.keys() != params.keys():
        raise ValueError("EMA shadow and params have different names")
    d = ema.decay
    new = {}
    for k, s in ema.shadow.items():
        p = params[k]
        if p.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {s.shape} vs {p.shape}")
        new[k] = d * s + (1.0 - d) * p
    return EmaState(new, d, ema.step + 1)


def drop_condition(v: np.ndarray, psi: float, rng: np.random.Generator) -> np.ndarray:
    """Replace ``v`` by the null condition with probability ``psi``.

    Consumes exactly one uniform variate.
    """
    if not 0.0 <= psi <= 1.0:
        raise ValueError("psi must lie in [0, 1]")
    if rng.random() < psi:
        return null_condition(np.shape(v)[-1]).astype(np.asarray(v).dtype)
    return v


def drop_condition_batch(v: np.ndarray, psi: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`drop_condition`; one uniform per row. Returns (conditions, dropped mask)."""
    if not 0.0 <= psi <= 1.0:
        raise ValueError("psi must lie in [0, 1]")
    dropped = rng.random(v.shape[0]) < psi
    return np.where(dropped[:, None], np.zeros_like(v), v), dropped


def effective_w(step: int, config: GuidanceConfig) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return 0.0 if step < config.warmup_steps else config.w


def cfg_combine(u_cond, u_uncond, s: float):
    """u_uncond + s * (u_cond - u_uncond). Exactly ``u_cond`` when s == 1."""
    if not s >= 0:
        raise ValueError("cfg scale must be >= 0")
    if np.shape(u_cond) != np.shape(u_uncond):
        raise ValueError("conditional and unconditional predictions differ in shape")
    if s == 1:
        return u_cond
    return u_uncond + s * (u_cond - u_uncond)
