"""Closed-form Gaussian metrics and per-condition evaluation reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .oracles import bayes_classify

PSD_TOL = 1e-9


@dataclass(frozen=True)
class GaussianFit:
    mu: np.ndarray
    Sigma: np.ndarray

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


def gaussian(mu, Sigma) -> GaussianFit:
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.ndim == 0:
        Sigma = Sigma * np.eye(mu.shape[0])
    return GaussianFit(mu, Sigma)


def fit_gaussian(samples) -> GaussianFit:
    """Sample mean and unbiased (n - 1) covariance."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be 2-D (n, d)")
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} samples to fit a {d}-D Gaussian, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    return GaussianFit(mu, xc.T @ xc / (n - 1))


def _clamped_eigvalsh(S: np.ndarray, what: str) -> np.ndarray:
    if not np.allclose(S, S.T, atol=PSD_TOL, rtol=0):
        raise ValueError(f"{what} is not symmetric")
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    if ev.min() < -PSD_TOL:
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {ev.min():.3g})")
    return np.clip(ev, 0.0, None)


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    ev, vec = np.linalg.eigh(0.5 * (S + S.T))
    return (vec * np.sqrt(np.clip(ev, 0.0, None))) @ vec.T


def trace_sqrt_product(S1: np.ndarray, S2: np.ndarray) -> float:
    """Tr((S1 S2)^{1/2}) for PSD S1, S2."""
    _clamped_eigvalsh(S1, "Sigma1")
    _clamped_eigvalsh(S2, "Sigma2")
    if S1.shape == (2, 2):
        M = S1 @ S2
        det = max(float(np.linalg.det(M)), 0.0)
        return math.sqrt(max(float(np.trace(M)) + 2.0 * math.sqrt(det), 0.0))
    return trace_sqrt_product_eig(S1, S2)


def trace_sqrt_product_eig(S1: np.ndarray, S2: np.ndarray) -> float:
    """General path: eigenvalues of S2^{1/2} S1 S2^{1/2}."""
    r = _sqrtm_psd(S2)
    ev = _clamped_eigvalsh(r @ S1 @ r, "S2^1/2 S1 S2^1/2")
    return float(np.sqrt(ev).sum())


def frechet_gaussian(f1: GaussianFit, f2: GaussianFit) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})."""
    if f1.mu.shape != f2.mu.shape:
        raise ValueError("dimension mismatch")
    diff = f1.mu - f2.mu
    tr = float(np.trace(f1.Sigma) + np.trace(f2.Sigma)) - 2.0 * trace_sqrt_product(f1.Sigma, f2.Sigma)
    return max(float(diff @ diff) + tr, 0.0)


def kl_gaussian(f1: GaussianFit, f2: GaussianFit) -> float:
    """KL(N1 || N2) in closed form."""
    if f1.mu.shape != f2.mu.shape:
        raise ValueError("dimension mismatch")
    d = f1.dim
    s1, logdet1 = np.linalg.slogdet(f1.Sigma)
    s2, logdet2 = np.linalg.slogdet(f2.Sigma)
    if s2 <= 0 or not np.isfinite(logdet2):
        raise ValueError("Sigma2 is singular")
    if s1 <= 0 or not np.isfinite(logdet1):
        raise ValueError("Sigma1 is singular")
    inv2 = np.linalg.inv(f2.Sigma)
    diff = f2.mu - f1.mu
    val = 0.5 * (float(np.trace(inv2 @ f1.Sigma)) + float(diff @ inv2 @ diff) - d + logdet2 - logdet1)
    return max(val, 0.0)


def alignment_accuracy(samples, labels, task) -> float:
    """Fraction of samples the Bayes classifier assigns to their intended label."""
    labels = np.asarray(labels)
    x = np.asarray(samples)
    if len(labels) == 0 or len(x) == 0:
        raise ValueError("alignment accuracy of an empty sample set is undefined")
    if len(labels) != len(x):
        raise ValueError("need exactly one label per sample")
    if np.any(labels < 0) or np.any(labels >= task.K):
        raise ValueError("label out of range")
    return float(np.mean(bayes_classify(x, task) == labels))


def mode_coverage(samples, task) -> float:
    """Entropy (nats) of the Bayes-classifier label histogram."""
    counts = np.bincount(bayes_classify(samples, task), minlength=task.K).astype(np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


@dataclass
class ConditionRow:
    label: str
    n: int
    fd: float
    kl: float
    accuracy: float
    mean_err: float
    cov_err: float
    mode_coverage: float


@dataclass
class EvalReport:
    rows: list[ConditionRow]
    metadata: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> ConditionRow:
        return self.rows[-1]

    def per_condition(self) -> list[ConditionRow]:
        return self.rows[:-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(ConditionRow.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, k)) for k in names])
        return buf.getvalue()

    def to_json(self) -> str:
        # non-finite values (KL of a singular fit) become null so the JSON stays strict
        rows = [{k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in asdict(r).items()}
                for r in self.rows]
        return json.dumps({"metadata": self.metadata, "rows": rows}, indent=2, sort_keys=True,
                          default=_json_default, allow_nan=False)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o)}")


def evaluate_samples(samples, labels, task, metadata: dict | None = None) -> EvalReport:
    """Per-condition FD / KL / accuracy against the task's true class Gaussians.

    The last row aggregates by unweighted mean over conditions.
    """
    x = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    if np.any(labels < 0) or np.any(labels >= task.K):
        raise ValueError("label out of range")
    rows = []
    d = task.dim
    target_cov = task.sigma ** 2 * np.eye(d)
    for k in range(task.K):
        xs = x[labels == k]
        if len(xs) < d + 1:
            continue
        fit = fit_gaussian(xs)
        target = GaussianFit(task.mean_array[k], target_cov)
        try:
            kl = kl_gaussian(fit, target)
        except ValueError:
            kl = math.inf
        rows.append(ConditionRow(
            label=str(k), n=int(len(xs)),
            fd=frechet_gaussian(fit, target), kl=kl,
            accuracy=alignment_accuracy(xs, np.full(len(xs), k), task),
            mean_err=float(np.linalg.norm(fit.mu - target.mu)),
            cov_err=float(np.abs(fit.Sigma - target_cov).max()),
            mode_coverage=mode_coverage(xs, task),
        ))
    if not rows:
        raise ValueError("no condition has enough samples to evaluate")
    agg = ConditionRow(
        label="aggregate", n=sum(r.n for r in rows),
        **{k: float(np.mean([getattr(r, k) for r in rows]))
           for k in ("fd", "kl", "accuracy", "mean_err", "cov_err", "mode_coverage")},
    )
    return EvalReport(rows + [agg], dict(metadata or {}))
