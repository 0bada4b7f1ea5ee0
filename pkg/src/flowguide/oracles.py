"""Synthetic conditional tasks with closed-form answers.

The Gaussian task has K classes, each an isotropic Gaussian; for a single
Gaussian the population minimiser of the flow-matching loss is linear in x
and known exactly (:func:`oracle_velocity`). The frozen dual encoder supplies
both the condition embeddings and the fixed alignment targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ConditionalGaussianTask:
    means: tuple[tuple[float, ...], ...] = ((3.0, 3.0), (3.0, -3.0), (-3.0, 3.0), (-3.0, -3.0))
    sigma: float = 0.5
    cond_dim: int = 8
    encoder_seed: int = 0
    kind: str = "gaussian"

    def __post_init__(self):
        m = np.asarray(self.means, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError("means must be a non-empty list of equal-length vectors")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.cond_dim < 1:
            raise ValueError("cond_dim must be >= 1")
        for i in range(len(m)):
            for j in range(i):
                if np.array_equal(m[i], m[j]):
                    raise ValueError(f"means {j} and {i} coincide")

    @property
    def K(self) -> int:
        return len(self.means)

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def mean_array(self) -> np.ndarray:
        return np.asarray(self.means, dtype=np.float64)


def default_task() -> ConditionalGaussianTask:
    return ConditionalGaussianTask()


@dataclass(frozen=True)
class CheckerboardTask:
    """2-D checkerboard with one condition per occupied cell colour.

    Only for qualitative sampling; no closed-form metrics are attached.
    """
    cells: int = 4
    extent: float = 4.0
    K: int = 2
    cond_dim: int = 8
    encoder_seed: int = 0
    kind: str = "checkerboard"

    @property
    def dim(self) -> int:
        return 2


@dataclass
class FrozenDualEncoder:
    """Condition codebook plus an orthonormal-row map from data patches to targets."""
    cond_codebook: np.ndarray
    signal_map: np.ndarray
    patch_count: int
    seed: int
    _frozen: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.cond_codebook.setflags(write=False)
        self.signal_map.setflags(write=False)
        self._frozen = True

    @classmethod
    def build(cls, K: int, cond_dim: int, data_dim: int, patch_count: int = 1,
              feature_dim: int | None = None, seed: int = 0) -> "FrozenDualEncoder":
        if data_dim % patch_count:
            raise ValueError("data_dim must be divisible by patch_count")
        patch_dim = data_dim // patch_count
        feature_dim = patch_dim if feature_dim is None else feature_dim
        if not 1 <= feature_dim <= patch_dim:
            raise ValueError("feature_dim must be in [1, patch_dim] for orthonormal rows")
        rng = np.random.default_rng(seed)
        codebook = rng.standard_normal((K, cond_dim))
        q, r = np.linalg.qr(rng.standard_normal((patch_dim, patch_dim)))
        q = q * np.sign(np.diag(r))
        return cls(codebook.astype(np.float32), np.ascontiguousarray(q[:feature_dim]), patch_count, seed)

    @property
    def K(self) -> int:
        return self.cond_codebook.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.signal_map.shape[0]


def encoder_for(task, patch_count: int = 1, feature_dim: int | None = None) -> FrozenDualEncoder:
    return FrozenDualEncoder.build(task.K, task.cond_dim, task.dim, patch_count, feature_dim,
                                   task.encoder_seed)


def encode_condition(encoder: FrozenDualEncoder, label) -> np.ndarray:
    label = np.asarray(label)
    if np.any(label < 0) or np.any(label >= encoder.K):
        raise ValueError(f"label out of range for K={encoder.K}")
    return encoder.cond_codebook[label]


def encode_signal(encoder: FrozenDualEncoder, x0) -> np.ndarray:
    """Split each row of ``x0`` into patches and map each through ``signal_map``.

    Returns ``(B, patch_count, feature_dim)``.
    """
    x0 = np.asarray(x0)
    B, d = x0.shape
    patches = x0.reshape(B, encoder.patch_count, d // encoder.patch_count)
    return (patches @ encoder.signal_map.T.astype(x0.dtype)).astype(x0.dtype)


def sample_batch(task, encoder: FrozenDualEncoder, rng: np.random.Generator, n: int,
                 dtype=np.float32):
    """Draw ``n`` (x0, label, embedding) triples; labels are uniform over K."""
    if n < 1:
        raise ValueError("n must be >= 1")
    labels = rng.integers(task.K, size=n)
    if task.kind == "gaussian":
        noise = rng.standard_normal((n, task.dim))
        x0 = task.mean_array[labels] + task.sigma * noise
    else:
        x0 = _checkerboard_draw(task, labels, rng)
    return x0.astype(dtype), labels, encode_condition(encoder, labels).astype(dtype)


def sample_task(task, rng: np.random.Generator, labels: np.ndarray) -> np.ndarray:
    """Draw one data point for each given label."""
    labels = np.asarray(labels)
    if task.kind == "gaussian":
        return task.mean_array[labels] + task.sigma * rng.standard_normal((len(labels), task.dim))
    return _checkerboard_draw(task, labels, rng)


def _checkerboard_draw(task: CheckerboardTask, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # cell (i, j) carries label (i + j) % K
    size = 2 * task.extent / task.cells
    grid = [(i, j) for i in range(task.cells) for j in range(task.cells)]
    by_label = [np.array([c for c in grid if (c[0] + c[1]) % task.K == k]) for k in range(task.K)]
    picks = rng.random(len(labels))
    cells = np.empty((len(labels), 2))
    for k in range(task.K):
        sel = labels == k
        idx = (picks[sel] * len(by_label[k])).astype(int)
        cells[sel] = by_label[k][idx]
    xy = cells + rng.random((len(labels), 2))
    return xy * size - task.extent


def oracle_velocity(x, t, mu, sigma):
    """E[x0 - eps | x_t = x] when x0 ~ N(mu, sigma^2 I) and x_t = (1-t) x0 + t eps."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    a, b = 1.0 - t, t
    var = a * a * sigma * sigma + b * b
    if np.any(var == 0):
        raise ZeroDivisionError("degenerate interpolant variance")
    coef = (a * sigma * sigma - b) / var
    if coef.ndim:
        coef = coef[..., None]
        a = a[..., None]
    return mu + coef * (x - a * mu)


def mixture_oracle_velocity(x, t, task: ConditionalGaussianTask, weights=None):
    """E[x0 - eps | x_t = x] for the class mixture (unconditional field).

    ``weights`` are class priors, uniform by default.
    """
    x = np.asarray(x, dtype=np.float64)
    t = float(t)
    a, b = 1.0 - t, t
    s2 = task.sigma ** 2
    var = a * a * s2 + b * b
    means = task.mean_array
    w = np.full(task.K, 1.0 / task.K) if weights is None else np.asarray(weights, dtype=np.float64)
    diff = x[:, None, :] - a * means[None]
    with np.errstate(divide="ignore"):
        # zero-weight classes get log 0 = -inf and drop out of the posterior
        logp = -0.5 * (diff ** 2).sum(-1) / var + np.log(w)
    logp -= logp.max(axis=1, keepdims=True)
    post = np.exp(logp)
    post /= post.sum(axis=1, keepdims=True)
    per_class = means[None] + ((a * s2 - b) / var) * diff
    return (post[..., None] * per_class).sum(axis=1)


def bayes_classify(x, task: ConditionalGaussianTask) -> np.ndarray:
    """Nearest-mean label (Bayes rule for equal priors and shared isotropic sigma).

    Ties go to the lowest index.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d2 = ((x[:, None, :] - task.mean_array[None]) ** 2).sum(-1)
    return np.argmin(d2, axis=1)
