"""Self-check suites backed by independent oracles.

Each suite returns a :class:`CheckResult` with the measured error and the
tolerance it was held to. ``run_oracle_checks`` drives them for the
``oracle-check`` command.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import objectives
from . import tensor_core as tc
from .guidance import ema_init, ema_update
from .metrics import fit_gaussian, frechet_gaussian, gaussian, kl_gaussian
from .nets import VelocityNet, VelocityNetConfig, null_condition
from .objectives import Projector, align_loss, fm_loss, total_loss
from .oracles import oracle_velocity
from .samplers import euler_maruyama_sample, euler_sample
from .tensor_core import Tensor

GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7
SG_RTOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""
    # key in SUITES that produced this result
    suite: str = ""

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] {self.name}: measured={self.measured:.3e} tol={self.tolerance:.1e} "
                f"({self.seconds:.1f}s){' ' + self.detail if self.detail else ''}")


def grad_rel_error(analytic, numeric, atol: float = GRAD_ATOL, rtol: float = GRAD_RTOL) -> float:
    """Max of |a - n| / max(|a|, |n|, atol / rtol) over all coordinates.

    The floor makes a coordinate pass exactly when its absolute error is below
    ``atol`` or its relative error is below ``rtol``.
    """
    a = np.concatenate([np.ravel(x) for x in analytic]).astype(np.float64)
    n = np.concatenate([np.ravel(x) for x in numeric]).astype(np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol if atol > 0 else 0.0)
    diff = np.abs(a - n)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(diff == 0, 0.0, diff / scale)
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# gradient-check harness for tiny networks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCase:
    arch: str
    loss: str  # "fm" | "amg" | "align"
    w: float = 0.0
    lam: float = 0.0
    seed: int = 0


def tiny_net_config(arch: str, rng: np.random.Generator) -> VelocityNetConfig:
    if arch == "mlp":
        return VelocityNetConfig(arch="mlp", depth=int(rng.integers(1, 3)), width=8, heads=1,
                                 data_dim=2, cond_dim=3, time_embed_dim=4, cond_width=6, patches=2)
    return VelocityNetConfig(arch="adaln_transformer", depth=1, width=8, heads=2, data_dim=4,
                             cond_dim=3, time_embed_dim=4, cond_width=6, patches=2)


def _randomise(params: dict[str, np.ndarray], rng: np.random.Generator) -> dict[str, np.ndarray]:
    # zero-initialised slots would make most gradients trivially zero
    return {k: (p + 0.3 * rng.standard_normal(p.shape)).astype(np.float64) for k, p in params.items()}


def build_grad_problem(case: GradCase):
    """Return (param tensors, loss_fn) for one case, all in float64.

    ``loss_fn(*tensors)`` rebuilds the loss from the given parameter tensors.
    """
    rng = np.random.default_rng(case.seed)
    cfg = tiny_net_config(case.arch, rng)
    net = VelocityNet(cfg)
    params = net.init_params(rng, dtype=np.float64)
    proj = Projector(cfg.hidden_patch_dim, 5, cfg.patch_dim)
    params.update(proj.init_params(rng, dtype=np.float64))
    params = _randomise(params, rng)
    names = sorted(params)
    ema = _randomise({k: v for k, v in params.items()}, rng)
    B = 3
    x0 = rng.standard_normal((B, cfg.data_dim))
    eps = rng.standard_normal((B, cfg.data_dim))
    t = rng.uniform(0.05, 0.95, B)
    s = objectives.interpolate(x0, eps, t)
    v = rng.standard_normal((B, cfg.cond_dim))
    v[0] = 0.0
    g0 = x0.reshape(B, cfg.patches, cfg.patch_dim)
    tap = 1

    if case.loss == "amg":
        uc = net.forward(ema, s.x_t, v, t).data
        uu = net.forward(ema, s.x_t, null_condition(cfg.cond_dim), t).data
        target = objectives.amg_target(s.u, uc, uu, case.w)
    else:
        target = Tensor(s.u)

    def loss_fn(*tensors):
        P = dict(zip(names, tensors))
        if case.lam > 0:
            u_hat, hidden = net.forward(P, s.x_t, v, t, tap_layer=tap)
            al = align_loss(g0, hidden, proj.bind(P))
            main = objectives.amg_loss(u_hat, target)
            return total_loss(main, al, case.lam)
        return objectives.amg_loss(net.forward(P, s.x_t, v, t), target)

    tensors = [Tensor(params[k], requires_grad=True) for k in names]
    return tensors, loss_fn


def default_grad_cases() -> list[GradCase]:
    cases = []
    seed = 0
    for arch in ("mlp", "adaln_transformer"):
        for loss, w, lam in (("fm", 0.0, 0.0), ("amg", 0.0, 0.0), ("amg", 1.0, 0.0), ("amg", 1.45, 0.0),
                             ("align", 0.0, 0.5), ("amg", 1.45, 0.5)):
            cases.append(GradCase(arch, loss, w, lam, seed))
            seed += 1
    # a few more random MLP depths
    for extra in range(8):
        cases.append(GradCase("mlp", "amg", (0.0, 1.0, 1.45)[extra % 3], 0.5 * (extra % 2), seed))
        seed += 1
    return cases


def gradient_case_error(case: GradCase, h: float = 1e-5) -> float:
    tensors, loss_fn = build_grad_problem(case)
    analytic = tc.backward(loss_fn(*tensors), tensors)
    numeric = tc.finite_diff_gradient(loss_fn, tensors, h)
    return grad_rel_error(analytic, numeric)


def check_gradients(cases: list[GradCase] | None = None) -> CheckResult:
    start = time.perf_counter()
    cases = default_grad_cases() if cases is None else cases
    worst = max(gradient_case_error(c) for c in cases)
    return CheckResult(f"gradient correctness ({len(cases)} nets)", worst < GRAD_RTOL, worst, GRAD_RTOL,
                       time.perf_counter() - start)


# ---------------------------------------------------------------------------
# stop-gradient semantics
# ---------------------------------------------------------------------------

def stop_gradient_errors(seed: int = 0, w: float = 1.45) -> tuple[float, float]:
    """Compare the AMG gradient with the gradient against a frozen target.

    The guidance branch is evaluated with the *online* parameters, so without
    a working stop-gradient the two gradients would differ. Returns
    (relative gradient error, max target error vs an elementwise recomputation).
    """
    rng = np.random.default_rng(seed)
    cfg = tiny_net_config("mlp", rng)
    net = VelocityNet(cfg)
    params = _randomise(net.init_params(rng, dtype=np.float64), rng)
    names = sorted(params)
    B = 4
    x0, eps = rng.standard_normal((2, B, cfg.data_dim))
    t = rng.uniform(0.05, 0.95, B)
    s = objectives.interpolate(x0, eps, t)
    v = rng.standard_normal((B, cfg.cond_dim))

    P = {k: Tensor(params[k], requires_grad=True) for k in names}
    uc = net.forward(P, s.x_t, v, t)
    uu = net.forward(P, s.x_t, null_condition(cfg.cond_dim), t)
    target = objectives.amg_target(s.u, tc.stop_gradient(uc), tc.stop_gradient(uu), w)
    loss = objectives.amg_loss(net.forward(P, s.x_t, v, t), target)
    g_amg = tc.backward(loss, [P[k] for k in names])

    # independent route: elementwise target from plain arrays, then plain FM loss
    frozen = s.u + w * (uc.data - uu.data)
    Q = {k: Tensor(params[k], requires_grad=True) for k in names}
    g_ref = tc.backward(fm_loss(net.forward(Q, s.x_t, v, t), Tensor(frozen)), [Q[k] for k in names])
    target_err = float(np.abs(target.data - frozen).max())
    return grad_rel_error(g_amg, g_ref, atol=0.0), target_err


def check_stop_gradient() -> CheckResult:
    start = time.perf_counter()
    grad_err, target_err = max(stop_gradient_errors(s) for s in range(3))
    measured = max(grad_err, target_err)
    return CheckResult("stop-gradient semantics", measured < SG_RTOL, measured, SG_RTOL,
                       time.perf_counter() - start)


# ---------------------------------------------------------------------------
# sampler transport, EMA recurrence, closed-form metrics
# ---------------------------------------------------------------------------

TRANSPORT_MU = np.array([2.0, -1.0])
TRANSPORT_SIGMA = 0.5


def oracle_transport_fd(kind: str, seed: int = 0, n: int = 10_000) -> float:
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((n, 2))
    field = lambda x, t: oracle_velocity(x, t, TRANSPORT_MU, TRANSPORT_SIGMA)  # noqa: E731
    if kind == "euler":
        x = euler_sample(field, x1, 200)
    else:
        x = euler_maruyama_sample(field, x1, 250, lambda t: t, rng)
    return frechet_gaussian(fit_gaussian(x), gaussian(TRANSPORT_MU, TRANSPORT_SIGMA ** 2))


def check_transport() -> list[CheckResult]:
    out = []
    for kind, tol in (("euler", 0.01), ("euler_maruyama", 0.05)):
        start = time.perf_counter()
        fd = oracle_transport_fd(kind)
        out.append(CheckResult(f"oracle transport ({kind})", fd < tol, fd, tol, time.perf_counter() - start))
    return out


def ema_recurrence_error(steps: int = 500, decay: float = 0.99, seed: int = 0) -> float:
    """Run ema_update over a scripted trajectory and compare with the unrolled sum.

    Closed form: s_k = d^k s_0 + (1 - d) * sum_{j=1..k} d^(k-j) p_j.
    """
    rng = np.random.default_rng(seed)
    s0 = rng.standard_normal(7)
    traj = rng.standard_normal((steps, 7))
    ema = ema_init({"p": s0}, decay)
    for p in traj:
        ema = ema_update(ema, {"p": p})
    k = np.arange(steps, 0, -1) - 1
    closed = decay ** steps * s0 + (1 - decay) * (decay ** k[:, None] * traj).sum(axis=0)
    return float(np.abs(ema.shadow["p"] - closed).max())


def check_ema() -> CheckResult:
    start = time.perf_counter()
    err = max(ema_recurrence_error(decay=d) for d in (0.9, 0.99, 0.9999))
    return CheckResult("EMA recurrence", err < 1e-6, err, 1e-6, time.perf_counter() - start)


def metric_spot_errors() -> dict[str, float]:
    I = np.eye(2)
    return {
        "fd_mean_shift": abs(frechet_gaussian(gaussian([0, 0], I), gaussian([3, 0], I)) - 9.0),
        "fd_scale": abs(frechet_gaussian(gaussian([0, 0], I), gaussian([0, 0], 4 * I)) - 2.0),
        "kl_mean_shift": abs(kl_gaussian(gaussian([1, 0], I), gaussian([0, 0], I)) - 0.5),
    }


def check_metrics() -> CheckResult:
    start = time.perf_counter()
    errs = metric_spot_errors()
    worst = max(errs.values())
    return CheckResult("closed-form metrics", errs["fd_mean_shift"] == 0.0 and worst < 1e-9, worst, 1e-9,
                       time.perf_counter() - start)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

MUTATIONS = ("amg_sign_flip",)


@contextlib.contextmanager
def mutated(names) -> Iterator[None]:
    """Deliberately break components so the suites can be seen to fail."""
    original = objectives.amg_target
    try:
        for name in names:
            if name not in MUTATIONS:
                raise ValueError(f"unknown mutation {name!r}")
            if name == "amg_sign_flip":
                def flipped(u, u_cond_ema, u_uncond_ema, w, variant="appendix"):
                    return original(u, u_uncond_ema, u_cond_ema, w, variant)
                objectives.amg_target = flipped
        yield
    finally:
        objectives.amg_target = original


SUITES: dict[str, Callable[[], CheckResult | list[CheckResult]]] = {
    "gradients": check_gradients,
    "stop_gradient": check_stop_gradient,
    "transport": check_transport,
    "ema": check_ema,
    "metrics": check_metrics,
}


def run_oracle_checks(mutations=(), suites=None) -> list[CheckResult]:
    results: list[CheckResult] = []
    with mutated(mutations):
        for name, fn in SUITES.items():
            if suites is not None and name not in suites:
                continue
            r = fn()
            for res in r if isinstance(r, list) else [r]:
                res.suite = name
                results.append(res)
    return results
