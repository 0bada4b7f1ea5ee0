import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowguide.metrics import fit_gaussian, frechet_gaussian, gaussian
from flowguide.nets import VelocityNet, VelocityNetConfig
from flowguide.oracles import oracle_velocity
from flowguide.samplers import (GuidedVelocity, SamplerConfig, euler_maruyama_sample, euler_sample,
                                guided_velocity, interpolant_score, sample, sample_model)

MU, SIGMA = np.array([2.0, -1.0]), 0.5


def oracle_field(x, t):
    return oracle_velocity(x, t, MU, SIGMA)


def target():
    return gaussian(MU, SIGMA ** 2)


# -- Euler ---------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 2, 4, 8, 64, 256])
def test_euler_constant_field_exact_dyadic(steps):
    # with a dyadic step count and c every partial sum is exactly representable
    c = np.array([0.75, -1.5])
    x1 = np.array([[0.5, 0.25], [1.0, -2.0]])
    out = euler_sample(lambda x, t: np.broadcast_to(c, x.shape), x1, steps)
    np.testing.assert_array_equal(out, x1 + c)


@settings(max_examples=50)
@given(st.integers(1, 300), st.floats(-10, 10), st.floats(-10, 10))
def test_euler_constant_field_any_steps(steps, c0, c1):
    c = np.array([c0, c1])
    x1 = np.array([[0.3, -0.7]])
    out = euler_sample(lambda x, t: np.broadcast_to(c, x.shape), x1, steps)
    # exact up to float64 rounding of the step sum
    np.testing.assert_allclose(out, x1 + c, rtol=0, atol=1e-12 * steps * (1 + abs(c).max()))


def test_euler_zero_field_identity():
    x1 = np.random.default_rng(0).standard_normal((5, 2))
    assert euler_sample(lambda x, t: np.zeros_like(x), x1, 17).tobytes() == x1.tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_euler_oracle_transport(seed):
    x1 = np.random.default_rng(seed).standard_normal((10_000, 2))
    assert frechet_gaussian(fit_gaussian(euler_sample(oracle_field, x1, 200)), target()) < 0.01


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_step_refinement_on_oracle(seed):
    x1 = np.random.default_rng(seed).standard_normal((10_000, 2))
    fd5 = frechet_gaussian(fit_gaussian(euler_sample(oracle_field, x1, 5)), target())
    fd50 = frechet_gaussian(fit_gaussian(euler_sample(oracle_field, x1, 50)), target())
    assert fd50 <= fd5


def test_euler_nan_raises_and_bad_steps():
    with pytest.raises(FloatingPointError):
        euler_sample(lambda x, t: np.full_like(x, np.nan), np.zeros((1, 2)), 3)
    with pytest.raises(ValueError):
        euler_sample(oracle_field, np.zeros((1, 2)), 0)
    with pytest.raises(FloatingPointError):
        euler_sample(oracle_field, np.array([[np.inf, 0.0]]), 3)


def test_euler_deterministic():
    x1 = np.random.default_rng(4).standard_normal((100, 2))
    assert euler_sample(oracle_field, x1, 30).tobytes() == euler_sample(oracle_field, x1, 30).tobytes()


# -- Euler-Maruyama --------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_em_zero_diffusion_is_euler_bitwise(dtype):
    x1 = np.random.default_rng(0).standard_normal((500, 2)).astype(dtype)
    field = lambda x, t: oracle_field(x, t).astype(x.dtype)  # noqa: E731
    a = euler_sample(field, x1, 37)
    b = euler_maruyama_sample(field, x1, 37, lambda t: 0.0, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_em_single_step_unit_kick():
    x1 = np.random.default_rng(0).standard_normal((4, 2))
    out = euler_maruyama_sample(lambda x, t: np.zeros_like(x), x1, 1, lambda t: 1.0, np.random.default_rng(5),
                                score_proxy=lambda x, t, u: np.zeros_like(x))
    xi = np.random.default_rng(5).standard_normal((4, 2))
    np.testing.assert_array_equal(out, x1 + xi)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_em_oracle_transport(seed):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((10_000, 2))
    out = euler_maruyama_sample(oracle_field, x1, 250, lambda t: t, rng)
    assert frechet_gaussian(fit_gaussian(out), target()) < 0.05


def test_em_bit_reproducible_and_negative_g():
    x1 = np.random.default_rng(1).standard_normal((50, 2))
    a = euler_maruyama_sample(oracle_field, x1, 20, lambda t: t, np.random.default_rng(3))
    b = euler_maruyama_sample(oracle_field, x1, 20, lambda t: t, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValueError):
        euler_maruyama_sample(oracle_field, x1, 5, lambda t: -1.0, np.random.default_rng(0))


def test_interpolant_score_exact_on_gaussian_marginal():
    # x_t ~ N((1-t) mu, ((1-t)^2 s^2 + t^2) I) so the score is linear and known
    t = 0.35
    x = np.random.default_rng(0).standard_normal((20, 2))
    var = (1 - t) ** 2 * SIGMA ** 2 + t ** 2
    expected = -(x - (1 - t) * MU) / var
    np.testing.assert_allclose(interpolant_score(x, t, oracle_field(x, t)), expected, atol=1e-12)
    with pytest.raises(ValueError):
        interpolant_score(x, 0.0, x)


def test_sampler_config():
    c = SamplerConfig()
    assert (c.kind, c.steps, c.cfg_scale) == ("euler_maruyama", 50, 1.45)
    assert c.diffusion()(0.5) == 0.5
    assert SamplerConfig(kind="euler", steps=25).diffusion()(0.5) == 0.0
    for bad in ({"kind": "heun"}, {"steps": 0}, {"cfg_scale": -1}, {"diffusion_scale": -1}):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)


def test_sample_dispatch():
    x1 = np.random.default_rng(0).standard_normal((10, 2))
    a = sample(oracle_field, x1, SamplerConfig(kind="euler", steps=10))
    np.testing.assert_array_equal(a, euler_sample(oracle_field, x1, 10))


# -- guided velocity / NFE -------------------------------------------------------

@pytest.fixture(scope="module")
def small_net():
    cfg = VelocityNetConfig(depth=2, width=16, cond_dim=4)
    net = VelocityNet(cfg)
    rng = np.random.default_rng(0)
    params = {k: (v + 0.3 * rng.standard_normal(v.shape)).astype(np.float32)
              for k, v in net.init_params(rng).items()}
    conds = rng.standard_normal((6, 4)).astype(np.float32)
    return net, params, conds


@pytest.mark.parametrize("kind", ["euler", "euler_maruyama"])
def test_cfg_one_is_conditional_only_bitwise(small_net, kind):
    net, params, conds = small_net
    x, nfe = sample_model(net, params, conds, SamplerConfig(kind=kind, steps=12, cfg_scale=1.0), seed=3)
    assert nfe == 12

    def cond_only(x, t):
        return net.forward(params, x, conds, t).data

    rng = np.random.default_rng(3)
    x1 = rng.standard_normal((6, 2)).astype(np.float32)
    ref = sample(cond_only, x1, SamplerConfig(kind=kind, steps=12), rng)
    assert x.tobytes() == ref.tobytes()


def test_nfe_doubles_off_identity(small_net):
    net, params, conds = small_net
    for s in (1.45, 4.0):
        _, nfe = sample_model(net, params, conds, SamplerConfig(steps=9, cfg_scale=s))
        assert nfe == 18


def test_cfg_zero_ignores_condition(small_net):
    net, params, conds = small_net
    x = np.random.default_rng(0).standard_normal((6, 2)).astype(np.float32)
    fn = GuidedVelocity(net, params, conds, 0.0)
    a = fn(x, 0.4)
    b = GuidedVelocity(net, params, np.zeros_like(conds) + 7.0, 0.0)(x, 0.4)
    np.testing.assert_array_equal(a, b)
    assert fn.nfe == 1


def test_guided_velocity_matches_cfg_formula(small_net):
    net, params, conds = small_net
    x = np.random.default_rng(1).standard_normal((6, 2)).astype(np.float32)
    uc = net.forward(params, x, conds, 0.3).data
    uu = net.forward(params, x, np.zeros(4, np.float32), 0.3).data
    np.testing.assert_allclose(guided_velocity(net, params, x, 0.3, conds, 1.45), uu + 1.45 * (uc - uu),
                               rtol=1e-6, atol=1e-6)
