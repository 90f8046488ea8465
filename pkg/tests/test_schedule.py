import math

import numpy as np
import pytest

from camodiff.errors import ConfigurationError
from camodiff.schedule import make_schedule


def test_linear_t2_exact():
    sched = make_schedule("linear_beta", T=2, beta_range=(0.1, 0.2))
    assert np.allclose(sched.alphas, [0.9, 0.8])
    assert np.allclose(sched.alpha_bars, [0.9, 0.72])


def test_linear_default_matches_independent_product_table():
    sched = make_schedule("linear_beta", T=1000, beta_range=(1e-4, 0.02))
    # independent oracle: explicit running product over the beta grid
    expected = []
    running = 1.0
    for i in range(1000):
        beta = 1e-4 + (0.02 - 1e-4) * i / 999
        running *= 1.0 - beta
        expected.append(running)
    assert np.allclose(sched.alpha_bars, expected, rtol=1e-12)
    assert np.all(np.diff(sched.alpha_bars) < 0)
    assert sched.alpha_bars[-1] < 0.05


def test_cosine_t10_matches_independent_formula():
    sched = make_schedule("cosine", T=10)
    s = 0.008
    f = lambda u: math.cos((u + s) / (1 + s) * math.pi / 2) ** 2
    bars = [f((t + 1) / 10) / f(0) for t in range(10)]
    betas = [min(1.0 - bars[t] / (bars[t - 1] if t else 1.0), 0.999)
             for t in range(10)]
    expected = np.cumprod([1.0 - b for b in betas])
    assert np.allclose(sched.alpha_bars, expected, rtol=1e-12)
    assert sched.alpha_bars[0] > 0.9
    assert np.all(np.diff(sched.alpha_bars) < 0)


@pytest.mark.parametrize("kind,T", [("linear_beta", 1000), ("cosine", 1000),
                                    ("cosine", 10), ("linear_beta", 2)])
def test_schedule_invariants(kind, T):
    sched = make_schedule(kind, T=T)
    assert np.all((sched.alphas > 0) & (sched.alphas < 1))
    assert np.all(np.diff(sched.alpha_bars) < 0)
    recomputed = np.cumprod(sched.alphas)
    assert np.allclose(sched.alpha_bars, recomputed, rtol=1e-12)


def test_default_configs_reach_terminal_noise():
    for kind in ("linear_beta", "cosine"):
        assert make_schedule(kind, T=1000).alpha_bars[-1] < 0.05


def test_alpha_bar_boundary_convention():
    sched = make_schedule("linear_beta", T=10)
    assert sched.alpha_bar(-1) == 1.0
    with pytest.raises(ConfigurationError):
        sched.alpha_bar(10)
    with pytest.raises(ConfigurationError):
        sched.alpha_bar(-2)


@pytest.mark.parametrize("kwargs,field", [
    (dict(kind="spline", T=10), "kind"),
    (dict(kind="linear_beta", T=1), "T"),
    (dict(kind="linear_beta", T=10, beta_range=(0.2, 0.1)), "beta_range"),
    (dict(kind="linear_beta", T=10, beta_range=(0.0, 0.1)), "beta_range"),
    (dict(kind="linear_beta", T=10, beta_range=(0.1, 1.0)), "beta_range"),
])
def test_configuration_errors_name_the_field(kwargs, field):
    with pytest.raises(ConfigurationError, match=field):
        make_schedule(**kwargs)
