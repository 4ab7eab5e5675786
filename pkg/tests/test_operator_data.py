import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deeponet_capacity import operator_data as od


def test_rk4_exact_on_quadratic():
    out = od.rk4_solve(lambda t, y: np.array([t]), np.array([0.0]), np.linspace(0, 2, 11))
    assert out[-1, 0] == pytest.approx(2.0, abs=1e-13)


def test_rk4_fourth_order():
    # y' = y, y(0) = 1; halving h cuts the error by about 16
    errs = []
    for n in (10, 20, 40):
        y = od.rk4_solve(lambda t, y: y, np.array([1.0]), np.linspace(0, 1, n + 1))[-1, 0]
        errs.append(abs(y - math.e))
    for a, b in zip(errs, errs[1:]):
        assert 3.5 <= math.log2(a / b) <= 4.5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rk4_rejects_bad_grid_and_divergence():
    with pytest.raises(ValueError):
        od.rk4_solve(lambda t, y: y, np.array([1.0]), [0.0, 0.0, 1.0])
    with pytest.raises(od.DivergenceError) as e:
        od.rk4_solve(lambda t, y: y * y * 1e200, np.array([1.0, 0.0]), np.linspace(0, 1, 5))
    assert e.value.step >= 1 and e.value.index == (0,)


def test_zero_forcing_zero_trajectory():
    law = od.ForcingLaw(J=3, A=0.0)
    f = od.sample_forcing(law, np.random.default_rng(0))
    assert np.all(f(np.linspace(0, 1, 7)) == 0.0)
    cfg = od.PendulumConfig(A=0.0, J=3, steps=100)
    y = od.pendulum_labels(cfg, [f, f], np.array([0.3, 0.9]))
    assert np.all(y == 0.0)


def test_forcing_sampling_deterministic_and_bounded():
    law = od.ForcingLaw(J=5, A=1.0)
    f1 = od.sample_forcing(law, np.random.default_rng(4))
    f2 = od.sample_forcing(law, np.random.default_rng(4))
    assert f1 == f2 and f1.J == 5
    t = np.linspace(0, 1, 401)
    assert np.max(np.abs(f1(t))) <= f1.sup_bound() <= law.A * (2 * law.J + 1)


def test_discretize():
    g = np.linspace(0, 1, 5)
    assert np.allclose(od.discretize(lambda t: 2 * t, g), [0, 0.5, 1, 1.5, 2])
    with pytest.raises(ValueError):
        od.discretize(lambda t: t, [])


def test_pendulum_free_fall_under_unit_force():
    one = od.ForcingFunction(1.0, (), (), 2 * math.pi)
    cfg = od.PendulumConfig(k=0.0, steps=200)
    t = np.array([0.0, 0.25, 0.5, 0.999])
    # interpolation error of t^2/2 on a grid of step h is at most h^2/8
    assert np.allclose(od.pendulum_labels(cfg, [one] * 4, t), t**2 / 2, atol=cfg.h**2 / 8 + 1e-12)


def test_pendulum_small_angle_matches_linear_oscillator():
    # y'' = -k y + c with y(0)=y'(0)=0 has y = c/k (1 - cos(sqrt(k) t)); small c keeps sin(y) ~ y
    c, k = 1e-4, 4.0
    f = od.ForcingFunction(c, (), (), 2 * math.pi)
    t = np.array([0.2, 0.7])
    y = od.pendulum_labels(od.PendulumConfig(k=k), [f, f], t)
    assert np.allclose(y, c / k * (1 - np.cos(2 * t)), rtol=1e-6)


def test_pendulum_dataset_shapes_and_bound():
    cfg = od.PendulumConfig(steps=200)
    ds = od.make_pendulum_dataset(cfg, 20, seed=1)
    assert (ds.m, ds.d1, ds.d2) == (20, 17, 2)
    assert np.all(ds.x_B[:, -1] == 1.0) and np.all(ds.x_T[:, -1] == 1.0)
    assert np.all(np.abs(ds.y) <= ds.meta["op_bound"])
    assert ds.meta["task"] == "pendulum" and len(ds.meta["grid"]) == 16
    again = od.make_pendulum_dataset(cfg, 20, seed=1)
    assert np.array_equal(ds.x_B, again.x_B) and np.array_equal(ds.y, again.y)
    other = od.make_pendulum_dataset(cfg, 20, seed=2)
    assert not np.array_equal(ds.y, other.y)


def test_prefix_stable_across_m():
    cfg = od.AntiderivativeConfig()
    small = od.make_antiderivative_dataset(cfg, 5, seed=3)
    big = od.make_antiderivative_dataset(cfg, 9, seed=3)
    assert np.array_equal(small.x_B, big.x_B[:5]) and np.array_equal(small.y, big.y[:5])


def test_antiderivative_examples():
    c = od.ForcingFunction(0.7, (), (), 2 * math.pi)
    assert c.integral(0.4) == pytest.approx(0.28)
    cos = od.ForcingFunction(0.0, (1.0,), (0.0,), 2 * math.pi)
    assert cos.integral(0.3) == pytest.approx(math.sin(2 * math.pi * 0.3) / (2 * math.pi))


def test_antiderivative_closed_form_against_quadrature():
    f = od.ForcingFunction(0.3, (0.5, -0.2), (0.1, 0.7), 2 * math.pi)
    # composite Simpson with 2000 panels, frozen
    t = np.linspace(0.0, 0.37, 2001)
    h = t[1] - t[0]
    v = f(t)
    simpson = h / 3 * (v[0] + v[-1] + 4 * v[1:-1:2].sum() + 2 * v[2:-1:2].sum())
    assert simpson == pytest.approx(0.2709058964302077, abs=1e-10)
    assert abs(float(f.integral(0.37)) - 0.2709058964302077) <= 1e-8


@given(st.integers(0, 10**6), st.floats(0.0, 1.0))
def test_antiderivative_derivative_is_forcing(seed, x):
    f = od.sample_forcing(od.ForcingLaw(J=3), np.random.default_rng(seed))
    h = 1e-5
    fd = (f.integral(x + h) - f.integral(x - h)) / (2 * h)
    assert fd == pytest.approx(float(f(x)), abs=1e-6)


def test_constant_feature_off():
    ds = od.make_antiderivative_dataset(od.AntiderivativeConfig(constant_feature=False, sensors=8), 4, 0)
    assert (ds.d1, ds.d2) == (8, 1)


def test_jsonl_round_trip(tmp_path):
    ds = od.make_antiderivative_dataset(od.AntiderivativeConfig(), 6, seed=0)
    p = tmp_path / "d.jsonl"
    od.save_dataset(ds, p)
    back = od.load_dataset(p)
    assert np.array_equal(back.x_B, ds.x_B) and np.array_equal(back.x_T, ds.x_T) and np.array_equal(back.y, ds.y)
    assert back.meta == ds.meta
    assert od.dataset_text(back) == p.read_text()


def test_jsonl_format_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text("")
    with pytest.raises(od.DatasetFormatError):
        od.load_dataset(p)
    p.write_text('{"meta": {}}\n{"x_B": [1.0], "x_T": [1.0], "y": 0.5}\n{"x_B": [1.0], "y": 1}\n')
    with pytest.raises(od.DatasetFormatError, match=r"bad.jsonl:3"):
        od.load_dataset(p)
    p.write_text('{"meta": {"d1": 3}}\n{"x_B": [1.0], "x_T": [1.0], "y": 0.5}\n')
    with pytest.raises(od.DatasetFormatError, match="d1"):
        od.load_dataset(p)
    p.write_text('not json\n')
    with pytest.raises(od.DatasetFormatError, match=r":1:"):
        od.load_dataset(p)
