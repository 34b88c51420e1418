import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interpconv.errors import ParameterError, ShapeError
from interpconv.templates import (
    build_bank,
    build_negative_template,
    build_positive_template,
    trace_product,
)


def test_positive_template_hand_values_n3():
    tau = 0.5 / 9
    t = build_positive_template((2, 2), 3, tau, 4.0)
    assert t.values[1, 1] == pytest.approx(tau)
    # L1 distance 1: tau * (1 - 4/3) = -tau/3
    assert t.values[0, 1] == pytest.approx(-tau / 3)
    # L1 distance 2: clamped at -tau
    assert t.values[0, 0] == pytest.approx(-tau)


def test_positive_template_single_cell():
    for beta in (0.5, 4.0, 100.0):
        t = build_positive_template((1, 1), 1, 0.25, beta)
        npt.assert_allclose(t.values, [[0.25]])


def test_positive_template_hand_values_n2():
    t = build_positive_template((2, 1), 2, 0.125, 4.0)
    npt.assert_allclose(t.values, [[-0.125, -0.125], [0.125, -0.125]])


def test_negative_template_constant():
    npt.assert_allclose(build_negative_template(2, 0.125).values, np.full((2, 2), -0.125))
    tau7 = 0.5 / 49
    npt.assert_allclose(build_negative_template(7, tau7).values, np.full((7, 7), -tau7))
    npt.assert_allclose(build_negative_template(1, 1.0).values, [[-1.0]])


def test_template_parameter_errors():
    with pytest.raises(ParameterError):
        build_positive_template((0, 1), 3, 0.1, 4.0)
    with pytest.raises(ParameterError):
        build_positive_template((1, 4), 3, 0.1, 4.0)
    with pytest.raises(ParameterError):
        build_positive_template((1, 1), 3, -0.1, 4.0)
    with pytest.raises(ParameterError):
        build_positive_template((1, 1), 3, 0.1, 0.0)
    with pytest.raises(ParameterError):
        build_negative_template(2, 0.0)
    with pytest.raises(ParameterError):
        build_bank(3, alpha=1.0)
    with pytest.raises(ParameterError):
        build_bank(0)


def test_bank_counts_and_defaults():
    bank = build_bank(7)
    assert bank.num_templates == 50
    assert len(bank.templates) == 50
    assert bank.tau == pytest.approx(0.5 / 49)
    assert bank.alpha == pytest.approx(49 / 50)
    assert bank.beta == 4.0
    # row-major positive order, negative last
    assert bank.templates[0].mu == (1, 1)
    assert bank.templates[1].mu == (1, 2)
    assert bank.templates[7].mu == (2, 1)
    assert bank.templates[-1].kind == "negative"


def test_bank_prior_n1():
    bank = build_bank(1, tau=1.0, alpha=0.5)
    npt.assert_allclose(bank.priors, [0.5, 0.5])


def test_bank_prior_sums_to_one():
    for n in (1, 2, 5, 7, 16):
        bank = build_bank(n)
        assert abs(bank.priors.sum() - 1.0) <= 1e-15


def test_bank_is_cached_and_immutable():
    a = build_bank(5)
    b = build_bank(5)
    assert a is b
    with pytest.raises(ValueError):
        a.stacked[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        a.templates[0].values[0, 0] = 1.0


def test_trace_product_examples():
    bank = build_bank(2, tau=0.125, beta=4.0)
    zero = np.zeros((2, 2))
    for t in bank.templates:
        assert trace_product(zero, t) == 0.0
    x = np.array([[0.0, 1.0], [2.0, 0.0]])
    assert trace_product(x, bank.negative) == pytest.approx(-0.375)
    one_hot = np.zeros((2, 2))
    one_hot[1, 0] = 3.5
    assert trace_product(one_hot, bank.positive((2, 1))) == pytest.approx(3.5 * 0.125)


def test_trace_product_shape_error():
    with pytest.raises(ShapeError):
        trace_product(np.zeros((3, 3)), build_negative_template(2, 0.1))


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(2, 9),
    mu_i=st.integers(1, 9),
    mu_j=st.integers(1, 9),
    beta=st.floats(0.5, 16.0),
)
def test_equal_l1_distance_means_equal_entries(n, mu_i, mu_j, beta):
    mu = (min(mu_i, n), min(mu_j, n))
    t = build_positive_template(mu, n, 0.5 / n**2, beta)
    idx = np.arange(1, n + 1)
    dist = np.abs(idx[:, None] - mu[0]) + np.abs(idx[None, :] - mu[1])
    for d in np.unique(dist):
        vals = t.values[dist == d]
        npt.assert_allclose(vals, vals[0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 6), a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10**6))
def test_trace_product_linear_in_x(n, a, b, seed):
    rng = np.random.default_rng(seed)
    bank = build_bank(n)
    x1 = rng.uniform(0, 2, (n, n))
    x2 = rng.uniform(0, 2, (n, n))
    for t in (bank.templates[0], bank.negative):
        lhs = trace_product(a * x1 + b * x2, t)
        rhs = a * trace_product(x1, t) + b * trace_product(x2, t)
        assert abs(lhs - rhs) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 7), seed=st.integers(0, 10**6))
def test_one_hot_peak_aligns_with_best_template(n, seed):
    rng = np.random.default_rng(seed)
    bank = build_bank(n)
    i, j = rng.integers(0, n), rng.integers(0, n)
    x = np.zeros((n, n))
    x[i, j] = 1.0 + rng.uniform(0, 2)
    traces = [trace_product(x, t) for t in bank.templates[:-1]]
    assert int(np.argmax(traces)) == i * n + j
