import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from interpconv.errors import InputError, ParameterError, ShapeError
from interpconv.interp import (
    InterpFilterState,
    assign_target_category,
    combined_gradient,
    filter_loss_decomposed,
    filter_loss_exact,
    filter_loss_grad_approx,
    filter_loss_grad_exact,
    mask_backward,
    mask_forward,
    select_template,
    update_lambda,
    update_running_stats,
)
from interpconv.templates import build_bank


# ---------------------------------------------------------------------------
# independent oracles (loop-based, no shared code paths with the library)
# ---------------------------------------------------------------------------

def brute_force_loss(X, bank):
    """Eq-by-eq enumeration of -MI(X; T) with explicit python loops."""
    n_t = bank.num_templates
    z = [sum(math.exp(float(np.sum(x * bank.stacked[t]))) for x in X) for t in range(n_t)]
    p_x_given_t = [
        [math.exp(float(np.sum(x * bank.stacked[t]))) / z[t] for x in X] for t in range(n_t)
    ]
    p_x = [
        sum(bank.priors[t] * p_x_given_t[t][i] for t in range(n_t)) for i in range(len(X))
    ]
    loss = 0.0
    for t in range(n_t):
        for i in range(len(X)):
            loss -= bank.priors[t] * p_x_given_t[t][i] * math.log(p_x_given_t[t][i] / p_x[i])
    return loss


def frozen_z_sample_loss(x, bank, z):
    """Per-sample surrogate: p(x|T)=e^tr/z_T with z frozen, p(x) live from x."""
    n_t = bank.num_templates
    p_xt = [math.exp(float(np.sum(x * bank.stacked[t]))) / z[t] for t in range(n_t)]
    p_x = sum(bank.priors[t] * p_xt[t] for t in range(n_t))
    return -sum(
        bank.priors[t] * p_xt[t] * (math.log(p_xt[t]) - math.log(p_x)) for t in range(n_t)
    )


def fd_gradient(func, x, h=1e-4):
    # central differences; h near cbrt(eps) balances truncation vs roundoff
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            e = np.zeros_like(x)
            e[i, j] = h
            g[i, j] = (func(x + e) - func(x - e)) / (2 * h)
    return g


# ---------------------------------------------------------------------------
# template selection and masking
# ---------------------------------------------------------------------------

def test_select_template_examples():
    assert select_template(np.array([[0.0, 1.0], [2.0, 0.0]])) == (2, 1)
    assert select_template(np.zeros((4, 4))) == (1, 1)
    x = np.zeros((5, 5))
    x[2, 4] = 3.0
    assert select_template(x) == (3, 5)


def test_select_template_tie_break_row_major():
    x = np.zeros((3, 3))
    x[0, 2] = 1.0
    x[1, 0] = 1.0
    assert select_template(x) == (1, 3)


def test_mask_forward_hand_example():
    bank = build_bank(2, tau=0.125, beta=4.0)
    x = np.array([[0.0, 1.0], [2.0, 0.0]])
    masked, mu = mask_forward(x, bank)
    assert mu == (2, 1)
    npt.assert_allclose(masked, [[0.0, 0.0], [0.25, 0.0]])


def test_mask_forward_zero_and_one_hot():
    bank = build_bank(3)
    masked, mu = mask_forward(np.zeros((3, 3)), bank)
    assert mu == (1, 1)
    npt.assert_allclose(masked, 0.0)
    x = np.zeros((3, 3))
    x[1, 1] = 5.0
    masked, mu = mask_forward(x, bank)
    assert mu == (2, 2)
    expected = np.zeros((3, 3))
    expected[1, 1] = 5.0 * bank.tau
    npt.assert_allclose(masked, expected)


def test_mask_backward_hand_example():
    bank = build_bank(2, tau=0.125, beta=4.0)
    x = np.array([[0.0, 1.0], [2.0, 0.0]])
    _, mu = mask_forward(x, bank)
    grad = mask_backward(np.ones((2, 2)), x, bank.positive(mu))
    npt.assert_allclose(grad, [[0.0, 0.0], [0.125, 0.0]])
    npt.assert_allclose(mask_backward(np.zeros((2, 2)), x, bank.positive(mu)), 0.0)


def test_mask_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    bank = build_bank(7)  # n=7, beta=4: no template entry is exactly zero
    x = rng.uniform(0.1, 2.0, (7, 7))
    _, mu = mask_forward(x, bank)
    t = bank.positive(mu).values

    def masked_sum(xv, weights):
        return float(np.sum(np.maximum(xv * t, 0.0) * weights))

    weights = rng.uniform(-1.0, 1.0, (7, 7))
    analytic = mask_backward(weights, x, t)
    numeric = fd_gradient(lambda xv: masked_sum(xv, weights), x)
    scale = max(np.abs(analytic).max(), 1e-12)
    assert np.abs(analytic - numeric).max() / scale <= 1e-6


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 10**6), c=st.floats(0.01, 100.0))
def test_mask_invariants(n, seed, c):
    rng = np.random.default_rng(seed)
    bank = build_bank(n)
    x = rng.uniform(0, 3, (n, n))
    masked, mu = mask_forward(x, bank)
    t = bank.positive(mu).values
    assert (masked >= 0).all()
    assert (masked[t <= 0] == 0).all()
    # positive homogeneity and scale-invariant selection
    masked_c, mu_c = mask_forward(c * x, bank)
    assert mu_c == mu
    npt.assert_allclose(masked_c, c * masked, rtol=1e-12, atol=1e-300)


def test_mask_shape_errors():
    bank = build_bank(3)
    with pytest.raises(ShapeError):
        mask_forward(np.zeros((2, 2)), bank)
    with pytest.raises(ShapeError):
        mask_backward(np.zeros((2, 2)), np.zeros((3, 3)), bank.negative)


# ---------------------------------------------------------------------------
# filter loss, exact and decomposed
# ---------------------------------------------------------------------------

def test_filter_loss_single_sample_is_zero():
    bank = build_bank(3)
    x = np.random.default_rng(0).uniform(0, 2, (1, 3, 3))
    assert filter_loss_exact(x, bank) == pytest.approx(0.0, abs=1e-15)


def test_filter_loss_two_sample_brute_force():
    bank = build_bank(1, tau=1.0, alpha=0.5)
    X = np.array([[[0.0]], [[1.0]]])
    expected = brute_force_loss(X, bank)
    assert filter_loss_exact(X, bank) == pytest.approx(expected, abs=1e-12)
    # frozen value from the enumeration oracle
    assert expected == pytest.approx(-0.11094407167172736, abs=1e-12)


def test_filter_loss_matches_brute_force_random():
    rng = np.random.default_rng(42)
    for n in (1, 2, 3):
        bank = build_bank(n, tau=0.4, beta=3.0)
        X = rng.uniform(0, 2, (5, n, n))
        assert filter_loss_exact(X, bank) == pytest.approx(
            brute_force_loss(X, bank), abs=1e-10
        )


def test_filter_loss_empty_set_rejected():
    with pytest.raises(InputError):
        filter_loss_exact(np.zeros((0, 3, 3)), build_bank(3))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 7), count=st.integers(1, 32), seed=st.integers(0, 10**6))
def test_mutual_information_nonnegative(n, count, seed):
    rng = np.random.default_rng(seed)
    bank = build_bank(n)
    X = rng.uniform(0, 4, (count, n, n))
    assert -filter_loss_exact(X, bank) >= -1e-12


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 7), count=st.integers(1, 32), seed=st.integers(0, 10**6))
def test_decomposition_identity(n, count, seed):
    rng = np.random.default_rng(seed)
    bank = build_bank(n)
    X = rng.uniform(0, 4, (count, n, n))
    parts = filter_loss_decomposed(X, bank)
    assert parts.total == pytest.approx(filter_loss_exact(X, bank), abs=1e-9)
    assert parts.total == pytest.approx(
        -parts.prior_entropy + parts.inter_category_entropy + parts.spatial_entropy_term,
        abs=1e-12,
    )


def test_prior_entropy_closed_form_n7():
    bank = build_bank(7)  # alpha=49/50 makes the prior uniform over 50 templates
    parts = filter_loss_decomposed(np.ones((2, 7, 7)), bank)
    assert parts.prior_entropy == pytest.approx(math.log(50), abs=1e-12)


def test_inter_category_entropy_prefers_separated_activations():
    # maps that are either strongly template-like or silent (a filter that
    # separates its target category) vs blurred mid-level mixtures of the same
    bank = build_bank(4, tau=0.5, beta=4.0)
    strong = [40.0 * np.maximum(bank.positive(mu).values, 0.0) for mu in [(1, 1), (2, 3), (4, 4), (3, 2)]]
    silent = [np.zeros((4, 4)) for _ in range(4)]
    separated = np.stack(strong + silent)
    blurred = np.stack([0.5 * s for s in strong] + [0.5 * s for s in strong])
    sep = filter_loss_decomposed(separated, bank).inter_category_entropy
    mix = filter_loss_decomposed(blurred, bank).inter_category_entropy
    assert sep < mix


# ---------------------------------------------------------------------------
# analytic gradients
# ---------------------------------------------------------------------------

def test_grad_exact_matches_finite_differences():
    rng = np.random.default_rng(3)
    for n in (2, 3, 5):
        bank = build_bank(n)
        X = rng.uniform(0, 2, (8, n, n))
        z = np.exp(bank.traces(X)).sum(axis=0)
        x = X[0]
        p_x = float(np.sum(bank.priors * np.exp(bank.traces(x)) / z))
        analytic = filter_loss_grad_exact(x, bank, z, p_x)
        numeric = fd_gradient(lambda xv: frozen_z_sample_loss(xv, bank, z), x)
        scale = max(np.abs(analytic).max(), 1e-12)
        assert np.abs(analytic - numeric).max() / scale <= 1e-6


def test_grad_exact_zero_when_braces_vanish():
    bank = build_bank(1, tau=0.5, alpha=0.5)
    a = 1.3
    x = np.array([[a]])
    z = np.array([math.exp(a * 0.5), math.exp(-a * 0.5)])  # tr = log(z * p_x) with p_x = 1
    grad = filter_loss_grad_exact(x, bank, z, 1.0)
    npt.assert_allclose(grad, 0.0, atol=1e-15)


def test_grad_exact_is_linear_in_templates_at_fixed_exponents():
    rng = np.random.default_rng(11)
    bank = build_bank(3)
    x = rng.uniform(0, 2, (3, 3))
    z = rng.uniform(5, 10, bank.num_templates)
    p_x = 0.02
    tr = bank.traces(x)
    coeff = -(bank.priors * np.exp(tr) / z) * (tr - np.log(z) - np.log(p_x))
    rebuilt = np.einsum("t,tij->ij", coeff, bank.stacked)
    npt.assert_allclose(filter_loss_grad_exact(x, bank, z, p_x), rebuilt, rtol=1e-12)


def test_grad_exact_parameter_errors():
    bank = build_bank(2)
    x = np.zeros((2, 2))
    with pytest.raises(ParameterError):
        filter_loss_grad_exact(x, bank, np.zeros(bank.num_templates), 0.5)
    with pytest.raises(ParameterError):
        filter_loss_grad_exact(x, bank, np.ones(bank.num_templates), 0.0)


def _dominant_instance(n, rng, factor=1e3):
    """A map whose selected template exponentially dominates all others,
    scaled so the best-vs-second trace gap exceeds log(factor).  Z comes from
    a background reference set, as it does in training where the estimates
    aggregate the whole stream rather than one outlier map."""
    bank = build_bank(n)
    mu = (1 + int(rng.integers(n)), 1 + int(rng.integers(n)))
    pos = np.maximum(bank.positive(mu).values, 0.0)
    unit = bank.traces(pos)
    gap = np.sort(unit)[-1] - np.sort(unit)[-2]
    x = pos * (1.1 * math.log(factor) / gap)
    background = rng.uniform(0, 0.5, (64, n, n))
    z = np.exp(bank.traces(background)).sum(axis=0)
    return bank, mu, x, z


def test_grad_approx_close_to_exact_under_dominance():
    rng = np.random.default_rng(5)
    for n in (3, 5, 7):
        bank, mu, x, z = _dominant_instance(n, rng)
        tr = bank.traces(x)
        order = np.sort(tr)
        assert math.exp(order[-1]) >= 1e3 * math.exp(order[-2])  # dominance holds
        p_x = float(np.sum(bank.priors * np.exp(tr) / z))
        exact = filter_loss_grad_exact(x, bank, z, p_x)
        idx = bank.positive_index(mu)
        approx = filter_loss_grad_approx(x, bank.positive(mu), bank, float(z[idx]), p_x)
        rel = np.linalg.norm(approx - exact) / np.linalg.norm(exact)
        assert rel <= 0.05


def test_grad_approx_zero_map_negative_template():
    bank = build_bank(3, tau=0.2, alpha=0.75)
    z_hat, p_x = 7.0, 0.03
    grad = filter_loss_grad_approx(np.zeros((3, 3)), bank.negative, bank, z_hat, p_x)
    # -(p(T-) t / z) e^0 {0 - log z - log p_x} with t = -tau everywhere
    expected = -(0.25 * -0.2 / z_hat) * (0.0 - math.log(z_hat) - math.log(p_x))
    npt.assert_allclose(grad, np.full((3, 3), expected), rtol=1e-12)


def test_grad_approx_zero_when_brace_vanishes():
    bank = build_bank(2, tau=0.3)
    x = np.ones((2, 2))
    t = bank.positive((1, 1))
    tr = float(np.sum(x * t.values))
    z_hat = 2.0
    p_x = math.exp(tr) / z_hat  # makes tr - log z - log p_x = 0
    npt.assert_allclose(filter_loss_grad_approx(x, t, bank, z_hat, p_x), 0.0, atol=1e-15)


# ---------------------------------------------------------------------------
# running statistics and category assignment
# ---------------------------------------------------------------------------

def test_running_stats_constant_stream_fixed_point():
    bank = build_bank(2)
    state = InterpFilterState(num_templates=bank.num_templates, ema_rate=0.25, n_ref=100)
    batch = np.random.default_rng(1).uniform(0, 2, (8, 2, 2))
    traces = bank.traces(batch)
    target = np.exp(traces).mean(axis=0) * 100
    for _ in range(200):
        update_running_stats(state, traces, bank.priors)
    npt.assert_allclose(state.z_estimates, target, rtol=1e-12)
    npt.assert_allclose(
        state.mean_px, np.sum(bank.priors * np.exp(traces).mean(axis=0) / target), rtol=1e-12
    )


def test_running_stats_rho_one_tracks_latest_batch():
    bank = build_bank(2)
    state = InterpFilterState(num_templates=bank.num_templates, ema_rate=1.0, n_ref=10)
    rng = np.random.default_rng(2)
    update_running_stats(state, bank.traces(rng.uniform(0, 2, (4, 2, 2))), bank.priors)
    latest = bank.traces(rng.uniform(0, 2, (4, 2, 2)))
    update_running_stats(state, latest, bank.priors)
    npt.assert_allclose(state.z_estimates, np.exp(latest).mean(axis=0) * 10, rtol=1e-12)


def test_running_stats_approach_exact_z_on_stationary_stream():
    rng = np.random.default_rng(3)
    bank = build_bank(5)
    n_ref = 400
    state = InterpFilterState(num_templates=bank.num_templates, ema_rate=0.1, n_ref=n_ref)
    for _ in range(150):
        update_running_stats(state, bank.traces(rng.uniform(0, 2, (16, 5, 5))), bank.priors)
    snapshot = rng.uniform(0, 2, (n_ref, 5, 5))
    exact_z = np.exp(bank.traces(snapshot)).sum(axis=0)
    assert np.max(np.abs(state.z_estimates - exact_z) / exact_z) <= 0.05


def test_update_lambda_examples():
    state = InterpFilterState(num_templates=5, ema_rate=0.5)
    update_lambda(state, np.zeros(8))
    assert state.lam == 0.0
    state2 = InterpFilterState(num_templates=5, ema_rate=0.5)
    for _ in range(100):
        update_lambda(state2, np.full(8, 2.0))
    assert state2.lam == pytest.approx(1e-5, rel=1e-12)


def test_assign_target_category_examples():
    assert assign_target_category({1: 0.9, 2: 0.0, 3: 0.0}) == 1
    assert assign_target_category({1: 0.3, 2: 0.7}) == 2
    assert assign_target_category({2: 0.5, 1: 0.5, 3: 0.5}) == 1
    with pytest.raises(InputError):
        assign_target_category({})


def test_combined_gradient_identities():
    rng = np.random.default_rng(4)
    gt = rng.normal(size=(3, 3))
    gf = rng.normal(size=(3, 3))
    npt.assert_allclose(combined_gradient(gt, gf, 0.0), gt)
    npt.assert_allclose(combined_gradient(np.zeros((3, 3)), gf, 0.3), 0.3 * gf)
    npt.assert_allclose(
        combined_gradient(gt, gf, 0.7), combined_gradient(gt, gf, 0.2) + 0.5 * gf
    )
    with pytest.raises(ShapeError):
        combined_gradient(gt, np.zeros((2, 2)), 1.0)
