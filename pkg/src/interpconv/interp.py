"""Interpretable-filter mechanics: template selection, masked forward pass,
the mutual-information filter loss with analytic gradients, and the online
per-filter statistics (Z estimates, mean p(x), loss weight, target category).

All scalar math is double precision.  The loss treats the sample set X as the
outcome space: p(x|T) = exp(tr(x.T)) / Z_T with Z_T summed over X, so the
conditional distributions are proper and -loss is a true mutual information.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import InputError, ParameterError, ShapeError, StateError
from .templates import Template, TemplateBank

DEFAULT_LAMBDA_COEFF = 5e-6
DEFAULT_EMA_RATE = 0.1


# ---------------------------------------------------------------------------
# forward masking
# ---------------------------------------------------------------------------

def select_template(x: np.ndarray) -> tuple[int, int]:
    """1-based peak cell of x; row-major first-max tie break, all-zero -> (1,1)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"feature map must be square 2-d, got {x.shape}")
    flat = int(np.argmax(x))
    i, j = divmod(flat, x.shape[1])
    return (i + 1, j + 1)


def mask_forward(x: np.ndarray, bank: TemplateBank) -> tuple[np.ndarray, tuple[int, int]]:
    """Select the peak-aligned positive template and mask: max(x o T_mu, 0).

    The negative template is never used as a mask; every map, whatever its
    category, picks the positive template at its argmax.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.n, bank.n):
        raise ShapeError(f"feature map {x.shape} vs bank grid {(bank.n, bank.n)}")
    mu = select_template(x)
    t = bank.positive(mu).values
    masked = np.maximum(x * t, 0.0)
    return masked, mu


def mask_backward(grad_out: np.ndarray, x: np.ndarray, template: Template | np.ndarray) -> np.ndarray:
    """Chain rule through mask_forward with the forward's template held fixed.

    d(masked)/dx_ij = t_ij where x_ij * t_ij > 0, else 0 (subgradient 0 at the
    clamp boundary).
    """
    t = template.values if isinstance(template, Template) else np.asarray(template)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if not (grad_out.shape == x.shape == t.shape):
        raise ShapeError(f"shapes disagree: grad {grad_out.shape}, x {x.shape}, T {t.shape}")
    keep = (x * t) > 0.0
    return grad_out * t * keep


# ---------------------------------------------------------------------------
# filter loss
# ---------------------------------------------------------------------------

def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0.0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def _log_conditionals(X: np.ndarray, bank: TemplateBank) -> tuple[np.ndarray, np.ndarray]:
    """(log p(x|T) as (N, T), log p(x) as (N,)) for the sample set X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (bank.n, bank.n):
        raise ShapeError(f"expected (N, {bank.n}, {bank.n}) maps, got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("empty feature-map set")
    tr = bank.traces(X)                                  # (N, T)
    log_z = _logsumexp(tr, axis=0)                       # (T,)
    log_p_x_given_t = tr - log_z[None, :]
    log_p_x = _logsumexp(np.log(bank.priors)[None, :] + log_p_x_given_t, axis=1)
    return log_p_x_given_t, log_p_x


def filter_loss_exact(X: np.ndarray, bank: TemplateBank) -> float:
    """Negated mutual information between the map set X and the template set.

    loss = -sum_T p(T) sum_x p(x|T) log[p(x|T)/p(x)], Z_T computed from X.
    """
    log_pxt, log_px = _log_conditionals(X, bank)
    contrib = np.exp(log_pxt) * (log_pxt - log_px[:, None])
    return float(-np.sum(bank.priors[None, :] * contrib))


@dataclass(frozen=True)
class FilterLossParts:
    """Entropy decomposition of the filter loss.

    total = -prior_entropy + inter_category_entropy + spatial_entropy_term,
    identical to filter_loss_exact.  The spatial term aggregates the
    (nonnegative) within-positive-set entropy weighted by p(T+, x).
    """

    prior_entropy: float
    inter_category_entropy: float
    spatial_entropy_term: float
    total: float


def filter_loss_decomposed(X: np.ndarray, bank: TemplateBank) -> FilterLossParts:
    """Split the loss into prior entropy, a T-/T+ inter-category conditional
    entropy, and a spatial conditional entropy over the positive templates."""
    log_pxt, log_px = _log_conditionals(X, bank)
    prior_entropy = float(-np.sum(_xlogx(bank.priors)))
    # posterior over templates per sample
    log_post = np.log(bank.priors)[None, :] + log_pxt - log_px[:, None]
    post = np.exp(log_post)                              # (N, T), rows sum to 1
    p_x = np.exp(log_px)                                 # (N,)
    p_neg = post[:, bank.negative_index]
    p_pos = post[:, : bank.negative_index].sum(axis=1)
    inter = float(-np.sum(p_x * (_xlogx(p_neg) + _xlogx(p_pos))))
    # spatial: sum_x p(x) p(T+|x) * H(ptilde), ptilde = p(T_mu|x)/p(T+|x)
    spatial = 0.0
    pos = post[:, : bank.negative_index]
    nz = p_pos > 0.0
    ptilde = pos[nz] / p_pos[nz, None]
    ent = -np.sum(_xlogx(ptilde), axis=1)
    spatial = float(np.sum(p_x[nz] * p_pos[nz] * ent))
    total = -prior_entropy + inter + spatial
    return FilterLossParts(prior_entropy, inter, spatial, total)


def filter_loss_grad_exact(
    x: np.ndarray,
    bank: TemplateBank,
    z_estimates: np.ndarray,
    p_x: float,
) -> np.ndarray:
    """Per-sample loss gradient w.r.t. the feature map, Z and p(x) as given.

    grad_ij = -sum_T t_ij p(T) e^{tr(x.T)} / Z_T * {tr(x.T) - log[Z_T p(x)]}.
    With p_x recomputed from x this is the exact derivative of the frozen-Z
    per-sample loss (the p(x)-dependence cancels in the full derivation).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (bank.n, bank.n):
        raise ShapeError(f"feature map {x.shape} vs bank grid {(bank.n, bank.n)}")
    z = np.asarray(z_estimates, dtype=np.float64)
    if z.shape != (bank.num_templates,):
        raise ShapeError(f"need {bank.num_templates} Z estimates, got {z.shape}")
    if np.any(z <= 0.0):
        raise ParameterError("Z estimates must be positive")
    if p_x <= 0.0:
        raise ParameterError(f"p_x must be positive, got {p_x}")
    tr = bank.traces(x)                                  # (T,)
    weight = bank.priors * np.exp(tr) / z
    brace = tr - np.log(z) - np.log(p_x)
    coeff = weight * brace                               # (T,)
    tmat = bank.stacked.reshape(bank.num_templates, -1)
    return -(coeff @ tmat).reshape(bank.n, bank.n)


def filter_loss_grad_approx(
    x: np.ndarray,
    template: Template,
    bank: TemplateBank,
    z_hat: float,
    p_x: float,
) -> np.ndarray:
    """Single-template approximation of the loss gradient.

    Keeps only the chosen template's summand; sign matches the exact gradient
    when that template's exponential dominates.
    """
    x = np.asarray(x, dtype=np.float64)
    t = template.values
    if x.shape != t.shape:
        raise ShapeError(f"feature map {x.shape} vs template {t.shape}")
    if z_hat <= 0.0 or p_x <= 0.0:
        raise ParameterError("z_hat and p_x must be positive")
    if template.kind == "negative":
        prior = 1.0 - bank.alpha
    else:
        prior = bank.alpha / (bank.n * bank.n)
    tr = float(np.sum(x * t))
    brace = tr - np.log(z_hat) - np.log(p_x)
    return -(prior / z_hat) * np.exp(tr) * brace * t


def combined_gradient(grad_task: np.ndarray, grad_filter: np.ndarray, lam: float) -> np.ndarray:
    """Gradient received by the pre-mask map: task part plus lam * filter part."""
    grad_task = np.asarray(grad_task, dtype=np.float64)
    grad_filter = np.asarray(grad_filter, dtype=np.float64)
    if grad_task.shape != grad_filter.shape:
        raise ShapeError(f"task grad {grad_task.shape} vs filter grad {grad_filter.shape}")
    return grad_task + lam * grad_filter


# ---------------------------------------------------------------------------
# online per-filter statistics
# ---------------------------------------------------------------------------

@dataclass
class InterpFilterState:
    """Running per-filter estimates updated once per batch.

    z_estimates approximates Z_T for a reference set of n_ref maps; mean_px is
    the dataset-mean estimate of p(x); lam is the current filter-loss weight;
    max_act_mean is the running mean of per-map peak activation feeding lam.
    """

    num_templates: int
    ema_rate: float = DEFAULT_EMA_RATE
    n_ref: int = 1
    z_estimates: np.ndarray | None = None
    mean_px: float = 0.0
    lam: float = 0.0
    max_act_mean: float | None = None
    assigned_category: int | None = None

    @property
    def initialized(self) -> bool:
        return self.z_estimates is not None


def update_running_stats(
    state: InterpFilterState,
    batch_traces: np.ndarray,
    priors: np.ndarray,
    ema_rate: float | None = None,
) -> InterpFilterState:
    """Fold one batch of per-template traces into the Z and p(x) estimates.

    z_T <- (1-rho) z_T + rho * mean_b(e^{tr_bT}) * n_ref  (plain assignment on
    the first batch); mean_px <- sum_T p(T) mean_b(e^{tr_bT}) / z_T.
    """
    rho = state.ema_rate if ema_rate is None else float(ema_rate)
    if not (0.0 < rho <= 1.0):
        raise ParameterError(f"ema rate must be in (0,1], got {rho}")
    tr = np.asarray(batch_traces, dtype=np.float64)
    if tr.ndim == 1:
        tr = tr[None, :]
    if tr.ndim != 2 or tr.shape[1] != state.num_templates:
        raise ShapeError(f"expected (B, {state.num_templates}) traces, got {tr.shape}")
    if tr.shape[0] == 0:
        raise InputError("empty batch")
    mean_exp = np.exp(tr).mean(axis=0)                   # (T,)
    target = mean_exp * state.n_ref
    if state.z_estimates is None:
        state.z_estimates = target.copy()
    else:
        state.z_estimates = (1.0 - rho) * state.z_estimates + rho * target
    state.mean_px = float(np.sum(np.asarray(priors) * mean_exp / state.z_estimates))
    return state


def update_lambda(
    state: InterpFilterState,
    batch_max_activations: np.ndarray,
    coeff: float = DEFAULT_LAMBDA_COEFF,
    ema_rate: float | None = None,
) -> InterpFilterState:
    """Track the mean per-map peak activation and set lam = coeff * that mean."""
    rho = state.ema_rate if ema_rate is None else float(ema_rate)
    m = float(np.mean(np.asarray(batch_max_activations, dtype=np.float64)))
    if state.max_act_mean is None:
        state.max_act_mean = m
    else:
        state.max_act_mean = (1.0 - rho) * state.max_act_mean + rho * m
    state.lam = coeff * state.max_act_mean
    return state


def assign_target_category(per_category_mean_activation: Mapping[int, float]) -> int:
    """Category whose maps activate the filter most; ties pick the smallest id."""
    if not per_category_mean_activation:
        raise InputError("no categories with samples")
    best_id: int | None = None
    best_val = -np.inf
    for cid in sorted(per_category_mean_activation):
        val = float(per_category_mean_activation[cid])
        if val > best_val:
            best_id, best_val = int(cid), val
    assert best_id is not None
    return best_id


# ---------------------------------------------------------------------------
# the interpretable conv layer
# ---------------------------------------------------------------------------

def mask_gain(bank: TemplateBank) -> float:
    """Fixed rescale applied after masking so downstream layers keep He-sized inputs.

    Masking multiplies activations by template values bounded by tau (~1/n^2),
    which would starve deeper layers when training from scratch.  The gain is
    the inverse RMS of the positive part of a center-peaked template, so the
    masked map regains roughly unit variance relative to its input.
    """
    c = (bank.n + 1) // 2
    t = bank.positive((c, c)).values
    q = float(np.sqrt(np.mean(np.maximum(t, 0.0) ** 2)))
    return 1.0 / q


class InterpConv2D:
    """Conv (3x3, zero padding, stride 1) + ReLU + template masking in one unit.

    With ``active`` False the layer degrades to conv + ReLU and is
    arithmetically identical to an ordinary conv layer followed by ReLU, which
    is what makes the zero-weight baseline bit-exact.  When active, the masked
    map (times a fixed gain) feeds the next layer while the filter loss
    attaches to the pre-mask map.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        n: int,
        rng: np.random.Generator,
        tau: float | None = None,
        beta: float = 4.0,
        alpha: float | None = None,
    ):
        from .templates import build_bank
        from .nn.layers import Conv2D

        self.conv = Conv2D(in_channels, out_channels, 3, stride=1, padding=1, rng=rng)
        self.n = n
        self.out_channels = out_channels
        self.bank = build_bank(n, tau=tau, beta=beta, alpha=alpha)
        self.states = [
            InterpFilterState(num_templates=self.bank.num_templates)
            for _ in range(out_channels)
        ]
        self.active = False
        self.inject_enabled = False
        self.lambda_coeff = DEFAULT_LAMBDA_COEFF
        self.lambda_per_filter = False
        self.px_mode = "mean"
        self.gain = 1.0
        self.batch_labels: np.ndarray | None = None
        self._reset_category_sums(0)
        # per-batch caches
        self._z_mask: np.ndarray | None = None
        self._x_act: np.ndarray | None = None
        self._sel: np.ndarray | None = None
        self._t_sel: np.ndarray | None = None
        self._keep: np.ndarray | None = None
        self._xm: np.ndarray | None = None
        self._traces: np.ndarray | None = None

    # -- configuration ------------------------------------------------------

    def configure(
        self,
        active: bool,
        lambda_coeff: float,
        ema_rate: float,
        n_ref: int,
        px_mode: str = "mean",
        lambda_per_filter: bool = False,
    ) -> None:
        self.active = bool(active)
        self.lambda_coeff = float(lambda_coeff)
        self.px_mode = px_mode
        self.lambda_per_filter = bool(lambda_per_filter)
        self.gain = mask_gain(self.bank) if self.active else 1.0
        for s in self.states:
            s.ema_rate = float(ema_rate)
            s.n_ref = int(n_ref)

    def _reset_category_sums(self, num_categories: int) -> None:
        self._cat_sums = np.zeros((num_categories, self.out_channels), dtype=np.float64)
        self._cat_counts = np.zeros(num_categories, dtype=np.int64)

    # -- forward / backward ---------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        # activations are channels-last: (B, n, n, M)
        z = self.conv.forward(x, train)
        self._z_mask = z > 0.0
        a = np.maximum(z, 0.0)
        self._x_act = a
        self._traces = None
        if not self.active:
            self._xm = None
            return a
        b, n, _, m = a.shape
        flat = a.reshape(b, n * n, m)
        self._sel = np.argmax(flat, axis=1)                          # (B, M) flat row-major cell
        tmat = self.bank.positive_stack.reshape(n * n, n * n)
        t_sel = tmat[self._sel].transpose(0, 2, 1).reshape(b, n, n, m)
        prod = a * t_sel
        self._keep = prod > 0.0
        self._t_sel = t_sel
        self._xm = np.maximum(prod, 0.0)
        return self.gain * self._xm

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.active:
            assert self._t_sel is not None and self._keep is not None
            dx = (grad_out * self.gain) * self._t_sel * self._keep
            if self.inject_enabled and self.batch_labels is not None:
                dx = dx + self._weighted_filter_grads()
        else:
            dx = grad_out
        dz = dx * self._z_mask
        return self.conv.backward(dz)

    # -- filter-loss gradient injection --------------------------------------

    def _compute_traces(self) -> np.ndarray:
        assert self._x_act is not None
        b, n, _, m = self._x_act.shape
        tmat = self.bank.stacked.reshape(self.bank.num_templates, -1)
        per_filter = self._x_act.reshape(b, n * n, m).transpose(0, 2, 1)
        self._traces = per_filter @ tmat.T                           # (B, M, T)
        return self._traces

    def _ready_mask(self) -> np.ndarray:
        return np.array(
            [s.initialized and s.assigned_category is not None for s in self.states],
            dtype=bool,
        )

    def _weighted_filter_grads(self) -> np.ndarray:
        """lam_m * dLoss_f/dx for every map in the batch; zero for unready filters."""
        assert self._x_act is not None and self._sel is not None
        ready = self._ready_mask()
        if not ready.any():
            return np.zeros_like(self._x_act)
        traces = self._traces if self._traces is not None else self._compute_traces()
        b, m, _ = traces.shape
        n = self.n
        neg = self.bank.negative_index
        z = np.array(
            [s.z_estimates if s.initialized else np.ones(self.bank.num_templates) for s in self.states]
        )                                                            # (M, T)
        cats = np.array(
            [-1 if s.assigned_category is None else s.assigned_category for s in self.states]
        )
        labels = np.asarray(self.batch_labels)
        that = np.where(labels[:, None] == cats[None, :], self._sel, neg)  # (B, M)
        tr_that = np.take_along_axis(traces, that[:, :, None], axis=2)[:, :, 0]
        z_that = z[np.arange(m)[None, :], that]
        prior_that = self.bank.priors[that]
        if self.px_mode == "exact":
            p_x = np.einsum("bmt,t->bm", np.exp(traces) / z[None, :, :], self.bank.priors)
            log_px = np.log(p_x)
        else:
            mean_px = np.array([s.mean_px if s.mean_px > 0 else 1.0 for s in self.states])
            log_px = np.log(mean_px)[None, :]
        brace = tr_that - np.log(z_that) - log_px
        coef = -(prior_that / z_that) * np.exp(tr_that) * brace      # (B, M)
        lam = np.array([s.lam for s in self.states]) * ready
        coef = coef * lam[None, :]
        that_vals = self.bank.stacked.reshape(-1, n * n)[that]       # (B, M, n*n)
        grads = coef[:, :, None] * that_vals
        return grads.transpose(0, 2, 1).reshape(b, n, n, m)

    # -- end-of-batch statistics ----------------------------------------------

    def commit_batch_stats(self) -> None:
        """EMA-update Z, mean p(x), and the loss weight from the batch's maps."""
        if not self.active or self._x_act is None:
            return
        traces = self._traces if self._traces is not None else self._compute_traces()
        for fm, state in enumerate(self.states):
            update_running_stats(state, traces[:, fm, :], self.bank.priors)
        batch_max = self._x_act.max(axis=(1, 2))                     # (B, M)
        if self.lambda_per_filter:
            for fm, state in enumerate(self.states):
                update_lambda(state, batch_max[:, fm], coeff=self.lambda_coeff)
        else:
            flat = batch_max.reshape(-1)
            for state in self.states:
                update_lambda(state, flat, coeff=self.lambda_coeff)

    def accumulate_category_stats(self, labels: np.ndarray, num_categories: int) -> None:
        """Collect this batch's total activation per (category, filter)."""
        if self._cat_sums.shape[0] != num_categories:
            self._reset_category_sums(num_categories)
        assert self._x_act is not None
        act = self._x_act.sum(axis=(1, 2))                           # (B, M)
        np.add.at(self._cat_sums, labels, act)
        np.add.at(self._cat_counts, labels, 1)

    def assign_categories(self) -> None:
        """End-of-epoch target-category reassignment from the epoch's activations."""
        seen = self._cat_counts > 0
        if not seen.any():
            return
        for fm, state in enumerate(self.states):
            means = {
                int(c): self._cat_sums[c, fm] / self._cat_counts[c]
                for c in np.nonzero(seen)[0]
            }
            state.assigned_category = assign_target_category(means)
        self._reset_category_sums(self._cat_sums.shape[0])

    # -- introspection ---------------------------------------------------------

    @property
    def eval_maps(self) -> np.ndarray:
        """(B, n, n, M) maps as the metrics see them: masked when active, else post-ReLU."""
        assert self._x_act is not None
        return self._xm if (self.active and self._xm is not None) else self._x_act

    @property
    def pre_mask_maps(self) -> np.ndarray:
        assert self._x_act is not None
        return self._x_act

    def parameters(self) -> list[np.ndarray]:
        return self.conv.parameters()

    def gradients(self) -> list[np.ndarray]:
        return self.conv.gradients()
