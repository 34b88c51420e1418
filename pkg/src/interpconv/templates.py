"""Part-template bank: n*n single-peak positive templates plus one negative template.

A positive template peaks at a grid cell mu and decays linearly with the L1
distance from mu (clamped at -tau); the negative template is the constant
-tau.  Together with the prior {alpha/n^2 for each positive, 1-alpha for the
negative} they define the template distribution used by the filter loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ParameterError, ShapeError


def default_tau(n: int) -> float:
    return 0.5 / (n * n)


def default_alpha(n: int) -> float:
    return n * n / (1.0 + n * n)


DEFAULT_BETA = 4.0


@dataclass(frozen=True)
class Template:
    """One n x n template; ``mu`` is the 1-based peak cell for positive kind."""

    values: np.ndarray
    kind: str                       # "positive" | "negative"
    mu: tuple[int, int] | None = None

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def build_positive_template(mu: tuple[int, int], n: int, tau: float, beta: float) -> Template:
    """Template peaked at 1-based cell mu: tau * max(1 - beta*L1(cell,mu)/n, -1)."""
    if n < 1:
        raise ParameterError(f"grid size must be >= 1, got {n}")
    mi, mj = int(mu[0]), int(mu[1])
    if not (1 <= mi <= n and 1 <= mj <= n):
        raise ParameterError(f"mu={mu} outside 1..{n} grid")
    if tau <= 0 or beta <= 0:
        raise ParameterError(f"tau and beta must be positive, got tau={tau}, beta={beta}")
    idx = np.arange(1, n + 1)
    dist = np.abs(idx[:, None] - mi) + np.abs(idx[None, :] - mj)
    values = tau * np.maximum(1.0 - beta * dist / n, -1.0)
    return Template(_readonly(values), "positive", (mi, mj))


def build_negative_template(n: int, tau: float) -> Template:
    """Constant -tau template standing for "filter silent"."""
    if n < 1:
        raise ParameterError(f"grid size must be >= 1, got {n}")
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    values = np.full((n, n), -tau, dtype=np.float64)
    return Template(_readonly(values), "negative", None)


@dataclass(frozen=True)
class TemplateBank:
    """All n^2+1 templates (row-major positives, then the negative) with their prior.

    Immutable; the stacked array views are read-only so a bank can be shared
    freely across threads and layers.
    """

    n: int
    tau: float
    beta: float
    alpha: float
    templates: tuple[Template, ...]
    stacked: np.ndarray = field(repr=False)     # (n^2+1, n, n)
    priors: np.ndarray = field(repr=False)      # (n^2+1,)

    @property
    def num_templates(self) -> int:
        return self.n * self.n + 1

    @property
    def negative_index(self) -> int:
        return self.n * self.n

    @property
    def negative(self) -> Template:
        return self.templates[-1]

    def positive_index(self, mu: tuple[int, int]) -> int:
        """Row-major index of the positive template peaked at 1-based mu."""
        mi, mj = mu
        if not (1 <= mi <= self.n and 1 <= mj <= self.n):
            raise ParameterError(f"mu={mu} outside 1..{self.n} grid")
        return (mi - 1) * self.n + (mj - 1)

    def positive(self, mu: tuple[int, int]) -> Template:
        return self.templates[self.positive_index(mu)]

    @property
    def positive_stack(self) -> np.ndarray:
        """(n^2, n, n) view of the positive templates only."""
        return self.stacked[: self.n * self.n]

    def traces(self, x: np.ndarray) -> np.ndarray:
        """tr(x . T) for every template; x may be (n, n) or (..., n, n)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-2:] != (self.n, self.n):
            raise ShapeError(f"expected trailing shape {(self.n, self.n)}, got {x.shape}")
        flat = x.reshape(*x.shape[:-2], self.n * self.n)
        tmat = self.stacked.reshape(self.num_templates, self.n * self.n)
        return flat @ tmat.T


@lru_cache(maxsize=32)
def _build_bank_cached(n: int, tau: float, beta: float, alpha: float) -> TemplateBank:
    positives = [
        build_positive_template((i, j), n, tau, beta)
        for i in range(1, n + 1)
        for j in range(1, n + 1)
    ]
    negative = build_negative_template(n, tau)
    templates = tuple(positives + [negative])
    stacked = _readonly(np.stack([t.values for t in templates], axis=0))
    priors = np.full(n * n + 1, alpha / (n * n), dtype=np.float64)
    priors[-1] = 1.0 - alpha
    return TemplateBank(n, tau, beta, alpha, templates, stacked, _readonly(priors))


def build_bank(
    n: int,
    tau: float | None = None,
    beta: float = DEFAULT_BETA,
    alpha: float | None = None,
) -> TemplateBank:
    """Build (or fetch from cache) the bank for one layer's grid size.

    Defaults follow the standard parameterization tau=0.5/n^2,
    alpha=n^2/(1+n^2), beta=4, which makes the prior uniform over all
    n^2+1 templates.
    """
    if n < 1:
        raise ParameterError(f"grid size must be >= 1, got {n}")
    tau = default_tau(n) if tau is None else float(tau)
    alpha = default_alpha(n) if alpha is None else float(alpha)
    if tau <= 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    if not (0.0 < alpha < 1.0):
        raise ParameterError(f"alpha must lie in (0,1), got {alpha}")
    if beta <= 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    return _build_bank_cached(int(n), tau, float(beta), alpha)


def trace_product(x: np.ndarray, template: Template | np.ndarray) -> float:
    """tr(x . T) = sum_ij x_ij * t_ij."""
    t = template.values if isinstance(template, Template) else np.asarray(template)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != t.shape:
        raise ShapeError(f"feature map {x.shape} vs template {t.shape}")
    return float(np.sum(x * t))
