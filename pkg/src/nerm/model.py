"""Core data model for clustered (nested error) regression.

The model for response j in cluster i is

    y_ij = beta0 + x_b_i' beta1 + x_w_ij' beta2 + alpha_i + e_ij,

with cluster effects alpha_i iid (0, sigma_alpha_sq) and residuals e_ij iid
(0, sigma_e_sq); no normality is assumed anywhere.  Cluster i contributes
m_i observations, n = sum m_i over the g clusters.  Between-cluster
covariates x_b_i are constant inside a cluster; within-cluster covariates
x_w_ij vary inside it.

Everything downstream (likelihood, estimation, asymptotics) consumes the
per-cluster sufficient statistics computed here: cluster means of y and of
the within covariates, plus the pooled within-cluster cross products
S_w_y, S_w_xy, S_w_x.  The precision weight of a cluster mean is

    tau_i = m_i / (sigma_e_sq + m_i * sigma_alpha_sq),

the reciprocal of Var(alpha_i + mean of e_ij).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateWithinDesign,
    EmptyDataset,
    NonFiniteValue,
    NonPositiveVariance,
    NoWithinCovariates,
    RaggedCovariates,
)

__all__ = [
    "ParameterVector",
    "Cluster",
    "ClusteredDataset",
    "SufficientStats",
    "validate_dataset",
    "center_within_covariates",
    "sufficient_stats",
    "tau",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Full parameter vector in the canonical order
    (beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq).

    Both variances must be strictly positive (interior point); boundary
    values are represented by small positive numbers plus a flag on the
    fit result, never by zeros here.
    """

    beta0: float
    beta1: np.ndarray        # (p_b,)
    sigma_alpha_sq: float
    beta2: np.ndarray        # (p_w,)
    sigma_e_sq: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "beta1", _readonly(np.atleast_1d(self.beta1)))
        object.__setattr__(self, "beta2", _readonly(np.atleast_1d(self.beta2)))
        object.__setattr__(self, "sigma_alpha_sq", float(self.sigma_alpha_sq))
        object.__setattr__(self, "sigma_e_sq", float(self.sigma_e_sq))
        if self.beta1.ndim != 1 or self.beta2.ndim != 1:
            raise RaggedCovariates("beta1 and beta2 must be one-dimensional")
        for s, name in ((self.sigma_alpha_sq, "sigma_alpha_sq"),
                        (self.sigma_e_sq, "sigma_e_sq")):
            if not np.isfinite(s) or s <= 0.0:
                raise NonPositiveVariance(f"{name} must be finite and > 0, got {s!r}")
        if not (np.isfinite(self.beta0)
                and np.all(np.isfinite(self.beta1))
                and np.all(np.isfinite(self.beta2))):
            raise NonFiniteValue("regression coefficients must be finite")

    @property
    def p_b(self) -> int:
        return self.beta1.size

    @property
    def p_w(self) -> int:
        return self.beta2.size

    @property
    def theta(self) -> tuple[float, float]:
        """Variance components (sigma_alpha_sq, sigma_e_sq)."""
        return (self.sigma_alpha_sq, self.sigma_e_sq)

    @property
    def beta(self) -> np.ndarray:
        """Regression coefficients ordered (beta0, beta1, beta2)."""
        return np.concatenate(([self.beta0], self.beta1, self.beta2))

    def flatten(self) -> np.ndarray:
        """Canonical flat layout (beta0, beta1, sigma_alpha_sq, beta2, sigma_e_sq)."""
        return np.concatenate(
            ([self.beta0], self.beta1, [self.sigma_alpha_sq],
             self.beta2, [self.sigma_e_sq])
        )

    @classmethod
    def from_flat(cls, flat: np.ndarray, p_b: int, p_w: int) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (p_b + p_w + 3,):
            raise RaggedCovariates(
                f"flat parameter vector has length {flat.size}, expected {p_b + p_w + 3}"
            )
        return cls(
            beta0=flat[0],
            beta1=flat[1:1 + p_b],
            sigma_alpha_sq=flat[1 + p_b],
            beta2=flat[2 + p_b:2 + p_b + p_w],
            sigma_e_sq=flat[-1],
        )

    def with_theta(self, sigma_alpha_sq: float, sigma_e_sq: float) -> "ParameterVector":
        return replace(self, sigma_alpha_sq=sigma_alpha_sq, sigma_e_sq=sigma_e_sq)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return (self.p_b, self.p_w) == (other.p_b, other.p_w) \
            and bool(np.all(self.flatten() == other.flatten()))


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cluster:
    """One cluster: responses plus its covariates.

    ``x_b`` is the cluster-level covariate vector (length p_b) and ``x_w``
    the (m_i, p_w) matrix of within-cluster covariates aligned with ``y``.
    """

    id: str
    y: np.ndarray
    x_b: np.ndarray
    x_w: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "y", _readonly(np.atleast_1d(self.y)))
        object.__setattr__(self, "x_b", _readonly(np.atleast_1d(self.x_b)))
        xw = np.array(self.x_w, dtype=float, copy=True)
        if xw.ndim == 1:  # allow (m,) shorthand for p_w == 1
            xw = xw[:, None]
        xw.setflags(write=False)
        object.__setattr__(self, "x_w", xw)

    @property
    def m(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class ClusteredDataset:
    """Immutable container of clusters with declared covariate dimensions."""

    clusters: tuple[Cluster, ...]
    p_b: int
    p_w: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "clusters", tuple(self.clusters))
        object.__setattr__(self, "p_b", int(self.p_b))
        object.__setattr__(self, "p_w", int(self.p_w))

    @property
    def g(self) -> int:
        return len(self.clusters)

    @cached_property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([c.m for c in self.clusters], dtype=int)

    @property
    def n(self) -> int:
        return int(self.cluster_sizes.sum())

    @property
    def m_min(self) -> int:
        """Smallest cluster size (drives the asymptotic regime)."""
        return int(self.cluster_sizes.min())

    @cached_property
    def x_b_matrix(self) -> np.ndarray:
        """(g, p_b) matrix stacking the cluster-level covariates."""
        if self.g == 0:
            return np.empty((0, self.p_b))
        out = np.vstack([c.x_b.reshape(1, -1) for c in self.clusters]) \
            if self.p_b else np.empty((self.g, 0))
        out.setflags(write=False)
        return out


def validate_dataset(ds: ClusteredDataset) -> ClusteredDataset:
    """Check every structural invariant and return the dataset unchanged.

    Args:
        ds: dataset to check.

    Returns:
        The same object, once all invariants hold.

    Raises:
        EmptyDataset: fewer than two clusters, or an empty cluster.
        RaggedCovariates: covariate shapes disagree with p_b/p_w.
        NonFiniteValue: NaN or infinity in y or any covariate.
        DegenerateWithinDesign: no cluster has two observations, so the
            within-cluster variance carries no information (n == g).
    """
    if ds.g < 2:
        raise EmptyDataset(f"need at least 2 clusters, got {ds.g}")
    for c in ds.clusters:
        if c.m < 1:
            raise EmptyDataset(f"cluster {c.id!r} has no observations")
        if c.x_b.shape != (ds.p_b,):
            raise RaggedCovariates(
                f"cluster {c.id!r}: x_b has shape {c.x_b.shape}, expected ({ds.p_b},)"
            )
        if c.x_w.shape != (c.m, ds.p_w):
            raise RaggedCovariates(
                f"cluster {c.id!r}: x_w has shape {c.x_w.shape}, "
                f"expected ({c.m}, {ds.p_w})"
            )
        if not np.all(np.isfinite(c.y)):
            raise NonFiniteValue(f"cluster {c.id!r}: non-finite response")
        if not (np.all(np.isfinite(c.x_b)) and np.all(np.isfinite(c.x_w))):
            raise NonFiniteValue(f"cluster {c.id!r}: non-finite covariate")
    if ds.n <= ds.g:
        raise DegenerateWithinDesign(
            "every cluster is a singleton (n == g); the residual variance "
            "is not identified"
        )
    return ds


def center_within_covariates(
    ds: ClusteredDataset, add_contextual: bool = False
) -> ClusteredDataset:
    """Center within covariates around their cluster means.

    Optionally appends the removed cluster means to the between covariates
    (the "contextual" parameterization), so no information is lost.

    Args:
        ds: dataset with p_w >= 1.
        add_contextual: append each cluster's pre-centering mean of the
            within covariates to its between covariates.

    Returns:
        A new dataset; the input is untouched.
    """
    if ds.p_w == 0:
        raise NoWithinCovariates("dataset has no within-cluster covariates")
    new_clusters = []
    for c in ds.clusters:
        mean_w = c.x_w.mean(axis=0)
        x_b = np.concatenate([c.x_b, mean_w]) if add_contextual else c.x_b
        new_clusters.append(Cluster(c.id, c.y, x_b, c.x_w - mean_w))
    p_b = ds.p_b + (ds.p_w if add_contextual else 0)
    return ClusteredDataset(tuple(new_clusters), p_b=p_b, p_w=ds.p_w)


# ---------------------------------------------------------------------------
# sufficient statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SufficientStats:
    """Per-cluster means plus pooled within-cluster cross products.

    These are all the likelihood ever touches:

        S_w_y  = sum_ij (y_ij - ybar_i)^2
        S_w_xy = sum_ij (x_w_ij - xbar_w_i) (y_ij - ybar_i)
        S_w_x  = sum_ij (x_w_ij - xbar_w_i) (x_w_ij - xbar_w_i)'
    """

    m: np.ndarray          # (g,) cluster sizes
    ybar: np.ndarray       # (g,) response cluster means
    xbar_w: np.ndarray     # (g, p_w) within-covariate cluster means
    S_w_y: float
    S_w_xy: np.ndarray     # (p_w,)
    S_w_x: np.ndarray      # (p_w, p_w)
    n: int
    g: int

    def __post_init__(self) -> None:
        for name in ("m", "ybar", "xbar_w", "S_w_xy", "S_w_x"):
            a = np.asarray(getattr(self, name))
            if name == "m":
                a = a.astype(int)
            else:
                a = a.astype(float)
            a = a.copy()
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "S_w_y", float(self.S_w_y))
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "g", int(self.g))


def sufficient_stats(ds: ClusteredDataset) -> SufficientStats:
    """Reduce a dataset to the statistics the likelihood depends on.

    Uses a two-pass scheme (means first, then deviations) for numerical
    stability; each cluster contributes independently, so the pooled
    cross products do not depend on cluster ordering.
    """
    g = ds.g
    p_w = ds.p_w
    m = np.empty(g, dtype=int)
    ybar = np.empty(g)
    xbar_w = np.empty((g, p_w))
    S_w_y = 0.0
    S_w_xy = np.zeros(p_w)
    S_w_x = np.zeros((p_w, p_w))
    for k, c in enumerate(ds.clusters):
        m[k] = c.m
        ybar[k] = c.y.mean()
        mean_w = c.x_w.mean(axis=0) if c.m else np.zeros(p_w)
        xbar_w[k] = mean_w
        dy = c.y - ybar[k]
        S_w_y += float(dy @ dy)
        if p_w:
            dx = c.x_w - mean_w
            S_w_xy += dx.T @ dy
            S_w_x += dx.T @ dx
    return SufficientStats(
        m=m, ybar=ybar, xbar_w=xbar_w,
        S_w_y=S_w_y, S_w_xy=S_w_xy, S_w_x=S_w_x,
        n=int(m.sum()), g=g,
    )


def tau(theta: tuple[float, float], m_i) -> np.ndarray | float:
    """Precision of a cluster mean: m / (sigma_e_sq + m * sigma_alpha_sq).

    Args:
        theta: (sigma_alpha_sq, sigma_e_sq), both > 0.
        m_i: cluster size, scalar or array.

    Returns:
        Scalar for scalar input, array for array input.  Strictly increasing
        in m with supremum 1/sigma_alpha_sq.
    """
    sigma_alpha_sq, sigma_e_sq = float(theta[0]), float(theta[1])
    if not (np.isfinite(sigma_alpha_sq) and sigma_alpha_sq > 0.0):
        raise NonPositiveVariance(f"sigma_alpha_sq must be > 0, got {sigma_alpha_sq!r}")
    if not (np.isfinite(sigma_e_sq) and sigma_e_sq > 0.0):
        raise NonPositiveVariance(f"sigma_e_sq must be > 0, got {sigma_e_sq!r}")
    m_arr = np.asarray(m_i, dtype=float)
    out = m_arr / (sigma_e_sq + m_arr * sigma_alpha_sq)
    return float(out) if np.isscalar(m_i) or out.ndim == 0 else out
