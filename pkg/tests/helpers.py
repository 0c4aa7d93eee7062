"""Shared oracles and builders for the test suite.

Everything here deliberately avoids the library's own computational path:
sufficient statistics via naive double loops, the log-likelihood via a dense
per-cluster multivariate normal density, derivatives via central finite
differences.  Agreement between these and the package is what the tests
assert, so none of this may ever call into the code under test except to
construct plain data containers.
"""

from __future__ import annotations

import numpy as np

from nerm.model import Cluster, ClusteredDataset, ParameterVector

# ---------------------------------------------------------------------------
# dataset builders
# ---------------------------------------------------------------------------


def make_dataset(y_by_cluster, x_b=None, x_w=None, p_b=0, p_w=0) -> ClusteredDataset:
    """Assemble a dataset from plain lists; no validation side effects."""
    clusters = []
    for k, y in enumerate(y_by_cluster):
        y = np.asarray(y, dtype=float)
        xb = np.asarray(x_b[k], dtype=float) if x_b is not None else np.empty(0)
        if x_w is not None:
            xw = np.asarray(x_w[k], dtype=float)
            if xw.ndim == 1:
                xw = xw[:, None]
        else:
            xw = np.empty((y.size, 0))
        clusters.append(Cluster(f"c{k:03d}", y, xb, xw))
    return ClusteredDataset(tuple(clusters), p_b=p_b, p_w=p_w)


def random_dataset(rng, g, m_max=8, p_b=1, p_w=1, m_min=1):
    """Small random dataset with normal effects; for oracle comparisons."""
    sizes = rng.integers(m_min, m_max + 1, size=g)
    if not np.any(sizes >= 2):  # keep n > g so every code path is exercised
        sizes[rng.integers(0, g)] = 2
    beta0 = rng.normal()
    beta1 = rng.normal(size=p_b)
    beta2 = rng.normal(size=p_w)
    sa, se = rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0)
    ys, xbs, xws = [], [], []
    for m in sizes:
        xb = rng.normal(size=p_b)
        xw = rng.normal(size=(m, p_w))
        alpha = rng.normal(scale=np.sqrt(sa))
        e = rng.normal(scale=np.sqrt(se), size=m)
        y = beta0 + xb @ beta1 + xw @ beta2 + alpha + e
        ys.append(y)
        xbs.append(xb)
        xws.append(xw)
    ds = make_dataset(ys, xbs, xws, p_b=p_b, p_w=p_w)
    omega = ParameterVector(beta0, beta1, sa, beta2, se)
    return ds, omega


def random_omega(rng, p_b, p_w) -> ParameterVector:
    return ParameterVector(
        beta0=rng.normal(),
        beta1=rng.normal(size=p_b),
        sigma_alpha_sq=rng.uniform(0.3, 2.5),
        beta2=rng.normal(size=p_w),
        sigma_e_sq=rng.uniform(0.3, 2.5),
    )


# ---------------------------------------------------------------------------
# naive sufficient statistics (pure double loops)
# ---------------------------------------------------------------------------


def naive_sufficient_stats(ds: ClusteredDataset):
    """Sufficient statistics by explicit elementwise loops."""
    m, ybar, xbar = [], [], []
    S_w_y = 0.0
    S_w_xy = np.zeros(ds.p_w)
    S_w_x = np.zeros((ds.p_w, ds.p_w))
    for c in ds.clusters:
        mi = len(c.y)
        m.append(mi)
        yb = sum(float(v) for v in c.y) / mi
        ybar.append(yb)
        xb = np.array([sum(float(c.x_w[j, r]) for j in range(mi)) / mi
                       for r in range(ds.p_w)])
        xbar.append(xb)
        for j in range(mi):
            dy = float(c.y[j]) - yb
            S_w_y += dy * dy
            for r in range(ds.p_w):
                dxr = float(c.x_w[j, r]) - xb[r]
                S_w_xy[r] += dxr * dy
                for s in range(ds.p_w):
                    S_w_x[r, s] += dxr * (float(c.x_w[j, s]) - xb[s])
    return (np.array(m), np.array(ybar),
            np.array(xbar).reshape(ds.g, ds.p_w), S_w_y, S_w_xy, S_w_x)


# ---------------------------------------------------------------------------
# dense multivariate normal log-density oracle
# ---------------------------------------------------------------------------


def dense_mvn_loglik(ds: ClusteredDataset, omega: ParameterVector) -> float:
    """Exact Gaussian log-density of the full response vector.

    Builds each cluster's dense covariance sigma_e_sq*I + sigma_alpha_sq*J
    and evaluates the density with generic linear algebra (slogdet + solve);
    differs from the model log-likelihood only by a constant not depending
    on the parameters.
    """
    total = 0.0
    for c in ds.clusters:
        m = c.y.size
        mean = omega.beta0 + float(c.x_b @ omega.beta1) + c.x_w @ omega.beta2
        cov = omega.sigma_e_sq * np.eye(m) + omega.sigma_alpha_sq * np.ones((m, m))
        sign, logdet = np.linalg.slogdet(cov)
        assert sign > 0
        resid = c.y - mean
        total += -0.5 * m * np.log(2.0 * np.pi) - 0.5 * logdet \
            - 0.5 * float(resid @ np.linalg.solve(cov, resid))
    return total


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def fd_gradient(f, x, scale=1e-6):
    """Central finite-difference gradient with step scale*(1+|x_k|)."""
    x = np.asarray(x, dtype=float)
    grad = np.empty_like(x)
    for k in range(x.size):
        h = scale * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        grad[k] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def fd_jacobian(f, x, scale=1e-6):
    """Central finite-difference Jacobian of a vector-valued f."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    jac = np.empty((f0.size, x.size))
    for k in range(x.size):
        h = scale * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        jac[:, k] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return jac


def close(a, b, rtol, floor=1.0):
    """True when |a-b| <= rtol * max(floor, |b|) elementwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.all(np.abs(a - b) <= rtol * np.maximum(floor, np.abs(b)))
