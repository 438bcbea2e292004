"""Divergences between diagonal Gaussians.

Closed forms for KL, the skew-geometric Jensen-Shannon divergence and its
dual, the weighted geometric-mean Gaussian they share, and a Monte-Carlo
estimator of each defining integral used as an independent check.

All closed forms accept numpy arrays. :func:`divergence_loss` builds the
same quantities out of recorded :class:`~npmatch.diffcore.Tensor` ops so
they can be differentiated.
"""

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import integrate

from . import diffcore as dc

VAR_FLOOR = 1e-6

ArrayOrTensor = Union[np.ndarray, dc.Tensor]


@dataclass(frozen=True)
class DiagonalGaussian:
    """N(mean, diag(variance)); fields are arrays or recorded Tensors."""

    mean: ArrayOrTensor
    variance: ArrayOrTensor

    def __post_init__(self):
        mean = _values(self.mean)
        var = _values(self.variance)
        if mean.shape != var.shape:
            raise ValueError(f"mean {mean.shape} and variance {var.shape} differ")
        if mean.size < 1:
            raise ValueError("dimension must be at least 1")
        if np.any(var < VAR_FLOOR):
            raise ValueError(f"variance below floor {VAR_FLOOR}")

    @property
    def dim(self):
        return _values(self.mean).size

    def numpy(self):
        """Flat float64 (mean, variance) arrays."""
        return _values(self.mean).ravel(), _values(self.variance).ravel()

    def detach(self):
        m, v = self.numpy()
        return DiagonalGaussian(m.copy(), v.copy())

    def log_pdf(self, x):
        """Log density at each row of ``x`` (shape (n, D))."""
        m, v = self.numpy()
        x = np.atleast_2d(x)
        return -0.5 * (np.log(2 * np.pi * v).sum() + ((x - m) ** 2 / v).sum(axis=1))


@dataclass(frozen=True)
class UncertaintyStats:
    u_context_avg: float
    u_target_avg: float
    alpha_u: float

    @classmethod
    def from_averages(cls, u_context_avg, u_target_avg):
        return cls(
            float(u_context_avg),
            float(u_target_avg),
            alpha_from_uncertainty(u_context_avg, u_target_avg),
        )


def _values(x):
    return np.asarray(x.data if isinstance(x, dc.Tensor) else x, dtype=np.float64)


def _pair(p, q):
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    return p.numpy() + q.numpy()


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def kl_diag(p, q):
    """KL(p || q)."""
    m1, v1, m2, v2 = _pair(p, q)
    return 0.5 * float(
        np.sum(v1 / v2 + (m2 - m1) ** 2 / v2 - 1.0 + np.log(v2) - np.log(v1))
    )


def geometric_mean(p, q, alpha):
    """Normalised p^(1-alpha) q^alpha, again a diagonal Gaussian."""
    _check_alpha(alpha)
    m1, v1, m2, v2 = _pair(p, q)
    prec = (1.0 - alpha) / v1 + alpha / v2
    var = 1.0 / prec
    mean = var * ((1.0 - alpha) * m1 / v1 + alpha * m2 / v2)
    return DiagonalGaussian(mean, np.maximum(var, VAR_FLOOR))


def js_skew(p, q, alpha):
    """(1-alpha) KL(p || G) + alpha KL(q || G), G the geometric mean."""
    _check_alpha(alpha)
    m1, v1, m2, v2 = _pair(p, q)
    g_mean, g_var = geometric_mean(p, q, alpha).numpy()
    a = alpha
    trace = np.sum(((1.0 - a) * v1 + a * v2) / g_var)
    maha = (1.0 - a) * np.sum((g_mean - m1) ** 2 / g_var) + a * np.sum(
        (g_mean - m2) ** 2 / g_var
    )
    logdet = np.sum(np.log(g_var)) - (1.0 - a) * np.sum(np.log(v1)) - a * np.sum(np.log(v2))
    return 0.5 * float(trace + maha + logdet - m1.size)


def js_skew_dual(p, q, alpha):
    """(1-alpha) KL(G || p) + alpha KL(G || q)."""
    _check_alpha(alpha)
    m1, v1, m2, v2 = _pair(p, q)
    g_mean, g_var = geometric_mean(p, q, alpha).numpy()
    a = alpha
    logdet = (1.0 - a) * np.sum(np.log(v1)) + a * np.sum(np.log(v2)) - np.sum(np.log(g_var))
    quad = (
        (1.0 - a) * np.sum(m1**2 / v1)
        + a * np.sum(m2**2 / v2)
        - np.sum(g_mean**2 / g_var)
    )
    return 0.5 * float(logdet + quad)


def alpha_from_uncertainty(u_context_avg, u_target_avg):
    """Skew weight from average context/target predictive entropies."""
    if u_context_avg < 0 or u_target_avg < 0:
        raise ValueError("uncertainties must be non-negative")
    total = u_context_avg + u_target_avg
    if total == 0:
        return 0.5
    return float(u_context_avg / total)


# ------------------------------------------------------------ Monte Carlo


def _log_norm_const(p, q, alpha):
    """log of integral p^(1-alpha) q^alpha, by 1-D quadrature per dimension."""
    m1, v1, m2, v2 = _pair(p, q)
    total = 0.0
    for a_m, a_v, b_m, b_v in zip(m1, v1, m2, v2):
        def integrand(x):
            la = -0.5 * (np.log(2 * np.pi * a_v) + (x - a_m) ** 2 / a_v)
            lb = -0.5 * (np.log(2 * np.pi * b_v) + (x - b_m) ** 2 / b_v)
            return np.exp((1.0 - alpha) * la + alpha * lb)

        lo = min(a_m - 40 * np.sqrt(a_v), b_m - 40 * np.sqrt(b_v))
        hi = max(a_m + 40 * np.sqrt(a_v), b_m + 40 * np.sqrt(b_v))
        centre = (1.0 - alpha) * a_m + alpha * b_m
        val, _ = integrate.quad(integrand, lo, hi, points=[a_m, b_m, centre],
                                limit=200, epsabs=0.0, epsrel=1e-12)
        total += np.log(val)
    return total


def _sample(dist, n, rng):
    m, v = dist.numpy()
    return m + np.sqrt(v) * rng.standard_normal((n, m.size))


def mc_estimate(kind, p, q, alpha=0.5, n_samples=100_000, seed=0):
    """Sample-mean estimate of a divergence's defining integral.

    Parameters
    ----------
    kind : {"kl", "js_skew", "js_skew_dual"}
    p, q : DiagonalGaussian
    alpha : float
        Skew weight; ignored for ``kind="kl"``.
    n_samples : int
        At least 10_000.
    seed : int

    Returns
    -------
    estimate, std_error : float
        ``std_error`` is the sample standard deviation over sqrt(n).

    Notes
    -----
    The geometric mean's log density is evaluated as
    ``(1-a) log p + a log q - log Z`` with ``Z`` found by quadrature, so the
    estimate does not reuse the closed-form precision/mean expressions.
    Each of the two expectations in the skewed forms gets its own sample
    set; for the dual form both are drawn from :func:`geometric_mean`.
    """
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 10_000")
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    rng = np.random.default_rng(seed)
    if kind == "kl":
        x = _sample(p, n_samples, rng)
        f = p.log_pdf(x) - q.log_pdf(x)
    elif kind in ("js_skew", "js_skew_dual"):
        _check_alpha(alpha)
        log_z = _log_norm_const(p, q, alpha)

        def log_g(x):
            return (1.0 - alpha) * p.log_pdf(x) + alpha * q.log_pdf(x) - log_z

        if kind == "js_skew":
            x = _sample(p, n_samples, rng)
            y = _sample(q, n_samples, rng)
            f = (1.0 - alpha) * (p.log_pdf(x) - log_g(x)) + alpha * (
                q.log_pdf(y) - log_g(y)
            )
        else:
            # independent draws per expectation: with one shared draw the
            # summed integrand is constant and the standard error degenerates
            g = geometric_mean(p, q, alpha)
            x = _sample(g, n_samples, rng)
            y = _sample(g, n_samples, rng)
            f = (1.0 - alpha) * (log_g(x) - p.log_pdf(x)) + alpha * (
                log_g(y) - q.log_pdf(y)
            )
    else:
        raise ValueError(f"unknown kind {kind!r}")
    return float(f.mean()), float(f.std(ddof=1) / np.sqrt(n_samples))


# ------------------------------------------------------- differentiable


def _graph_parts(dist):
    return dc.as_tensor(dist.mean), dc.as_tensor(dist.variance)


def divergence_loss(p, q, alpha, form="js"):
    """Scalar Tensor divergence between two head-produced Gaussians.

    ``p`` is the context-side distribution and ``q`` the target-side one.
    ``form="kl"`` gives KL(q || p), the term in the evidence lower bound;
    ``"js"`` and ``"js_dual"`` give the skewed divergences with the geometric
    mean p^(1-alpha) q^alpha. ``alpha`` is a constant.
    """
    _check_alpha(alpha)
    m1, v1 = _graph_parts(p)
    m2, v2 = _graph_parts(q)
    if m1.shape != m2.shape:
        raise ValueError(f"dimension mismatch: {m1.shape} vs {m2.shape}")
    d = float(m1.data.size)
    if form == "kl":
        diff = m1 - m2
        terms = v2 / v1 + diff * diff / v1 + dc.log(v1) - dc.log(v2)
        return (terms.sum() - d) * 0.5
    a = float(alpha)
    if a == 0.0:
        g_var, g_mean = v1, m1
    elif a == 1.0:
        g_var, g_mean = v2, m2
    else:
        g_var = 1.0 / ((1.0 - a) / v1 + a / v2)
        g_mean = g_var * ((m1 / v1) * (1.0 - a) + (m2 / v2) * a)
    if form == "js":
        trace = ((v1 * (1.0 - a) + v2 * a) / g_var).sum()
        e1 = g_mean - m1
        e2 = g_mean - m2
        maha = (e1 * e1 / g_var).sum() * (1.0 - a) + (e2 * e2 / g_var).sum() * a
        logdet = (
            dc.log(g_var).sum()
            - dc.log(v1).sum() * (1.0 - a)
            - dc.log(v2).sum() * a
        )
        return (trace + maha + logdet - d) * 0.5
    if form == "js_dual":
        # mean-difference form of the same quantity; avoids the large
        # cancelling quadratic terms of the expanded expression
        e1 = m1 - g_mean
        e2 = m2 - g_mean
        trace = (g_var / v1).sum() * (1.0 - a) + (g_var / v2).sum() * a
        maha = (e1 * e1 / v1).sum() * (1.0 - a) + (e2 * e2 / v2).sum() * a
        logdet = (
            dc.log(v1).sum() * (1.0 - a)
            + dc.log(v2).sum() * a
            - dc.log(g_var).sum()
        )
        return (trace + maha + logdet - d) * 0.5
    raise ValueError(f"unknown divergence form {form!r}")
