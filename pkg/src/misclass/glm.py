"""Conditional regression fits with posterior summaries and log evidence.

Gaussian responses use the exact conjugate posterior (fixed noise variance
or a normal-inverse-gamma prior).  Bernoulli responses (logit, probit and the
sensitivity/specificity-adjusted logit) use a Laplace approximation at the
posterior mode found by damped Newton iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import stats
from scipy.special import expit, gammaln, log_ndtr

from .core import FixedNoise, NIGNoise
from .errors import (
    HessianNotPD,
    InvalidSensSpec,
    NonFiniteInput,
    NotConverged,
    SeparationSuspected,
    SingularSystem,
)

LOG_2PI = np.log(2.0 * np.pi)
SSLOGIT_CLAMP = 1e-10
RIDGE_START = 1e-8
RIDGE_MAX = 1e-2


@dataclass(frozen=True, eq=False)
class ConditionalFit:
    """Posterior summary of one conditional regression fit.

    Each coefficient marginal is a location-scale Student-t with ``df``
    degrees of freedom; ``df = inf`` means Gaussian.
    """

    means: np.ndarray
    sds: np.ndarray
    loc: np.ndarray
    scale: np.ndarray
    df: float
    log_marginal_likelihood: float
    converged: bool = True
    iterations: int = 0
    cov: np.ndarray | None = None
    diagnostics: Mapping = field(default_factory=dict)

    @property
    def n_coef(self) -> int:
        return int(self.loc.shape[0])

    def marginal(self, j: int):
        """Frozen scipy distribution of coefficient ``j``."""
        if np.isinf(self.df):
            return stats.norm(self.loc[j], self.scale[j])
        return stats.t(self.df, self.loc[j], self.scale[j])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("inputs contain NaN or infinite values")


# --------------------------------------------------------------------------- #
# Conjugate linear regression
# --------------------------------------------------------------------------- #


def conjugate_from_stats(XtX, Xty, yty, n, prior_var, noise):
    """Batched conjugate posterior from sufficient statistics.

    Parameters
    ----------
    XtX : ndarray (B, p, p)
    Xty : ndarray (B, p)
    yty : float or ndarray (B,)
    n : int
        Number of observations.
    prior_var : ndarray (p,)
        Prior variances of the coefficients (scaled by the noise variance
        under a NIG prior).
    noise : FixedNoise or NIGNoise

    Returns
    -------
    dict with ``loc``, ``scale``, ``means``, ``sds`` (B, p), ``df`` (float),
    ``log_ev`` (B,) and ``cov`` (B, p, p).
    """
    XtX = np.asarray(XtX, dtype=float)
    Xty = np.asarray(Xty, dtype=float)
    prior_var = np.asarray(prior_var, dtype=float)
    p = prior_var.shape[0]
    log_det_v0 = np.sum(np.log(prior_var))
    if isinstance(noise, FixedNoise):
        s2 = float(noise.sigma2)
        prec = XtX / s2 + np.diag(1.0 / prior_var)
        rhs = Xty / s2
    else:
        prec = XtX + np.diag(1.0 / prior_var)
        rhs = Xty
    try:
        L = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise SingularSystem("posterior precision is not positive definite") from None
    eye = np.broadcast_to(np.eye(p), prec.shape)
    Linv = np.linalg.solve(L, eye)
    cov = np.matmul(np.swapaxes(Linv, -1, -2), Linv)
    mean = np.einsum("bij,bj->bi", cov, rhs)
    quad = np.einsum("bi,bi->b", mean, rhs)       # m' P m
    log_det_prec = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    var_diag = np.diagonal(cov, axis1=-2, axis2=-1)
    if isinstance(noise, FixedNoise):
        log_ev = (-0.5 * n * (LOG_2PI + np.log(s2)) - 0.5 * log_det_v0 - 0.5 * log_det_prec
                  - 0.5 * (yty / s2 - quad))
        scale = np.sqrt(var_diag)
        return dict(loc=mean, scale=scale, means=mean, sds=scale, df=np.inf, log_ev=log_ev, cov=cov)
    a, b = float(noise.a), float(noise.b)
    a_n = a + 0.5 * n
    b_n = b + 0.5 * (yty - quad)
    if np.any(b_n <= 0):
        raise SingularSystem("non-positive posterior rate; response fits exactly")
    log_ev = (-0.5 * n * LOG_2PI - 0.5 * log_det_v0 - 0.5 * log_det_prec
              + a * np.log(b) - a_n * np.log(b_n) + gammaln(a_n) - gammaln(a))
    df = 2.0 * a_n
    scale = np.sqrt((b_n / a_n)[:, None] * var_diag)
    sds = scale * np.sqrt(df / (df - 2.0)) if df > 2 else np.full_like(scale, np.inf)
    return dict(loc=mean, scale=scale, means=mean, sds=sds, df=df, log_ev=log_ev,
                cov=(b_n / a_n)[:, None, None] * cov)


def fit_conjugate_linear(design, y, prior_beta_variance, noise=None) -> ConditionalFit:
    """Exact Bayesian linear regression.

    With ``FixedNoise`` the coefficient prior is ``N(0, diag(v))`` and the
    posterior is Gaussian.  With ``NIGNoise(a, b)`` the prior is
    ``beta | s2 ~ N(0, s2 diag(v))``, ``s2 ~ IG(a, b)`` and the coefficient
    marginals are Student-t.  The log evidence is exact in both cases.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_finite(X, y)
    if X.shape[0] != y.shape[0] or y.shape[0] < 1:
        raise ValueError("design and response must have the same positive length")
    noise = NIGNoise() if noise is None else noise
    v = np.broadcast_to(np.asarray(prior_beta_variance, dtype=float), (X.shape[1],))
    r = conjugate_from_stats((X.T @ X)[None], (X.T @ y)[None], float(y @ y), y.shape[0], v, noise)
    return ConditionalFit(means=r["means"][0], sds=r["sds"][0], loc=r["loc"][0], scale=r["scale"][0],
                          df=float(r["df"]), log_marginal_likelihood=float(r["log_ev"][0]),
                          converged=True, iterations=0, cov=r["cov"][0])


def sequential_log_evidence(design, y, prior_beta_variance, noise=None) -> float:
    """Log evidence as a product of one-step-ahead predictive densities.

    Updates the posterior one observation at a time; independent of the
    completing-the-square route used by :func:`fit_conjugate_linear`.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    noise = NIGNoise() if noise is None else noise
    p = X.shape[1]
    V = np.diag(np.broadcast_to(np.asarray(prior_beta_variance, dtype=float), (p,))).copy()
    m = np.zeros(p)
    total = 0.0
    if isinstance(noise, FixedNoise):
        s2 = noise.sigma2
        for xi, yi in zip(X, y):
            Vx = V @ xi
            pred_var = s2 + xi @ Vx
            total += stats.norm.logpdf(yi, xi @ m, np.sqrt(pred_var))
            k = Vx / pred_var
            m = m + k * (yi - xi @ m)
            V = V - np.outer(k, Vx)
        return float(total)
    a, b = noise.a, noise.b
    for xi, yi in zip(X, y):
        Vx = V @ xi
        c = 1.0 + xi @ Vx
        resid = yi - xi @ m
        total += stats.t.logpdf(yi, 2 * a, xi @ m, np.sqrt(b / a * c))
        k = Vx / c
        m = m + k * resid
        V = V - np.outer(k, Vx)
        a, b = a + 0.5, b + 0.5 * resid ** 2 / c
    return float(total)


# --------------------------------------------------------------------------- #
# Bernoulli likelihoods
# --------------------------------------------------------------------------- #


def check_sens_spec(pi00, pi11):
    if pi00 is None or pi11 is None:
        raise InvalidSensSpec("sslogit requires pi00 and pi11")
    if not (0.0 <= pi00 <= 1.0 and 0.0 <= pi11 <= 1.0):
        raise InvalidSensSpec(f"pi00={pi00}, pi11={pi11} must be probabilities")
    if pi00 + pi11 <= 1.0:
        raise InvalidSensSpec(f"pi00 + pi11 = {pi00 + pi11} <= 1: link not identifiable")


def _sslogit_probs(eta, pi00, pi11):
    """Return (p, 1-p, dp/deta, d2p/deta2) without cancellation."""
    lo = 1.0 - pi00
    span = pi11 - lo
    s = expit(eta)
    sc = expit(-eta)
    p = lo + span * s
    q = (1.0 - pi11) + span * sc
    # no clamp for the perfect test, which must coincide with plain logit
    if (lo > 0.0 or pi11 < 1.0) and span > 2 * SSLOGIT_CLAMP:
        p = np.clip(p, lo + SSLOGIT_CLAMP, pi11 - SSLOGIT_CLAMP)
        q = np.clip(q, 1.0 - pi11 + SSLOGIT_CLAMP, pi00 - SSLOGIT_CLAMP)
    dp = span * s * sc
    d2p = dp * (sc - s)
    return p, q, dp, d2p


def bernoulli_loglik_terms(eta, y, family, pi00=None, pi11=None):
    """Per-observation log likelihood and its first two eta-derivatives."""
    eta = np.asarray(eta, dtype=float)
    y = np.asarray(y, dtype=float)
    if family == "bernoulli-logit":
        s = expit(eta)
        ll = y * eta - np.logaddexp(0.0, eta)
        return ll, y - s, -s * (1.0 - s)
    if family == "bernoulli-probit":
        log_cdf_pos = log_ndtr(eta)
        log_cdf_neg = log_ndtr(-eta)
        log_pdf = stats.norm.logpdf(eta)
        lam_pos = np.exp(log_pdf - log_cdf_pos)    # phi / Phi
        lam_neg = np.exp(log_pdf - log_cdf_neg)
        ll = y * log_cdf_pos + (1.0 - y) * log_cdf_neg
        d1 = y * lam_pos - (1.0 - y) * lam_neg
        d2 = -y * lam_pos * (eta + lam_pos) - (1.0 - y) * lam_neg * (lam_neg - eta)
        return ll, d1, d2
    if family == "bernoulli-sslogit":
        p, q, dp, d2p = _sslogit_probs(eta, pi00, pi11)
        ll = y * np.log(p) + (1.0 - y) * np.log(q)
        r1 = y / p - (1.0 - y) / q
        r2 = y / p ** 2 + (1.0 - y) / q ** 2
        return ll, r1 * dp, r1 * d2p - r2 * dp ** 2
    raise ValueError(f"not a Bernoulli family: {family!r}")


def _gaussian_terms(eta, y, sigma2):
    r = y - eta
    ll = -0.5 * (LOG_2PI + np.log(sigma2)) - 0.5 * r ** 2 / sigma2
    return ll, r / sigma2, np.full_like(r, -1.0 / sigma2)


def log_posterior_terms(beta, X, y, family, prior_var, weights=None, pi00=None, pi11=None,
                        sigma2=None):
    """Log posterior (normalised prior, unnormalised overall), gradient, Hessian."""
    eta = X @ beta
    if family == "gaussian":
        ll, d1, d2 = _gaussian_terms(eta, y, sigma2)
    else:
        ll, d1, d2 = bernoulli_loglik_terms(eta, y, family, pi00, pi11)
    if weights is not None:
        ll, d1, d2 = ll * weights, d1 * weights, d2 * weights
    f = ll.sum() - 0.5 * np.sum(LOG_2PI + np.log(prior_var)) - 0.5 * np.sum(beta ** 2 / prior_var)
    g = X.T @ d1 - beta / prior_var
    H = (X * d2[:, None]).T @ X - np.diag(1.0 / prior_var)
    return f, g, H


def _chol_with_ridge(negH):
    """Cholesky factor of ``negH``, adding an escalating ridge if needed."""
    try:
        return np.linalg.cholesky(negH), 0.0
    except np.linalg.LinAlgError:
        pass
    ridge = RIDGE_START
    eye = np.eye(negH.shape[0])
    while ridge <= RIDGE_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(negH + ridge * eye), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise HessianNotPD("negative Hessian not positive definite even with ridge 1e-2")


def newton_maximize(fun, x0, max_iter=100, grad_tol=1e-8, step_tol=1e-10):
    """Damped Newton ascent on a concave-ish objective.

    ``fun(x)`` returns ``(f, grad, hess)``.  Step-halving guarantees the
    objective never decreases; a ridge is added when the negative Hessian
    loses positive definiteness.

    Returns ``(x, f, grad, hess, iterations, max_ridge)``.
    """
    x = np.array(x0, dtype=float)
    f, g, H = fun(x)
    if not np.isfinite(f):
        raise NonFiniteInput("objective is not finite at the starting point")
    max_ridge = 0.0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < grad_tol:
            return x, f, g, H, it - 1, max_ridge
        L, ridge = _chol_with_ridge(-H)
        max_ridge = max(max_ridge, ridge)
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        t = 1.0
        for _ in range(60):
            x_new = x + t * step
            f_new, g_new, H_new = fun(x_new)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            raise NotConverged("line search failed to improve the objective")
        moved = np.max(np.abs(x_new - x))
        x, f, g, H = x_new, f_new, g_new, H_new
        if moved < step_tol:
            return x, f, g, H, it, max_ridge
    if np.max(np.abs(g)) < grad_tol:
        return x, f, g, H, max_iter, max_ridge
    raise NotConverged(f"Newton did not converge in {max_iter} iterations "
                       f"(|grad|max = {np.max(np.abs(g)):.3g})")


def fit_laplace_glm(design, y, family, prior_beta_variance, pi00=None, pi11=None, weights=None,
                    sigma2=None, max_iter=100, tol=1e-8, init=None) -> ConditionalFit:
    """Laplace-approximate Bayesian GLM fit.

    Parameters
    ----------
    design : ndarray (n, p)
    y : ndarray (n,)
        Binary response (or real for ``family="gaussian"`` with fixed
        ``sigma2``).
    family : str
        ``bernoulli-logit``, ``bernoulli-probit``, ``bernoulli-sslogit`` or
        ``gaussian``.
    prior_beta_variance : float or ndarray (p,)
        Independent zero-mean Gaussian prior variances.
    pi00, pi11 : float, optional
        Specificity and sensitivity for ``bernoulli-sslogit``.
    weights : ndarray (n,), optional
        Frequency weights (rows with identical covariates and response may be
        collapsed into one weighted row).

    Returns
    -------
    ConditionalFit
        Gaussian marginals at the mode with covariance equal to the inverse
        negative Hessian, and the Laplace log evidence.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_finite(X, y)
    p = X.shape[1]
    v = np.broadcast_to(np.asarray(prior_beta_variance, dtype=float), (p,)).copy()
    if family == "gaussian":
        if sigma2 is None:
            raise ValueError("gaussian Laplace fit requires a fixed sigma2")
    else:
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli response must be 0/1")
        if family == "bernoulli-sslogit":
            check_sens_spec(pi00, pi11)
    w = None if weights is None else np.asarray(weights, dtype=float)

    def objective(beta):
        return log_posterior_terms(beta, X, y, family, v, w, pi00, pi11, sigma2)

    x0 = np.zeros(p) if init is None else np.asarray(init, dtype=float)
    mode, f, g, H, iters, ridge = newton_maximize(objective, x0, max_iter=max_iter, grad_tol=tol)
    if np.max(np.abs(mode)) > 1e3 and np.min(v) >= 1e4:
        raise SeparationSuspected(f"|mode| = {np.max(np.abs(mode)):.3g}; data may be separable")
    negH = -H
    try:
        L = np.linalg.cholesky(negH)
        ridge_final = 0.0
    except np.linalg.LinAlgError:
        L, ridge_final = _chol_with_ridge(negH)
    log_det = 2.0 * np.sum(np.log(np.diag(L)))
    Linv = np.linalg.solve(L, np.eye(p))
    cov = Linv.T @ Linv
    sd = np.sqrt(np.diag(cov))
    log_ev = f + 0.5 * p * LOG_2PI - 0.5 * log_det
    diag = {"ridge": max(ridge, ridge_final), "ridge_at_mode": ridge_final, "gradient_max": float(np.max(np.abs(g)))}
    return ConditionalFit(means=mode, sds=sd, loc=mode, scale=sd, df=np.inf,
                          log_marginal_likelihood=float(log_ev), converged=True,
                          iterations=iters, cov=cov, diagnostics=diag)


# --------------------------------------------------------------------------- #
# Quantiles
# --------------------------------------------------------------------------- #


def marginal_quantile(loc, scale, df, alpha):
    """Vectorised quantile of location-scale t (Gaussian when df is inf)."""
    if np.isinf(df):
        return loc + scale * stats.norm.ppf(alpha)
    return loc + scale * stats.t.ppf(alpha, df)


def marginal_cdf(q, loc, scale, df):
    z = (q - loc) / scale
    if np.isinf(df):
        return stats.norm.cdf(z)
    return stats.t.cdf(z, df)


def posterior_quantile(fit: ConditionalFit, coefficient_index: int, alpha: float) -> float:
    """Exact quantile of one coefficient's posterior marginal."""
    if not fit.converged:
        raise NotConverged("fit did not converge")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie strictly between 0 and 1")
    j = coefficient_index
    return float(marginal_quantile(fit.loc[j], fit.scale[j], fit.df, alpha))
