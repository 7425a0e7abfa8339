"""Binary covariate as a dichotomised, error-prone Gaussian variable.

Model::

    y    = b0 + b_xc * x_c + Z b_z + eps,        eps  ~ N(0, 1/tau_e)
    w_d  ~ Bernoulli(Phi(x_c / sigma_u))
    x_c  = a0 + Zt a + eps_x,                    eps_x ~ N(0, 1/tau_x)

``joint_neg_log_posterior`` covers the full vector ``(x_c[0..n-1], b, a)``.
Maximising it jointly over x_c and the scaling ``b_xc`` is degenerate (the
density grows without bound as ``b_xc`` grows and x_c shrinks), so the fit
treats ``b_xc`` like the two precisions: given ``(tau_e, tau_x, b_xc)`` the
remaining field is log-concave and is fitted by a Laplace approximation, and
the three hyperparameters are integrated on a grid.  The Hessian's x_c block is diagonal, so every Newton step
costs O(n k^2) with k the number of regression coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from scipy.special import log_ndtr, ndtr

from .errors import HessianNotPD, NonFiniteInput, NotConverged
from .glm import LOG_2PI, RIDGE_MAX, RIDGE_START, bernoulli_loglik_terms

DAMPING_MAX = 1e8


def probit_misclass_probability(x_c, sigma_u: float = 1.0):
    """``Pr(w_d = 1 | x_c) = Phi(x_c / sigma_u)``."""
    if not sigma_u > 0:
        raise ValueError("sigma_u must be positive")
    return ndtr(np.asarray(x_c, dtype=float) / sigma_u)


@dataclass(frozen=True)
class LatentGaussianModel:
    sigma_u: float = 1.0
    beta_prior_variance: float = 1000.0
    alpha_prior_variance: float = 1000.0
    grid_size: int = 7               # points per log-precision axis
    grid_halfwidth: float = 2.0      # log units either side of the start
    beta_grid_size: int = 25         # b_xc points per precision cell
    beta_grid_halfwidth: float = 4.0  # in conditional SDs of b_xc
    tau_e: float | None = None       # fix the response precision instead of gridding
    tau_x: float | None = None       # fix the exposure precision instead of gridding

    def __post_init__(self):
        if not self.sigma_u > 0:
            raise ValueError("sigma_u must be positive")
        if (self.grid_size < 1 or self.beta_grid_size < 1
                or not np.isfinite(self.grid_halfwidth) or not self.grid_halfwidth > 0
                or not np.isfinite(self.beta_grid_halfwidth) or not self.beta_grid_halfwidth > 0):
            raise ValueError("grid must be finite with at least one point")


@dataclass(frozen=True, eq=False)
class LatentGaussianData:
    y: np.ndarray
    w_d: np.ndarray
    Z: np.ndarray            # extra response covariates (n, q)
    Zt: np.ndarray           # exposure covariates (n, r)
    z_names: tuple = ()
    zt_names: tuple = ()

    @classmethod
    def build(cls, y, w_d, Z=None, Zt=None, z_names=(), zt_names=()):
        y = np.asarray(y, dtype=float)
        n = y.shape[0]
        w = np.asarray(w_d, dtype=float)
        Z = np.empty((n, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
        Zt = np.empty((n, 0)) if Zt is None else np.asarray(Zt, dtype=float).reshape(n, -1)
        if w.shape != (n,) or not np.all((w == 0) | (w == 1)):
            raise ValueError("w_d must be a 0/1 vector aligned with y")
        for a in (y, Z, Zt):
            if not np.all(np.isfinite(a)):
                raise NonFiniteInput("non-finite data")
        return cls(y, w, Z, Zt, tuple(z_names), tuple(zt_names))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def n_beta(self):
        return 2 + self.Z.shape[1]

    @property
    def n_alpha(self):
        return 1 + self.Zt.shape[1]

    def coef_names(self):
        return (["beta_0", "beta_xc"] + [f"beta_{c}" for c in self.z_names]
                + ["alpha_0"] + [f"alpha_{c}" for c in self.zt_names])


@dataclass(frozen=True, eq=False)
class BlockHessian:
    """Hessian ``[[diag(d), B], [B.T, C]]`` with ``d`` the x_c block."""

    d: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def dense(self):
        n, k = self.B.shape
        H = np.zeros((n + k, n + k))
        H[np.arange(n), np.arange(n)] = self.d
        H[:n, n:] = self.B
        H[n:, :n] = self.B.T
        H[n:, n:] = self.C
        return H

    def factor(self, ridge=0.0):
        """Return (d, B, cholesky of Schur complement) or raise LinAlgError."""
        d = self.d + ridge
        if np.any(d <= 0):
            raise np.linalg.LinAlgError("x_c block not positive")
        Bd = self.B / d[:, None]
        S = self.C + ridge * np.eye(self.C.shape[0]) - self.B.T @ Bd
        return d, Bd, np.linalg.cholesky(S)


def _split(theta, data):
    n, kb = data.n, data.n_beta
    return theta[:n], theta[n:n + kb], theta[n + kb:]


def joint_neg_log_posterior(theta, data: LatentGaussianData, model: LatentGaussianModel,
                            tau_e: float, tau_x: float):
    """Negative log joint density of (y, w_d, theta) given the precisions.

    Returns ``(value, gradient, BlockHessian)``; derivatives are analytic.
    """
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise NonFiniteInput("non-finite latent vector")
    x, beta, alpha = _split(theta, data)
    n = data.n
    su = model.sigma_u
    D = np.column_stack([np.ones(n), x, data.Z])
    E = np.column_stack([np.ones(n), data.Zt])
    R = data.y - D @ beta
    S = x - E @ alpha
    ll_w, d1, d2 = bernoulli_loglik_terms(x / su, data.w_d, "bernoulli-probit")
    vb, va = model.beta_prior_variance, model.alpha_prior_variance
    bx = beta[1]

    value = (0.5 * tau_e * R @ R - 0.5 * n * np.log(tau_e) + 0.5 * n * LOG_2PI
             - ll_w.sum()
             + 0.5 * tau_x * S @ S - 0.5 * n * np.log(tau_x) + 0.5 * n * LOG_2PI
             + 0.5 * beta @ beta / vb + 0.5 * beta.size * np.log(2 * np.pi * vb)
             + 0.5 * alpha @ alpha / va + 0.5 * alpha.size * np.log(2 * np.pi * va))

    g_x = -tau_e * R * bx - d1 / su + tau_x * S
    g_b = -tau_e * D.T @ R + beta / vb
    g_a = -tau_x * E.T @ S + alpha / va
    grad = np.concatenate([g_x, g_b, g_a])

    d = tau_e * bx ** 2 - d2 / su ** 2 + tau_x
    B_b = tau_e * bx * D
    B_b[:, 1] -= tau_e * R
    B_a = -tau_x * E
    kb, ka = beta.size, alpha.size
    C = np.zeros((kb + ka, kb + ka))
    C[:kb, :kb] = tau_e * D.T @ D + np.eye(kb) / vb
    C[kb:, kb:] = tau_x * E.T @ E + np.eye(ka) / va
    return value, grad, BlockHessian(d, np.column_stack([B_b, B_a]), C)


def _block_solve(factored, g):
    d, Bd, L = factored
    n = d.shape[0]
    g1, g2 = g[:n], g[n:]
    rhs = g2 - Bd.T @ g1
    s2 = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    s1 = g1 / d - Bd @ s2
    return np.concatenate([s1, s2])


def _factor_with_ridge(H: BlockHessian, max_ridge=RIDGE_MAX):
    try:
        return H.factor(), 0.0
    except np.linalg.LinAlgError:
        pass
    ridge = RIDGE_START
    while ridge <= max_ridge * (1 + 1e-12):
        try:
            return H.factor(ridge), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise HessianNotPD(f"joint Hessian not positive definite even with ridge {max_ridge:g}")


def _initial_theta(data: LatentGaussianData, sigma_u: float):
    # E[x_c | w_d] for a standard normal latent and unit measurement error
    x0 = np.where(data.w_d == 1, 1.0, -1.0) * np.sqrt(2.0 / np.pi) / np.sqrt(1.0 + sigma_u ** 2)
    D = np.column_stack([np.ones(data.n), x0, data.Z])
    beta0, *_ = np.linalg.lstsq(D, data.y, rcond=None)
    E = np.column_stack([np.ones(data.n), data.Zt])
    alpha0, *_ = np.linalg.lstsq(E, x0, rcond=None)
    return np.concatenate([x0, beta0, alpha0])


@dataclass(frozen=True, eq=False)
class GridPointFit:
    log_tau_e: float
    log_tau_x: float
    beta_xc: float | None     # fixed scaling, or None for a fully joint fit
    mode: np.ndarray          # full latent vector (x_c, b, a)
    log_evidence: float
    coef_mean: np.ndarray     # (b, a) block of the mode
    coef_cov: np.ndarray      # zero row and column for a fixed b_xc
    iterations: int
    ridge: float


def _conditional_terms(theta_r, data, model, tau_e, tau_x, beta_xc):
    """Joint terms with b_xc fixed and removed from the latent vector."""
    k = data.n + 1
    theta = np.insert(theta_r, k, beta_xc)
    f, g, H = joint_neg_log_posterior(theta, data, model, tau_e, tau_x)
    B = np.delete(H.B, 1, axis=1)
    C = np.delete(np.delete(H.C, 1, axis=0), 1, axis=1)
    return f, np.delete(g, k), BlockHessian(H.d, B, C)


def laplace_at(data, model, tau_e, tau_x, theta0=None, beta_xc=None, max_iter=200,
               grad_tol=1e-8, step_tol=1e-10) -> GridPointFit:
    """Newton fit of the latent vector at fixed hyperparameters.

    With ``beta_xc`` given, the scaling is held fixed and excluded from the
    latent vector; the returned evidence then includes its prior density.
    ``theta0`` is always a full-length vector.
    """
    n = data.n
    full0 = _initial_theta(data, model.sigma_u) if theta0 is None else np.array(theta0, dtype=float)
    if beta_xc is None:
        def terms(t):
            return joint_neg_log_posterior(t, data, model, tau_e, tau_x)
        theta = full0
    else:
        def terms(t):
            return _conditional_terms(t, data, model, tau_e, tau_x, beta_xc)
        theta = np.delete(full0, n + 1)

    f, g, H = terms(theta)
    max_ridge = 0.0
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < grad_tol:
            break
        # away from the mode the bilinear b_xc * x_c term can make the
        # Hessian indefinite; damp as strongly as needed there
        fac, ridge = _factor_with_ridge(H, max_ridge=DAMPING_MAX)
        max_ridge = max(max_ridge, ridge)
        step = _block_solve(fac, g)
        t = 1.0
        for _ in range(60):
            cand = theta - t * step
            f_new, g_new, H_new = terms(cand)
            if np.isfinite(f_new) and f_new <= f + 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            raise NotConverged("line search failed")
        moved = np.max(np.abs(cand - theta))
        theta, f, g, H = cand, f_new, g_new, H_new
        if moved < step_tol:
            break
    else:
        if np.max(np.abs(g)) >= grad_tol:
            raise NotConverged(f"joint Newton did not converge in {max_iter} iterations")
    fac, ridge = _factor_with_ridge(H)
    d, Bd, L = fac
    log_det = np.sum(np.log(d)) + 2.0 * np.sum(np.log(np.diag(L)))
    log_ev = -f + 0.5 * theta.size * LOG_2PI - 0.5 * log_det
    # coefficient block of the inverse Hessian is the inverse Schur complement
    Linv = np.linalg.solve(L, np.eye(L.shape[0]))
    cov = Linv.T @ Linv
    if beta_xc is not None:
        theta = np.insert(theta, n + 1, beta_xc)
        cov = np.insert(np.insert(cov, 1, 0.0, axis=0), 1, 0.0, axis=1)
    return GridPointFit(float(np.log(tau_e)), float(np.log(tau_x)), beta_xc, theta, float(log_ev),
                        theta[n:].copy(), cov, it, max(max_ridge, ridge))


@dataclass(frozen=True, eq=False)
class LatentGaussianFit:
    """Grid mixture over ``(log tau_e, log tau_x, b_xc)``.

    Every coefficient except ``beta_xc`` is a weighted mixture of the
    per-point Gaussian approximations.  ``beta_xc`` lives on the grid itself;
    its marginal is the weighted histogram with one bin centred on each
    node, ``beta_widths`` wide.
    """

    coef_names: tuple
    points: tuple              # GridPointFit per grid point
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray
    beta_widths: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def log_evidence(self):
        return np.array([p.log_evidence for p in self.points])

    @property
    def mode(self):
        """Latent vector at the highest-weight grid point."""
        return self.points[int(np.argmax(self.weights))].mode

    def _index(self, name_or_index):
        if isinstance(name_or_index, str):
            return self.coef_names.index(name_or_index)
        return int(name_or_index)

    def _binned(self):
        return self.beta_widths is not None and np.any(self.beta_widths > 0)

    def _kernels(self, j):
        locs = np.array([p.coef_mean[j] for p in self.points])
        sds = np.array([np.sqrt(p.coef_cov[j, j]) for p in self.points])
        return locs, sds

    def _cdf(self, j, q, locs, sds):
        if j == 1 and self._binned():
            h = np.where(self.beta_widths > 0, self.beta_widths, 1e-300)
            return float(self.weights @ np.clip((q - locs) / h + 0.5, 0.0, 1.0))
        return float(self.weights @ stats.norm.cdf(q, locs, sds))

    def cdf(self, coef, q):
        j = self._index(coef)
        return self._cdf(j, q, *self._kernels(j))

    def quantile(self, coef, alpha, tol=1e-12):
        j = self._index(coef)
        locs, sds = self._kernels(j)
        if j == 1 and self._binned():
            lo, hi = np.min(locs - self.beta_widths), np.max(locs + self.beta_widths)
        else:
            qs = stats.norm.ppf(alpha, locs, sds)
            lo, hi = float(qs.min()), float(qs.max())
        for _ in range(200):
            if hi - lo <= tol:
                break
            mid = 0.5 * (lo + hi)
            if self._cdf(j, mid, locs, sds) < alpha:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def interval(self, coef, level=0.95):
        a = 0.5 * (1.0 - level)
        return self.quantile(coef, a), self.quantile(coef, 1.0 - a)


def _beta_axis(cell, b0, model):
    """Conditional mode and curvature of b_xc in one precision cell."""
    res = optimize.minimize_scalar(cell, bracket=(b0 - 0.25, b0 + 0.25),
                                   options={"xtol": 1e-6})
    if not np.isfinite(res.fun):
        raise NotConverged("no valid b_xc in precision cell")
    b = float(res.x)
    h = 1e-3 * max(1.0, abs(b))
    curv = (cell(b + h) - 2.0 * res.fun + cell(b - h)) / h ** 2
    sd = 1.0 / np.sqrt(curv) if np.isfinite(curv) and curv > 0 else max(1.0, abs(b))
    if model.beta_grid_size == 1:
        return np.array([b]), 0.0
    axis = b + sd * np.linspace(-model.beta_grid_halfwidth, model.beta_grid_halfwidth,
                                model.beta_grid_size)
    return axis, float(axis[1] - axis[0])


def _fit_cell(data, model, le, lx, theta0, b0):
    warm = [theta0]
    memo = {}

    def solve(b):
        if b not in memo:
            memo[b] = laplace_at(data, model, np.exp(le), np.exp(lx), theta0=warm[0], beta_xc=b)
        return memo[b]

    def neg(b):
        try:
            pt = solve(float(b))
        except (NotConverged, HessianNotPD):
            return np.inf
        warm[0] = pt.mode
        return -pt.log_evidence

    axis, width = _beta_axis(neg, b0, model)
    centre = warm[0]
    pts = []
    for b in axis:
        warm[0] = centre if not pts else pts[-1].mode
        pts.append(solve(float(b)))
    return pts, width


def _precision_axis(fixed, centre, model):
    if fixed is not None:
        return np.array([np.log(fixed)])
    if model.grid_size == 1:
        return np.array([centre])
    return centre + np.linspace(-model.grid_halfwidth, model.grid_halfwidth, model.grid_size)


def fit_latent_gaussian(data: LatentGaussianData, model: LatentGaussianModel | None = None,
                        threads: int = 1) -> LatentGaussianFit:
    """Laplace fits integrated over a (log tau_e, log tau_x, b_xc) grid.

    The log-precision axes span ``grid_halfwidth`` log units either side of
    moment-based starts: half of var(y) for the response noise and a unit
    variance for the exposure residual.  The precisions carry a flat
    prior on that box.  Within each precision cell the b_xc axis is centred
    on its conditional mode and scaled by the local curvature; quadrature
    weights include the cell's b_xc spacing.
    """
    model = LatentGaussianModel() if model is None else model
    n = data.n
    if n < data.n_beta + 2:
        raise ValueError(f"need at least {data.n_beta + 2} observations")

    theta0 = _initial_theta(data, model.sigma_u)
    var_y = float(np.var(data.y))
    ax_e = _precision_axis(model.tau_e, np.log(2.0 / max(var_y, 1e-12)), model)
    ax_x = _precision_axis(model.tau_x, 0.0, model)
    cells = [(le, lx) for le in ax_e for lx in ax_x]

    def run(cell):
        return _fit_cell(data, model, cell[0], cell[1], theta0, float(theta0[n + 1]))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]

    points, widths = [], []
    for pts, width in results:
        points.extend(pts)
        widths.extend([width] * len(pts))
    widths = np.array(widths)
    log_post = np.array([p.log_evidence for p in points])
    if np.any(widths > 0):
        log_post = log_post + np.log(widths)
    w = np.exp(log_post - log_post.max())
    w /= w.sum()

    locs = np.array([p.coef_mean for p in points])
    variances = np.array([np.diag(p.coef_cov) for p in points])
    variances[:, 1] = widths ** 2 / 12.0
    mean = w @ locs
    var = w @ (variances + locs ** 2) - mean ** 2
    nb = len(points) // len(cells)
    W = w.reshape(ax_e.size, ax_x.size, nb)
    diag = {"grid_log_tau_e": ax_e.tolist(), "grid_log_tau_x": ax_x.tolist(),
            "beta_xc_range": [float(locs[:, 1].min()), float(locs[:, 1].max())],
            "max_ridge": max(p.ridge for p in points),
            "edge_weight": float(_edge_mass(W))}
    return LatentGaussianFit(tuple(data.coef_names()), tuple(points), w, mean,
                             np.sqrt(np.maximum(var, 0.0)), widths, diag)


def _edge_mass(W):
    mask = np.zeros(W.shape, dtype=bool)
    for axis, size in enumerate(W.shape):
        if size > 1:
            sl = [slice(None)] * W.ndim
            sl[axis] = [0, -1]
            mask[tuple(sl)] = True
    return W[mask].sum()
