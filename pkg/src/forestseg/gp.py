"""Gaussian-process regression with a squared-exponential kernel.

The surrogate behind the hyperparameter optimizer: targets are mean-centered
(zero-mean prior), the covariance is sigma_f^2 * exp(-r^2 / (2 l^2)) with a
scalar or per-dimension length scale, and kernel hyperparameters are chosen
by maximizing the log marginal likelihood from several restarts. Everything
runs on dense Cholesky factorizations; inputs are expected normalized to the
unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize, stats

JITTER = 1e-10


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel hyperparameters."""

    signal_variance: float = 1.0
    length_scale: float | np.ndarray = 0.5
    noise_variance: float = 1e-8

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.length_scale, dtype=np.float64))
        if self.signal_variance <= 0 or np.any(ls <= 0) or self.noise_variance < 0:
            raise ValueError("kernel hyperparameters must be positive "
                             "(noise variance may be zero)")
        object.__setattr__(self, "length_scale", ls if ls.size > 1 else float(ls[0]))

    @property
    def length_scales(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.length_scale, dtype=np.float64))


def _scaled(x: np.ndarray, k: KernelConfig) -> np.ndarray:
    return np.atleast_2d(x) / k.length_scales


def kernel_eval(a, b, k: KernelConfig) -> float:
    """Covariance between two points."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d2 = float(np.sum(((a - b) / k.length_scales) ** 2))
    return k.signal_variance * np.exp(-0.5 * d2)


def kernel_matrix(xa: np.ndarray, xb: np.ndarray, k: KernelConfig) -> np.ndarray:
    """Cross-covariance matrix between two point sets."""
    sa = _scaled(xa, k)
    sb = _scaled(xb, k)
    d2 = (np.sum(sa ** 2, axis=1)[:, None] + np.sum(sb ** 2, axis=1)[None, :]
          - 2.0 * sa @ sb.T)
    return k.signal_variance * np.exp(-0.5 * np.maximum(d2, 0.0))


@dataclass(frozen=True)
class GPModel:
    """Fitted posterior: training data, centered targets and the cached
    Cholesky factor of K + noise*I."""

    kernel: KernelConfig
    x_train: np.ndarray
    y_train: np.ndarray
    y_mean: float
    chol: np.ndarray
    alpha: np.ndarray  # (K + noise I)^-1 (y - mean)


def _reject_conflicting_duplicates(x: np.ndarray, y: np.ndarray) -> None:
    """Duplicated inputs with differing targets make a noiseless GP ill-posed
    no matter how much jitter rescues the factorization numerically."""
    _, inverse = np.unique(x, axis=0, return_inverse=True)
    for group in range(inverse.max() + 1):
        targets = y[inverse == group]
        if len(targets) > 1 and not np.all(targets == targets[0]):
            raise np.linalg.LinAlgError(
                "duplicated inputs with conflicting targets and zero noise")


def gp_fit(x: np.ndarray, y: np.ndarray, k: KernelConfig) -> GPModel:
    """Fit the posterior for the given kernel hyperparameters.

    Targets are centered so the prior mean is the training mean. A failed
    Cholesky factorization is retried once with jitter and then reported,
    since it signals duplicated inputs with a vanishing noise level."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("gp_fit requires at least two observations")
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    if k.noise_variance == 0.0:
        _reject_conflicting_duplicates(x, y)
    y_mean = float(y.mean())
    centered = y - y_mean
    cov = kernel_matrix(x, x, k)
    cov[np.diag_indices_from(cov)] += k.noise_variance
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        cov[np.diag_indices_from(cov)] += JITTER
        try:
            chol = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "kernel matrix is not positive definite even with jitter; "
                "check for duplicated inputs with zero noise") from exc
    alpha = linalg.cho_solve((chol, True), centered)
    return GPModel(kernel=k, x_train=x, y_train=y, y_mean=y_mean, chol=chol, alpha=alpha)


def gp_predict(model: GPModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one or more points."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != model.x_train.shape[1]:
        raise ValueError(f"dimension mismatch: model is {model.x_train.shape[1]}-d, "
                         f"query is {x2.shape[1]}-d")
    k_star = kernel_matrix(x2, model.x_train, model.kernel)
    mean = k_star @ model.alpha + model.y_mean
    v = linalg.solve_triangular(model.chol, k_star.T, lower=True)
    var = model.kernel.signal_variance - np.sum(v ** 2, axis=0)
    var = np.maximum(var, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def gp_mean_gradient(model: GPModel, x) -> np.ndarray:
    """Gradient of the posterior mean, used to polish acquisition candidates."""
    x = np.asarray(x, dtype=np.float64)
    k_star = kernel_matrix(x[None, :], model.x_train, model.kernel)[0]
    diff = (x[None, :] - model.x_train) / model.kernel.length_scales ** 2
    return -(k_star * model.alpha) @ diff


def expected_improvement(model: GPModel, x, best: float) -> float:
    """EI for maximization; collapses to max(0, mean - best) at zero variance."""
    mean, var = gp_predict(model, x)
    sigma = np.sqrt(var)
    if sigma < 1e-12:
        return max(0.0, float(mean) - best)
    z = (mean - best) / sigma
    return float((mean - best) * stats.norm.cdf(z) + sigma * stats.norm.pdf(z))


def expected_improvement_batch(model: GPModel, x: np.ndarray, best: float) -> np.ndarray:
    mean, var = gp_predict(model, np.atleast_2d(x))
    sigma = np.sqrt(var)
    improve = mean - best
    ei = np.where(sigma < 1e-12, np.maximum(improve, 0.0), 0.0)
    ok = sigma >= 1e-12
    z = np.zeros_like(sigma)
    z[ok] = improve[ok] / sigma[ok]
    ei[ok] = improve[ok] * stats.norm.cdf(z[ok]) + sigma[ok] * stats.norm.pdf(z[ok])
    return np.maximum(ei, 0.0)


def log_marginal_likelihood(x: np.ndarray, y: np.ndarray, k: KernelConfig) -> float:
    """Log evidence of the centered targets under the kernel."""
    y = np.asarray(y, dtype=np.float64)
    centered = y - y.mean()
    cov = kernel_matrix(x, x, k)
    cov[np.diag_indices_from(cov)] += k.noise_variance + JITTER
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        return -np.inf
    alpha = linalg.cho_solve((chol, True), centered)
    return float(-0.5 * centered @ alpha - np.sum(np.log(np.diag(chol)))
                 - 0.5 * len(y) * np.log(2 * np.pi))


def _lml_and_gradient(x: np.ndarray, centered: np.ndarray, sf2: float,
                      ls: np.ndarray, noise: float):
    """Log marginal likelihood and its gradient in (log sf2, log l_k, log noise).

    Uses d lml / d theta = 0.5 tr((alpha alpha^T - K^-1) dK/d theta)."""
    n = len(x)
    scaled = x / ls
    d2 = (np.sum(scaled ** 2, axis=1)[:, None] + np.sum(scaled ** 2, axis=1)[None, :]
          - 2.0 * scaled @ scaled.T)
    noiseless = sf2 * np.exp(-0.5 * np.maximum(d2, 0.0))
    cov = noiseless + (noise + JITTER) * np.eye(n)
    try:
        chol = linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        return -np.inf, None
    alpha = linalg.cho_solve((chol, True), centered)
    lml = (-0.5 * centered @ alpha - np.sum(np.log(np.diag(chol)))
           - 0.5 * n * np.log(2 * np.pi))

    inner = np.outer(alpha, alpha) - linalg.cho_solve((chol, True), np.eye(n))
    grad = np.empty(2 + len(ls))
    grad[0] = 0.5 * np.sum(inner * noiseless)  # d/d log sf2
    for j in range(len(ls)):
        sq = (x[:, j, None] - x[None, :, j]) ** 2 / ls[j] ** 2
        grad[1 + j] = 0.5 * np.sum(inner * (noiseless * sq))  # d/d log l_j
    grad[-1] = 0.5 * noise * np.trace(inner)  # d/d log noise
    return float(lml), grad


_LOG_BOUNDS_SF2 = (np.log(1e-4), np.log(1e3))
_LOG_BOUNDS_LS = (np.log(0.01), np.log(10.0))
_LOG_BOUNDS_NOISE = (np.log(1e-8), np.log(1.0))


def fit_kernel_config(x: np.ndarray, y: np.ndarray, seed: int = 0, ard: bool = False,
                      n_restarts: int = 8) -> KernelConfig:
    """Choose kernel hyperparameters by maximizing the marginal likelihood.

    Optimizes (log sigma_f^2, log l, log sigma_n^2) with L-BFGS-B from
    ``n_restarts`` starting points: a fixed heuristic start plus random draws
    from the box, deterministic given ``seed``. ``ard`` switches to one length
    scale per input dimension (used by the importance analysis)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    dim = x.shape[1]
    n_ls = dim if ard else 1

    y_var = float(np.var(y - y.mean()))
    if y_var <= 0:
        y_var = 1.0

    centered = y - y.mean()

    def unpack(theta):
        sf2 = np.exp(theta[0])
        ls = np.exp(theta[1:1 + n_ls])
        noise = np.exp(theta[1 + n_ls])
        return KernelConfig(signal_variance=sf2,
                            length_scale=ls if ard else float(ls[0]),
                            noise_variance=noise)

    def negative_lml(theta):
        sf2 = np.exp(theta[0])
        ls = np.exp(theta[1:1 + n_ls])
        noise = np.exp(theta[1 + n_ls])
        ls_full = ls if ard else np.full(dim, ls[0])
        lml, grad = _lml_and_gradient(x, centered, sf2, ls_full, noise)
        if grad is None:
            return np.inf, np.zeros(len(theta))
        if not ard:  # one shared length scale accumulates all per-dim terms
            grad = np.array([grad[0], grad[1:1 + dim].sum(), grad[-1]])
        return -lml, -grad

    bounds = ([_LOG_BOUNDS_SF2] + [_LOG_BOUNDS_LS] * n_ls + [_LOG_BOUNDS_NOISE])
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([[np.log(y_var)], np.full(n_ls, np.log(0.5)), [np.log(1e-4)]])]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    for _ in range(n_restarts - 1):
        starts.append(lo + rng.random(len(bounds)) * (hi - lo))

    best_theta, best_value = starts[0], np.inf
    for theta0 in starts:
        res = optimize.minimize(negative_lml, theta0, method="L-BFGS-B",
                                jac=True, bounds=bounds)
        if np.isfinite(res.fun) and res.fun < best_value:
            best_theta, best_value = res.x, res.fun
    return unpack(best_theta)
