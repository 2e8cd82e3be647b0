"""Binary-response GLMs and propensity-score weights."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, ndtr

from latentps.errors import DataError, NumericalError, SeparationError

PS_CLAMP = 1e-12
SEPARATION_ETA = 30.0


def _mean_and_slope(eta, link):
    if link == "logit":
        mu = expit(eta)
        return mu, mu * (1.0 - mu)
    if link == "probit":
        return ndtr(eta), np.exp(-0.5 * eta * eta) / np.sqrt(2.0 * np.pi)
    raise ValueError(f"unknown link {link!r}")


def fit_glm_binary(design, a, link="logit", weights=None, *, tol=1e-10, max_iter=100) -> np.ndarray:
    """Maximum-likelihood binary GLM by iteratively reweighted least squares.

    Parameters
    ----------
    design : ndarray, shape (n, k)
        Design matrix, including the intercept column.
    a : ndarray, shape (n,)
        0/1 response.
    link : {"logit", "probit"}
    weights : ndarray, optional
        Non-negative case weights (for weighted working models).
    tol : float
        Stop when the largest absolute coefficient change is below ``tol``.
    max_iter : int

    Returns
    -------
    ndarray, shape (k,)

    Raises
    ------
    SeparationError
        When every unit of one class has a linear predictor beyond +-30 on the
        side of its class.
    DataError
        When the design is rank deficient.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(a, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError("design and response have inconsistent shapes")
    if np.linalg.matrix_rank(X[w > 0]) < X.shape[1]:
        raise DataError("design matrix is rank deficient")
    beta = np.zeros(X.shape[1])
    eta = X @ beta
    for _ in range(max_iter):
        mu, d = _mean_and_slope(eta, link)
        mu = np.clip(mu, PS_CLAMP, 1 - PS_CLAMP)
        d = np.maximum(d, 1e-300)
        # Fisher scoring: regress the working response on X with weights d^2 / var.
        wt = w * d * d / (mu * (1.0 - mu))
        work = eta + (y - mu) / d
        XtW = X.T * wt
        try:
            new = np.linalg.solve(XtW @ X, XtW @ work)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"IRLS normal equations singular: {exc}") from exc
        step = np.max(np.abs(new - beta))
        beta = new
        eta = X @ beta
        pos, neg = (y == 1) & (w > 0), (y == 0) & (w > 0)
        if np.all(eta[pos] > SEPARATION_ETA) or np.all(eta[neg] < -SEPARATION_ETA):
            raise SeparationError("separation: a class is perfectly predicted")
        if step < tol:
            return beta
    if not np.all(np.isfinite(beta)):
        raise NumericalError("IRLS diverged")
    return beta


def propensity_scores(coefs, design, link="logit") -> np.ndarray:
    """Fitted exposure probabilities, clamped to [1e-12, 1 - 1e-12]."""
    eta = np.asarray(design, dtype=float) @ np.asarray(coefs, dtype=float)
    e = expit(eta) if link == "logit" else ndtr(eta)
    return np.clip(e, PS_CLAMP, 1.0 - PS_CLAMP)


def ate_weights(e, a) -> np.ndarray:
    """Inverse-probability weights a/e + (1-a)/(1-e)."""
    e, a = np.asarray(e, dtype=float), np.asarray(a, dtype=float)
    return a / e + (1.0 - a) / (1.0 - e)


def att_weights(e, a) -> np.ndarray:
    """Odds weights: 1 for exposed units, e/(1-e) for unexposed ones."""
    e, a = np.asarray(e, dtype=float), np.asarray(a, dtype=float)
    return a + (1.0 - a) * e / (1.0 - e)


def ps_design(z, proxy=None) -> np.ndarray:
    """Intercept, covariates and (optionally) proxy columns."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    cols = [np.ones((z.shape[0], 1)), z]
    if proxy is not None:
        proxy = np.asarray(proxy, dtype=float)
        cols.append(proxy[:, None] if proxy.ndim == 1 else proxy)
    return np.hstack(cols)


def fit_ps_weights(z, proxy, a, link="logit", kind="ate"):
    """Fit the propensity model on (Z, proxy) and return (weights, scores)."""
    design = ps_design(z, proxy)
    e = propensity_scores(fit_glm_binary(design, a, link), design, link)
    return (ate_weights(e, a) if kind == "ate" else att_weights(e, a)), e
