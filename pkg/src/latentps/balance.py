"""Weighted balance diagnostics between exposed and unexposed units."""

from __future__ import annotations

import numpy as np
import pandas as pd

from latentps.data import Dataset
from latentps.errors import DataError


def _arm_weights(a, q):
    a = np.asarray(a, dtype=float)
    q = np.ones_like(a) if q is None else np.asarray(q, dtype=float)
    if q.shape != a.shape:
        raise DataError("weights and exposure differ in length")
    if np.any(q < 0) or not np.all(np.isfinite(q)):
        raise DataError("weights must be finite and non-negative")
    w1, w0 = a * q, (1.0 - a) * q
    if w1.sum() <= 0 or w0.sum() <= 0:
        raise DataError("an exposure group has zero total weight")
    return w1, w0


def weighted_means(v, a, q=None):
    """Weighted means of ``v`` (or of each column) in the exposed and unexposed arms."""
    w1, w0 = _arm_weights(a, q)
    v = np.asarray(v, dtype=float)
    return (w1 @ v) / w1.sum(), (w0 @ v) / w0.sum()


def weighted_moment_diffs(v, a, q=None, k_max=5) -> np.ndarray:
    """Differences in raw moments E[v^k] between weighted arms, k = 1..k_max.

    Raw (non-central) moments are used because the simulated covariates are
    standardized; central moments follow from the raw ones if needed.
    """
    v = np.asarray(v, dtype=float)
    powers = v[:, None] ** np.arange(1, k_max + 1)
    m1, m0 = weighted_means(powers, a, q)
    return m1 - m0


def smd(v, a, q=None, *, pooled=False) -> float:
    """Standardized mean difference, exposed minus unexposed.

    Weights apply to the means only. The denominator is the unweighted
    standard deviation of ``v`` among the exposed (the reference group for
    effects on the exposed), or with ``pooled=True`` the square root of the
    average of the two unweighted arm variances.
    """
    v = np.asarray(v, dtype=float)
    a = np.asarray(a)
    m1, m0 = weighted_means(v, a, q)
    sd = np.std(v[a == 1], ddof=1)
    if pooled:
        sd = np.sqrt(0.5 * (sd ** 2 + np.var(v[a == 0], ddof=1)))
    if not sd > 0:
        raise DataError("standard deviation of the reference group is zero")
    return float((m1 - m0) / sd)


def balance_table(data: Dataset, proxies=(), weights: dict | None = None, *, pooled=False) -> pd.DataFrame:
    """Means and SMDs of covariates and proxy scores, unweighted and weighted.

    Parameters
    ----------
    data : Dataset
    proxies : sequence of ProxyScores
        Each contributes one row per column, labelled ``strategy:block``.
    weights : dict, optional
        Strategy name -> weight vector; each adds weighted mean and SMD columns.
    pooled : bool
        Use the pooled SD in the SMD denominator.

    Returns
    -------
    DataFrame
        One row per variable with columns ``mean_exposed``, ``mean_unexposed``,
        ``smd`` and, per weighting strategy ``s``, ``mean_unexposed_s`` and
        ``smd_s`` (and ``mean_exposed_s``).
    """
    rows = [(name, data.z[:, j]) for j, name in enumerate(data.z_names)]
    for s in proxies:
        if s.n != data.n:
            raise DataError(f"{s.strategy}: scores have {s.n} units, data {data.n}")
        rows += [(f"{s.strategy}:{b}", s.values[:, j]) for j, b in enumerate(s.block_names)]
    weights = weights or {}
    out = []
    for name, v in rows:
        m1, m0 = weighted_means(v, data.a)
        rec = {"variable": name, "mean_exposed": m1, "mean_unexposed": m0, "smd": _safe_smd(v, data.a, None, pooled)}
        for label, q in weights.items():
            m1, m0 = weighted_means(v, data.a, q)
            rec[f"mean_exposed_{label}"] = m1
            rec[f"mean_unexposed_{label}"] = m0
            rec[f"smd_{label}"] = _safe_smd(v, data.a, q, pooled)
        out.append(rec)
    return pd.DataFrame(out)


def _safe_smd(v, a, q, pooled):
    # Covariates constant among the exposed (rare dummy levels) get NaN, not an error.
    try:
        return smd(v, a, q, pooled=pooled)
    except DataError:
        return np.nan
