"""Proxy variables for latent confounders.

iFS is the posterior mean of X given (W, Z, A) under the joint model, cFS the
posterior mean given W alone under a measurement-only model, linear iFS the
Gaussian conditional mean under the all-linear model, and the summary score the
item mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import expit, log_ndtr, ndtr

from latentps.data import Dataset, MeasurementSpec, ModelSpec, default_model_spec
from latentps.errors import DataError, NumericalError
from latentps.sem.fit import (
    FittedFactorModel,
    FittedGaussianJoint,
    FittedSEM,
    fit_joint,
    fit_linear_joint,
    fit_measurement_only,
)
from latentps.sem.likelihood import evaluate

STRATEGIES = ("iFS", "cFS", "linear_iFS", "summary", "true_X", "all_items")


@dataclass(frozen=True)
class ProxyScores:
    """Per-unit proxy values, one column per latent block.

    ``all_items`` passes the raw items through, so its ``values`` has one
    column per item instead.
    """

    strategy: str
    values: np.ndarray
    block_names: tuple = ("x",)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if self.strategy not in STRATEGIES:
            raise DataError(f"unknown strategy {self.strategy!r}")
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"{self.strategy}: non-finite scores")
        if self.strategy != "all_items" and len(self.block_names) != v.shape[1]:
            raise DataError("one score column per latent block is required")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "block_names", tuple(self.block_names))

    @property
    def n(self) -> int:
        return self.values.shape[0]


def ifs_eap(model: FittedSEM, data: Dataset) -> ProxyScores:
    """Inclusive factor score E[X | W, Z, A] under the fitted joint model."""
    ev = evaluate(model.params, model.layout, model.encode(data), model.rule, grad=False)
    return ProxyScores("iFS", ev.post_mean, model.layout.block_names)


def latent_sd(model: FittedSEM, data: Dataset) -> np.ndarray:
    """Model-implied marginal SD of each latent block, sqrt(diag(B S_zz B' + Psi)).

    The joint model fixes Var(X | Z) = Psi with unit diagonal; dividing scores
    by this SD puts them on the scale of a latent with unit marginal variance.
    """
    p = model.params
    Szz = np.atleast_2d(np.cov(data.z, rowvar=False)) if data.p else np.zeros((0, 0))
    return np.sqrt(np.diag(p.B @ Szz @ p.B.T + p.psi_matrix()))


def eap_given_wz(model: FittedSEM, data: Dataset) -> np.ndarray:
    """E[X | W, Z] under the joint model (the exposure left out)."""
    ev = evaluate(model.params, model.layout, model.encode(data, with_exposure=False), model.rule, grad=False)
    return ev.post_mean


def cfs_eap(model: FittedFactorModel, w) -> ProxyScores:
    """Conventional factor score E[X | W] of one block."""
    ev = evaluate(model.params, model.layout, model.encode(np.asarray(w, dtype=float)), model.rule, grad=False)
    return ProxyScores("cFS", ev.post_mean, model.layout.block_names)


def linear_ifs(model: FittedGaussianJoint, data: Dataset) -> ProxyScores:
    """E[X | W, Z, A] under the all-linear Gaussian model."""
    ev = evaluate(model.params, model.layout, model.encode(data), grad=False)
    return ProxyScores("linear_iFS", ev.post_mean, model.layout.block_names)


def regression_scores(model: FittedGaussianJoint, data: Dataset) -> np.ndarray:
    """Regression-method scores Cov(X, V) Var(V)^-1 (V - mean), V = (W, Z, A).

    Uses the model-implied moments (with the sample moments of Z). Equals
    :func:`linear_ifs` because the Gaussian conditional mean of X given
    (W, A, Z) does not depend on the distribution of Z.
    """
    mean, cov = model.implied_moments()
    p, lay = model.params, model.layout
    kc, pz = lay.n_cont, lay.n_z
    mz = mean[kc - 1:kc - 1 + pz]
    Szz = cov[kc - 1:kc - 1 + pz, kc - 1:kc - 1 + pz]
    Psi = p.psi_matrix()
    cov_xz = p.B @ Szz
    var_x = Psi + p.B @ Szz @ p.B.T
    # Items (W then A) in layout order; Cov(item, X) = lam Var(X) + gam Cov(Z, X).
    cov_yx = p.lam_c @ var_x + p.gam_c @ cov_xz.T
    order = list(range(kc - 1)) + [kc - 1]
    cov_vx = np.vstack([cov_yx[order[:-1]], cov_xz.T, cov_yx[[kc - 1]]])
    V = np.column_stack([data.w, data.z, data.a])
    return mz @ p.B.T + (V - mean) @ np.linalg.solve(cov, cov_vx)


def summary_score(w, block_names=("x",)) -> ProxyScores:
    """Row means of the items."""
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    return ProxyScores("summary", w.mean(axis=1), block_names)


def summary_scores(data: Dataset) -> ProxyScores:
    """Item mean of every block."""
    return ProxyScores("summary", np.column_stack([w.mean(axis=1) for w in data.w_blocks]), data.block_names)


def cfs_scores(data: Dataset, spec: ModelSpec | None = None) -> tuple:
    """Fit a measurement-only model per block and score it.

    Returns
    -------
    scores : ProxyScores
    models : list of FittedFactorModel
    """
    spec = spec or default_model_spec(data)
    models, cols = [], []
    for w, block in zip(data.w_blocks, spec.latent_blocks):
        m = fit_measurement_only(w, MeasurementSpec(
            items=block.items, item_types=block.item_types, n_levels=block.n_levels,
            nuisance_groups=block.nuisance_groups, name=block.name,
        ))
        models.append(m)
        cols.append(cfs_eap(m, w).values[:, 0])
    return ProxyScores("cFS", np.column_stack(cols), data.block_names), models


def compute_proxy(strategy: str, data: Dataset, spec: ModelSpec | None = None, *, x=None, start=None):
    """Proxy scores for one strategy, fitting whatever model it needs.

    Parameters
    ----------
    strategy : str
        One of :data:`STRATEGIES`.
    data : Dataset
    spec : ModelSpec, optional
    x : ndarray, optional
        The true latent values, required for ``"true_X"``.
    start : optional
        Starting values for the joint fit (``"iFS"`` only).

    Returns
    -------
    scores : ProxyScores
    model : fitted model or None
    """
    if strategy == "iFS":
        m = fit_joint(data, spec, start=start)
        return ifs_eap(m, data), m
    if strategy == "cFS":
        return cfs_scores(data, spec)
    if strategy == "linear_iFS":
        m = fit_linear_joint(data, spec)
        return linear_ifs(m, data), m
    if strategy == "summary":
        return summary_scores(data), None
    if strategy == "true_X":
        if x is None:
            raise DataError("true_X needs the latent values")
        return ProxyScores("true_X", x, data.block_names), None
    if strategy == "all_items":
        return ProxyScores("all_items", data.w, data.block_names), None
    raise DataError(f"unknown strategy {strategy!r}")


def posterior_mean_oracle(model: FittedSEM, data: Dataset, unit: int, grid=(-8.0, 8.0, 4001)) -> float:
    """E[X | W, Z, A] of one unit by brute-force trapezoid integration.

    Evaluates the complete-data density on an evenly spaced grid, without the
    Gaussian marginalization used by the likelihood code, so it is an
    independent check of the scores. Single latent block only.

    Parameters
    ----------
    grid : (lo, hi, points)
        Must span at least [-8, 8] with at least 4001 points. The grid is
        widened to cover the prior mean +-8 when needed.
    """
    lo, hi, points = grid
    if lo > -8 or hi < 8 or points < 4001:
        raise ValueError("grid must span [-8, 8] with >= 4001 points")
    lay, p = model.layout, model.params
    if lay.n_latent != 1:
        raise ValueError("the dense-grid oracle handles one latent block")
    sd = model.encode(data).take([unit])
    z = sd.z[0]
    prior = float(p.B[0] @ z) if lay.n_z else 0.0
    lo, hi = min(lo, prior - 8.0), max(hi, prior + 8.0)
    x = np.linspace(lo, hi, int(points))
    logf = -0.5 * (x - prior) ** 2
    if lay.n_cont:
        Ls = p.nuisance_matrix(lay)
        Theta = np.diag(p.sig2) + Ls @ Ls.T
        resid = sd.wc[0] - p.nu - p.gam_c @ z - np.outer(x, p.lam_c[:, 0])
        logf += -0.5 * np.einsum("gi,ij,gj->g", resid, np.linalg.inv(Theta), resid)
    for k in range(lay.n_ord):
        eta = x * p.lam_o[k, 0] + p.gam_o[k] @ z
        cuts = np.concatenate([[-np.inf], p.tau[k], [np.inf]])
        c = sd.wo[0, k]
        logf += np.log(ndtr(eta - cuts[c]) - ndtr(eta - cuts[c + 1]))
    if lay.link is not None:
        eta = p.b0 + p.bx[0] * x + p.bz @ z
        s = 2.0 * sd.a[0] - 1.0
        logf += log_ndtr(s * eta) if lay.link == "probit" else np.log(expit(s * eta))
    top = logf.max()
    f = np.exp(logf - top)
    norm = np.trapezoid(f, x)
    if top + np.log(norm) - 0.5 * np.log(2 * np.pi) < np.log(1e-300):
        raise NumericalError("posterior normalizer below 1e-300")
    return float(np.trapezoid(x * f, x) / norm)


def scores_frame(scores, unit_id=None) -> pd.DataFrame:
    """Long table (unit_id, strategy, block, score) for a list of ProxyScores."""
    frames = []
    for s in scores:
        ids = np.arange(s.n) if unit_id is None else np.asarray(unit_id)
        names = s.block_names if s.strategy != "all_items" else tuple(f"item{k + 1}" for k in range(s.values.shape[1]))
        for j, name in enumerate(names):
            frames.append(pd.DataFrame({"unit_id": ids, "strategy": s.strategy, "block": name,
                                        "score": s.values[:, j]}))
    return pd.concat(frames, ignore_index=True)


def read_scores(path) -> dict:
    """Inverse of writing :func:`scores_frame` to CSV: strategy -> ProxyScores."""
    df = pd.read_csv(path)
    out = {}
    for strategy, g in df.groupby("strategy", sort=False):
        blocks = tuple(dict.fromkeys(g["block"].astype(str)))
        vals = np.column_stack([g.loc[g["block"].astype(str) == b, "score"].to_numpy() for b in blocks])
        out[strategy] = ProxyScores(strategy, vals, blocks if strategy != "all_items" else ("x",))
    return out
