"""Closed-form inverse-probability weighting functions under a normal measurement model.

With W | X, Z ~ N(lam0 + lam_x X + lam_z Z, Sigma) and a logit exposure model,
the GLS estimate X_MLE is normal around X with variance v = (lam_x' Sigma^-1
lam_x)^-1. Plugging it into the logit weight and multiplying by
exp(-beta_x^2 v / 2) gives a weighting function Q1 of the observed data whose
conditional mean given (Z, X, A) is the correct weight Q0.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr
from scipy.stats import spearmanr

from latentps.data import MeasurementSpec, ModelSpec
from latentps.dgp import MEASUREMENTS, ScenarioConfig, build_dataset, gen_measurements, simulate, stream
from latentps.errors import DataError, LatentPSError, NumericalError
from latentps.propensity import ate_weights, fit_glm_binary, fit_ps_weights, propensity_scores, ps_design
from latentps.scores import ifs_eap
from latentps.sem.fit import FittedSEM, fit_joint

log = logging.getLogger(__name__)

MAX_SKIP_RATE = 0.05


@dataclass(frozen=True)
class LogitNormalParams:
    """Exposure coefficients and a normal measurement model for K items.

    ``beta_z`` has one entry per covariate; ``lam0`` and ``lam_x`` have K
    entries, ``lam_z`` is (K, p) and ``Sigma`` is the K x K error covariance.
    """

    beta0: float
    beta_x: float
    beta_z: np.ndarray
    lam0: np.ndarray
    lam_x: np.ndarray
    lam_z: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        bz = np.atleast_1d(np.asarray(self.beta_z, dtype=float))
        l0 = np.atleast_1d(np.asarray(self.lam0, dtype=float))
        lx = np.atleast_1d(np.asarray(self.lam_x, dtype=float))
        lz = np.asarray(self.lam_z, dtype=float).reshape(lx.size, bz.size)
        S = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if S.shape != (lx.size, lx.size) or l0.size != lx.size:
            raise DataError("measurement parameters disagree on the number of items")
        if not np.allclose(S, S.T):
            raise DataError("Sigma must be symmetric")
        if not np.any(lx != 0):
            raise DataError("lam_x must not be the zero vector")
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("Sigma is not positive definite") from exc
        for name, v in (("beta_z", bz), ("lam0", l0), ("lam_x", lx), ("lam_z", lz), ("Sigma", S)):
            object.__setattr__(self, name, v)
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "beta_x", float(self.beta_x))

    @classmethod
    def from_sem(cls, model: FittedSEM) -> LogitNormalParams:
        """Parameters of a fitted single-block joint model with continuous items."""
        lay, p = model.layout, model.params
        if lay.n_latent != 1 or lay.n_ord or lay.nuisance:
            raise DataError("closed-form weights need one latent block of continuous items without nuisance factors")
        return cls(p.b0, p.bx[0], p.bz, p.nu, p.lam_c[:, 0], p.gam_c, np.diag(p.sig2))


def _linear_predictor(z, x, params):
    z = np.asarray(z, dtype=float)
    z = z.reshape(-1, params.beta_z.size)
    return params.beta0 + params.beta_x * np.asarray(x, dtype=float).reshape(-1) + z @ params.beta_z


def q0_weight(z, x, a, params: LogitNormalParams, link="logit") -> np.ndarray:
    """Correct inverse-probability weight from the true (Z, X)."""
    eta = _linear_predictor(z, x, params)
    a = np.asarray(a, dtype=float).reshape(-1)
    if link == "logit":
        return 1.0 + np.exp((1.0 - 2.0 * a) * eta)
    if link == "probit":
        return a / ndtr(eta) + (1.0 - a) / ndtr(-eta)
    raise ValueError(f"unknown link {link!r}")


def var_mle(params: LogitNormalParams) -> float:
    """Variance of X_MLE around X: (lam_x' Sigma^-1 lam_x)^-1."""
    return float(1.0 / (params.lam_x @ np.linalg.solve(params.Sigma, params.lam_x)))


def x_mle(w, z, params: LogitNormalParams) -> np.ndarray:
    """GLS estimate of X from the items: v lam_x' Sigma^-1 (W - lam0 - lam_z Z)."""
    w = np.asarray(w, dtype=float).reshape(-1, params.lam_x.size)
    z = np.asarray(z, dtype=float).reshape(-1, params.beta_z.size)
    try:
        h = np.linalg.solve(params.Sigma, params.lam_x)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("Sigma is singular") from exc
    return (w - params.lam0 - z @ params.lam_z.T) @ h / (params.lam_x @ h)


def x_star(w, z, a, params: LogitNormalParams) -> np.ndarray:
    """X_MLE shifted by (2A - 1) beta_x v / 2."""
    a = np.asarray(a, dtype=float).reshape(-1)
    return x_mle(w, z, params) + (2.0 * a - 1.0) * params.beta_x * var_mle(params) / 2.0


def q1_weight(w, z, a, params: LogitNormalParams) -> np.ndarray:
    """Observed-data weight with E[Q1 | Z, X, A] = Q0 (logit exposure).

    Computed as 1 + exp[(1-2A) eta(X_MLE)] exp(-beta_x^2 v / 2) and checked
    against the equivalent form 1 + exp[(1-2A) eta(X*)].
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    v = var_mle(params)
    s = 1.0 - 2.0 * a
    q = 1.0 + np.exp(s * _linear_predictor(z, x_mle(w, z, params), params) - 0.5 * params.beta_x ** 2 * v)
    alt = 1.0 + np.exp(s * _linear_predictor(z, x_star(w, z, a, params), params))
    if not np.allclose(q, alt, rtol=1e-12, atol=0.0):
        raise NumericalError("closed-form and shifted-estimate weights disagree")
    return q


# Per-unit weight bias over measurement replicates ---------------------------

@dataclass
class WeightBiasResult:
    """Per-unit bias and variance of estimated weights across W replicates.

    ``table`` is sorted by Q0; ``rank_corr`` holds the Spearman correlation
    between Q and Q1 in each successful replicate (empty for probit).
    """

    table: pd.DataFrame
    rank_corr: np.ndarray
    n_skipped: int
    link: str


def _weights_replicate(cfg, fixed, rep):
    z, x, a = fixed
    rng = stream(cfg.seed, f"{cfg.scenario_id}:weights", rep, MEASUREMENTS)
    w = gen_measurements(x, cfg, rng)
    data = build_dataset(z, w, a)
    link = cfg.analysis_link
    try:
        with np.errstate(all="ignore"):
            model = fit_joint(data, _spec(cfg, w.shape[1], link))
            q, _ = fit_ps_weights(data.z, ifs_eap(model, data).values, a, link)
            qw, _ = fit_ps_weights(data.z, w.mean(axis=1), a, link)
            q1 = q1_weight(w, data.z, a, LogitNormalParams.from_sem(model)) if link == "logit" else None
    except (LatentPSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"
    return rep, (q, qw, q1), None


def _spec(cfg, k, link):
    return ModelSpec((MeasurementSpec.continuous([f"w{j + 1}" for j in range(k)], name="x"),), link)


def _weights_chunk(cfg, fixed, reps):
    return [_weights_replicate(cfg, fixed, r) for r in reps]


def weight_bias_experiment(cfg: ScenarioConfig, m_reps=2000, *, workers=1) -> WeightBiasResult:
    """Bias of Q (iFS), Q_W (summary score) and Q1 relative to Q0, per unit.

    One dataset of (Z, X, A) is drawn from ``cfg`` (replicate 0) and held
    fixed. Q0 comes from the propensity model fitted to the true (Z, X). Each
    of ``m_reps`` fresh item draws is analysed with the iFS and the summary
    score, and for a logit exposure Q1 is computed from the fitted joint
    model's parameters.

    Raises
    ------
    NumericalError
        If more than 5% of replicates fail.
    """
    sim = simulate(cfg, 0)
    z, x, a = sim.data.z[:, 0], sim.x, sim.data.a.astype(float)
    link = cfg.analysis_link
    design = ps_design(z, x)
    q0 = ate_weights(propensity_scores(fit_glm_binary(design, a, link), design, link), a)
    fixed = (z, x, a)
    reps = list(range(m_reps))
    if workers > 1:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_weights_chunk, [cfg] * workers, [fixed] * workers, chunks)
                       for r in part]
    else:
        results = _weights_chunk(cfg, fixed, reps)
    results.sort(key=lambda r: r[0])
    good = [v for _, v, _ in results if v is not None]
    for rep, v, err in results:
        if v is None:
            log.warning("weight replicate %d skipped: %s", rep, err)
    n_skipped = m_reps - len(good)
    if n_skipped > MAX_SKIP_RATE * m_reps:
        raise NumericalError(f"weight experiment: {n_skipped} of {m_reps} replicates failed")
    cols = {"unit_id": np.arange(z.size), "q0": q0}
    series = {"q": np.array([g[0] for g in good]), "qW": np.array([g[1] for g in good])}
    rank_corr = np.array([])
    if link == "logit":
        series["q1"] = np.array([g[2] for g in good])
        rank_corr = np.array([spearmanr(q, q1)[0] for q, q1 in zip(series["q"], series["q1"])])
    m = len(good)
    for name, s in series.items():
        cols[f"mean_{name}"] = s.mean(axis=0)
        cols[f"bias_{name}"] = cols[f"mean_{name}"] - q0
        cols[f"var_{name}"] = s.var(axis=0, ddof=1)
        cols[f"se_{name}"] = np.sqrt(cols[f"var_{name}"] / m)
    table = pd.DataFrame(cols).sort_values("q0", kind="stable").reset_index(drop=True)
    return WeightBiasResult(table=table, rank_corr=rank_corr, n_skipped=n_skipped, link=link)
