"""Weighting estimators of causal effects and the nonparametric bootstrap."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from latentps.balance import balance_table
from latentps.data import Dataset, ModelSpec, default_model_spec
from latentps.dgp import stream
from latentps.errors import DataError, LatentPSError, NumericalError
from latentps.propensity import att_weights, fit_glm_binary, propensity_scores, ps_design
from latentps.scores import ProxyScores, ifs_eap, summary_scores
from latentps.sem.fit import fit_joint, refit_hess_inv
from latentps.sem.model import observed_levels

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.10


def _hajek(y, a, q):
    y, a, q = (np.asarray(v, dtype=float) for v in (y, a, q))
    w1, w0 = a * q, (1.0 - a) * q
    if w1.sum() <= 0 or w0.sum() <= 0:
        raise DataError("an exposure group has zero total weight")
    return (w1 @ y) / w1.sum(), (w0 @ y) / w0.sum()


def ace_weighting_only(y, a, q) -> float:
    """Difference of normalized weighted mean outcomes, with ATE weights ``q``."""
    m1, m0 = _hajek(y, a, q)
    return float(m1 - m0)


def acee_weighting_only(y, a, q) -> float:
    """Exposed mean outcome minus the odds-weighted unexposed mean.

    ``q`` holds ATT weights; the exposed units' weights are ignored (they are
    one by construction).
    """
    a = np.asarray(a, dtype=float)
    m1, m0 = _hajek(y, a, a + (1.0 - a) * np.asarray(q, dtype=float))
    return float(m1 - m0)


@dataclass(frozen=True)
class WeightingPlus:
    """Weighting-plus estimate and its ingredients."""

    estimate: float
    exposed_mean: float
    predicted_untreated: float
    coefs: np.ndarray


def acee_weighting_plus(y, a, covariates, q, *, include_exposure=True) -> WeightingPlus:
    """Odds weighting combined with a logistic working outcome model.

    Fits ``logit P(Y=1) = c0 + c_a A + c' covariates`` to the sample weighted
    by ``q``, predicts every exposed unit's outcome probability with A set to
    0, and subtracts the mean prediction from the exposed mean outcome.

    Parameters
    ----------
    y : array_like
        Binary outcome.
    a : array_like
        Binary exposure.
    covariates : ndarray, shape (n, k)
        Working-model covariates (observed covariates and proxy scores).
    q : array_like
        ATT weights.
    include_exposure : bool
        If False the working model omits A (its coefficient is fixed at 0).

    Raises
    ------
    SeparationError
        If the working model is separated.
    """
    y, a = np.asarray(y, dtype=float), np.asarray(a, dtype=float)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("weighting-plus requires a binary outcome")
    x = ps_design(covariates)
    design = np.column_stack([x[:, :1], a, x[:, 1:]]) if include_exposure else x
    coefs = fit_glm_binary(design, y, "logit", weights=a + (1.0 - a) * np.asarray(q, dtype=float))
    exposed = a == 1
    d0 = design[exposed].copy()
    if include_exposure:
        d0[:, 1] = 0.0
    pred = propensity_scores(coefs, d0, "logit")
    m1 = float(y[exposed].mean())
    m0 = float(pred.mean())
    return WeightingPlus(estimate=m1 - m0, exposed_mean=m1, predicted_untreated=m0, coefs=coefs)


# Bootstrap ------------------------------------------------------------------

@dataclass
class BootstrapCI:
    """Equal-tail percentile intervals from a nonparametric bootstrap.

    ``lo`` and ``hi`` have one entry per estimator output (a scalar estimator
    gives length-one arrays); iterating yields ``(lo, hi)`` so the result
    unpacks like a tuple.
    """

    lo: np.ndarray
    hi: np.ndarray
    level: float
    replicates: np.ndarray = field(repr=False)
    n_failed: int = 0

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    def __iter__(self):
        if self.lo.size == 1:
            return iter((float(self.lo[0]), float(self.hi[0])))
        return iter((self.lo, self.hi))


def bootstrap_indices(n, seed, rep) -> np.ndarray:
    return stream(seed, "bootstrap", rep).integers(0, n, n)


def _one_replicate(estimator, data, seed, rep):
    try:
        with np.errstate(all="ignore"):
            return rep, np.atleast_1d(np.asarray(estimator(data.take(bootstrap_indices(data.n, seed, rep))),
                                                 dtype=float)), None
    except (LatentPSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def _run_chunk(estimator, data, seed, reps):
    return [_one_replicate(estimator, data, seed, r) for r in reps]


def bootstrap_replicates(estimator, data: Dataset, B, seed=0, workers=1):
    """Estimates on ``B`` resamples; rows of failed replicates are NaN.

    Replicate ``b`` always resamples with the generator keyed by
    ``(seed, b)``, so results do not depend on ``workers``.
    """
    reps = list(range(B))
    if workers > 1:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_run_chunk, [estimator] * workers, [data] * workers,
                                              [seed] * workers, chunks) for r in part]
    else:
        results = _run_chunk(estimator, data, seed, reps)
    results.sort(key=lambda r: r[0])
    k = next((v.size for _, v, _ in results if v is not None), 1)
    out = np.full((B, k), np.nan)
    for rep, v, err in results:
        if v is None:
            log.warning("bootstrap replicate %d failed: %s", rep, err)
        else:
            out[rep] = v
    return out


def bootstrap_ci(estimator, data: Dataset, B=500, level=0.95, seed=0, *, workers=1) -> BootstrapCI:
    """Percentile bootstrap interval re-running ``estimator`` on each resample.

    Parameters
    ----------
    estimator : callable
        Maps a Dataset to a float or a vector of floats. It must redo every
        fitted step (models, scores, propensity scores) and be picklable when
        ``workers > 1``.
    data : Dataset
    B : int
        Number of resamples, at least 200.
    level : float
        Coverage of the equal-tail interval.
    seed : int
    workers : int
        Processes used for the replicates.

    Raises
    ------
    NumericalError
        If more than 10% of replicates fail. Failed replicates below that rate
        are logged and dropped.
    """
    if B < 200:
        raise DataError("bootstrap needs B >= 200")
    reps = bootstrap_replicates(estimator, data, B, seed, workers)
    ok = ~np.isnan(reps).any(axis=1)
    n_failed = int(B - ok.sum())
    if n_failed > MAX_FAILURE_RATE * B:
        raise NumericalError(f"bootstrap: {n_failed} of {B} replicates failed")
    alpha = 1.0 - level
    lo, hi = np.quantile(reps[ok], [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return BootstrapCI(lo=lo, hi=hi, level=level, replicates=reps, n_failed=n_failed)


# Effect on the exposed with latent covariates -------------------------------

ROW_FIELDS = ("exposed_mean", "weighted_unexposed", "acee_weighting_only", "predicted_untreated",
              "acee_weighting_plus")


def correction_rows(block_names) -> list:
    """Which blocks use iFS in each reported row: none, each one alone, all."""
    k = len(block_names)
    rows = [("neither corrected", ())]
    if k > 1:
        rows += [(f"{b} corrected", (j,)) for j, b in enumerate(block_names)]
    rows.append(("all corrected" if k > 1 else "corrected", tuple(range(k))))
    return rows


def _row_estimates(data, proxy, outcome):
    y = data.y[outcome]
    cov = np.column_stack([data.z, proxy])
    ps = fit_glm_binary(ps_design(cov), data.a, "logit")
    q = att_weights(propensity_scores(ps, ps_design(cov), "logit"), data.a)
    m1, m0 = _hajek(y, data.a, data.a + (1 - data.a) * q)
    plus = acee_weighting_plus(y, data.a, cov, q)
    return np.array([m1, m0, m1 - m0, plus.predicted_untreated, plus.estimate]), q


@dataclass
class AceePipeline:
    """Full analysis of one dataset: SEM fit, scores, PS, ACEE estimates.

    Calling the pipeline on a Dataset returns, for every row of
    :func:`correction_rows`, the values named in :data:`ROW_FIELDS`
    concatenated into one vector. Bootstrap replicates call it on resamples,
    warm-starting the SEM at ``start`` and keeping the ordinal levels fixed.
    """

    spec: ModelSpec
    outcome: str
    levels: dict | None = None
    start: object = None
    hess_inv0: np.ndarray | None = field(default=None, repr=False)

    def proxies(self, data: Dataset):
        """Summary scores, the fitted joint model and its iFS."""
        model = fit_joint(data, self.spec, start=self.start, hess_inv0=self.hess_inv0, levels=self.levels)
        return summary_scores(data), model, ifs_eap(model, data)

    def estimates(self, data: Dataset, summary: ProxyScores, ifs: ProxyScores):
        out, weights = [], {}
        for label, corrected in correction_rows(data.block_names):
            proxy = summary.values.copy()
            proxy[:, list(corrected)] = ifs.values[:, list(corrected)]
            est, q = _row_estimates(data, proxy, self.outcome)
            out.append(est)
            weights[label] = q
        return np.concatenate(out), weights

    def __call__(self, data: Dataset) -> np.ndarray:
        summary, _, ifs = self.proxies(data)
        return self.estimates(data, summary, ifs)[0]


@dataclass
class AceeAnalysis:
    balance: pd.DataFrame
    estimates: pd.DataFrame
    model: object
    bootstrap: BootstrapCI | None


def analyze_acee(data: Dataset, outcome: str, spec: ModelSpec | None = None, *, B=500, level=0.95,
                 seed=0, workers=1) -> AceeAnalysis:
    """Balance table and effect-on-the-exposed estimates with bootstrap CIs.

    The propensity model is a logistic regression on the observed covariates
    and one proxy per latent block: the summary score, or the iFS for the
    corrected blocks. Balance columns are given for the summary-score and
    all-iFS weights. ``B = 0`` skips the bootstrap.
    """
    if outcome not in data.y:
        raise DataError(f"no outcome named {outcome!r}")
    if B and B < 200:
        raise DataError("bootstrap needs B >= 200")
    spec = spec or default_model_spec(data)
    pipe = AceePipeline(spec, outcome, levels=observed_levels(data, spec))
    summary, model, ifs = pipe.proxies(data)
    point, weights = pipe.estimates(data, summary, ifs)
    rows = correction_rows(data.block_names)
    first, last = rows[0][0], rows[-1][0]
    table = balance_table(data, [summary, ifs], {"summary": weights[first], "iFS": weights[last]})
    boot = None
    if B:
        warm = AceePipeline(spec, outcome, levels=pipe.levels, start=model.params,
                            hess_inv0=refit_hess_inv(model, data))
        boot = bootstrap_ci(warm, data, B=B, level=level, seed=seed, workers=workers)
    k = len(ROW_FIELDS)
    recs = []
    for r, (label, _) in enumerate(rows):
        v = point[r * k:(r + 1) * k]
        for est, col in (("weighting_only", 2), ("weighting_plus", 4)):
            rec = {"row": label, "estimator": est, "proxy_strategy": _strategy_label(rows[r][1], data.block_names),
                   "exposed_mean": v[0], "comparison_mean": v[1] if col == 2 else v[3], "point": v[col]}
            if boot is not None:
                rec.update(lo=boot.lo[r * k + col], hi=boot.hi[r * k + col], B=boot.B, n_failed=boot.n_failed)
            recs.append(rec)
    return AceeAnalysis(balance=table, estimates=pd.DataFrame(recs), model=model, bootstrap=boot)


def _strategy_label(corrected, block_names):
    return "+".join(f"{b}:{'iFS' if j in corrected else 'summary'}" for j, b in enumerate(block_names))
