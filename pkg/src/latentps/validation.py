"""Monte Carlo checks of the balancing properties of the inclusive factor score.

For X_WZA = E[X | W, Z, A] the residual X - X_WZA has mean zero given
(Z, X_WZA, A). The suites test four consequences of that on replicates of a
correctly specified scenario:

1. cell means of the residual over bins of (Z, proxy, A) are zero;
2. its mean is zero within each exposure arm;
3. its mean weighted by a bounded g(Z, proxy, A) (the ATE weight capped at 50)
   is zero within each arm;
4. its mean within bins of the propensity score k(Z, proxy) is zero in each arm;

plus inverse-probability weighted means of X equal to E[X] in each arm, and an
unbiased weighting estimate of an effect that is linear in X. The summary
score and the conventional factor score serve as negative controls.

The joint model fixes the residual variance of X given Z, so the iFS is
rescaled to unit marginal variance (the scale of the simulated X) before
residuals are formed; propensity scores are unaffected by the rescaling.

Every statistic is a ratio of sums pooled over replicates; its standard error
treats replicates as independent clusters. Checks over many cells use a
Bonferroni threshold equivalent, for the whole family, to a single two-sided
3-SE test.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import ndtr, ndtri

from latentps.data import default_model_spec
from latentps.dgp import OUTCOMES_BY_NAME, ScenarioConfig, simulate, true_ace
from latentps.errors import LatentPSError
from latentps.estimators import ace_weighting_only
from latentps.experiments import write_csv
from latentps.propensity import fit_ps_weights
from latentps.scores import compute_proxy, latent_sd

log = logging.getLogger(__name__)

N_BINS = 10
MIN_CELL = 30
G_CAP = 50.0
Z_PASS = 3.0
Z_CONTROL = 5.0
PROXIES = ("iFS", "cFS", "summary")


def family_threshold(m, z=Z_PASS) -> float:
    """Per-test |t| threshold giving family-wise error P(|N(0,1)| > z) over m tests."""
    if m <= 1:
        return z
    return float(-ndtri(ndtr(-z) / m))


def _deciles(v):
    cuts = np.quantile(v, np.arange(1, N_BINS) / N_BINS)
    return np.searchsorted(cuts, v, side="right")


def _sums(r, a, cells, n_cells):
    """Per-cell sums and counts of ``r``; cell = A * n_cells + index."""
    key = a.astype(int) * n_cells + cells
    return (np.bincount(key, weights=r, minlength=2 * n_cells),
            np.bincount(key, minlength=2 * n_cells).astype(float))


def _replicate(cfg: ScenarioConfig, rep, y_name):
    sim = simulate(cfg, rep)
    data, x = sim.data, sim.x
    link = cfg.analysis_link
    spec = default_model_spec(data, link)
    z, a = data.z[:, 0], data.a.astype(float)
    out = {}
    try:
        with np.errstate(all="ignore"):
            for p in ("true_X",) + PROXIES:
                scores, model = compute_proxy(p, data, spec, x=x)
                proxy = scores.values[:, 0]
                if p == "iFS":
                    # Residuals need X's scale: unit marginal variance, as simulated.
                    proxy = proxy / latent_sd(model, data)[0]
                q, e = fit_ps_weights(data.z, proxy, data.a, link)
                r = x - proxy
                part1 = _sums(r, a, _deciles(z) * N_BINS + _deciles(proxy), N_BINS * N_BINS)
                part2 = _sums(r, a, np.zeros(a.size, dtype=int), 1)
                g = np.minimum(q, G_CAP)
                part3 = (np.bincount(a.astype(int), weights=g * r, minlength=2), part2[1])
                part4 = _sums(r, a, _deciles(e), N_BINS)
                cor1 = np.array([np.mean(a * q * x) - np.mean(x), np.mean((1 - a) * q * x) - np.mean(x)])
                cor2 = ace_weighting_only(data.y[y_name], data.a, q)
                out[p] = {"part1": part1, "part2": part2, "part3": part3, "part4": part4, "cor1": cor1,
                          "cor2": cor2}
    except (LatentPSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"
    return rep, out, None


def _chunk(cfg, reps, y_name):
    return [_replicate(cfg, r, y_name) for r in reps]


def collect(cfg: ScenarioConfig, reps, *, workers=1, y_name="y1") -> list:
    """Per-replicate statistics for every proxy; failed replicates are dropped."""
    idx = list(range(reps))
    if workers > 1:
        chunks = [idx[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            n = len(chunks)
            results = [r for part in pool.map(_chunk, [cfg] * n, chunks, [y_name] * n) for r in part]
    else:
        results = _chunk(cfg, idx, y_name)
    results.sort(key=lambda r: r[0])
    good = []
    for rep, out, err in results:
        if out is None:
            log.warning("validation replicate %d failed: %s", rep, err)
        else:
            good.append(out)
    return good


def _ratio(S, N):
    """Pooled ratio sum(S)/sum(N) over replicates (rows) and its clustered SE."""
    tot = N.sum(axis=0)
    est = S.sum(axis=0) / np.where(tot > 0, tot, np.nan)
    R = S.shape[0]
    dev = S - est * N
    se = np.sqrt(R / (R - 1) * (dev ** 2).sum(axis=0)) / np.where(tot > 0, tot, np.nan)
    return est, se, tot


def _merge_small(S, N):
    """Pool cells with fewer than MIN_CELL units in total into one remainder cell per arm."""
    half = S.shape[1] // 2
    cols_S, cols_N, labels = [], [], []
    for arm in (0, 1):
        block = slice(arm * half, (arm + 1) * half)
        s, n = S[:, block], N[:, block]
        small = n.sum(axis=0) < MIN_CELL
        for j in np.flatnonzero(~small):
            cols_S.append(s[:, j])
            cols_N.append(n[:, j])
            labels.append(f"A={arm}:{j}")
        if small.any():
            cols_S.append(s[:, small].sum(axis=1))
            cols_N.append(n[:, small].sum(axis=1))
            labels.append(f"A={arm}:merged")
    return np.column_stack(cols_S), np.column_stack(cols_N), labels


@dataclass
class SuiteReport:
    """Rows of individual statistics and a pass/fail summary per check."""

    name: str
    table: pd.DataFrame
    summary: dict
    n_reps: int

    @property
    def passed(self) -> bool:
        return all(v["passed"] for v in self.summary.values())


def _check_rows(suite, check, proxy, labels, est, se, n, threshold, expect):
    t = est / se
    return [{"suite": suite, "check": check, "proxy": proxy, "cell": lab, "n_units": float(nu),
             "estimate": float(e), "se": float(s), "t": float(tt), "threshold": threshold, "expect": expect}
            for lab, e, s, tt, nu in zip(labels, est, se, t, n)]


def _summarize(rows, check, proxy, expect):
    sel = [r for r in rows if r["check"] == check and r["proxy"] == proxy]
    tmax = max(abs(r["t"]) for r in sel)
    thr = sel[0]["threshold"]
    ok = tmax <= thr if expect == "zero" else tmax > thr
    return {"proxy": proxy, "expect": expect, "max_abs_t": tmax, "threshold": thr, "passed": bool(ok),
            "n_stats": len(sel)}


def _stack(stats, proxy, key):
    S = np.array([s[proxy][key][0] for s in stats])
    N = np.array([s[proxy][key][1] for s in stats])
    return S, N


def theorem_report(stats) -> SuiteReport:
    rows, summary = [], {}
    for part in ("part1", "part2", "part3", "part4"):
        S, N = _stack(stats, "iFS", part)
        if part in ("part1", "part4"):
            S, N, labels = _merge_small(S, N)
        else:
            labels = ["A=0", "A=1"]
        est, se, n = _ratio(S, N)
        if part == "part2":
            e_all, s_all, n_all = _ratio(S.sum(axis=1, keepdims=True), N.sum(axis=1, keepdims=True))
            est, se, n, labels = np.r_[est, e_all], np.r_[se, s_all], np.r_[n, n_all], labels + ["all"]
        thr = family_threshold(len(labels)) if part in ("part1", "part4") else Z_PASS
        rows += _check_rows("theorem", part, "iFS", labels, est, se, n, thr, "zero")
        summary[f"{part}:iFS"] = _summarize(rows, part, "iFS", "zero")
    for proxy in ("cFS", "summary"):
        S, N = _stack(stats, proxy, "part2")
        est, se, n = _ratio(S, N)
        rows += _check_rows("theorem", "part2", proxy, ["A=0", "A=1"], est, se, n, Z_CONTROL, "nonzero")
        summary[f"part2:{proxy}"] = _summarize(rows, "part2", proxy, "nonzero")
    return SuiteReport("theorem", pd.DataFrame(rows), summary, len(stats))


def _replicate_mean_rows(suite, check, proxy, values, expect, threshold):
    values = np.atleast_2d(np.asarray(values, dtype=float).T).T
    est = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(values.shape[0])
    labels = ["A=1", "A=0"] if values.shape[1] == 2 else ["ace"]
    return _check_rows(suite, check, proxy, labels, est, se, np.full(est.size, values.shape[0]), threshold,
                       expect)


def corollary1_report(stats) -> SuiteReport:
    rows, summary = [], {}
    for proxy, expect in (("iFS", "zero"), ("true_X", "zero"), ("summary", "nonzero")):
        thr = Z_PASS if expect == "zero" else Z_CONTROL
        rows += _replicate_mean_rows("corollary1", "weighted_mean_x", proxy, [s[proxy]["cor1"] for s in stats],
                                     expect, thr)
        summary[f"weighted_mean_x:{proxy}"] = _summarize(rows, "weighted_mean_x", proxy, expect)
    return SuiteReport("corollary1", pd.DataFrame(rows), summary, len(stats))


def corollary2_report(stats, ace=0.0) -> SuiteReport:
    rows, summary = [], {}
    for proxy, expect in (("iFS", "zero"), ("true_X", "zero"), ("summary", "nonzero")):
        thr = Z_PASS if expect == "zero" else Z_CONTROL
        vals = np.array([s[proxy]["cor2"] for s in stats]) - ace
        rows += _replicate_mean_rows("corollary2", "ace_bias", proxy, vals[:, None], expect, thr)
        summary[f"ace_bias:{proxy}"] = _summarize(rows, "ace_bias", proxy, expect)
    return SuiteReport("corollary2", pd.DataFrame(rows), summary, len(stats))


def _linear_ace(cfg):
    return true_ace(OUTCOMES_BY_NAME["y1"], cfg.rho, cfg.variants.skewed)


def theorem_suite(cfg: ScenarioConfig, reps=500, *, workers=1) -> SuiteReport:
    """Theorem parts 1-4 for the iFS residual, with cFS and summary-score controls."""
    return theorem_report(collect(cfg, reps, workers=workers))


def corollary1_suite(cfg: ScenarioConfig, reps=500, *, workers=1) -> SuiteReport:
    """E[AQX] = E[(1-A)QX] = E[X] with Q from the iFS propensity model."""
    return corollary1_report(collect(cfg, reps, workers=workers))


def corollary2_suite(cfg: ScenarioConfig, reps=500, *, workers=1) -> SuiteReport:
    """Unbiased weighting estimate of the effect on the linear outcome."""
    return corollary2_report(collect(cfg, reps, workers=workers), _linear_ace(cfg))


def run_all(cfg: ScenarioConfig, reps=500, *, workers=1) -> list:
    """All three suites from one set of replicates."""
    stats = collect(cfg, reps, workers=workers)
    return [theorem_report(stats), corollary1_report(stats), corollary2_report(stats, _linear_ace(cfg))]


def write_reports(reports, outdir) -> list:
    """One CSV per suite plus ``validation.json`` with the pass/fail summary."""
    outdir = Path(outdir)
    paths = [write_csv(r.table, outdir / f"{r.name}.csv") for r in reports]
    doc = {r.name: {"passed": r.passed, "n_reps": r.n_reps, "checks": r.summary} for r in reports}
    path = outdir / "validation.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return paths + [path]
