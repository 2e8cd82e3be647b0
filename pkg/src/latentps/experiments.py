"""Monte Carlo runner for the simulation designs and the figure series.

Each replicate draws a dataset, builds every proxy for X, fits a propensity
model on (Z, proxy) with the analysis link, and records weighted moment
differences of X and Z and the effect estimates for the three outcomes.
Replicates are independent (see :func:`latentps.dgp.stream`), so the output
does not depend on how they are spread over worker processes.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from latentps.balance import weighted_moment_diffs
from latentps.data import FLOAT_FORMAT, default_model_spec
from latentps.dgp import OUTCOMES_BY_NAME, ExposureConfig, ScenarioConfig, Variants, simulate, true_ace
from latentps.errors import DataError, LatentPSError
from latentps.estimators import ace_weighting_only
from latentps.propensity import fit_ps_weights
from latentps.scores import compute_proxy
from latentps.weight_functions import weight_bias_experiment

log = logging.getLogger(__name__)

DEFAULT_STRATEGIES = ("true_X", "iFS", "cFS", "summary", "all_items")
OUTCOMES = tuple(OUTCOMES_BY_NAME)
K_MAX = 5
MAX_FAILURE_RATE = 0.02
LONG_COLUMNS = ("scenario_id", "rep", "strategy", "metric", "moment_or_outcome", "value", "centered")

CANONICAL = ScenarioConfig()
PROBIT_EXPOSURE = ExposureConfig(link="probit", b_z=0.294, b_x=0.294)


@dataclass
class ScenarioRun:
    """Replicate-level results of one scenario.

    ``long`` has the columns of :data:`LONG_COLUMNS`; ``centered`` is the value
    minus the true-X value of the same replicate. ``failed`` is set when more
    than 2% of the replicates failed.
    """

    cfg: ScenarioConfig
    long: pd.DataFrame
    n_failed: int
    failed: bool


def _replicate(cfg: ScenarioConfig, rep, strategies, outcomes, aces):
    sim = simulate(cfg, rep)
    data, x = sim.data, sim.x
    link = cfg.analysis_link
    spec = default_model_spec(data, link)
    z = data.z[:, 0]
    rows = []
    try:
        with np.errstate(all="ignore"):
            for s in strategies:
                proxy, _ = compute_proxy(s, data, spec, x=x)
                q, _ = fit_ps_weights(data.z, proxy.values, data.a, link)
                for k, v in enumerate(weighted_moment_diffs(x, data.a, q, K_MAX), start=1):
                    rows.append((s, "balance_x", str(k), v))
                for k, v in enumerate(weighted_moment_diffs(z, data.a, q, K_MAX), start=1):
                    rows.append((s, "balance_z", str(k), v))
                for name in outcomes:
                    est = ace_weighting_only(data.y[name], data.a, q)
                    rows.append((s, "ace", name, est))
                    rows.append((s, "ace_bias", name, est - aces[name]))
    except (LatentPSError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"
    return rep, rows, None


def _chunk(cfg, reps, strategies, outcomes, aces):
    return [_replicate(cfg, r, strategies, outcomes, aces) for r in reps]


def run_scenario(cfg: ScenarioConfig, strategies=DEFAULT_STRATEGIES, outcomes=OUTCOMES, *, reps=None,
                 workers=1) -> ScenarioRun:
    """Run ``reps`` replicates (default ``cfg.reps``) of one scenario.

    The true-X benchmark is always included. A replicate in which any
    strategy fails is dropped whole and logged.
    """
    strategies = tuple(dict.fromkeys(("true_X",) + tuple(strategies)))
    reps = cfg.reps if reps is None else int(reps)
    aces = {name: true_ace(OUTCOMES_BY_NAME[name], cfg.rho, cfg.variants.skewed) for name in outcomes}
    idx = list(range(reps))
    if workers > 1:
        chunks = [idx[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            n = len(chunks)
            results = [r for part in pool.map(_chunk, [cfg] * n, chunks, [strategies] * n, [outcomes] * n,
                                              [aces] * n) for r in part]
    else:
        results = _chunk(cfg, idx, strategies, outcomes, aces)
    results.sort(key=lambda r: r[0])
    recs, n_failed = [], 0
    for rep, rows, err in results:
        if rows is None:
            n_failed += 1
            log.warning("%s replicate %d failed: %s", cfg.scenario_id, rep, err)
            continue
        recs += [(cfg.scenario_id, rep, *row) for row in rows]
    long = pd.DataFrame(recs, columns=LONG_COLUMNS[:-1])
    bench = long[long.strategy == "true_X"].set_index(["rep", "metric", "moment_or_outcome"])["value"]
    key = pd.MultiIndex.from_frame(long[["rep", "metric", "moment_or_outcome"]])
    long["centered"] = long["value"].to_numpy() - bench.reindex(key).to_numpy()
    failed = n_failed > MAX_FAILURE_RATE * reps
    if failed:
        log.error("%s: %d of %d replicates failed", cfg.scenario_id, n_failed, reps)
    return ScenarioRun(cfg=cfg, long=long, n_failed=n_failed, failed=failed)


def aggregate(long: pd.DataFrame) -> pd.DataFrame:
    """Mean, Monte Carlo SE, SD and RMSE of every metric, plain and centered.

    RMSE is the root mean square of ``value`` (meaningful for ``ace_bias``).
    """
    g = long.groupby(["scenario_id", "strategy", "metric", "moment_or_outcome"], sort=False)
    out = g.agg(n_reps=("value", "size"), mean=("value", "mean"), sd=("value", "std"),
                centered_mean=("centered", "mean"), centered_sd=("centered", "std"))
    out["mc_se"] = out["sd"] / np.sqrt(out["n_reps"])
    out["centered_se"] = out["centered_sd"] / np.sqrt(out["n_reps"])
    out["rmse"] = g["value"].apply(lambda v: float(np.sqrt(np.mean(v.to_numpy() ** 2))))
    out = out.drop(columns="centered_sd").reset_index()
    return out[["scenario_id", "strategy", "metric", "moment_or_outcome", "n_reps", "mean", "mc_se", "sd",
                "rmse", "centered_mean", "centered_se"]]


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


# Figure series --------------------------------------------------------------

PREVALENCE_AXIS = (0.5, 0.4, 0.3, 0.2)


def figure_scenarios(fig_id, seed=CANONICAL.seed) -> dict:
    """Scenario configs behind each figure, keyed by panel label.

    Figures 3 and 4 vary the exposure prevalence along the x-axis around the
    canonical cell. Figure 6 has one panel per departure from the correct model.
    """
    base = replace(CANONICAL, seed=seed)
    if fig_id == 2:
        return {"canonical": base}
    if fig_id in (3, 4):
        return {f"prevalence={p}": replace(base, scenario_id=f"prevalence={p}",
                                           exposure=replace(base.exposure, target_prevalence=p))
                for p in PREVALENCE_AXIS}
    if fig_id == 5:
        return {"logit": base, "probit": replace(base, scenario_id="probit", exposure=PROBIT_EXPOSURE)}
    if fig_id == 6:
        return {
            "ordinal": replace(base, scenario_id="ordinal4", variants=Variants(ordinal_levels=4)),
            "linear": replace(base, scenario_id="linear"),
            "wrong_link": replace(base, scenario_id="wrong_link", variants=Variants(wrong_link_analysis=True)),
            "skewed": replace(base, scenario_id="skewed", variants=Variants(skewed=True)),
        }
    raise DataError(f"unsupported figure {fig_id!r}; choose 2, 3, 4, 5 or 6")


def _panel_strategies(panel):
    return ("true_X", "iFS", "linear_iFS", "cFS", "summary") if panel == "linear" else DEFAULT_STRATEGIES


def reproduce_figure(fig_id, outdir, *, reps=None, m_reps=2000, workers=1, seed=CANONICAL.seed) -> list:
    """Write the plot-ready CSV series of one figure; returns the paths.

    Parameters
    ----------
    fig_id : {2, 3, 4, 5, 6}
    outdir : path
    reps : int, optional
        Replicates per scenario (default: each config's ``reps``).
    m_reps : int
        Item replicates for the weight-bias figure.
    workers : int
    seed : int
    """
    scenarios = figure_scenarios(fig_id, seed)
    outdir = Path(outdir)
    paths = []
    if fig_id == 5:
        for label, cfg in scenarios.items():
            res = weight_bias_experiment(cfg, m_reps, workers=workers)
            table = res.table.copy()
            table.insert(0, "panel", label)
            paths.append(write_csv(table, outdir / f"fig5_weight_bias_{label}.csv"))
            if res.rank_corr.size:
                rc = pd.DataFrame({"replicate": np.arange(res.rank_corr.size), "rank_corr_q_q1": res.rank_corr})
                paths.append(write_csv(rc, outdir / f"fig5_rank_corr_{label}.csv"))
        return paths
    longs, aggs = [], []
    for label, cfg in scenarios.items():
        run = run_scenario(cfg, _panel_strategies(label), reps=reps, workers=workers)
        agg = aggregate(run.long)
        agg.insert(0, "panel", label)
        longs.append(run.long)
        aggs.append(agg)
    long, agg = pd.concat(longs, ignore_index=True), pd.concat(aggs, ignore_index=True)
    paths.append(write_csv(long, outdir / f"fig{fig_id}_replicates.csv"))
    paths.append(write_csv(agg, outdir / f"fig{fig_id}_aggregate.csv"))
    cols = ["panel", "strategy", "moment_or_outcome", "n_reps"]
    if fig_id == 2:
        series = agg[agg.metric.isin(["balance_x", "balance_z"])]
        series = series[cols[:2] + ["metric"] + cols[2:] + ["mean", "mc_se", "centered_mean", "centered_se"]]
        paths.append(write_csv(series, outdir / "fig2_balance.csv"))
    elif fig_id == 3:
        series = agg[agg.metric == "ace_bias"][cols + ["mean", "mc_se", "centered_mean", "centered_se"]]
        paths.append(write_csv(series.rename(columns={"mean": "bias", "mc_se": "bias_se"}),
                               outdir / "fig3_bias.csv"))
    elif fig_id == 4:
        series = agg[agg.metric == "ace_bias"][cols + ["rmse", "sd"]]
        paths.append(write_csv(series, outdir / "fig4_rmse_sd.csv"))
    else:
        series = agg[agg.metric.isin(["balance_x", "ace_bias"])]
        series = series[cols[:2] + ["metric"] + cols[2:] + ["centered_mean", "centered_se", "mean", "mc_se"]]
        paths.append(write_csv(series, outdir / "fig6_panels.csv"))
    return paths
