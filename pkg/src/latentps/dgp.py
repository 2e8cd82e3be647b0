"""Synthetic data for the simulation designs, including misspecification variants.

Every replicate draws from counter-based Philox streams keyed by
(base seed, scenario id, replicate, component), so results do not depend on
the order in which replicates run.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr, ndtri, roots_genlaguerre

from latentps.data import Dataset
from latentps.errors import DataError

GH_POINTS = 41
COVARIATES, MEASUREMENTS, EXPOSURE, OUTCOMES = range(4)


def stream(base_seed: int, scenario_id: str, rep: int, *extra: int) -> np.random.Generator:
    """Independent generator for one (scenario, replicate, component) cell."""
    key = int.from_bytes(hashlib.sha256(str(scenario_id).encode()).digest()[:8], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(base_seed), key, int(rep), *extra])))


@dataclass(frozen=True)
class ExposureConfig:
    link: str = "logit"
    b_z: float = 0.5
    b_x: float = 0.5
    target_prevalence: float = 0.3


@dataclass(frozen=True)
class Variants:
    """Misspecification switches.

    ``ordinal_levels`` coarsens every item into that many levels;
    ``residual_dependence`` names an item pair sharing a noise component with
    variance fraction ``dependence_strength``; ``wrong_link_analysis`` makes the
    analysis use the other exposure link.
    """

    ordinal_levels: int | None = None
    skewed: bool = False
    residual_dependence: tuple | None = None
    dependence_strength: float = 0.3
    wrong_link_analysis: bool = False


@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte Carlo cell.

    ``w_x_correlations`` is recycled to ``w_item_count`` items when shorter, so
    ``(0.4, 0.6)`` with 5 items gives 0.4, 0.6, 0.4, 0.6, 0.4.
    """

    n: int = 1000
    reps: int = 500
    rho: float = 0.4
    w_item_count: int = 5
    w_x_correlations: tuple = (0.4, 0.6)
    exposure: ExposureConfig = field(default_factory=ExposureConfig)
    variants: Variants = field(default_factory=Variants)
    seed: int = 20240
    scenario_id: str = "canonical"

    def __post_init__(self):
        if isinstance(self.exposure, dict):
            object.__setattr__(self, "exposure", ExposureConfig(**self.exposure))
        if isinstance(self.variants, dict):
            v = dict(self.variants)
            if v.get("residual_dependence") is not None:
                v["residual_dependence"] = tuple(v["residual_dependence"])
            object.__setattr__(self, "variants", Variants(**v))
        object.__setattr__(self, "w_x_correlations", tuple(float(r) for r in self.w_x_correlations))
        if not -1 < self.rho < 1:
            raise DataError("rho must lie in (-1, 1)")
        if not 2 <= self.w_item_count <= 10:
            raise DataError("w_item_count must be between 2 and 10")
        if not all(0 < r <= 1 for r in self.w_x_correlations):
            raise DataError("item correlations must lie in (0, 1]")
        if not 0 < self.exposure.target_prevalence < 1:
            raise DataError("target prevalence must lie in (0, 1)")
        if self.exposure.link not in ("logit", "probit"):
            raise DataError(f"unknown link {self.exposure.link!r}")

    @property
    def correlations(self) -> np.ndarray:
        r = self.w_x_correlations
        return np.array([r[k % len(r)] for k in range(self.w_item_count)])

    @property
    def analysis_link(self) -> str:
        if self.variants.wrong_link_analysis:
            return "probit" if self.exposure.link == "logit" else "logit"
        return self.exposure.link

    def to_dict(self) -> dict:
        d = asdict(self)
        d["w_x_correlations"] = list(self.w_x_correlations)
        return d

    @classmethod
    def from_dict(cls, d) -> ScenarioConfig:
        return cls(**d)


def _set_path(d, path, value):
    keys = path.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def expand_grid(doc) -> list:
    """Scenario configs from ``{"base": {...}, "grid": {"a.b": [...], ...}}``.

    A plain config document yields a single scenario. Scenario ids of grid
    cells append ``key=value`` pairs to the base id.
    """
    if "grid" not in doc:
        return [ScenarioConfig.from_dict(doc.get("base", doc))]
    base = doc.get("base", {})
    keys = list(doc["grid"])
    out = []
    for values in itertools.product(*(doc["grid"][k] for k in keys)):
        d = json.loads(json.dumps(base))
        for k, v in zip(keys, values):
            _set_path(d, k, v)
        tag = ",".join(f"{k}={v}" for k, v in zip(keys, values))
        d["scenario_id"] = f"{base.get('scenario_id', 'grid')}[{tag}]"
        out.append(ScenarioConfig.from_dict(d))
    return out


def load_scenarios(path) -> list:
    return expand_grid(json.loads(Path(path).read_text()))


# Generators ---------------------------------------------------------------------

def _std_gamma(rng, size, shape=2.0):
    return (rng.gamma(shape, size=size) - shape) / np.sqrt(shape)


def gen_covariates(n, rho, stream):
    """Standard bivariate normal (Z, X) with correlation ``rho``."""
    if not -1 < rho < 1:
        raise DataError("rho must lie in (-1, 1)")
    z = stream.standard_normal(n)
    x = rho * z + np.sqrt(1.0 - rho * rho) * stream.standard_normal(n)
    return z, x


def gen_skewed_covariates(n, rho, stream):
    """Z ~ N(0, 1) and X = rho Z + sqrt(1 - rho^2) e with standardized gamma(2) e.

    X | Z has mean rho Z and a right-skewed error of skewness sqrt(2); the
    standardized error e has mean 0 and variance 1, and X keeps unit variance.
    """
    z = stream.standard_normal(n)
    x = rho * z + np.sqrt(1.0 - rho * rho) * _std_gamma(stream, n)
    return z, x


def gen_measurements(x, cfg: ScenarioConfig, stream) -> np.ndarray:
    """Items W_k = r_k X + sqrt(1 - r_k^2) e_k with the configured variants."""
    x = np.asarray(x, dtype=float)
    n, r = x.shape[0], cfg.correlations
    k = r.size
    v = cfg.variants
    e = _std_gamma(stream, (n, k)) if v.skewed else stream.standard_normal((n, k))
    if v.residual_dependence is not None:
        i, j = v.residual_dependence
        s = v.dependence_strength
        common = stream.standard_normal(n)
        e[:, i] = np.sqrt(s) * common + np.sqrt(1 - s) * e[:, i]
        e[:, j] = np.sqrt(s) * common + np.sqrt(1 - s) * e[:, j]
    w = x[:, None] * r + np.sqrt(1.0 - r * r) * e
    if v.ordinal_levels:
        w = coarsen(w, v.ordinal_levels)
    return w


def coarsen(w, levels):
    """Cut standard-normal items at the N(0,1) quantiles j/levels; codes 0..levels-1."""
    cuts = ndtri(np.arange(1, levels) / levels)
    return np.searchsorted(cuts, w).astype(float)


@lru_cache(maxsize=None)
def _expectation_rule(rho, skewed, n_points=GH_POINTS):
    """Nodes (z, x) and weights for E over the covariate distribution."""
    t, wt = np.polynomial.hermite_e.hermegauss(n_points)
    wt = wt / wt.sum()
    if skewed:
        g, wg = roots_genlaguerre(n_points, 1.0)
        e, we = (g - 2.0) / np.sqrt(2.0), wg / wg.sum()
    else:
        e, we = t, wt
    z = np.repeat(t, e.size)
    x = rho * z + np.sqrt(1.0 - rho * rho) * np.tile(e, t.size)
    return z, x, np.outer(wt, we).ravel()


def expect_zx(f, rho, skewed=False, n_points=GH_POINTS) -> float:
    """E[f(Z, X)] by tensor quadrature (Gauss-Hermite; Gauss-Laguerre for skewed errors)."""
    z, x, w = _expectation_rule(float(rho), bool(skewed), n_points)
    return float(np.dot(w, f(z, x)))


def calibrate_intercept(link, b_z, b_x, rho, target_prevalence, *, skewed=False, tol=1e-8) -> float:
    """Exposure intercept giving the target prevalence.

    Probit with normal covariates uses the closed form
    Phi^-1(target) sqrt(1 + v), v = b_z^2 + b_x^2 + 2 rho b_z b_x. Otherwise the
    prevalence is computed by quadrature and solved by bisection to ``tol``.
    """
    if not 0 < target_prevalence < 1:
        raise DataError("target prevalence must lie in (0, 1)")
    v = b_z * b_z + b_x * b_x + 2.0 * rho * b_z * b_x
    if link == "probit" and not skewed:
        return float(ndtri(target_prevalence) * np.sqrt(1.0 + v))
    F = expit if link == "logit" else ndtr
    if skewed:
        def prevalence(b0):
            return expect_zx(lambda z, x: F(b0 + b_z * z + b_x * x), rho, skewed=True)
    else:
        t, w = np.polynomial.hermite_e.hermegauss(GH_POINTS)
        w = w / w.sum()
        eta = np.sqrt(v) * t

        def prevalence(b0):
            return float(np.dot(w, F(b0 + eta)))
    lo, hi = -30.0, 30.0
    while True:
        mid = 0.5 * (lo + hi)
        p = prevalence(mid)
        if abs(p - target_prevalence) < tol or hi - lo < 1e-14:
            return mid
        if p < target_prevalence:
            lo = mid
        else:
            hi = mid


def exposure_coefs(cfg: ScenarioConfig) -> np.ndarray:
    e = cfg.exposure
    b0 = calibrate_intercept(e.link, e.b_z, e.b_x, cfg.rho, e.target_prevalence, skewed=cfg.variants.skewed)
    return np.array([b0, e.b_z, e.b_x])


def gen_exposure(z, x, link, coefs, stream) -> np.ndarray:
    """Bernoulli exposure with P(A=1) = F(b0 + b_z z + b_x x)."""
    b0, bz, bx = coefs
    eta = b0 + bz * np.asarray(z) + bx * np.asarray(x)
    prob = expit(eta) if link == "logit" else ndtr(eta)
    return (stream.random(prob.shape) < prob).astype(int)


@dataclass(frozen=True)
class OutcomeDGPSpec:
    """Outcome model E[Y] = b0 + b_a A + b_z Z + b_x X + b_x2 X^2 + b_x3 X^3.

    Continuous kinds add N(0, sd^2) noise; ``binary_logit`` draws Bernoulli at
    expit of the linear predictor.
    """

    kind: str
    b0: float = 0.0
    b_a: float = 0.0
    b_z: float = 1.0
    b_x: float = 1.0
    b_x2: float = 0.0
    b_x3: float = 0.0
    sd: float = 2.0

    def mean(self, z, x, a):
        return (self.b0 + self.b_a * a + self.b_z * z + self.b_x * x
                + self.b_x2 * x ** 2 + self.b_x3 * x ** 3)


LINEAR = OutcomeDGPSpec("linear")
NONLINEAR = OutcomeDGPSpec("nonlinear", b_x2=0.5, b_x3=-0.1)
BINARY = OutcomeDGPSpec("binary_logit", b_a=1.0)
OUTCOMES_BY_NAME = {"y1": LINEAR, "y2": NONLINEAR, "y3": BINARY}


def gen_outcomes(z, x, a, spec: OutcomeDGPSpec, stream) -> np.ndarray:
    eta = spec.mean(np.asarray(z, float), np.asarray(x, float), np.asarray(a, float))
    if spec.kind == "binary_logit":
        return (stream.random(eta.shape) < expit(eta)).astype(float)
    return eta + spec.sd * stream.standard_normal(eta.shape)


def true_ace(spec: OutcomeDGPSpec, rho, skewed=False) -> float:
    """Average causal effect E[Y(1) - Y(0)] under the covariate distribution."""
    if spec.kind != "binary_logit":
        return float(spec.b_a)
    return expect_zx(lambda z, x: expit(spec.mean(z, x, 1.0)) - expit(spec.mean(z, x, 0.0)), rho, skewed)


@dataclass(frozen=True)
class Simulated:
    """One replicate: the observed dataset plus the latent truth."""

    data: Dataset
    x: np.ndarray
    coefs: np.ndarray


def simulate_covariates(cfg: ScenarioConfig, rep: int):
    rng = stream(cfg.seed, cfg.scenario_id, rep, COVARIATES)
    gen = gen_skewed_covariates if cfg.variants.skewed else gen_covariates
    return gen(cfg.n, cfg.rho, rng)


def build_dataset(z, w, a, y=None, block="x") -> Dataset:
    return Dataset(
        z=np.asarray(z)[:, None], w_blocks=(w,), a=a, y=y or {}, z_names=("z",), block_names=(block,),
        item_names=(tuple(f"w{k + 1}" for k in range(w.shape[1])),),
    )


def simulate(cfg: ScenarioConfig, rep: int) -> Simulated:
    """Draw replicate ``rep`` of a scenario."""
    z, x = simulate_covariates(cfg, rep)
    w = gen_measurements(x, cfg, stream(cfg.seed, cfg.scenario_id, rep, MEASUREMENTS))
    coefs = exposure_coefs(cfg)
    a = gen_exposure(z, x, cfg.exposure.link, coefs, stream(cfg.seed, cfg.scenario_id, rep, EXPOSURE))
    ry = stream(cfg.seed, cfg.scenario_id, rep, OUTCOMES)
    y = {name: gen_outcomes(z, x, a, spec, ry) for name, spec in OUTCOMES_BY_NAME.items()}
    return Simulated(data=build_dataset(z, w, a, y), x=x, coefs=coefs)


def with_overrides(cfg: ScenarioConfig, **kwargs) -> ScenarioConfig:
    return replace(cfg, **kwargs)


# Stand-in for the observational data example ------------------------------------

SCHEMA_LEVELS = {
    "race": ("White", "Black", "Native American", "Asian"),
    "parent_education": ("Less than high school", "High school", "Vocational", "Some college", "College"),
    "parent_marital": ("Married", "Single", "Widowed", "Divorced", "Separated"),
}


def simulate_schema_dataset(n=417, seed=2024, *, effect=0.35):
    """Synthetic data with the layout of the observational example.

    Two correlated latent covariates (``violence`` and ``academic``) are each
    measured by four ordinal items: violence items coded 0..3, academic items
    coded 1..4. Observed covariates are age, race (4 levels), a Hispanic
    indicator, parent education (5 levels) and parent marital status (5 levels).
    The binary exposure follows a logit model in all covariates and the binary
    outcome a logit model with exposure log-odds ratio ``effect``.

    Returns
    -------
    frame : pandas.DataFrame
        One row per unit, categorical columns as strings.
    schema : dict
        Column-role map for :func:`latentps.data.load_dataset`.
    """
    import pandas as pd

    rng = stream(seed, "schema", 0)
    age = np.round(rng.normal(16.0, 1.2, n), 1)
    cats = {k: rng.choice(len(v), size=n, p=np.r_[0.55, np.full(len(v) - 1, 0.45 / (len(v) - 1))])
            for k, v in SCHEMA_LEVELS.items()}
    hisp = (rng.random(n) < 0.1).astype(int)
    ses = -0.25 * (cats["parent_education"] >= 3) + 0.2 * (cats["parent_marital"] != 0)
    viol = 0.3 * (cats["race"] == 1) + ses + 0.1 * (age - 16) + rng.standard_normal(n) * 0.9
    acad = -0.8 * ses - 0.1 * (age - 16) - 0.35 * viol + rng.standard_normal(n) * 0.85
    viol, acad = (viol - viol.mean()) / viol.std(), (acad - acad.mean()) / acad.std()

    def items(x, cuts, loadings, offset):
        out = []
        for lam in loadings:
            star = lam * x + rng.standard_normal(n)
            out.append(np.searchsorted(cuts, star) + offset)
        return out

    v_items = items(viol, np.array([0.3, 1.2, 2.0]), (1.6, 1.4, 1.2, 1.0), 0)
    a_items = items(acad, np.array([-1.0, 0.2, 1.3]), (1.0, 0.9, 0.8, 0.7), 1)
    eta_a = -0.9 + 0.6 * viol - 0.5 * acad - 0.15 * (age - 16) + 0.3 * (cats["parent_marital"] == 1)
    a = (rng.random(n) < expit(eta_a)).astype(int)
    eta_y = 0.6 + effect * a + 0.6 * viol - 0.4 * acad + 0.2 * (cats["race"] == 1)
    y = (rng.random(n) < expit(eta_y)).astype(int)
    cols = {"id": np.arange(1, n + 1), "age": age}
    cols.update({k: np.array(v)[cats[k]] for k, v in SCHEMA_LEVELS.items()})
    cols["hispanic"] = hisp
    cols.update({f"viol{k + 1}": v for k, v in enumerate(v_items)})
    cols.update({f"acad{k + 1}": v for k, v in enumerate(a_items)})
    cols["suspended"] = a
    cols["arrested"] = y
    frame = pd.DataFrame(cols)
    schema = {"id": "id", "age": "z", "race": "z", "parent_education": "z", "parent_marital": "z",
              "hispanic": "z"}
    schema.update({f"viol{k + 1}": f"w:violence:viol{k + 1}" for k in range(4)})
    schema.update({f"acad{k + 1}": f"w:academic:acad{k + 1}" for k in range(4)})
    schema.update({"suspended": "a", "arrested": "y:arrested"})
    return frame, schema
