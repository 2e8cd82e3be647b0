"""Maximum-likelihood fitting of the joint, measurement-only and all-linear models."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import ndtri

from latentps.data import Dataset, MeasurementSpec, ModelSpec, default_model_spec, validate_spec
from latentps.errors import ConvergenceError, DataError, LatentPSError, NumericalError, SpecError
from latentps.propensity import fit_glm_binary
from latentps.quadrature import QuadratureRule
from latentps.sem.likelihood import compute_anchors, default_rule, evaluate
from latentps.sem.model import (
    VAR_FLOOR,
    Layout,
    SEMData,
    SEMParams,
    encode,
    encode_dataset,
    grad_to_theta,
    joint_layout,
    measurement_layout,
    observed_levels,
    pack,
    unpack,
)

GTOL = 1e-5
FTOL = 1e-8
MAX_ITER = 500
HEYWOOD = 1e-5
_PENALTY = 1e10


@dataclass
class FitResult:
    params: SEMParams
    loglik: float
    converged: bool
    gradient_norm: float
    n_iter: int
    rel_change: float
    hess_inv: np.ndarray | None = None
    message: str = ""


def _objective(layout, data, rule, closed_form, anchors=None):
    n = data.n

    def fg(theta):
        with np.errstate(all="ignore"):
            try:
                p = unpack(theta, layout)
                ev = evaluate(p, layout, data, rule, closed_form=closed_form, anchors=anchors)
            except (NumericalError, np.linalg.LinAlgError, ValueError):
                return _PENALTY, np.zeros_like(theta)
            ll = ev.loglik.sum()
            g = grad_to_theta(ev.grad, p, layout)
        if not (np.isfinite(ll) and np.all(np.isfinite(g))):
            return _PENALTY, np.zeros_like(theta)
        return -ll / n, -g / n

    return fg


def _fd_hessian(fg, theta):
    """Symmetrized central-difference Hessian of the analytic gradient."""
    k = theta.size
    h = 1e-5 * np.maximum(1.0, np.abs(theta))
    H = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = h[j]
        H[:, j] = (fg(theta + e)[1] - fg(theta - e)[1]) / (2 * h[j])
    return 0.5 * (H + H.T)


def _newton_polish(fg, theta, n, gtol, max_steps=20):
    """Newton steps with a finite-difference Hessian of the analytic gradient."""
    f, g = fg(theta)
    f_prev = f
    for _ in range(max_steps):
        if np.max(np.abs(g)) * n < gtol:
            break
        H = _fd_hessian(fg, theta)
        w, Q = np.linalg.eigh(H)
        w = np.maximum(w, 1e-8 * max(1.0, w.max()))
        step = -Q @ ((Q.T @ g) / w)
        t = 1.0
        g_max = np.max(np.abs(g))
        while t > 1e-6:
            f_new, g_new = fg(theta + t * step)
            if f_new <= f + 1e-4 * t * (g @ step):
                break
            # Near the optimum f is flat to rounding; accept gradient progress.
            if abs(f_new - f) <= 1e-13 * max(abs(f), 1.0) and np.max(np.abs(g_new)) < 0.5 * g_max:
                break
            t *= 0.5
        else:
            break
        f_prev, f = f, f_new
        theta, g = theta + t * step, g_new
    return theta, f, g, f_prev


def _positive_definite(H, k):
    if H is None or H.shape != (k, k) or not np.all(np.isfinite(H)):
        return False
    try:
        np.linalg.cholesky(0.5 * (H + H.T))
    except np.linalg.LinAlgError:
        return False
    return True


def _bfgs(fg, theta, n, gtol, max_iter, hess_inv0, history):
    """BFGS with up to three restarts, then Newton polishing if needed."""
    total, H, hess_inv, message = 0, hess_inv0, None, ""

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))

    for _ in range(3):
        opts = {"gtol": gtol / n, "maxiter": max(max_iter - total, 1)}
        if _positive_definite(H, theta.size):
            opts["hess_inv0"] = 0.5 * (H + H.T)
        res = optimize.minimize(fg, theta, jac=True, method="BFGS", options=opts, callback=record)
        total += res.nit
        theta, hess_inv, message = res.x, res.hess_inv, res.message
        if np.max(np.abs(res.jac)) * n < gtol or total >= max_iter:
            break
        H = None
    f_prev = history[-2] if len(history) > 1 else history[-1]
    f, g = fg(theta)
    if np.max(np.abs(g)) * n >= gtol:
        theta, f, g, f_prev = _newton_polish(fg, theta, n, gtol)
    return theta, f, g, f_prev, total, hess_inv, message


def maximize(layout: Layout, data: SEMData, theta0, rule: QuadratureRule | None = None, *,
             closed_form=True, max_iter=MAX_ITER, gtol=GTOL, ftol=FTOL, hess_inv0=None,
             max_recentre=4) -> FitResult:
    """Maximize the summed log-likelihood over the unconstrained vector.

    BFGS runs on the per-unit mean with the analytic gradient. If it stops
    short of the tolerances (usually through line-search precision loss), it
    is restarted, and finally a few Newton steps are taken.

    With ordinal items the adaptive quadrature grid is anchored at the
    posteriors under the current parameters and held fixed during a BFGS run,
    so the objective stays smooth. After each run the anchors are recomputed
    at the new estimate and the run repeated (warm-started), up to
    ``max_recentre`` times, until the gradient under fresh anchors meets the
    tolerance.

    Convergence requires ``|grad sum loglik|_inf < gtol`` and a relative
    change of the log-likelihood below ``ftol`` over the last iteration.
    """
    n = data.n
    rule = rule or default_rule()
    theta = np.asarray(theta0, dtype=float).copy()
    ordinal = layout.n_ord > 0
    anchors = compute_anchors(unpack(theta, layout), layout, data, rule) if ordinal else None
    fg = _objective(layout, data, rule, closed_form, anchors)
    f0, _ = fg(theta)
    if f0 >= _PENALTY:
        raise NumericalError("log-likelihood is not finite at the starting values")
    history = [f0]
    total = 0
    H = hess_inv0
    for _ in range(max_recentre if ordinal else 1):
        theta, f, g, f_prev, nit, hess_inv, message = _bfgs(fg, theta, n, gtol, max_iter - total, H, history)
        total += nit
        if not ordinal or total >= max_iter:
            break
        anchors = compute_anchors(unpack(theta, layout), layout, data, rule)
        fg = _objective(layout, data, rule, closed_form, anchors)
        f_new, g = fg(theta)
        f_prev, f = f, f_new
        if np.max(np.abs(g)) * n < gtol:
            break
        H = hess_inv
    g_norm = float(np.max(np.abs(g)) * n)
    rel = abs(f - f_prev) / max(abs(f), 1e-300)
    return FitResult(
        params=unpack(theta, layout),
        loglik=float(-f * n),
        converged=bool(g_norm < gtol and rel < ftol),
        gradient_norm=g_norm,
        n_iter=total,
        rel_change=float(rel),
        hess_inv=hess_inv,
        message=str(message),
    )


# Starting values ------------------------------------------------------------

def _normal_scores(codes, n_cats):
    counts = np.bincount(codes, minlength=n_cats).astype(float)
    cum = np.cumsum(counts) / counts.sum()
    mid = (np.concatenate([[0.0], cum[:-1]]) + cum) / 2.0
    return ndtri(np.clip(mid, 1e-6, 1 - 1e-6))[codes]


def _one_factor(S, n_iter=100):
    """Principal-axis loadings of a covariance matrix."""
    k = S.shape[0]
    diag = np.diag(S).copy()
    if k == 2:
        l = np.sqrt(max(abs(S[0, 1]), 1e-3 * np.sqrt(diag.prod())) * diag / np.sqrt(diag.prod()))
        return l * np.sign(S[0, 1]) ** np.array([0, 1])
    try:
        h = diag - 1.0 / np.diag(np.linalg.inv(S))
    except np.linalg.LinAlgError:
        h = 0.5 * diag
    for _ in range(n_iter):
        Sr = S.copy()
        np.fill_diagonal(Sr, h)
        val, vec = np.linalg.eigh(Sr)
        l = vec[:, -1] * np.sqrt(max(val[-1], 1e-6))
        h_new = np.minimum(l * l, 0.95 * diag)
        if np.max(np.abs(h_new - h)) < 1e-8:
            break
        h = h_new
    return l


def start_values(layout: Layout, data: SEMData) -> SEMParams:
    """Moment-based starting values.

    Ordinal items are replaced by normal scores; items are regressed on Z; a
    principal-axis one-factor fit of the residual covariance of each block gives
    loadings; B follows from the reduced-form coefficients; exposure
    coefficients come from a GLM on Z and regression factor scores.
    """
    p = SEMParams.zeros(layout)
    n, d = data.n, layout.n_latent
    kc, ko = layout.n_cont, layout.n_ord
    ords = [_normal_scores(data.wo[:, j], r) for j, r in enumerate(layout.n_cats)]
    Y = np.column_stack([data.wc] + [o[:, None] for o in ords]) if ords else data.wc
    zc = data.z if layout.regress_on_z else np.zeros((n, 0))
    D = np.column_stack([np.ones(n), zc])
    coef, *_ = np.linalg.lstsq(D, Y, rcond=None)
    nu, Pi = coef[0], coef[1:].T
    resid = Y - D @ coef
    S = np.cov(resid, rowvar=False).reshape(Y.shape[1], Y.shape[1])
    load = np.vstack([layout.cont_load, layout.ord_load])
    single = load.sum(axis=1) == 1
    block_of = np.where(single, load.argmax(axis=1), -1)
    l = np.zeros((Y.shape[1], d))
    for b in range(d):
        idx = np.flatnonzero(block_of == b)
        lb = _one_factor(S[np.ix_(idx, idx)])
        if lb[0] < 0:
            lb = -lb
        l[idx, b] = lb
    if d == 2:
        i0, i1 = np.flatnonzero(block_of == 0), np.flatnonzero(block_of == 1)
        prod = np.outer(l[i0, 0], l[i1, 1])
        p.psi = float(np.clip((prod * S[np.ix_(i0, i1)]).sum() / max((prod ** 2).sum(), 1e-12), -0.8, 0.8))
    Psi = p.psi_matrix()
    for j in np.flatnonzero(block_of < 0):
        # Items loading on every block (the exposure in the all-linear model).
        others = np.flatnonzero(block_of >= 0)
        A = l[others] @ Psi
        l[j], *_ = np.linalg.lstsq(A, S[others, j], rcond=None)
    if layout.regress_on_z and layout.n_z:
        for b in range(d):
            idx = np.flatnonzero(block_of == b)
            p.B[b] = l[idx, b] @ Pi[idx] / max(l[idx, b] @ l[idx, b], 1e-12)
    # Continuous items.
    p.nu = nu[:kc].copy()
    p.lam_c = np.where(layout.cont_load, l[:kc], 0.0)
    gam = Pi[:kc] - p.lam_c @ p.B
    p.gam_c = np.where(layout.cont_zmask, gam, 0.0)
    expl = np.einsum("kd,de,ke->k", p.lam_c, Psi, p.lam_c)
    p.sig2 = np.maximum(np.diag(S)[:kc] - expl, 0.1 * np.diag(S)[:kc]) + VAR_FLOOR
    for g, idx in enumerate(layout.nuisance):
        # Residual covariance left over after the substantive factor.
        off = np.mean([S[i, j] - p.lam_c[i] @ Psi @ p.lam_c[j] for i in idx for j in idx if i < j])
        p.nuis[g] = np.full(len(idx), np.sqrt(max(off, 0.01)))
    # Ordinal items: probit loadings and thresholds on the latent-response scale.
    for j in range(ko):
        row = kc + j
        h = np.clip(l[row] @ Psi @ l[row] / max(S[row, row], 1e-12), 0.01, 0.9)
        scale = np.sqrt(1.0 / (1.0 - h))
        lam = l[row] / np.sqrt(S[row, row]) * scale
        p.lam_o[j] = np.where(layout.ord_load[j], lam, 0.0)
        counts = np.bincount(data.wo[:, j], minlength=layout.n_cats[j]).astype(float)
        tail = 1.0 - np.cumsum(counts)[:-1] / n
        tail = np.clip(tail, 1e-4, 1 - 1e-4)
        # P(W >= c) ~ Phi((lam'E[X] - tau_c) / sqrt(1 + lam'Psi lam)), E[X] ~ B zbar.
        shift = p.lam_o[j] @ p.B @ zc.mean(axis=0) if zc.shape[1] else 0.0
        tau = shift - ndtri(tail) * np.sqrt(1.0 + p.lam_o[j] @ Psi @ p.lam_o[j])
        p.tau[j] = np.maximum.accumulate(tau + 1e-3 * np.arange(tau.size))
        gam = Pi[row] / np.sqrt(S[row, row]) * scale - p.lam_o[j] @ p.B
        p.gam_o[j] = np.where(layout.ord_zmask[j], gam, 0.0)
    if layout.link is not None and data.a is not None:
        Si = np.linalg.pinv(S)
        scores = zc @ p.B.T + resid @ Si @ l @ np.linalg.inv(np.eye(d) + l.T @ Si @ l)
        Zx = zc[:, layout.exposure_zmask] if layout.n_z else zc
        design = np.column_stack([np.ones(n), scores, Zx])
        try:
            beta = fit_glm_binary(design, data.a, layout.link)
        except LatentPSError:
            beta = np.zeros(design.shape[1])
        p.b0 = float(beta[0])
        p.bx = beta[1:1 + d].copy()
        p.bz[layout.exposure_zmask] = beta[1 + d:]
    return p


def _sign_matrix(params: SEMParams, layout: Layout, b: int) -> np.ndarray:
    """Diagonal of the theta-space sign change caused by flipping block ``b``."""
    probe = params.copy()
    for attr in ("B", "lam_c", "lam_o", "bx"):
        setattr(probe, attr, np.ones_like(getattr(probe, attr)))
    probe.psi = 0.5
    before = pack(probe, layout)
    probe.flip_block(b)
    after = pack(probe, layout)
    return np.where(np.isclose(after, -before) & (before != 0), -1.0, 1.0)


def _identify_signs(res: FitResult, layout: Layout):
    """Flip blocks so the first item of each block loads positively."""
    for b, (kind, i) in enumerate(layout.first_items()):
        lam = res.params.lam_c[i, b] if kind == "c" else res.params.lam_o[i, b]
        if lam < 0:
            if res.hess_inv is not None:
                s = _sign_matrix(res.params, layout, b)
                res.hess_inv = res.hess_inv * np.outer(s, s)
            res.params.flip_block(b)


# Fitted-model types ---------------------------------------------------------

@dataclass
class _Fitted:
    layout: Layout
    params: SEMParams
    loglik: float
    converged: bool
    gradient_norm: float
    n_iter: int = 0
    n: int = 0
    n_points: int = 21
    heywood: tuple = ()
    hess_inv: np.ndarray | None = field(default=None, repr=False)

    @property
    def rule(self) -> QuadratureRule:
        return default_rule(self.n_points)

    def _meta(self) -> dict:
        return {
            "loglik": self.loglik, "converged": self.converged, "gradient_norm": self.gradient_norm,
            "n_iter": self.n_iter, "n": self.n, "n_points": self.n_points, "heywood": list(self.heywood),
        }


@dataclass
class FittedSEM(_Fitted):
    """Joint measurement and exposure model fitted by maximum likelihood."""

    spec: ModelSpec | None = None

    @property
    def alpha_z(self) -> np.ndarray:
        """Regression of X on Z, shape (blocks, p)."""
        return self.params.B

    @property
    def beta(self) -> dict:
        return {"b0": self.params.b0, "bx": self.params.bx, "bz": self.params.bz}

    @property
    def thresholds(self) -> list:
        return self.params.tau

    @property
    def nuisance_loadings(self) -> np.ndarray:
        return self.params.nuisance_matrix(self.layout)

    def encode(self, data: Dataset, with_exposure=True) -> SEMData:
        return encode_dataset(self.layout, data, with_exposure)


@dataclass
class FittedFactorModel(_Fitted):
    """One-factor measurement model with X ~ N(0, 1)."""

    spec: MeasurementSpec | None = None

    @property
    def loadings(self) -> np.ndarray:
        out = np.zeros(len(self.layout.sources_c) + len(self.layout.sources_o))
        for i, (_, k) in enumerate(self.layout.sources_c):
            out[k] = self.params.lam_c[i, 0]
        for i, (_, k) in enumerate(self.layout.sources_o):
            out[k] = self.params.lam_o[i, 0]
        return out

    def encode(self, w) -> SEMData:
        return encode(self.layout, [w])


@dataclass
class FittedGaussianJoint(_Fitted):
    """All-linear one-factor model treating (W, Z, A) as indicators.

    ``sample_mean`` and ``sample_cov`` are the sufficient statistics of
    V = (W, Z, A) in that column order.
    """

    spec: ModelSpec | None = None
    sample_mean: np.ndarray | None = None
    sample_cov: np.ndarray | None = None

    def encode(self, data: Dataset) -> SEMData:
        return encode(self.layout, data.w_blocks, data.z, data.a)

    def implied_moments(self):
        """Model-implied (mean, covariance) of V = (W, Z, A) at the sample Z moments."""
        p, lay = self.params, self.layout
        kc, pz = lay.n_cont, lay.n_z
        mz = self.sample_mean[kc - 1:kc - 1 + pz]
        Szz = self.sample_cov[kc - 1:kc - 1 + pz, kc - 1:kc - 1 + pz]
        M = p.lam_c @ p.B + p.gam_c
        Ls = p.nuisance_matrix(lay)
        Syy = p.lam_c @ p.psi_matrix() @ p.lam_c.T + np.diag(p.sig2) + Ls @ Ls.T + M @ Szz @ M.T
        Syz = M @ Szz
        my = p.nu + M @ mz
        order = list(range(kc - 1)) + list(range(kc, kc + pz)) + [kc - 1]
        full = np.block([[Syy, Syz], [Syz.T, Szz]])
        mean = np.concatenate([my, mz])
        return mean[order], full[np.ix_(order, order)]

    @property
    def implied_cov(self) -> np.ndarray:
        return self.implied_moments()[1]

    @property
    def fit_statistic(self) -> float:
        """ML discrepancy log|Sigma| + tr(S Sigma^-1) - log|S| - k."""
        Sig = self.implied_cov
        S = self.sample_cov
        k = S.shape[0]
        return float(np.linalg.slogdet(Sig)[1] + np.trace(np.linalg.solve(Sig, S))
                     - np.linalg.slogdet(S)[1] - k)


def _check_fit(res: FitResult, what: str):
    if not res.converged:
        raise ConvergenceError(
            f"{what} did not converge (gradient {res.gradient_norm:.3g}, relative change "
            f"{res.rel_change:.3g}, {res.n_iter} iterations): {res.message}",
            trace={"gradient_norm": res.gradient_norm, "rel_change": res.rel_change,
                   "n_iter": res.n_iter, "loglik": res.loglik, "message": res.message},
        )


def _heywood(params: SEMParams, what: str) -> tuple:
    idx = tuple(int(i) for i in np.flatnonzero(params.sig2 < HEYWOOD))
    if idx:
        warnings.warn(f"{what}: residual variance of item(s) {list(idx)} at the floor {VAR_FLOOR:g}",
                      RuntimeWarning, stacklevel=3)
    return idx


def fit_joint(data: Dataset, spec: ModelSpec | None = None, *, n_points=21, start: SEMParams | None = None,
              hess_inv0=None, max_iter=MAX_ITER, levels: dict | None = None) -> FittedSEM:
    """Fit the joint measurement + exposure model by maximum likelihood.

    Parameters
    ----------
    data : Dataset
    spec : ModelSpec, optional
        Defaults to :func:`latentps.data.default_model_spec`.
    n_points : int
        Gauss-Hermite nodes per latent dimension.
    start : SEMParams, optional
        Starting values (for instance a previous fit, when bootstrapping).
    hess_inv0 : ndarray, optional
        Initial inverse Hessian for BFGS, matching ``start``.
    levels : dict, optional
        Ordinal item levels keyed by ``(block, column)``; taken from the data
        when omitted. Bootstrap refits pass the full-sample levels.

    Raises
    ------
    SpecError
        If the spec fails :func:`latentps.data.validate_spec`.
    ConvergenceError
        If the optimizer stops short of the convergence criteria.
    """
    spec = spec or default_model_spec(data)
    validate_spec(spec, data).raise_if_failed()
    levels = levels or observed_levels(data, spec)
    layout = joint_layout(spec, data.z_names, levels)
    sd = encode_dataset(layout, data)
    rule = default_rule(n_points)
    p0 = start if start is not None else start_values(layout, sd)
    res = maximize(layout, sd, pack(p0, layout), rule, max_iter=max_iter, hess_inv0=hess_inv0)
    _identify_signs(res, layout)
    _check_fit(res, "joint model")
    return FittedSEM(
        layout=layout, params=res.params, loglik=res.loglik, converged=res.converged,
        gradient_norm=res.gradient_norm, n_iter=res.n_iter, n=data.n, n_points=n_points,
        heywood=_heywood(res.params, "joint model"), hess_inv=res.hess_inv, spec=spec,
    )


def refit_hess_inv(model: FittedSEM, data: Dataset) -> np.ndarray:
    """Inverse finite-difference Hessian of the optimizer objective at the estimate.

    The objective is the mean negative log-likelihood over the unconstrained
    parameter vector. Passing the result as ``hess_inv0`` to refits on
    resamples of ``data`` roughly halves their BFGS iterations compared with
    the optimizer's own inverse-Hessian approximation. Falls back to that
    approximation if the Hessian is not positive definite.
    """
    sd = model.encode(data)
    rule = model.rule
    theta = pack(model.params, model.layout)
    anchors = compute_anchors(model.params, model.layout, sd, rule) if model.layout.n_ord else None
    H = _fd_hessian(_objective(model.layout, sd, rule, True, anchors), theta)
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return model.hess_inv
    return np.linalg.inv(H)


def fit_measurement_only(w, spec: MeasurementSpec | None = None, *, n_points=21,
                         levels: dict | None = None) -> FittedFactorModel:
    """Fit a one-factor model to the items of a single block, X ~ N(0, 1).

    Raises
    ------
    SpecError
        With fewer than three items.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[1] < 3:
        raise SpecError("cFS requires >= 3 items")
    if spec is None:
        spec = MeasurementSpec.continuous([f"w{k + 1}" for k in range(w.shape[1])])
    if spec.n_items != w.shape[1]:
        raise SpecError("spec and item matrix disagree on the number of items")
    if levels is None:
        levels = {(0, k): tuple(float(v) for v in np.unique(w[:, k]))
                  for k, t in enumerate(spec.item_types) if t == "ordinal"}
    layout = measurement_layout(spec, levels)
    sd = encode(layout, [w])
    res = maximize(layout, sd, pack(start_values(layout, sd), layout), default_rule(n_points))
    _identify_signs(res, layout)
    _check_fit(res, "measurement model")
    return FittedFactorModel(
        layout=layout, params=res.params, loglik=res.loglik, converged=res.converged,
        gradient_norm=res.gradient_norm, n_iter=res.n_iter, n=w.shape[0], n_points=n_points,
        heywood=_heywood(res.params, "measurement model"), spec=spec,
    )


def _linear_spec(data: Dataset, spec: ModelSpec | None) -> ModelSpec:
    if spec is None:
        return ModelSpec(latent_blocks=tuple(
            MeasurementSpec.continuous(names, name=data.block_names[b]) for b, names in enumerate(data.item_names)
        ))
    return spec


def fit_linear_joint(data: Dataset, spec: ModelSpec | None = None) -> FittedGaussianJoint:
    """Fit the all-linear Gaussian model of (W, Z, A) with one factor per block.

    Every item is treated as continuous. The exposure is an extra indicator
    loading on each block, with free covariances to Z (direct effects of every
    Z column); W is independent of Z given X unless the spec adds direct
    effects. The model is fitted by Gaussian ML conditional on Z, which equals
    ML on the sample covariance of (W, Z, A) with the Z block saturated.

    Raises
    ------
    DataError
        If the sample covariance of (W, Z, A) is singular or n is smaller than
        the number of variables.
    """
    spec = _linear_spec(data, spec)
    V = np.column_stack([data.w, data.z, data.a])
    if data.n <= V.shape[1]:
        raise DataError(f"n={data.n} is not larger than the {V.shape[1]} variables")
    S = np.cov(V, rowvar=False)
    ev = np.linalg.eigvalsh(S)
    if ev[0] <= 1e-10 * max(ev[-1], 1e-300):
        raise DataError("sample covariance of (W, Z, A) is singular (duplicate or constant column?)")
    layout = joint_layout(spec, data.z_names, {}, linear=True)
    sd = encode(layout, data.w_blocks, data.z, data.a)
    res = maximize(layout, sd, pack(start_values(layout, sd), layout))
    _identify_signs(res, layout)
    _check_fit(res, "all-linear model")
    return FittedGaussianJoint(
        layout=layout, params=res.params, loglik=res.loglik, converged=res.converged,
        gradient_norm=res.gradient_norm, n_iter=res.n_iter, n=data.n,
        heywood=_heywood(res.params, "all-linear model"), spec=spec,
        sample_mean=V.mean(axis=0), sample_cov=S,
    )


# Serialization ----------------------------------------------------------------

def _levels_to_json(layout: Layout):
    return [[int(b), int(k), list(lev)] for (b, k), lev in zip(layout.sources_o, layout.ord_levels)]


def model_to_dict(model: _Fitted) -> dict:
    """JSON-ready description of a fitted model."""
    kind = {FittedSEM: "joint", FittedFactorModel: "measurement", FittedGaussianJoint: "linear"}[type(model)]
    out = {
        "kind": kind,
        "spec": model.spec.to_dict() if model.spec is not None else None,
        "z_names": list(model.layout.z_names),
        "levels": _levels_to_json(model.layout),
        "params": model.params.to_dict(),
        **model._meta(),
    }
    if kind == "linear":
        out["sample_mean"] = model.sample_mean.tolist()
        out["sample_cov"] = model.sample_cov.tolist()
    return out


def model_from_dict(d: dict) -> _Fitted:
    levels = {(b, k): tuple(lev) for b, k, lev in d["levels"]}
    kind = d["kind"]
    common = {k: d[k] for k in ("loglik", "converged", "gradient_norm", "n_iter", "n", "n_points")}
    common["heywood"] = tuple(d.get("heywood", ()))
    if kind == "measurement":
        spec = MeasurementSpec.from_dict(d["spec"])
        layout = measurement_layout(spec, levels)
        return FittedFactorModel(layout=layout, params=SEMParams.from_dict(d["params"], layout), spec=spec, **common)
    spec = ModelSpec.from_dict(d["spec"])
    layout = joint_layout(spec, tuple(d["z_names"]), levels, linear=kind == "linear")
    params = SEMParams.from_dict(d["params"], layout)
    if kind == "joint":
        return FittedSEM(layout=layout, params=params, spec=spec, **common)
    return FittedGaussianJoint(layout=layout, params=params, spec=spec,
                               sample_mean=np.array(d["sample_mean"]), sample_cov=np.array(d["sample_cov"]),
                               **common)


def save_model(model: _Fitted, path):
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> _Fitted:
    try:
        return model_from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: not a fitted-model document ({exc})") from exc
