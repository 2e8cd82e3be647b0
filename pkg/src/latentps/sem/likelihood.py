"""Per-unit log-likelihood of the joint model with analytic gradients.

Continuous items are integrated out analytically: given Z they are jointly
Gaussian, and X given (W_c, Z) is Gaussian with mean m_i and covariance V. The
remaining factors are integrated against that posterior: a lone exposure
factor in closed form (probit) or by Gauss-Hermite quadrature along the
direction of its linear predictor, ordinal items by adaptive Gauss-Hermite
quadrature on a per-unit grid centred at the unit's posterior.

Gradients are propagated by hand in reverse mode through every stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, logsumexp, ndtr

from latentps.errors import NumericalError
from latentps.quadrature import QuadratureRule, gauss_hermite
from latentps.sem.model import Layout, SEMData, SEMParams

LOG2PI = np.log(2.0 * np.pi)
SMALL_SCALE = 1e-7


@lru_cache(maxsize=None)
def default_rule(n_points=21) -> QuadratureRule:
    """One-dimensional adaptive Gauss-Hermite rule."""
    return gauss_hermite(n_points)


def norm_pdf(x):
    return np.exp(-0.5 * x * x - 0.5 * LOG2PI)


def mills_ratio(t):
    """phi(t) / Phi(t), using the asymptotic series for t < -30."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    far = t < -30.0
    tf = t[far]
    t2 = tf * tf
    out[far] = -tf / (1.0 - 1.0 / t2 + 3.0 / t2 ** 2 - 15.0 / t2 ** 3)
    tn = t[~far]
    out[~far] = np.exp(-0.5 * tn * tn - 0.5 * LOG2PI - log_ndtr(tn))
    return out


def _log_link(link, x):
    """log F(x), d/dx log F and d2/dx2 log F for the exposure link."""
    if link == "logit":
        e = np.exp(-np.abs(x))
        f = np.where(x >= 0, e, 1.0) / (1.0 + e)
        return np.minimum(x, 0.0) - np.log1p(e), f, -f * (1.0 - f)
    r = mills_ratio(x)
    return log_ndtr(x), r, -r * (x + r)


@dataclass
class Evaluation:
    """Per-unit log-likelihood plus optional gradient and posterior means.

    ``post_mean`` is E[X | all modelled data] under the evaluated parameters:
    continuous items, ordinal items, Z, and the exposure when the layout has
    an exposure model and exposure data were supplied.
    """

    loglik: np.ndarray
    grad: SEMParams | None
    post_mean: np.ndarray


@dataclass
class _Gauss:
    ll: np.ndarray
    m: np.ndarray
    V: np.ndarray
    SiR: np.ndarray
    Si: np.ndarray
    Ti: np.ndarray
    TiL: np.ndarray
    Psii: np.ndarray
    U: np.ndarray
    E: np.ndarray
    Ls: np.ndarray


def _gauss_stage(p: SEMParams, layout: Layout, data: SEMData, Psi, Psii, prior) -> _Gauss:
    z, kc = data.z, layout.n_cont
    L = p.lam_c
    Ls = p.nuisance_matrix(layout)
    Theta = np.diag(p.sig2) + Ls @ Ls.T
    Sigma = L @ Psi @ L.T + Theta
    try:
        cf = linalg.cho_factor(Sigma, lower=True, check_finite=False)
        tf = linalg.cho_factor(Theta, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"item covariance not positive definite: {exc}") from exc
    E = data.wc - p.nu - z @ p.gam_c.T
    R = E - prior @ L.T
    SiR = linalg.cho_solve(cf, R.T, check_finite=False).T
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    ll = -0.5 * (kc * LOG2PI + logdet + np.einsum("ij,ij->i", R, SiR))
    Si = linalg.cho_solve(cf, np.eye(kc), check_finite=False)
    Ti = linalg.cho_solve(tf, np.eye(kc), check_finite=False)
    TiL = Ti @ L
    V = np.linalg.inv(Psii + L.T @ TiL)
    V = 0.5 * (V + V.T)
    U = prior @ Psii + E @ TiL
    return _Gauss(ll=ll, m=U @ V, V=V, SiR=SiR, Si=Si, Ti=Ti, TiL=TiL, Psii=Psii, U=U, E=E, Ls=Ls)


def _gauss_backprop(gs: _Gauss, p: SEMParams, layout: Layout, data: SEMData, g: SEMParams, g_m, G_V):
    z, n = data.z, data.n
    L, Psi, B = p.lam_c, p.psi_matrix(), p.B
    # Marginal Gaussian density of the continuous items.
    G = 0.5 * (gs.SiR.T @ gs.SiR - n * gs.Si)
    GM = gs.SiR.T @ z
    g.nu += gs.SiR.sum(axis=0)
    g.gam_c += GM
    g.lam_c += GM @ B.T + 2.0 * G @ L @ Psi
    g.B += L.T @ GM
    gPsi = L.T @ G @ L
    gTheta = G.copy()
    # Posterior mean m = U V and covariance V = (Psi^-1 + L' Theta^-1 L)^-1.
    if g_m is not None:
        V, Psii, TiL, Ti = gs.V, gs.Psii, gs.TiL, gs.Ti
        GV = G_V + 0.5 * (gs.U.T @ g_m + g_m.T @ gs.U)
        a = g_m @ V
        GP = -V @ GV @ V
        aZ = a.T @ z
        gPsi += -Psii @ GP @ Psii - Psii @ aZ @ B.T @ Psii
        g.B += Psii @ aZ
        g.lam_c += TiL @ (GP + GP.T) + Ti @ gs.E.T @ a
        gTheta += -TiL @ GP @ TiL.T - TiL @ (a.T @ gs.E) @ Ti
        g.nu += -TiL @ a.sum(axis=0)
        g.gam_c += -TiL @ aZ
    g.sig2 += np.diag(gTheta)
    if layout.nuisance:
        gLs = (gTheta + gTheta.T) @ gs.Ls
        for j, idx in enumerate(layout.nuisance):
            g.nuis[j] += gLs[list(idx), j]
    if layout.n_latent == 2:
        g.psi += gPsi[0, 1] + gPsi[1, 0]


def _exposure_stage(p: SEMParams, layout: Layout, data: SEMData, m, V, rule, closed_form, g):
    """Integrate P(A | X, Z) against N(m_i, V) in closed form or by quadrature."""
    z, a = data.z, data.a
    bx = p.bx
    mu = p.b0 + m @ bx + z @ p.bz
    Vb = V @ bx
    s2 = max(float(bx @ Vb), 0.0)
    s = np.sqrt(s2)
    sA = 2.0 * a - 1.0
    if layout.link == "probit" and closed_form:
        den = np.sqrt(1.0 + s2)
        t = sA * mu / den
        ll = log_ndtr(t)
        r = mills_ratio(t)
        g1 = sA * r / den
        g2 = -0.5 * t * r / (1.0 + s2)
        shift = g1
    else:
        tq = rule.points
        x = sA[:, None] * (mu[:, None] + s * tq[None, :])
        lf, d1, d2 = _log_link(layout.link, x)
        G = lf + rule.log_weights
        ll = logsumexp(G, axis=1)
        Pi = np.exp(G - ll[:, None])
        g1 = sA * (Pi * d1).sum(axis=1)
        if s > SMALL_SCALE:
            g2 = sA * (Pi * d1 * tq).sum(axis=1) / (2.0 * s)
            shift = (Pi * tq).sum(axis=1) / s
        else:
            g2 = 0.5 * (Pi * (d2 + d1 * d1)).sum(axis=1)
            shift = g1
    post = m + np.outer(shift, Vb)
    if g is not None:
        g.b0 += g1.sum()
        g.bz += z.T @ g1
        g.bx += m.T @ g1 + 2.0 * g2.sum() * Vb
    return ll, np.outer(g1, bx), g2.sum() * np.outer(bx, bx), post


@dataclass(frozen=True)
class Anchors:
    """Per-unit centres and scales of the adaptive quadrature grid.

    Node ``j`` of block ``b`` for unit ``i`` sits at
    ``mean[i, b] + scale[i, b] * t_j``. The grid is held fixed while the
    parameters move, and an importance ratio against the Gaussian posterior
    given the continuous items keeps the integral exact in the limit.
    """

    mean: np.ndarray
    scale: np.ndarray

    def take(self, idx) -> "Anchors":
        return Anchors(self.mean[idx], self.scale[idx])


def _ordinal_stage(p: SEMParams, layout: Layout, data: SEMData, m, V, rule, anchors: Anchors, g):
    """Adaptive tensor Gauss-Hermite for the ordinal items and the exposure.

    Integrates against N(m_i, V) using nodes built from ``anchors``. Each
    ordinal item loads on one block, so its probabilities are needed on the
    one-dimensional grid of that block only; the exposure and the importance
    ratio use the full tensor grid.
    """
    n, d = m.shape
    z = data.z
    t, lw = rule.points, rule.log_weights
    J = t.size
    Xb = anchors.mean[:, :, None] + anchors.scale[:, :, None] * t  # (n, d, J)
    Lb = np.zeros((n, d, J))
    zg = z @ p.gam_o.T
    block = np.argmax(layout.ord_load, axis=1)
    cache = []
    for k in range(layout.n_ord):
        b = block[k]
        eta = p.lam_o[k, b] * Xb[:, b] + zg[:, k, None]
        c = data.wo[:, k]
        cuts = np.concatenate([[-np.inf], p.tau[k], [np.inf]])
        lo = eta - cuts[c][:, None]
        hi = eta - cuts[c + 1][:, None]
        P = np.where(hi > 0, ndtr(-hi) - ndtr(-lo), ndtr(lo) - ndtr(hi))
        P = np.maximum(P, 1e-300)
        Lb[:, b] += np.log(P)
        if g is not None:
            cache.append((b, norm_pdf(lo) / P, norm_pdf(hi) / P, c))
    # Full-grid coordinates, one (n, Q) array per latent dimension.
    if d == 1:
        X = [Xb[:, 0]]
        G = Lb[:, 0] + lw
        tt = t * t
    else:
        X = [np.repeat(Xb[:, 0], J, axis=1), np.tile(Xb[:, 1], (1, J))]
        G = (Lb[:, 0, :, None] + Lb[:, 1, None, :] + lw[:, None] + lw[None, :]).reshape(n, J * J)
        tt = (t[:, None] ** 2 + t[None, :] ** 2).ravel()
    # Importance ratio N(x; m_i, V) / N(x; anchor).
    Vi = np.linalg.inv(V)
    delta = [X[j] - m[:, j, None] for j in range(d)]
    quad = sum(Vi[j, k] * delta[j] * delta[k] for j in range(d) for k in range(d))
    logdet = np.linalg.slogdet(V)[1]
    G += 0.5 * (tt - quad - logdet) + np.log(anchors.scale).sum(axis=1)[:, None]
    has_a = layout.link is not None and data.a is not None
    if has_a:
        sA = (2.0 * data.a - 1.0)[:, None]
        etaA = p.b0 + (z @ p.bz)[:, None] + sum(p.bx[j] * X[j] for j in range(d))
        lf, d1, _ = _log_link(layout.link, sA * etaA)
        G += lf
    ll = logsumexp(G, axis=1)
    Pi = np.exp(G - ll[:, None])
    PX = [Pi * X[j] for j in range(d)]
    post = np.column_stack([PX[j].sum(axis=1) for j in range(d)])
    var = np.column_stack([(PX[j] * X[j]).sum(axis=1) for j in range(d)]) - post * post
    if g is None:
        return ll, None, None, post, var
    if d == 1:
        marg = Pi[:, None, :]
    else:
        P3 = Pi.reshape(n, J, J)
        marg = np.stack([P3.sum(axis=2), P3.sum(axis=1)], axis=1)
    for k, (b, pa, pb, c) in enumerate(cache):
        pi_b = marg[:, b]
        w = pi_b * (pa - pb)
        g.lam_o[k, b] += (w * Xb[:, b]).sum()
        g.gam_o[k] += z.T @ w.sum(axis=1)
        r1 = len(p.tau[k])
        ga = -(pi_b * pa).sum(axis=1)
        gb = (pi_b * pb).sum(axis=1)
        low, up = c >= 1, c <= r1 - 1
        g.tau[k] += np.bincount(c[low] - 1, weights=ga[low], minlength=r1)
        g.tau[k] += np.bincount(c[up], weights=gb[up], minlength=r1)
    if has_a:
        w = Pi * (sA * d1)
        ws = w.sum(axis=1)
        g.b0 += ws.sum()
        g.bx += np.array([(w * X[j]).sum() for j in range(d)])
        g.bz += z.T @ ws
    # E over the posterior of (x - m)(x - m)', summed over units.
    Pd = [Pi * delta[j] for j in range(d)]
    second = np.array([[(Pd[j] * delta[k]).sum() for k in range(d)] for j in range(d)])
    g_m = (post - m) @ Vi
    G_V = 0.5 * (Vi @ second @ Vi - n * Vi)
    return ll, g_m, G_V, post, var


def _gaussian_part(params, layout, data):
    d = layout.n_latent
    Psi = params.psi_matrix()
    Psii = np.linalg.inv(Psi)
    prior = data.z @ params.B.T if layout.n_z else np.zeros((data.n, d))
    if layout.n_cont:
        gs = _gauss_stage(params, layout, data, Psi, Psii, prior)
        return gs, gs.ll, gs.m, gs.V
    return None, np.zeros(data.n), prior, Psi


def compute_anchors(params: SEMParams, layout: Layout, data: SEMData, rule: QuadratureRule | None = None,
                    n_refine=3) -> Anchors:
    """Anchor each unit's grid at its posterior mean and standard deviations.

    Starts from the Gaussian posterior given the continuous items (the prior
    when there are none) and re-centres ``n_refine`` times.
    """
    rule = rule or default_rule()
    _, _, m, V = _gaussian_part(params, layout, data)
    anchors = Anchors(m, np.broadcast_to(np.sqrt(np.diag(V)), m.shape).copy())
    for _ in range(n_refine):
        _, _, _, post, var = _ordinal_stage(params, layout, data, m, V, rule, anchors, None)
        anchors = Anchors(post, np.sqrt(np.maximum(var, 1e-12)))
    return anchors


def evaluate(params: SEMParams, layout: Layout, data: SEMData, rule: QuadratureRule | None = None,
             *, grad=True, closed_form=True, anchors: Anchors | None = None) -> Evaluation:
    """Per-unit log-likelihood, its gradient summed over units, and EAP scores.

    Parameters
    ----------
    params : SEMParams
    layout : Layout
    data : SEMData
        ``data.a = None`` drops the exposure factor (scores then condition on
        W and Z only).
    rule : QuadratureRule, optional
        One-dimensional standard-normal rule, used per latent dimension.
        Defaults to 21 nodes.
    grad : bool
        Whether to compute the gradient.
    closed_form : bool
        Use the closed form for a probit exposure without ordinal items.
    anchors : Anchors, optional
        Fixed quadrature anchors for models with ordinal items. When omitted
        they are computed at ``params`` by :func:`compute_anchors`; the
        gradient always treats the anchors as constants.
    """
    d = layout.n_latent
    z = data.z
    rule = rule or default_rule()
    g = SEMParams.zeros(layout) if grad else None
    gs, ll, m, V = _gaussian_part(params, layout, data)
    g_m = G_V = None
    has_a = layout.link is not None and data.a is not None
    if layout.n_ord:
        if anchors is None:
            anchors = compute_anchors(params, layout, data, rule)
        ll2, g_m, G_V, post, _ = _ordinal_stage(params, layout, data, m, V, rule, anchors, g)
        ll = ll + ll2
    elif has_a:
        ll2, g_m, G_V, post = _exposure_stage(params, layout, data, m, V, rule, closed_form, g)
        ll = ll + ll2
    else:
        post = m
    if grad:
        if gs is not None:
            _gauss_backprop(gs, params, layout, data, g, g_m, G_V)
        elif g_m is not None:
            if layout.regress_on_z:
                g.B += g_m.T @ z
            if d == 2:
                g.psi += G_V[0, 1] + G_V[1, 0]
    return Evaluation(loglik=ll, grad=g, post_mean=post)


def unit_loglik(params: SEMParams, layout: Layout, data: SEMData, rule: QuadratureRule | None = None,
                closed_form=True, anchors: Anchors | None = None) -> np.ndarray:
    """log f(W, A | Z) for every unit.

    Raises
    ------
    NumericalError
        If any unit's log-likelihood is not finite. The exception carries the
        parameter values as ``snapshot``.
    """
    ll = evaluate(params, layout, data, rule, grad=False, closed_form=closed_form, anchors=anchors).loglik
    if not np.all(np.isfinite(ll)):
        bad = np.flatnonzero(~np.isfinite(ll))
        err = NumericalError(f"non-finite log-likelihood for {bad.size} unit(s), first at {bad[0]}")
        err.snapshot = params.to_dict()
        raise err
    return ll
