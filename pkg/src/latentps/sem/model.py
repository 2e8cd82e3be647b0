"""Parameter layout of the joint model and its unconstrained packing.

The model for unit i with latent vector X (one entry per block):

    X | Z ~ N(B z, Psi)                       Psi unit-diagonal, corr psi
    W_c = nu + Lc X + Gc z + Ls S + e,  e ~ N(0, diag(sig2)),  S ~ N(0, I)
    P(W_o >= r | X, Z) = Phi(-tau_r + lo'X + go'z)
    P(A = 1 | X, Z) = F(b0 + bx'X + bz'z),   F = expit or Phi
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from latentps.data import Dataset, MeasurementSpec, ModelSpec
from latentps.errors import DataError, SpecError

VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class Layout:
    """Which parameters are free, and how data columns map onto items.

    ``sources_c`` and ``sources_o`` give, for every continuous and ordinal item,
    its ``(block, column)`` position in the dataset; a block index of -1 marks
    the exposure used as a continuous item (all-linear model).
    """

    n_latent: int
    n_z: int
    cont_load: np.ndarray
    ord_load: np.ndarray
    cont_zmask: np.ndarray
    ord_zmask: np.ndarray
    ord_levels: tuple
    nuisance: tuple
    link: str | None
    exposure_zmask: np.ndarray
    regress_on_z: bool = True
    sources_c: tuple = ()
    sources_o: tuple = ()
    block_names: tuple = ()
    z_names: tuple = ()

    @property
    def n_cont(self) -> int:
        return self.cont_load.shape[0]

    @property
    def n_ord(self) -> int:
        return self.ord_load.shape[0]

    @property
    def n_cats(self) -> tuple:
        return tuple(len(lv) for lv in self.ord_levels)

    @property
    def n_params(self) -> int:
        with np.errstate(divide="ignore"):
            return pack(SEMParams.zeros(self), self).size

    def first_items(self):
        """For each block, ``("c"|"o", index)`` of its first item (sign anchor)."""
        out = []
        for b in range(self.n_latent):
            src = [("c", i, s) for i, s in enumerate(self.sources_c) if s[0] == b]
            src += [("o", i, s) for i, s in enumerate(self.sources_o) if s[0] == b]
            kind, i, _ = min(src, key=lambda t: t[2][1])
            out.append((kind, i))
        return out


@dataclass
class SEMParams:
    """Natural-scale parameters. Also used as a container for gradients."""

    B: np.ndarray
    psi: float
    nu: np.ndarray
    lam_c: np.ndarray
    lam_o: np.ndarray
    gam_c: np.ndarray
    gam_o: np.ndarray
    sig2: np.ndarray
    nuis: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    b0: float = 0.0
    bx: np.ndarray = None
    bz: np.ndarray = None

    @classmethod
    def zeros(cls, layout: Layout) -> SEMParams:
        d, p, kc, ko = layout.n_latent, layout.n_z, layout.n_cont, layout.n_ord
        return cls(
            B=np.zeros((d, p)),
            psi=0.0,
            nu=np.zeros(kc),
            lam_c=np.zeros((kc, d)),
            lam_o=np.zeros((ko, d)),
            gam_c=np.zeros((kc, p)),
            gam_o=np.zeros((ko, p)),
            sig2=np.zeros(kc),
            nuis=[np.zeros(len(g)) for g in layout.nuisance],
            tau=[np.zeros(r - 1) for r in layout.n_cats],
            b0=0.0,
            bx=np.zeros(d),
            bz=np.zeros(p),
        )

    def copy(self) -> SEMParams:
        return SEMParams(
            B=self.B.copy(), psi=float(self.psi), nu=self.nu.copy(), lam_c=self.lam_c.copy(),
            lam_o=self.lam_o.copy(), gam_c=self.gam_c.copy(), gam_o=self.gam_o.copy(),
            sig2=self.sig2.copy(), nuis=[v.copy() for v in self.nuis], tau=[v.copy() for v in self.tau],
            b0=float(self.b0), bx=self.bx.copy(), bz=self.bz.copy(),
        )

    def psi_matrix(self) -> np.ndarray:
        d = self.B.shape[0]
        if d == 1:
            return np.ones((1, 1))
        return np.array([[1.0, self.psi], [self.psi, 1.0]])

    def nuisance_matrix(self, layout: Layout) -> np.ndarray:
        """Loadings of continuous items on nuisance factors, shape (Kc, G)."""
        out = np.zeros((layout.n_cont, len(layout.nuisance)))
        for g, (idx, vals) in enumerate(zip(layout.nuisance, self.nuis)):
            out[list(idx), g] = vals
        return out

    def flip_block(self, b: int):
        """Reverse the sign of latent block ``b`` in place."""
        self.lam_c[:, b] *= -1
        self.lam_o[:, b] *= -1
        self.B[b] *= -1
        self.bx[b] *= -1
        if self.B.shape[0] == 2:
            self.psi = -self.psi

    def to_dict(self) -> dict:
        return {
            "B": self.B.tolist(), "psi": float(self.psi), "nu": self.nu.tolist(),
            "lam_c": self.lam_c.tolist(), "lam_o": self.lam_o.tolist(),
            "gam_c": self.gam_c.tolist(), "gam_o": self.gam_o.tolist(), "sig2": self.sig2.tolist(),
            "nuis": [v.tolist() for v in self.nuis], "tau": [v.tolist() for v in self.tau],
            "b0": float(self.b0), "bx": self.bx.tolist(), "bz": self.bz.tolist(),
        }

    @classmethod
    def from_dict(cls, d, layout: Layout) -> SEMParams:
        z = cls.zeros(layout)

        def arr(key, like):
            return np.array(d[key], dtype=float).reshape(like.shape)

        return cls(
            B=arr("B", z.B), psi=float(d["psi"]), nu=arr("nu", z.nu), lam_c=arr("lam_c", z.lam_c),
            lam_o=arr("lam_o", z.lam_o), gam_c=arr("gam_c", z.gam_c), gam_o=arr("gam_o", z.gam_o),
            sig2=arr("sig2", z.sig2), nuis=[np.array(v, float) for v in d["nuis"]],
            tau=[np.array(v, float) for v in d["tau"]], b0=float(d["b0"]), bx=arr("bx", z.bx),
            bz=arr("bz", z.bz),
        )


@dataclass(frozen=True)
class SEMData:
    """Numeric arrays in the layout's item order."""

    z: np.ndarray
    wc: np.ndarray
    wo: np.ndarray
    a: np.ndarray | None

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def take(self, idx) -> SEMData:
        return SEMData(
            z=self.z[idx], wc=self.wc[idx], wo=self.wo[idx], a=None if self.a is None else self.a[idx]
        )


def _block_masks(block: MeasurementSpec, z_names):
    cols = {c: j for j, c in enumerate(z_names)}
    masks = np.zeros((block.n_items, len(z_names)), dtype=bool)
    for k, direct in enumerate(block.z_direct_effects):
        for c in direct:
            if c not in cols:
                raise SpecError(f"unknown z column {c!r} in direct effects")
            masks[k, cols[c]] = True
    return masks


def observed_levels(data: Dataset, spec: ModelSpec) -> dict:
    """Sorted distinct values of every ordinal item, keyed by (block, column)."""
    out = {}
    for b, block in enumerate(spec.latent_blocks):
        for k, t in enumerate(block.item_types):
            if t == "ordinal":
                out[(b, k)] = tuple(float(v) for v in np.unique(data.w_blocks[b][:, k]))
    return out


def joint_layout(spec: ModelSpec, z_names, levels: dict, *, linear=False, ordinal_as_continuous=False) -> Layout:
    """Layout of the joint model, or of the all-linear variant when ``linear``.

    In the all-linear variant every item is treated as continuous, the
    exposure joins as an extra continuous item loading on every block with free
    direct effects of all z columns, and there is no exposure model.
    """
    d, p = len(spec.latent_blocks), len(z_names)
    cont_load, ord_load, cont_z, ord_z, ord_levels = [], [], [], [], []
    src_c, src_o, nuisance = [], [], []
    as_cont = linear or ordinal_as_continuous
    for b, block in enumerate(spec.latent_blocks):
        masks = _block_masks(block, z_names)
        pos = {}
        for k, t in enumerate(block.item_types):
            row = np.zeros(d, dtype=bool)
            row[b] = True
            if t == "continuous" or as_cont:
                pos[k] = len(src_c)
                src_c.append((b, k))
                cont_load.append(row)
                cont_z.append(masks[k])
            else:
                src_o.append((b, k))
                ord_load.append(row)
                ord_z.append(masks[k])
                ord_levels.append(levels[(b, k)])
        for g in block.nuisance_groups:
            nuisance.append(tuple(pos[k] for k in g))
    if linear:
        src_c.append((-1, 0))
        cont_load.append(np.ones(d, dtype=bool))
        cont_z.append(np.ones(p, dtype=bool))
    if spec.z_columns_in_exposure is None:
        ez = np.ones(p, dtype=bool)
    else:
        ez = np.isin(np.asarray(z_names, dtype=object), list(spec.z_columns_in_exposure))
    return Layout(
        n_latent=d,
        n_z=p,
        cont_load=np.array(cont_load, dtype=bool).reshape(len(src_c), d),
        ord_load=np.array(ord_load, dtype=bool).reshape(len(src_o), d),
        cont_zmask=np.array(cont_z, dtype=bool).reshape(len(src_c), p),
        ord_zmask=np.array(ord_z, dtype=bool).reshape(len(src_o), p),
        ord_levels=tuple(ord_levels),
        nuisance=tuple(nuisance),
        link=None if linear else spec.exposure_link,
        exposure_zmask=ez,
        regress_on_z=True,
        sources_c=tuple(src_c),
        sources_o=tuple(src_o),
        block_names=tuple(b.name for b in spec.latent_blocks),
        z_names=tuple(z_names),
    )


def measurement_layout(block: MeasurementSpec, levels: dict) -> Layout:
    """One-factor layout with X ~ N(0, 1), no covariates and no exposure.

    ``levels`` is keyed by ``(0, column)``.
    """
    spec = ModelSpec(latent_blocks=(MeasurementSpec(
        items=block.items, item_types=block.item_types, n_levels=block.n_levels,
        nuisance_groups=block.nuisance_groups, name=block.name,
    ),))
    return replace(joint_layout(spec, (), levels), link=None, regress_on_z=False)


def encode(layout: Layout, w_blocks, z=None, a=None) -> SEMData:
    """Arrange raw data in the layout's item order.

    Ordinal items are recoded to 0..R-1 using the layout's stored levels.
    """
    w_blocks = [np.asarray(w, dtype=float) for w in w_blocks]
    n = w_blocks[0].shape[0]
    z = np.zeros((n, 0)) if z is None or layout.n_z == 0 else np.asarray(z, dtype=float)
    a_arr = None if a is None else np.asarray(a, dtype=float)
    cols = []
    for b, k in layout.sources_c:
        if b < 0:
            if a_arr is None:
                raise DataError("the all-linear model needs the exposure")
            cols.append(a_arr)
        else:
            cols.append(w_blocks[b][:, k])
    wc = np.column_stack(cols) if cols else np.zeros((n, 0))
    wo = np.zeros((n, layout.n_ord), dtype=np.intp)
    for j, ((b, k), lev) in enumerate(zip(layout.sources_o, layout.ord_levels)):
        col = w_blocks[b][:, k]
        code = np.searchsorted(np.asarray(lev), col)
        code = np.clip(code, 0, len(lev) - 1)
        if not np.array_equal(np.asarray(lev)[code], col):
            raise DataError(f"ordinal item {k} of block {b} has values outside the fitted levels {lev}")
        wo[:, j] = code
    use_a = layout.link is not None
    return SEMData(z=z, wc=wc, wo=wo, a=a_arr if use_a else None)


def encode_dataset(layout: Layout, data: Dataset, with_exposure=True) -> SEMData:
    return encode(layout, data.w_blocks, data.z, data.a if with_exposure else None)


# Unconstrained packing ----------------------------------------------------

def _tau_to_theta(tau):
    return np.concatenate([tau[:1], np.log(np.diff(tau))])


def _theta_to_tau(th):
    return np.concatenate([th[:1], th[0] + np.cumsum(np.exp(th[1:]))])


def pack(params: SEMParams, layout: Layout) -> np.ndarray:
    """Map natural parameters to the unconstrained optimizer vector."""
    parts = []
    if layout.regress_on_z:
        parts.append(params.B.ravel())
    if layout.n_latent == 2:
        parts.append([np.arctanh(np.clip(params.psi, -0.999999, 0.999999))])
    parts += [
        params.nu,
        params.lam_c[layout.cont_load],
        params.lam_o[layout.ord_load],
        params.gam_c[layout.cont_zmask],
        params.gam_o[layout.ord_zmask],
        np.log(np.maximum(params.sig2 - VAR_FLOOR, 1e-300)),
    ]
    for g, vals in zip(layout.nuisance, params.nuis):
        parts.append(vals[:1] if len(g) == 2 else vals)
    for tau in params.tau:
        parts.append(_tau_to_theta(tau) if tau.size else tau)
    if layout.link is not None:
        parts += [[params.b0], params.bx, params.bz[layout.exposure_zmask]]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def unpack(theta: np.ndarray, layout: Layout) -> SEMParams:
    """Inverse of :func:`pack`."""
    p = SEMParams.zeros(layout)
    pos = 0

    def take(k):
        nonlocal pos
        out = theta[pos:pos + k]
        pos += k
        return out

    if layout.regress_on_z:
        p.B = take(p.B.size).reshape(p.B.shape).copy()
    if layout.n_latent == 2:
        p.psi = float(np.tanh(take(1)[0]))
    p.nu = take(layout.n_cont).copy()
    p.lam_c[layout.cont_load] = take(int(layout.cont_load.sum()))
    p.lam_o[layout.ord_load] = take(int(layout.ord_load.sum()))
    p.gam_c[layout.cont_zmask] = take(int(layout.cont_zmask.sum()))
    p.gam_o[layout.ord_zmask] = take(int(layout.ord_zmask.sum()))
    p.sig2 = VAR_FLOOR + np.exp(take(layout.n_cont))
    for g in range(len(layout.nuisance)):
        size = len(layout.nuisance[g])
        p.nuis[g] = np.repeat(take(1), 2) if size == 2 else take(size).copy()
    for j, r in enumerate(layout.n_cats):
        p.tau[j] = _theta_to_tau(take(r - 1)) if r > 1 else np.zeros(0)
    if layout.link is not None:
        p.b0 = float(take(1)[0])
        p.bx = take(layout.n_latent).copy()
        p.bz[layout.exposure_zmask] = take(int(layout.exposure_zmask.sum()))
    if pos != theta.size:
        raise ValueError(f"parameter vector has {theta.size} entries, layout needs {pos}")
    return p


def grad_to_theta(g: SEMParams, params: SEMParams, layout: Layout) -> np.ndarray:
    """Chain a natural-scale gradient through the transforms of :func:`pack`."""
    parts = []
    if layout.regress_on_z:
        parts.append(g.B.ravel())
    if layout.n_latent == 2:
        parts.append([g.psi * (1.0 - params.psi ** 2)])
    parts += [
        g.nu,
        g.lam_c[layout.cont_load],
        g.lam_o[layout.ord_load],
        g.gam_c[layout.cont_zmask],
        g.gam_o[layout.ord_zmask],
        g.sig2 * (params.sig2 - VAR_FLOOR),
    ]
    for grp, gv in zip(layout.nuisance, g.nuis):
        parts.append([gv.sum()] if len(grp) == 2 else gv)
    for gt, tau in zip(g.tau, params.tau):
        if gt.size == 0:
            continue
        tail = np.cumsum(gt[::-1])[::-1]
        inc = np.diff(tau)
        parts.append(np.concatenate([[gt.sum()], tail[1:] * inc]))
    if layout.link is not None:
        parts += [[g.b0], g.bx, g.bz[layout.exposure_zmask]]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])
