"""Domain types, dataset ingestion and model-specification checks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from latentps.errors import DataError, SpecError

LINKS = ("logit", "probit")
ITEM_TYPES = ("continuous", "ordinal")
FLOAT_FORMAT = "%.12g"


def _frozen(arr, dtype=float):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Dataset:
    """Rectangular observational data.

    Parameters
    ----------
    z : ndarray, shape (n, p)
        Observed covariates; categorical columns already expanded to indicators.
    w_blocks : tuple of ndarray
        One ``(n, K_b)`` matrix of measurement items per latent block.
    a : ndarray, shape (n,)
        Binary exposure coded 0/1.
    y : dict of str to ndarray
        Optional outcomes keyed by name.
    z_names, block_names, item_names : tuple of str
        Column labels. Defaults are generated when omitted.
    unit_id : ndarray, optional
        Unit identifiers; ``0..n-1`` when omitted.

    All arrays are copied and made read-only, so instances can be shared
    freely between worker processes and threads.
    """

    z: np.ndarray
    w_blocks: tuple
    a: np.ndarray
    y: dict = field(default_factory=dict)
    z_names: tuple = ()
    block_names: tuple = ()
    item_names: tuple = ()
    unit_id: np.ndarray | None = None

    def __post_init__(self):
        a = np.asarray(self.a)
        n = a.shape[0]
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if z.shape[0] != n:
            raise DataError(f"z has {z.shape[0]} rows but a has {n}")
        if not np.all(np.isin(a, (0, 1))):
            raise DataError("exposure not binary")
        if n and (a.min() == a.max()):
            raise DataError("exposure has a single class; need both 0 and 1")
        blocks = []
        for b, w in enumerate(self.w_blocks):
            w = np.asarray(w, dtype=float)
            if w.ndim == 1:
                w = w[:, None]
            if w.shape[0] != n:
                raise DataError(f"block {b} has {w.shape[0]} rows but a has {n}")
            if w.shape[1] < 2:
                raise DataError(f"block {b} has {w.shape[1]} item(s); at least 2 are required")
            blocks.append(_frozen(w))
        y = {}
        for name, v in self.y.items():
            v = np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise DataError(f"outcome {name!r} has shape {v.shape}, expected ({n},)")
            y[str(name)] = _frozen(v)
        for label, arr in [("z", z), ("a", a), *[(f"w block {b}", w) for b, w in enumerate(blocks)],
                           *[(f"y {k}", v) for k, v in y.items()]]:
            if not np.all(np.isfinite(arr)):
                raise DataError(f"non-finite values in {label}")
        z_names = tuple(self.z_names) or tuple(f"z{j + 1}" for j in range(z.shape[1]))
        if len(z_names) != z.shape[1]:
            raise DataError("z_names does not match the number of z columns")
        block_names = tuple(self.block_names) or tuple(str(b) for b in range(len(blocks)))
        item_names = tuple(tuple(names) for names in self.item_names) or tuple(
            tuple(f"w{block_names[b]}_{k + 1}" for k in range(w.shape[1])) for b, w in enumerate(blocks)
        )
        if len(block_names) != len(blocks) or any(
            len(names) != w.shape[1] for names, w in zip(item_names, blocks)
        ):
            raise DataError("block/item names do not match the w blocks")
        unit_id = np.arange(n) if self.unit_id is None else np.asarray(self.unit_id)
        object.__setattr__(self, "z", _frozen(z))
        object.__setattr__(self, "w_blocks", tuple(blocks))
        object.__setattr__(self, "a", _frozen(a, dtype=np.int64))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z_names", z_names)
        object.__setattr__(self, "block_names", block_names)
        object.__setattr__(self, "item_names", item_names)
        object.__setattr__(self, "unit_id", _frozen(unit_id, dtype=unit_id.dtype))

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def p(self) -> int:
        return self.z.shape[1]

    @property
    def w(self) -> np.ndarray:
        """All items of all blocks side by side."""
        return np.hstack(self.w_blocks)

    def take(self, idx) -> Dataset:
        """Return the units at positions ``idx`` (repeats allowed)."""
        idx = np.asarray(idx)
        return replace(
            self,
            z=self.z[idx],
            w_blocks=tuple(w[idx] for w in self.w_blocks),
            a=self.a[idx],
            y={k: v[idx] for k, v in self.y.items()},
            unit_id=self.unit_id[idx],
        )


@dataclass(frozen=True)
class MeasurementSpec:
    """Measurement model of one latent block.

    Parameters
    ----------
    items : tuple of str
        Item names, in data order.
    item_types : tuple of str
        ``"continuous"`` or ``"ordinal"`` per item.
    n_levels : tuple of int or None
        Number of categories R for ordinal items (None for continuous ones).
    z_direct_effects : tuple of tuple of str
        Per item, the z columns with a free direct effect on the item.
    nuisance_groups : tuple of tuple of int
        Item positions sharing a nuisance factor. Groups of exactly two items
        carry a single tied loading.
    name : str
        Block label.
    """

    items: tuple
    item_types: tuple
    n_levels: tuple = ()
    z_direct_effects: tuple = ()
    nuisance_groups: tuple = ()
    name: str = "0"

    def __post_init__(self):
        k = len(self.items)
        object.__setattr__(self, "items", tuple(str(i) for i in self.items))
        object.__setattr__(self, "item_types", tuple(self.item_types))
        n_levels = tuple(self.n_levels) or (None,) * k
        object.__setattr__(self, "n_levels", tuple(None if r is None else int(r) for r in n_levels))
        direct = tuple(self.z_direct_effects) or ((),) * k
        object.__setattr__(self, "z_direct_effects", tuple(tuple(str(c) for c in d) for d in direct))
        object.__setattr__(
            self, "nuisance_groups", tuple(tuple(int(i) for i in g) for g in self.nuisance_groups)
        )
        if not (len(self.item_types) == len(self.n_levels) == len(self.z_direct_effects) == k):
            raise SpecError(f"block {self.name!r}: per-item fields must all have length {k}")

    @classmethod
    def continuous(cls, items, name="0", **kwargs) -> MeasurementSpec:
        return cls(items=tuple(items), item_types=("continuous",) * len(items), name=name, **kwargs)

    @classmethod
    def ordinal(cls, items, levels, name="0", **kwargs) -> MeasurementSpec:
        k = len(items)
        return cls(items=tuple(items), item_types=("ordinal",) * k, n_levels=(levels,) * k, name=name, **kwargs)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def equality_constraints(self) -> tuple:
        """Item pairs whose nuisance loadings are tied."""
        return tuple(g for g in self.nuisance_groups if len(g) == 2)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "items": list(self.items),
            "item_types": list(self.item_types),
            "n_levels": list(self.n_levels),
            "z_direct_effects": [list(d) for d in self.z_direct_effects],
            "nuisance_groups": [list(g) for g in self.nuisance_groups],
        }

    @classmethod
    def from_dict(cls, d) -> MeasurementSpec:
        return cls(
            items=tuple(d["items"]),
            item_types=tuple(d["item_types"]),
            n_levels=tuple(d.get("n_levels") or ()),
            z_direct_effects=tuple(tuple(x) for x in d.get("z_direct_effects") or ()),
            nuisance_groups=tuple(tuple(g) for g in d.get("nuisance_groups") or ()),
            name=str(d.get("name", "0")),
        )


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of the joint measurement and exposure model.

    ``z_columns_in_exposure=None`` means every z column enters the exposure
    model.
    """

    latent_blocks: tuple
    exposure_link: str = "logit"
    z_columns_in_exposure: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "latent_blocks", tuple(self.latent_blocks))
        if self.z_columns_in_exposure is not None:
            object.__setattr__(self, "z_columns_in_exposure", tuple(self.z_columns_in_exposure))

    def to_dict(self) -> dict:
        return {
            "latent_blocks": [b.to_dict() for b in self.latent_blocks],
            "exposure_link": self.exposure_link,
            "z_columns_in_exposure": (
                None if self.z_columns_in_exposure is None else list(self.z_columns_in_exposure)
            ),
        }

    @classmethod
    def from_dict(cls, d) -> ModelSpec:
        cols = d.get("z_columns_in_exposure")
        return cls(
            latent_blocks=tuple(MeasurementSpec.from_dict(b) for b in d["latent_blocks"]),
            exposure_link=d.get("exposure_link", "logit"),
            z_columns_in_exposure=None if cols is None else tuple(cols),
        )


def default_model_spec(data: Dataset, link="logit", max_ordinal_levels=7) -> ModelSpec:
    """Build a spec from the data, guessing item types.

    An item whose values are all integers with at most ``max_ordinal_levels``
    distinct values is treated as ordinal; everything else is continuous.
    """
    blocks = []
    for b, w in enumerate(data.w_blocks):
        types, levels = [], []
        for k in range(w.shape[1]):
            col = w[:, k]
            vals = np.unique(col)
            if np.all(col == np.round(col)) and len(vals) <= max_ordinal_levels:
                types.append("ordinal")
                levels.append(len(vals))
            else:
                types.append("continuous")
                levels.append(None)
        blocks.append(
            MeasurementSpec(
                items=data.item_names[b], item_types=tuple(types), n_levels=tuple(levels),
                name=data.block_names[b],
            )
        )
    return ModelSpec(latent_blocks=tuple(blocks), exposure_link=link)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of :func:`validate_spec`."""

    errors: tuple = ()
    warnings: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def raise_if_failed(self):
        if self.errors:
            raise SpecError("model not identified: " + "; ".join(self.errors))


def block_degrees_of_freedom(block: MeasurementSpec) -> int:
    """Moment count minus parameter count for one block in the joint model.

    The exposure acts as one extra indicator of the latent variable, so a block
    with K items contributes K+1 indicators with (K+1)(K+2)/2 second moments.
    Each indicator uses a loading and a scale parameter; every direct effect and
    every free nuisance loading uses one more.
    """
    k = block.n_items + 1
    n_direct = sum(len(d) for d in block.z_direct_effects)
    n_nuisance = sum(1 if len(g) == 2 else len(g) for g in block.nuisance_groups)
    return k * (k + 1) // 2 - 2 * k - n_direct - n_nuisance


def validate_spec(spec: ModelSpec, data: Dataset | None = None) -> ValidationReport:
    """Check a spec against the conservative identification rules.

    A block needs at least two items, and after removing items that carry
    Z-direct effects or nuisance loadings at least two clean items must remain.
    A negative degrees-of-freedom count is an error; exactly zero is a warning.
    """
    errors, warnings = [], []
    if spec.exposure_link not in LINKS:
        errors.append(f"unknown exposure link {spec.exposure_link!r}")
    nb = len(spec.latent_blocks)
    if not 1 <= nb <= 2:
        errors.append(f"{nb} latent blocks; 1 or 2 are supported")
    if data is not None:
        if nb != len(data.w_blocks):
            errors.append(f"spec has {nb} blocks but data has {len(data.w_blocks)}")
        if spec.z_columns_in_exposure is not None:
            unknown = set(spec.z_columns_in_exposure) - set(data.z_names)
            if unknown:
                errors.append(f"unknown z columns in exposure model: {sorted(unknown)}")
    for b, block in enumerate(spec.latent_blocks):
        tag = f"block {block.name!r}"
        k = block.n_items
        if k < 2:
            errors.append(f"{tag}: {k} item(s); at least 2 are required")
        for item, t, r in zip(block.items, block.item_types, block.n_levels):
            if t not in ITEM_TYPES:
                errors.append(f"{tag}: item {item!r} has unknown type {t!r}")
            elif t == "ordinal" and (r is None or r < 2):
                errors.append(f"{tag}: ordinal item {item!r} needs R >= 2 levels")
        flagged = set()
        for g in block.nuisance_groups:
            if len(g) < 2:
                errors.append(f"{tag}: nuisance group {list(g)} has fewer than 2 items")
            for i in g:
                if not 0 <= i < k:
                    errors.append(f"{tag}: nuisance group index {i} out of range")
                elif block.item_types[i] != "continuous":
                    errors.append(f"{tag}: nuisance factors are restricted to continuous items")
                flagged.add(i)
        for i, direct in enumerate(block.z_direct_effects):
            if direct:
                flagged.add(i)
            if data is not None:
                unknown = set(direct) - set(data.z_names)
                if unknown:
                    errors.append(f"{tag}: unknown z columns in direct effects: {sorted(unknown)}")
        clean = k - len(flagged)
        if k >= 2 and flagged and clean < 2:
            errors.append(
                f"{tag}: items with Z-direct effects or nuisance loadings leave {clean} clean item(s); need 2"
            )
        df = block_degrees_of_freedom(block)
        if df < 0:
            errors.append(f"{tag}: negative degrees of freedom ({df})")
        elif df == 0:
            warnings.append(f"{tag}: just identified (0 degrees of freedom)")
        if data is not None and b < len(data.w_blocks):
            if tuple(block.items) != tuple(data.item_names[b]):
                errors.append(f"{tag}: items {list(block.items)} do not match data {list(data.item_names[b])}")
            else:
                w = data.w_blocks[b]
                for k_, (item, t, r) in enumerate(zip(block.items, block.item_types, block.n_levels)):
                    if t != "ordinal" or r is None:
                        continue
                    col = w[:, k_]
                    if np.any(col != np.round(col)):
                        errors.append(f"{tag}: ordinal item {item!r} has non-integer values")
                    elif len(np.unique(col)) > r:
                        errors.append(f"{tag}: ordinal item {item!r} has more than {r} levels")
                    elif len(np.unique(col)) < 2:
                        errors.append(f"{tag}: item {item!r} is constant")
    return ValidationReport(errors=tuple(errors), warnings=tuple(warnings))


def _parse_role(column, role):
    parts = str(role).split(":")
    kind = parts[0]
    if kind == "z" and len(parts) in (1, 2) and (len(parts) == 1 or parts[1] in ("categorical", "numeric")):
        return ("z", parts[1] if len(parts) == 2 else None)
    if kind == "w" and len(parts) == 3 and parts[1] and parts[2]:
        return ("w", parts[1], parts[2])
    if kind == "a" and len(parts) == 1:
        return ("a",)
    if kind == "y" and len(parts) == 2 and parts[1]:
        return ("y", parts[1])
    if kind == "id" and len(parts) == 1:
        return ("id",)
    raise DataError(f"column {column!r}: unknown role {role!r}")


def _level_label(v):
    if isinstance(v, float) and v == int(v):
        v = int(v)
    return str(v)


def load_dataset(path, schema) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Parameters
    ----------
    path : str or Path
        CSV with a header row.
    schema : dict or str or Path
        Mapping column -> role, or a path to a JSON file holding it. Roles are
        ``"z"`` (``"z:categorical"`` forces indicator coding), ``"w:<block>:<item>"``,
        ``"a"``, ``"y:<name>"`` and ``"id"``.

    Non-numeric z columns are expanded to 0/1 indicators for every level except
    the first in sorted order. Missing values are rejected, never imputed.
    """
    if not isinstance(schema, dict):
        schema = json.loads(Path(schema).read_text())
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    unknown = [c for c in df.columns if c not in schema]
    if unknown:
        raise DataError(f"unknown column(s) without a role: {unknown}")
    absent = [c for c in schema if c not in df.columns]
    if absent:
        raise DataError(f"schema column(s) not in file: {absent}")
    blank = df.apply(lambda s: s.str.strip().isin(("", "NA", "NaN", "nan", "null", "NULL")))
    if blank.to_numpy().any():
        rows, cols = np.nonzero(blank.to_numpy())
        where = ", ".join(f"row {r + 1} column {df.columns[c]!r}" for r, c in zip(rows[:5], cols[:5]))
        more = "" if len(rows) <= 5 else f" (+{len(rows) - 5} more)"
        raise DataError(f"missing value(s): {where}{more}")

    def numeric(col):
        try:
            return pd.to_numeric(df[col]).to_numpy(dtype=float)
        except ValueError as exc:
            raise DataError(f"column {col!r} is not numeric: {exc}") from exc

    z_cols, z_names, w_items, a, y, unit_id = [], [], {}, None, {}, None
    for col in df.columns:
        role = _parse_role(col, schema[col])
        if role[0] == "z":
            raw = df[col]
            as_num = pd.to_numeric(raw, errors="coerce")
            categorical = role[1] == "categorical" or (role[1] is None and as_num.isna().any())
            if not categorical:
                z_cols.append(numeric(col))
                z_names.append(col)
                continue
            values = as_num.to_numpy() if not as_num.isna().any() else raw.to_numpy()
            levels = sorted(set(values.tolist()))
            if len(levels) < 2:
                raise DataError(f"categorical column {col!r} has a single level")
            for lev in levels[1:]:
                z_cols.append((values == lev).astype(float))
                z_names.append(f"{col}[{_level_label(lev)}]")
        elif role[0] == "w":
            w_items.setdefault(role[1], []).append((role[2], numeric(col)))
        elif role[0] == "a":
            if a is not None:
                raise DataError("more than one exposure column")
            a = numeric(col)
        elif role[0] == "y":
            y[role[1]] = numeric(col)
        else:
            unit_id = df[col].to_numpy()
    if a is None:
        raise DataError("no exposure column (role 'a')")
    if not np.all(np.isin(a, (0.0, 1.0))):
        raise DataError("exposure not binary")
    if not w_items:
        raise DataError("no measurement items (role 'w:<block>:<item>')")
    n = len(df)
    z = np.column_stack(z_cols) if z_cols else np.zeros((n, 0))
    return Dataset(
        z=z,
        w_blocks=tuple(np.column_stack([v for _, v in items]) for items in w_items.values()),
        a=a.astype(int),
        y=y,
        z_names=tuple(z_names),
        block_names=tuple(w_items),
        item_names=tuple(tuple(name for name, _ in items) for items in w_items.values()),
        unit_id=unit_id,
    )


def dataset_schema(data: Dataset) -> dict:
    """Column-role map matching the layout written by :func:`write_dataset`."""
    schema = {"id": "id"}
    schema.update({name: "z" for name in data.z_names})
    for b, names in enumerate(data.item_names):
        schema.update({name: f"w:{data.block_names[b]}:{name}" for name in names})
    schema["a"] = "a"
    schema.update({f"y_{name}": f"y:{name}" for name in data.y})
    return schema


def write_dataset(data: Dataset, path, schema_path=None) -> dict:
    """Write ``data`` as CSV (12 significant digits) and return its schema.

    If ``schema_path`` is given the schema is also written there as JSON.
    """
    cols = {"id": data.unit_id}
    cols.update({name: data.z[:, j] for j, name in enumerate(data.z_names)})
    for w, names in zip(data.w_blocks, data.item_names):
        cols.update({name: w[:, k] for k, name in enumerate(names)})
    cols["a"] = data.a
    cols.update({f"y_{name}": v for name, v in data.y.items()})
    schema = dataset_schema(data)
    if len(cols) != len(schema):
        raise DataError("duplicate column names across z, items and outcomes")
    pd.DataFrame(cols).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(schema, indent=2) + "\n")
    return schema
