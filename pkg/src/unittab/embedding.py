"""Heterogeneous field embeddings.

Categorical values use per-attribute lookup tables. Numerical values are
min-max normalized to [0, 1] (config `numeric_norm`), expanded into an
interleaved battery of sin/cos features at frequencies 2^0*pi .. 2^(L-1)*pi,
and linearly projected to the field width d. Timestamps are split into
categorical subfields (year/month/day and hour when present) before any of
this happens. Masked positions use a single shared [MASK] vector; missing
values a shared [MISSING] vector.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .schema import (
    CATEGORICAL, NUMERICAL, TIMESTAMP, OOV,
    AttributeSpec, Cat, Missing, Num, Row, Schema, SchemaError, Time, TimeSeries,
    default_special_tokens, quantize_array,
)
from .tensor import Tensor, concat, embedding_gather, matmul, reshape

_CLAMP_COUNT = [0]


def clamp_count() -> int:
    """Number of out-of-[0,1] values clamped by freq_encode so far."""
    return _CLAMP_COUNT[0]


def reset_clamp_count() -> None:
    _CLAMP_COUNT[0] = 0


def _freq_features(v: np.ndarray, L: int, clamp: bool = True) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if clamp:
        bad = int(np.sum((v < 0.0) | (v > 1.0)))
        if bad:
            _CLAMP_COUNT[0] += bad
            warnings.warn(f"{bad} value(s) outside [0,1] clamped before frequency encoding")
            v = np.clip(v, 0.0, 1.0)
    angles = (2.0 ** np.arange(L)) * np.pi * v[..., None]  # (..., L)
    out = np.empty(v.shape + (2 * L,), dtype=np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def freq_encode(v_norm: float, L: int) -> np.ndarray:
    """Interleaved (sin, cos) features of a [0,1]-normalized scalar:
    (sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)).
    Values outside [0,1] are clamped (counted, see clamp_count)."""
    if L < 1:
        raise ValueError("L must be >= 1")
    return _freq_features(np.asarray(float(v_norm)), L)


# ---------------------------------------------------------------------------
# timestamp expansion

_MONTH_VOCAB = [f"{i:02d}" for i in range(1, 13)]
_DAY_VOCAB = [f"{i:02d}" for i in range(1, 32)]
_HOUR_VOCAB = [f"{i:02d}" for i in range(24)]


def split_timestamp(ts: Time, years: list[int], with_hour: bool = False) -> list[Cat]:
    """Decompose a timestamp into zero-based categorical subfield values:
    year (vocabulary = observed training years + OOV), month, day, and hour
    when the schema carries hours."""
    year_idx = years.index(ts.year) if ts.year in years else len(years)
    out = [Cat(year_idx), Cat(ts.month - 1), Cat(ts.day - 1)]
    if with_hour:
        out.append(Cat(ts.hour if ts.hour is not None else 0))
    return out


def timestamp_subfields(name: str, spec: AttributeSpec) -> list[AttributeSpec]:
    if spec.years is None:
        raise SchemaError(f"timestamp attribute {name!r} has no fitted year vocabulary")
    year_vocab = [str(y) for y in spec.years] + [OOV]
    subs = [
        AttributeSpec(f"{name}.year", CATEGORICAL, vocab=year_vocab, group=name),
        AttributeSpec(f"{name}.month", CATEGORICAL, vocab=list(_MONTH_VOCAB), group=name),
        AttributeSpec(f"{name}.day", CATEGORICAL, vocab=list(_DAY_VOCAB), group=name),
    ]
    if spec.with_hour:
        subs.append(AttributeSpec(f"{name}.hour", CATEGORICAL, vocab=list(_HOUR_VOCAB), group=name))
    return subs


def expand_schema(schema: Schema) -> Schema:
    """Replace each timestamp attribute with its categorical subfields,
    raising every row type's arity accordingly."""
    attrs: dict[str, AttributeSpec] = {}
    replacement: dict[str, list[str]] = {}
    for name, spec in schema.attributes.items():
        if spec.kind == TIMESTAMP:
            subs = timestamp_subfields(name, spec)
            replacement[name] = [s.name for s in subs]
            for s in subs:
                attrs[s.name] = s
        else:
            attrs[name] = spec
    row_types = []
    for rt in schema.row_types:
        names: list[str] = []
        for a in rt.attributes:
            names.extend(replacement.get(a, [a]))
        row_types.append(type(rt)(rt.type_id, names))
    return Schema(attrs, row_types, default_special_tokens(attrs), version=schema.version)


def expand_series(series: TimeSeries, schema: Schema) -> TimeSeries:
    """Expand timestamp values to match expand_schema(schema)."""
    rows = []
    for row in series.rows:
        rt = schema.row_type(row.type_id)
        values = []
        for name, v in zip(rt.attributes, row.values):
            spec = schema.attributes[name]
            if spec.kind == TIMESTAMP:
                n_sub = 4 if spec.with_hour else 3
                if v is Missing:
                    values.extend([Missing] * n_sub)
                else:
                    values.extend(split_timestamp(v, spec.years, spec.with_hour))
            else:
                values.append(v)
        rows.append(Row(row.type_id, values))
    return TimeSeries(series.entity_id, rows, series.label)


# ---------------------------------------------------------------------------
# numeric array encoding of expanded rows (model-ready form)


@dataclass
class EncodedRow:
    type_id: int
    cat_ids: np.ndarray    # int64 (k,), -1 where missing or numerical
    num_vals: np.ndarray   # float64 (k,), nan where missing or categorical
    is_missing: np.ndarray  # bool (k,)


@dataclass
class EncodedSeries:
    entity_id: str
    rows: list[EncodedRow]
    label: float | int | None = None


def encode_row(row: Row, schema: Schema) -> EncodedRow:
    rt = schema.row_type(row.type_id)
    k = rt.arity
    ids = np.full(k, -1, dtype=np.int64)
    vals = np.full(k, np.nan, dtype=np.float64)
    miss = np.zeros(k, dtype=bool)
    for s, (name, v) in enumerate(zip(rt.attributes, row.values)):
        if v is Missing:
            miss[s] = True
        elif isinstance(v, Cat):
            ids[s] = v.index
        elif isinstance(v, Num):
            vals[s] = v.value
        else:
            raise SchemaError(f"row contains unexpanded timestamp at field {name!r}")
    return EncodedRow(row.type_id, ids, vals, miss)


def encode_series(series: TimeSeries, schema: Schema) -> EncodedSeries:
    return EncodedSeries(series.entity_id, [encode_row(r, schema) for r in series.rows],
                         series.label)


def prepare_series(series_list: list[TimeSeries], raw_schema: Schema
                   ) -> tuple[Schema, list[EncodedSeries]]:
    """Expand timestamps and encode a whole dataset in one step."""
    expanded = expand_schema(raw_schema)
    encoded = [encode_series(expand_series(s, raw_schema), expanded) for s in series_list]
    return expanded, encoded


# ---------------------------------------------------------------------------
# the embedding bank


@dataclass
class EmbeddingBank:
    d: int
    L: int
    numeric_input: str                      # "frequency" | "binned"
    numeric_norm: str                       # "minmax01" | "none"
    cat_tables: dict[str, Tensor]           # attr -> (V_j, d)
    num_proj: dict[str, tuple[Tensor, Tensor]] = field(default_factory=dict)  # (2L, d), (d,)
    num_tables: dict[str, Tensor] = field(default_factory=dict)               # (q, d)
    mask_vec: Tensor | None = None          # (d,)
    missing_vec: Tensor | None = None       # (d,)
    cls_vec: Tensor | None = None           # (1, m), sequence level


def build_bank(schema: Schema, d: int, m: int, L: int, numeric_input: str,
               numeric_norm: str, rng: np.random.Generator,
               init_std: float = 0.02) -> tuple[EmbeddingBank, dict[str, Tensor]]:
    """Create embedding parameters for an expanded schema. Returns the bank
    and a name -> parameter mapping (names are checkpoint keys)."""
    if numeric_input not in ("frequency", "binned"):
        raise ValueError(f"unknown numeric_input {numeric_input!r}")
    if numeric_norm not in ("minmax01", "none"):
        raise ValueError(f"unknown numeric_norm {numeric_norm!r}")
    params: dict[str, Tensor] = {}
    bank = EmbeddingBank(d=d, L=L, numeric_input=numeric_input, numeric_norm=numeric_norm,
                         cat_tables={})
    for name in sorted(schema.attributes):
        spec = schema.attributes[name]
        if spec.kind == CATEGORICAL:
            t = Tensor(rng.normal(0.0, init_std, size=(len(spec.vocab), d)), requires_grad=True)
            if np.unique(t.data, axis=0).shape[0] != t.shape[0]:
                raise AssertionError(f"embedding table rows for {name!r} are not distinct")
            bank.cat_tables[name] = t
            params[f"embed.cat.{name}.table"] = t
        elif spec.kind == NUMERICAL:
            if numeric_input == "frequency":
                w = Tensor(rng.normal(0.0, init_std, size=(2 * L, d)), requires_grad=True)
                b = Tensor(np.zeros(d), requires_grad=True)
                bank.num_proj[name] = (w, b)
                params[f"embed.num.{name}.weight"] = w
                params[f"embed.num.{name}.bias"] = b
            else:
                t = Tensor(rng.normal(0.0, init_std, size=(spec.n_bins, d)), requires_grad=True)
                bank.num_tables[name] = t
                params[f"embed.num.{name}.table"] = t
        else:
            raise SchemaError("expand_schema must run before building the bank")
    bank.mask_vec = Tensor(rng.normal(0.0, init_std, size=(d,)), requires_grad=True)
    bank.missing_vec = Tensor(rng.normal(0.0, init_std, size=(d,)), requires_grad=True)
    bank.cls_vec = Tensor(rng.normal(0.0, init_std, size=(1, m)), requires_grad=True)
    params["embed.mask"] = bank.mask_vec
    params["embed.missing"] = bank.missing_vec
    params["embed.cls"] = bank.cls_vec
    return bank, params


def normalize_numeric(vals: np.ndarray, spec: AttributeSpec, mode: str) -> np.ndarray:
    if mode == "none":
        return vals
    lo, hi = spec.value_range
    if hi <= lo:
        return np.full_like(vals, 0.5)
    return (vals - lo) / (hi - lo)


def embed_slot_batch(bank: EmbeddingBank, spec: AttributeSpec, ids: np.ndarray,
                     vals: np.ndarray, missing: np.ndarray, masked: np.ndarray) -> Tensor:
    """Embed one attribute slot across a batch of same-type rows.

    Masked positions get the [MASK] vector, missing unmasked positions the
    [MISSING] vector; blending uses exact 0/1 weights so unselected branches
    contribute nothing to values or gradients.
    """
    r = len(missing)
    w_mask = masked.astype(np.float64)[:, None]
    w_miss = (missing & ~masked).astype(np.float64)[:, None]
    w_keep = ((~missing) & (~masked)).astype(np.float64)[:, None]
    if spec.kind == CATEGORICAL:
        safe = np.where(ids < 0, 0, ids)
        raw = embedding_gather(bank.cat_tables[spec.name], safe)
    else:
        safe = np.where(np.isfinite(vals), vals, 0.5 * sum(spec.value_range))
        if bank.numeric_input == "frequency":
            v = normalize_numeric(safe, spec, bank.numeric_norm)
            clamp = bank.numeric_norm == "minmax01"
            feats = Tensor(_freq_features(v, bank.L, clamp=clamp))
            w, b = bank.num_proj[spec.name]
            raw = matmul(feats, w) + b
        else:
            raw = embedding_gather(bank.num_tables[spec.name], quantize_array(safe, spec))
    return raw * w_keep + bank.missing_vec * w_miss + bank.mask_vec * w_mask


def embed_field(value, spec: AttributeSpec, bank: EmbeddingBank, masked: bool = False) -> Tensor:
    """Embed a single field value; see embed_slot_batch for the semantics."""
    if value is Missing:
        ids, vals, miss = np.array([-1]), np.array([np.nan]), np.array([True])
    elif isinstance(value, Cat):
        if spec.kind != CATEGORICAL:
            raise SchemaError(f"categorical value for {spec.kind} attribute {spec.name!r}")
        ids, vals, miss = np.array([value.index]), np.array([np.nan]), np.array([False])
    elif isinstance(value, Num):
        if spec.kind != NUMERICAL:
            raise SchemaError(f"numerical value for {spec.kind} attribute {spec.name!r}")
        ids, vals, miss = np.array([-1]), np.array([value.value]), np.array([False])
    else:
        raise SchemaError(f"cannot embed {type(value).__name__} for attribute {spec.name!r}")
    out = embed_slot_batch(bank, spec, ids, vals, miss, np.array([masked]))
    return reshape(out, (bank.d,))


def embed_row(row: Row, schema: Schema, bank: EmbeddingBank, mask_flags) -> Tensor:
    """Stack embed_field results for one expanded row: (k_h, d)."""
    rt = schema.row_type(row.type_id)
    if len(mask_flags) != rt.arity:
        raise SchemaError(f"mask flags length {len(mask_flags)} != row arity {rt.arity}")
    parts = []
    for (name, v), flag in zip(zip(rt.attributes, row.values), mask_flags):
        e = embed_field(v, schema.attributes[name], bank, masked=bool(flag))
        parts.append(reshape(e, (1, bank.d)))
    return concat(parts, axis=0)
