"""Dataset ingestion: CSV reading/writing, windowing, cropping, splitting,
class balancing, and synthetic generators for desk-scale experiments.

Generators are pure functions of (config, seed); per-entity streams are
derived with numpy SeedSequence([seed, entity_index]) so entities can be
generated independently or in parallel with identical results.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .schema import (
    CATEGORICAL, NUMERICAL, TIMESTAMP,
    AttributeSpec, Cat, Missing, Num, Row, RowTypeSpec, Schema, Time, TimeSeries,
    default_special_tokens, fit_bins, schema_to_json, vocab_index,
)


class FormatError(Exception):
    pass


class BalanceError(Exception):
    pass


@dataclass
class WindowedSample:
    rows: list[Row]
    source_entity: str
    label: float | int | None = None
    start: int = 0


@dataclass
class DatasetSplit:
    train: list[TimeSeries]
    test: list[TimeSeries]
    validation: list[TimeSeries] | None = None
    split_seed: int = 0


def split_by_entity(series_list: list[TimeSeries], test_fraction: float, seed: int,
                    validation_fraction: float = 0.0) -> DatasetSplit:
    """Split with disjoint entity ids across the parts."""
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    order = rng.permutation(len(series_list))
    n_test = int(round(test_fraction * len(series_list)))
    n_val = int(round(validation_fraction * len(series_list)))
    test = [series_list[i] for i in order[:n_test]]
    val = [series_list[i] for i in order[n_test:n_test + n_val]]
    train = [series_list[i] for i in order[n_test + n_val:]]
    return DatasetSplit(train=train, test=test, validation=val or None, split_seed=seed)


def window(series: TimeSeries, t: int, stride: int) -> list[WindowedSample]:
    """Fixed-length sliding windows starting at 0, stride, 2*stride, ...
    while start + t <= len(rows). Short series yield no windows."""
    if t < 1 or stride < 1:
        raise ValueError("t and stride must be >= 1")
    out = []
    for start in range(0, len(series.rows) - t + 1, stride):
        out.append(WindowedSample(series.rows[start:start + t], series.entity_id,
                                  label=series.label, start=start))
    return out


def random_crop(series: TimeSeries, t_max: int, rng: np.random.Generator) -> WindowedSample:
    """The whole series when it fits, else a uniformly random contiguous
    span of exactly t_max rows."""
    t_all = len(series.rows)
    if t_all == 0:
        raise ValueError("cannot crop an empty series")
    if t_all <= t_max:
        return WindowedSample(list(series.rows), series.entity_id, label=series.label, start=0)
    start = int(rng.integers(0, t_all - t_max + 1))
    return WindowedSample(series.rows[start:start + t_max], series.entity_id,
                          label=series.label, start=start)


def last_crop(series: TimeSeries, t_max: int) -> WindowedSample:
    """The last min(len(rows), t_max) rows, order preserved."""
    t_all = len(series.rows)
    if t_all == 0:
        raise ValueError("cannot crop an empty series")
    start = max(0, t_all - t_max)
    return WindowedSample(series.rows[start:], series.entity_id, label=series.label, start=start)


def balance_upsample(samples: list[WindowedSample], rng: np.random.Generator,
                     ratio: float = 1.0) -> list[WindowedSample]:
    """Duplicate positives (with replacement) until the positive count is
    ratio * negative count, then shuffle. Negatives pass through exactly."""
    pos = [s for s in samples if s.label]
    neg = [s for s in samples if not s.label]
    for s in samples:
        if s.label is None:
            raise BalanceError("balance_upsample needs binary labels on every sample")
    if not pos or not neg:
        raise BalanceError("balance_upsample needs both classes present")
    target = int(round(ratio * len(neg)))
    out = list(samples)
    if len(pos) < target:
        extra = rng.integers(0, len(pos), size=target - len(pos))
        out.extend(pos[i] for i in extra)
    perm = rng.permutation(len(out))
    return [out[i] for i in perm]


# ---------------------------------------------------------------------------
# CSV interface


@dataclass
class CsvSpec:
    entity_column: str = "entity_id"
    type_column: str | None = "row_type"


@dataclass
class ParseReport:
    rows: int = 0
    missing: Counter = field(default_factory=Counter)
    unparseable: Counter = field(default_factory=Counter)

    def count(self, column: str) -> int:
        return self.missing[column] + self.unparseable[column]


def _parse_iso_time(text: str) -> Time:
    dt = datetime.fromisoformat(text)
    hour = dt.hour if ("T" in text or " " in text) else None
    return Time(dt.year, dt.month, dt.day, hour)


def _format_time(ts: Time) -> str:
    if ts.hour is None:
        return f"{ts.year:04d}-{ts.month:02d}-{ts.day:02d}"
    return f"{ts.year:04d}-{ts.month:02d}-{ts.day:02d}T{ts.hour:02d}:00:00"


def read_csv(path, schema: Schema, csv_spec: CsvSpec = CsvSpec()) -> tuple[list[TimeSeries], ParseReport]:
    """Parse a header CSV into per-entity series sorted by timestamp.

    Unparseable cells become Missing and are counted in the report; a column
    whose applicable cells are >50% unparseable is a format error.
    """
    report = ParseReport()
    applicable: Counter = Counter()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        if csv_spec.entity_column not in header:
            raise FormatError(f"missing entity column {csv_spec.entity_column!r}")
        for name in schema.attributes:
            if name not in header:
                raise FormatError(f"schema attribute {name!r} not found in CSV header")
        multi_type = schema.n_row_types > 1
        if multi_type and (csv_spec.type_column is None or csv_spec.type_column not in header):
            raise FormatError(f"missing row type column {csv_spec.type_column!r}")
        by_entity: dict[str, list[Row]] = {}
        for rec in reader:
            report.rows += 1
            entity = rec[csv_spec.entity_column]
            if csv_spec.type_column and csv_spec.type_column in rec:
                try:
                    type_id = int(rec[csv_spec.type_column])
                except (TypeError, ValueError):
                    raise FormatError(f"bad row type value {rec.get(csv_spec.type_column)!r}")
            else:
                type_id = 1
            rt = schema.row_type(type_id)
            values = []
            for name in rt.attributes:
                spec = schema.attributes[name]
                cell = (rec.get(name) or "").strip()
                applicable[name] += 1
                if cell == "":
                    report.missing[name] += 1
                    values.append(Missing)
                    continue
                if spec.kind == CATEGORICAL:
                    values.append(Cat(vocab_index(spec, cell)))
                elif spec.kind == NUMERICAL:
                    try:
                        values.append(Num(float(cell)))
                    except ValueError:
                        report.unparseable[name] += 1
                        values.append(Missing)
                else:
                    try:
                        values.append(_parse_iso_time(cell))
                    except ValueError:
                        report.unparseable[name] += 1
                        values.append(Missing)
            by_entity.setdefault(entity, []).append(Row(type_id, values))
    for name, bad in report.unparseable.items():
        if bad > 0.5 * applicable[name]:
            raise FormatError(f"column {name!r}: {bad}/{applicable[name]} cells unparseable")
    ts_attrs = {n for n, a in schema.attributes.items() if a.kind == TIMESTAMP}
    out = []
    for entity, rows in by_entity.items():
        keys = []
        for row in rows:
            rt = schema.row_type(row.type_id)
            key = None
            for name, v in zip(rt.attributes, row.values):
                if name in ts_attrs and isinstance(v, Time):
                    key = (v.year, v.month, v.day, -1 if v.hour is None else v.hour)
            keys.append(key)
        if ts_attrs and all(k is not None for k in keys):
            order = sorted(range(len(rows)), key=lambda i: keys[i])
            rows = [rows[i] for i in order]
        out.append(TimeSeries(entity, rows))
    return out, report


def write_csv(path, series_list: list[TimeSeries], schema: Schema,
              csv_spec: CsvSpec = CsvSpec()) -> None:
    columns = [csv_spec.entity_column]
    if csv_spec.type_column:
        columns.append(csv_spec.type_column)
    attr_names = sorted(schema.attributes)
    columns += attr_names
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for s in series_list:
            for row in s.rows:
                rt = schema.row_type(row.type_id)
                cells = {name: "" for name in attr_names}
                for name, v in zip(rt.attributes, row.values):
                    if v is Missing:
                        cells[name] = ""
                    elif isinstance(v, Cat):
                        cells[name] = schema.attributes[name].vocab[v.index]
                    elif isinstance(v, Num):
                        cells[name] = repr(v.value)
                    else:
                        cells[name] = _format_time(v)
                rec = [s.entity_id]
                if csv_spec.type_column:
                    rec.append(str(row.type_id))
                rec += [cells[n] for n in attr_names]
                writer.writerow(rec)


def write_manifest(path, series_list: list[TimeSeries], schema: Schema,
                   extra: dict | None = None) -> None:
    """Dataset statistics written as JSON next to the exported files."""
    stats: dict = {}
    for name, spec in schema.attributes.items():
        vals = []
        for s in series_list:
            for row in s.rows:
                rt = schema.row_type(row.type_id)
                for n, v in zip(rt.attributes, row.values):
                    if n == name and isinstance(v, Num):
                        vals.append(v.value)
        if spec.kind == NUMERICAL and vals:
            arr = np.asarray(vals)
            stats[name] = {"min": float(arr.min()), "max": float(arr.max()),
                           "mean": float(arr.mean()), "std": float(arr.std())}
    labels = [s.label for s in series_list if s.label is not None]
    manifest = {
        "n_series": len(series_list),
        "n_rows": sum(len(s.rows) for s in series_list),
        "n_row_types": schema.n_row_types,
        "numerical_stats": stats,
        "n_labeled": len(labels),
        "positive_labels": int(sum(1 for x in labels if x)) if labels else 0,
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# pollution-like generator: one row type, 10 numerical fields driven by
# AR(1) latents with daily/annual seasonality, one site id, hourly stamps


POLLUTION_NUMERIC = ["temperature", "humidity", "wind_speed", "pressure", "radiation",
                     "gas_a", "gas_b", "gas_c", "particulate_a", "particulate_b"]


@dataclass
class PollutionConfig:
    n_entities: int = 12
    rows_per_entity: int = 1000
    noise: float = 0.1
    q_bins: int = 100
    start_year: int = 2021
    coupling: float = 0.6  # weight of the shared regional latent in every field


@dataclass
class PollutionDataset:
    series: list[TimeSeries]
    schema: Schema
    row_targets: dict[str, np.ndarray]
    config: PollutionConfig

    def window_label(self, sample: WindowedSample, t: int) -> float:
        return float(self.row_targets[sample.source_entity][sample.start + t - 1])


def pollution_oracle(rows: list[Row], schema: Schema) -> float:
    """The noise-free target: a sinusoid of the last temperature plus a
    smooth function of the recent gas_a history."""
    rt = schema.row_type(rows[-1].type_id)
    temp_pos = rt.attributes.index("temperature")
    gas_pos = rt.attributes.index("gas_a")
    temp = rows[-1].values[temp_pos].value
    gas3 = [r.values[gas_pos].value for r in rows[-3:]]
    return _pollution_target(temp, float(np.mean(gas3)))


def _pollution_target(temp: float, mean_gas3: float) -> float:
    return 10.0 + 12.0 * math.sin(1.5 * math.pi * temp) + 6.0 * math.cos(math.pi * mean_gas3)


def _entity_rng(seed, index: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed.spawn(1)[0]
    return np.random.default_rng(np.random.SeedSequence([int(seed), index]))


def gen_pollution_like(config: PollutionConfig, rng) -> PollutionDataset:
    seed = rng
    param_rng = _entity_rng(seed, 1_000_000)
    n_attr = len(POLLUTION_NUMERIC)
    day_amp = param_rng.uniform(0.2, 0.8, size=n_attr)
    day_phase = param_rng.uniform(0, 2 * np.pi, size=n_attr)
    year_amp = param_rng.uniform(0.1, 0.5, size=n_attr)
    year_phase = param_rng.uniform(0, 2 * np.pi, size=n_attr)

    start = datetime(config.start_year, 1, 1)
    series = []
    row_targets: dict[str, np.ndarray] = {}
    all_vals: dict[str, list[float]] = {n: [] for n in POLLUTION_NUMERIC}
    site_names = [f"site_{i:02d}" for i in range(config.n_entities)]
    for e in range(config.n_entities):
        erng = _entity_rng(seed, e)
        t_all = config.rows_per_entity
        latent = np.zeros((t_all, n_attr))
        eps = erng.normal(0.0, 0.3, size=(t_all, n_attr))
        latent[0] = erng.normal(0.0, 0.5, size=n_attr)
        common = np.zeros(t_all)  # shared regional driver behind every field
        ceps = erng.normal(0.0, 0.3, size=t_all)
        common[0] = erng.normal(0.0, 0.5)
        for i in range(1, t_all):
            latent[i] = 0.9 * latent[i - 1] + eps[i]
            common[i] = 0.9 * common[i - 1] + ceps[i]
        hours = np.arange(t_all)
        stamps = [start + timedelta(hours=int(h)) for h in hours]
        doy = np.array([s.timetuple().tm_yday for s in stamps])
        c = config.coupling
        values = ((1.0 - c) * latent + c * common[:, None]
                  + day_amp * np.sin(2 * np.pi * (hours[:, None] % 24) / 24.0 + day_phase)
                  + year_amp * np.sin(2 * np.pi * doy[:, None] / 365.0 + year_phase))
        temps = values[:, 0]
        gas = values[:, POLLUTION_NUMERIC.index("gas_a")]
        targets = np.empty(t_all)
        for i in range(t_all):
            g3 = float(np.mean(gas[max(0, i - 2):i + 1]))
            targets[i] = _pollution_target(float(temps[i]), g3) + config.noise * erng.normal()
        rows = []
        for i in range(t_all):
            vals: list = [Cat(e)]
            vals += [Num(float(values[i, j])) for j in range(n_attr)]
            st = stamps[i]
            vals.append(Time(st.year, st.month, st.day, st.hour))
            rows.append(Row(1, vals))
        for j, name in enumerate(POLLUTION_NUMERIC):
            all_vals[name].extend(values[:, j].tolist())
        series.append(TimeSeries(f"entity_{e:03d}", rows))
        row_targets[f"entity_{e:03d}"] = targets

    # vocabulary in entity order so Cat(e) always points at site_names[e]
    attrs = {"site": AttributeSpec("site", CATEGORICAL, vocab=site_names + ["OOV"])}
    for name in POLLUTION_NUMERIC:
        arr = all_vals[name]
        attrs[name] = AttributeSpec(name, NUMERICAL, bin_edges=fit_bins(arr, config.q_bins),
                                    value_range=(float(min(arr)), float(max(arr))))
    years = sorted({config.start_year + y for y in range(2)})
    attrs["timestamp"] = AttributeSpec("timestamp", TIMESTAMP, years=years, with_hour=True)
    row_type = RowTypeSpec(1, ["site"] + POLLUTION_NUMERIC + ["timestamp"])
    schema = Schema(attrs, [row_type], default_special_tokens(attrs))
    return PollutionDataset(series, schema, row_targets, config)


def labeled_windows(ds: PollutionDataset, t: int, stride: int) -> list[WindowedSample]:
    """Sliding windows with the regression target at each window's last row."""
    out = []
    for s in ds.series:
        for w in window(s, t, stride):
            w.label = ds.window_label(w, t)
            out.append(w)
    return out


# ---------------------------------------------------------------------------
# multi-type transaction generator: three row types sharing five generic
# fields, entity-level churn labels from a recorded logistic rule


@dataclass
class MultitypeConfig:
    n_entities: int = 100
    mean_len: int = 100
    churn_rate: float = 0.15
    q_bins: int = 100
    start_year: int = 2021
    rule_sharpness: float = 4.0


CHURN_RULE = {
    "window": 30,
    "weights": {"atm_fraction": 3.0, "pos_fraction": -2.0,
                "balance_slope_tanh": -1.5, "log_amount_mean": 0.8},
    "note": "z-score weighted sum, sigmoid(sharpness * (z - z0)), z0 calibrated to churn_rate",
}


@dataclass
class MultitypeDataset:
    series: list[TimeSeries]
    schema: Schema
    oracle_scores: dict[str, float]
    config: MultitypeConfig
    rule: dict = field(default_factory=lambda: dict(CHURN_RULE))


def _churn_score(rows: list[Row], amount_pos: int = 1, balance_pos: int = 2) -> float:
    recent = rows[-CHURN_RULE["window"]:]
    types = np.array([r.type_id for r in recent])
    atm_frac = float(np.mean(types == 3))
    pos_frac = float(np.mean(types == 2))
    amounts = np.array([r.values[amount_pos].value for r in recent])
    balances = np.array([r.values[balance_pos].value for r in recent])
    slope = (balances[-1] - balances[0]) / len(recent)
    w = CHURN_RULE["weights"]
    return (w["atm_fraction"] * atm_frac + w["pos_fraction"] * pos_frac
            + w["balance_slope_tanh"] * math.tanh(slope / 50.0)
            + w["log_amount_mean"] * (float(np.mean(np.log1p(amounts))) - 3.0))


def gen_multitype_transactions(config: MultitypeConfig, rng) -> MultitypeDataset:
    seed = rng
    merchants = [f"merchant_{i:02d}" for i in range(24)]
    localities = [f"loc_{i:02d}" for i in range(12)]
    operators = [f"bank_{i}" for i in range(8)]
    categories = ["groceries", "rent", "salary", "utilities", "transport", "leisure", "health", "other"]
    terminals = ["chip", "swipe", "online"]
    directions = ["debit", "credit"]
    start = datetime(config.start_year, 1, 1)

    series = []
    num_vals: dict[str, list[float]] = {"amount": [], "balance": [], "fee": []}
    scores = []
    for e in range(config.n_entities):
        erng = _entity_rng(seed, e)
        t_all = max(35, int(erng.poisson(config.mean_len)))
        type_probs = erng.dirichlet([5.0, 3.0, 2.0])
        drift = erng.normal(0.0, 25.0)
        balance = 1000.0 + erng.normal(0.0, 200.0)
        stamp = start + timedelta(days=int(erng.integers(0, 60)))
        rows = []
        for _ in range(t_all):
            type_id = int(erng.choice([1, 2, 3], p=type_probs))
            amount = float(erng.lognormal(3.0, 1.0))
            direction = int(erng.random() < 0.2)
            balance += (amount if direction else -amount) + drift + erng.normal(0.0, 10.0)
            stamp += timedelta(hours=int(erng.integers(4, 72)))
            generic: list = [Time(stamp.year, stamp.month, stamp.day), Num(amount),
                             Num(balance), Cat(direction), Cat(int(erng.integers(0, len(categories))))]
            num_vals["amount"].append(amount)
            num_vals["balance"].append(balance)
            if type_id == 2:
                extra = [Cat(int(erng.integers(0, len(merchants)))),
                         Cat(int(erng.integers(0, len(localities)))),
                         Cat(int(erng.integers(0, len(terminals))))]
            elif type_id == 3:
                fee = float(erng.exponential(2.0))
                extra = [Cat(int(erng.integers(0, len(operators)))), Num(fee)]
                num_vals["fee"].append(fee)
            else:
                extra = []
            rows.append(Row(type_id, generic + extra))
        series.append(TimeSeries(f"account_{e:04d}", rows))
        scores.append(_churn_score(rows))

    scores_arr = np.asarray(scores)
    oracle = {s.entity_id: float(z) for s, z in zip(series, scores_arr)}
    if config.churn_rate <= 0.0:
        for s in series:
            s.label = 0
    else:
        lo, hi = float(scores_arr.min()) - 10.0, float(scores_arr.max()) + 10.0
        for _ in range(80):  # bisect the intercept so mean(p) matches churn_rate
            z0 = 0.5 * (lo + hi)
            p = 1.0 / (1.0 + np.exp(-config.rule_sharpness * (scores_arr - z0)))
            if p.mean() > config.churn_rate:
                lo = z0
            else:
                hi = z0
        z0 = 0.5 * (lo + hi)
        p = 1.0 / (1.0 + np.exp(-config.rule_sharpness * (scores_arr - z0)))
        lrng = _entity_rng(seed, 2_000_000)
        draws = lrng.random(len(series))
        for s, pi, u in zip(series, p, draws):
            s.label = int(u < pi)

    def vocab_of(names):
        return list(names) + ["OOV"]

    attrs = {
        "timestamp": AttributeSpec("timestamp", TIMESTAMP,
                                   years=[config.start_year, config.start_year + 1], with_hour=False),
        "amount": AttributeSpec("amount", NUMERICAL, bin_edges=fit_bins(num_vals["amount"], config.q_bins),
                                value_range=(min(num_vals["amount"]), max(num_vals["amount"]))),
        "balance": AttributeSpec("balance", NUMERICAL, bin_edges=fit_bins(num_vals["balance"], config.q_bins),
                                 value_range=(min(num_vals["balance"]), max(num_vals["balance"]))),
        "direction": AttributeSpec("direction", CATEGORICAL, vocab=vocab_of(directions)),
        "category": AttributeSpec("category", CATEGORICAL, vocab=vocab_of(categories)),
        "merchant": AttributeSpec("merchant", CATEGORICAL, vocab=vocab_of(merchants)),
        "locality": AttributeSpec("locality", CATEGORICAL, vocab=vocab_of(localities)),
        "terminal": AttributeSpec("terminal", CATEGORICAL, vocab=vocab_of(terminals)),
        "operator": AttributeSpec("operator", CATEGORICAL, vocab=vocab_of(operators)),
        "fee": AttributeSpec("fee", NUMERICAL, bin_edges=fit_bins(num_vals["fee"], config.q_bins),
                             value_range=(min(num_vals["fee"]), max(num_vals["fee"]))),
    }
    generic = ["timestamp", "amount", "balance", "direction", "category"]
    row_types = [
        RowTypeSpec(1, list(generic)),
        RowTypeSpec(2, generic + ["merchant", "locality", "terminal"]),
        RowTypeSpec(3, generic + ["operator", "fee"]),
    ]
    schema = Schema(attrs, row_types, default_special_tokens(attrs))
    return MultitypeDataset(series, schema, oracle, config)


def flatten_to_single_type(series_list: list[TimeSeries], schema: Schema) -> tuple[list[TimeSeries], Schema]:
    """Baseline transform: one row type over the union of all attributes,
    with fields absent from a row's original type set to Missing."""
    union: list[str] = []
    for rt in schema.row_types:
        for a in rt.attributes:
            if a not in union:
                union.append(a)
    pos = {a: i for i, a in enumerate(union)}
    out = []
    for s in series_list:
        rows = []
        for row in s.rows:
            rt = schema.row_type(row.type_id)
            values: list = [Missing] * len(union)
            for name, v in zip(rt.attributes, row.values):
                values[pos[name]] = v
            rows.append(Row(1, values))
        out.append(TimeSeries(s.entity_id, rows, s.label))
    flat = Schema(dict(schema.attributes), [RowTypeSpec(1, union)],
                  default_special_tokens(schema.attributes), version=schema.version)
    return out, flat


def export_dataset(out_dir, series_list: list[TimeSeries], schema: Schema,
                   labels: dict[str, float] | None = None,
                   row_targets: dict[str, np.ndarray] | None = None,
                   extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "data.csv", series_list, schema)
    (out / "schema.json").write_text(schema_to_json(schema))
    if labels is not None:
        (out / "labels.json").write_text(json.dumps(labels, sort_keys=True, indent=2))
    if row_targets is not None:
        payload = {k: [float(x) for x in v] for k, v in sorted(row_targets.items())}
        (out / "targets.json").write_text(json.dumps(payload, sort_keys=True))
    write_manifest(out / "manifest.json", series_list, schema, extra)
