import math

import numpy as np
import pytest

from unittab.embedding import (
    build_bank, clamp_count, embed_field, embed_row, expand_schema,
    expand_series, freq_encode, prepare_series, reset_clamp_count, split_timestamp,
)
from unittab.schema import Cat, Missing, Num, Time
from unittab.tensor import Tensor, matmul
from conftest import make_tiny_schema, make_tiny_series

SQ2 = math.sqrt(2.0) / 2.0


def make_bank(schema, d=6, m=8, L=2, numeric_input="frequency", seed=0):
    expanded = expand_schema(schema)
    rng = np.random.default_rng(seed)
    bank, params = build_bank(expanded, d, m, L, numeric_input, "minmax01", rng)
    return expanded, bank, params


def test_freq_encode_zero():
    assert np.allclose(freq_encode(0.0, 2), [0.0, 1.0, 0.0, 1.0], atol=1e-15)


def test_freq_encode_half():
    out = freq_encode(0.5, 1)
    assert abs(out[0] - 1.0) < 1e-15 and abs(out[1]) < 1e-15


def test_freq_encode_quarter():
    out = freq_encode(0.25, 2)
    assert np.allclose(out, [SQ2, SQ2, 1.0, 0.0], atol=1e-15)


def test_freq_encode_interleaved_order_and_unit_circles():
    rng = np.random.default_rng(0)
    for _ in range(100):
        v = rng.random()
        out = freq_encode(v, 4)
        for i in range(4):
            s, c = out[2 * i], out[2 * i + 1]
            assert abs(s * s + c * c - 1.0) <= 1e-12
            assert abs(s - math.sin(2 ** i * math.pi * v)) < 1e-15
    assert np.all(np.abs(out) <= 1.0)


def test_freq_encode_clamps_and_counts():
    reset_clamp_count()
    with pytest.warns(UserWarning):
        out = freq_encode(1.5, 2)
    assert clamp_count() == 1
    assert np.allclose(out, freq_encode(1.0, 2))
    reset_clamp_count()


def test_split_timestamp_zero_based():
    out = split_timestamp(Time(2021, 3, 7), years=[2020, 2021])
    assert [v.index for v in out] == [1, 2, 6]


def test_split_timestamp_with_hour():
    out = split_timestamp(Time(2021, 3, 7, 13), years=[2021], with_hour=True)
    assert len(out) == 4 and out[3].index == 13


def test_split_timestamp_unseen_year_maps_to_oov():
    out = split_timestamp(Time(1999, 1, 1), years=[2020, 2021])
    assert out[0].index == 2  # OOV slot after the two known years


def test_expand_schema_raises_arity():
    schema = make_tiny_schema()
    expanded = expand_schema(schema)
    assert expanded.row_types[0].arity == 5  # timestamp -> year, month, day
    assert "timestamp.year" in expanded.attributes
    assert expanded.attributes["timestamp.month"].group == "timestamp"
    assert len(expanded.attributes["timestamp.month"].vocab) == 12
    assert len(expanded.attributes["timestamp.day"].vocab) == 31


def test_expand_series_matches_expanded_schema():
    schema = make_tiny_schema()
    series = make_tiny_series()
    expanded = expand_schema(schema)
    out = expand_series(series, schema)
    assert all(len(r.values) == expanded.row_types[0].arity for r in out.rows)
    assert out.rows[0].values[0] == Cat(0)  # year 2021 at index 0


def test_embed_field_cat_is_exact_table_row():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema)
    spec = expanded.attributes["color"]
    out = embed_field(Cat(3), spec, bank)
    assert np.array_equal(out.data, bank.cat_tables["color"].data[3])


def test_embed_field_num_at_range_min():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema, L=2)
    spec = expanded.attributes["amount"]  # value_range (0, 3)
    out = embed_field(Num(0.0), spec, bank)
    w, b = bank.num_proj["amount"]
    expected = matmul(Tensor(freq_encode(0.0, 2).reshape(1, -1)), w) + b
    assert np.allclose(out.data, expected.data.reshape(-1), atol=1e-15)


def test_embed_field_missing_uses_missing_vector():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema)
    for name in ("color", "amount"):
        out = embed_field(Missing, expanded.attributes[name], bank)
        assert np.array_equal(out.data, bank.missing_vec.data)


def test_embed_field_masked_overrides_value():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema)
    out = embed_field(Cat(1), expanded.attributes["color"], bank, masked=True)
    assert np.array_equal(out.data, bank.mask_vec.data)


def test_embed_row_composition():
    schema = make_tiny_schema()
    series = expand_series(make_tiny_series(), schema)
    expanded, bank, _ = make_bank(schema)
    row = series.rows[0]
    rt = expanded.row_types[0]
    out = embed_row(row, expanded, bank, [False] * rt.arity)
    for i, (name, v) in enumerate(zip(rt.attributes, row.values)):
        single = embed_field(v, expanded.attributes[name], bank)
        assert np.allclose(out.data[i], single.data)


def test_embed_row_all_masked():
    schema = make_tiny_schema()
    series = expand_series(make_tiny_series(), schema)
    expanded, bank, _ = make_bank(schema)
    rt = expanded.row_types[0]
    out = embed_row(series.rows[0], expanded, bank, [True] * rt.arity)
    assert np.array_equal(out.data, np.tile(bank.mask_vec.data, (rt.arity, 1)))


def test_embed_row_arity_mismatch():
    schema = make_tiny_schema()
    series = expand_series(make_tiny_series(), schema)
    expanded, bank, _ = make_bank(schema)
    with pytest.raises(Exception):
        embed_row(series.rows[0], expanded, bank, [False] * 2)


def test_equal_normalized_values_embed_bitwise_equal():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema)
    spec = expanded.attributes["amount"]
    a = embed_field(Num(1.2), spec, bank)
    b = embed_field(Num(1.2), spec, bank)
    assert np.array_equal(a.data, b.data)


def test_binned_input_mode_uses_tables():
    schema = make_tiny_schema()
    expanded, bank, _ = make_bank(schema, numeric_input="binned")
    spec = expanded.attributes["amount"]
    out = embed_field(Num(1.5), spec, bank)  # quantizes to bin 1
    assert np.array_equal(out.data, bank.num_tables["amount"].data[1])


def test_prepare_series_round_trip_shapes():
    schema = make_tiny_schema()
    series = [make_tiny_series("a"), make_tiny_series("b", n_rows=2)]
    expanded, encoded = prepare_series(series, schema)
    assert len(encoded) == 2
    assert all(len(r.cat_ids) == expanded.row_types[0].arity for r in encoded[0].rows)
