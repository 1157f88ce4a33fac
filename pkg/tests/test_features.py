import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cstwa.errors import ConfigError, DataError, NumericError, ShapeError
from cstwa.features import (Dataset, EmbeddingTable, FieldSpec, Schema, build_vocab, encode_sample,
                            entity_feature_map, lookup_concat, read_field_specs, scatter_grad,
                            write_field_specs)
from cstwa.nn import AdamConfig, make_rng

SCHEMA = Schema([FieldSpec("uid", "user", True), FieldSpec("iid", "item", True)])
OPT = AdamConfig(lr=0.01, l2=0.0)


def rec(uid, iid, click="0", conv="0"):
    return {"uid": uid, "iid": iid, "click": click, "conversion": conv}


def test_schema_groups_fields_by_side():
    s = Schema([FieldSpec("ctx", "context"), FieldSpec("iid", "item", True), FieldSpec("age", "user"),
                FieldSpec("uid", "user", True)])
    assert s.names == ["age", "uid", "iid", "ctx"]
    assert s.count("user") == 2 and s.count("context") == 1
    assert s.entity_column("item") == 2


@pytest.mark.parametrize("fields", [
    [FieldSpec("uid", "user", True)],
    [FieldSpec("uid", "user", True), FieldSpec("u2", "user", True), FieldSpec("iid", "item", True)],
    [FieldSpec("uid", "user", True), FieldSpec("uid", "item", True)],
])
def test_schema_rejects_bad_entity_fields(fields):
    with pytest.raises(ConfigError):
        Schema(fields)


def test_field_spec_file_round_trip(tmp_path):
    s = Schema([FieldSpec("uid", "user", True), FieldSpec("iid", "item", True), FieldSpec("pos", "context")])
    write_field_specs(s, tmp_path / "fields.txt")
    assert read_field_specs(tmp_path / "fields.txt") == s
    (tmp_path / "bad.txt").write_text("uid,user,yes\n")
    with pytest.raises(ConfigError):
        read_field_specs(tmp_path / "bad.txt")


def test_vocab_frequency_filter():
    records = [rec("a", "x")] * 12 + [rec("b", "x")] * 3
    v = build_vocab(records, SCHEMA, min_freq=10)
    assert v.index("uid", "a") == 1 and v.index("uid", "b") == 0


def test_vocab_boundary_frequency_is_kept():
    v = build_vocab([rec("a", "x")] * 10, SCHEMA, min_freq=10)
    assert v.index("uid", "a") == 1


def test_vocab_min_freq_zero_keeps_everything():
    v = build_vocab([rec("a", "x"), rec("b", "y"), rec("c", "y")], SCHEMA, min_freq=0)
    assert all(v.index("uid", u) > 0 for u in "abc")


def test_vocab_order_count_desc_value_asc():
    records = [rec("b", "x")] * 2 + [rec("a", "x")] * 2 + [rec("c", "x")] * 5
    v = build_vocab(records, SCHEMA, min_freq=1)
    assert [v.decode("uid", i) for i in (1, 2, 3)] == ["c", "a", "b"]
    assert v.cardinality("uid") == 4


def test_vocab_empty_stream():
    with pytest.raises(ConfigError):
        build_vocab([], SCHEMA)


def test_encode_sample():
    v = build_vocab([rec("a", "x")] * 10, SCHEMA)
    s = encode_sample(rec("zzz", "x", "1", "1"), v, SCHEMA)
    assert s.x == (0, 1) and (s.y, s.z) == (1, 1)
    assert s.user_index == 0 and s.item_index == 1
    with pytest.raises(DataError, match="conversion without click"):
        encode_sample(rec("a", "x", "0", "1"), v, SCHEMA)
    with pytest.raises(DataError, match="iid"):
        encode_sample({"uid": "a", "click": "0", "conversion": "0"}, v, SCHEMA)
    with pytest.raises(DataError):
        encode_sample(rec("a", "x", "2", "0"), v, SCHEMA)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=60), st.integers(0, 5))
def test_vocab_round_trip_and_purity(values, min_freq):
    records = [rec(u, "x") for u in values]
    v1 = build_vocab(records, SCHEMA, min_freq)
    assert v1 == build_vocab(records, SCHEMA, min_freq)
    for u in set(values):
        idx = v1.index("uid", u)
        if values.count(u) >= min_freq:
            assert idx >= 1 and v1.decode("uid", idx) == u
        else:
            assert idx == 0
    indices = sorted(v1.mapping("uid").values())
    assert indices == list(range(1, v1.cardinality("uid")))


def small_table(dim=2):
    # field 0 has 3 rows, field 1 has 2 rows
    vals = np.arange(5 * dim, dtype=np.float64).reshape(5, dim)
    return EmbeddingTable("V", [3, 2], vals)


def test_lookup_concat_definition():
    t = small_table()
    # field 0 index 0 -> row 0 = [0,1]; field 1 index 1 -> row 4 = [8,9]
    assert lookup_concat(t, np.array([0, 1]), SCHEMA).tolist() == [0, 1, 8, 9]
    assert lookup_concat(t, np.array([0, 1]), SCHEMA, ("context",)).shape == (0,)
    zero = EmbeddingTable("V", [3, 2], np.zeros((5, 2)))
    assert not lookup_concat(zero, np.array([2, 0]), SCHEMA).any()
    assert lookup_concat(t, np.array([[0, 1], [1, 0]]), SCHEMA, ("item",)).tolist() == [[8, 9], [6, 7]]


def test_lookup_out_of_bounds():
    with pytest.raises(NumericError):
        lookup_concat(small_table(), np.array([3, 0]), SCHEMA)


def test_scatter_zero_grad_is_noop():
    t = small_table()
    before = t.values.copy()
    scatter_grad(t, np.array([[1, 0]]), SCHEMA, np.zeros(4), OPT)
    assert np.array_equal(t.values, before)


def test_scatter_accumulates_duplicates():
    t, ref = small_table(), small_table()
    g1, g2 = np.array([0.5, -1.0]), np.array([0.25, 2.0])
    scatter_grad(t, np.array([[1, 0], [1, 1]]), SCHEMA, np.concatenate([g1, [0, 0], g2, [0, 0]]), OPT)
    ref.apply_row_grads(np.array([1]), (g1 + g2)[None], OPT)
    assert np.array_equal(t.values[1], ref.values[1])
    assert t.step[1] == 1


def test_scatter_leaves_untouched_rows_bitwise():
    t = small_table()
    before = (t.values.copy(), t.m.copy(), t.v.copy(), t.step.copy())
    scatter_grad(t, np.array([[2, 1]]), SCHEMA, np.ones(4), OPT)
    touched = np.zeros(5, bool)
    touched[[2, 4]] = True
    assert np.array_equal(t.values[~touched], before[0][~touched])
    assert np.array_equal(t.m[~touched], before[1][~touched])
    assert np.array_equal(t.v[~touched], before[2][~touched])
    assert np.array_equal(t.step[~touched], before[3][~touched])
    assert np.all(t.values[touched] != before[0][touched])


def test_scatter_rejects_bad_grads():
    t = small_table()
    with pytest.raises(ShapeError):
        scatter_grad(t, np.array([[0, 0]]), SCHEMA, np.ones(3), OPT)
    with pytest.raises(NumericError):
        scatter_grad(t, np.array([[0, 0]]), SCHEMA, np.array([np.inf, 0, 0, 0]), OPT)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 1)), min_size=1, max_size=6), st.integers(0, 3))
def test_one_hot_scatter_changes_exactly_looked_up_row(rows, hot):
    t = small_table()
    x = np.array(rows)
    width = 2 * t.dim
    grad = np.zeros(len(rows) * width)
    k = hot % width
    grad[k] = 1.0
    before = t.values.copy()
    scatter_grad(t, x, SCHEMA, grad, OPT)
    field = k // t.dim
    row = x[0, field] + t.offsets[field]
    changed = np.flatnonzero(np.any(t.values != before, axis=1))
    assert changed.tolist() == [row]


def test_dataset_and_entity_map():
    x = np.array([[1, 2], [1, 1], [2, 1]])
    d = Dataset(SCHEMA, x, [1, 0, 1], [1, 0, 0])
    assert d[0].user_index == 1 and d.item.tolist() == [2, 1, 1]
    assert entity_feature_map(d, "user", 3).tolist() == [[0], [1], [2]]
    with pytest.raises(DataError):
        entity_feature_map(d, "user", 4)
    with pytest.raises(DataError):
        Dataset(SCHEMA, x, [0, 0, 0], [1, 0, 0])


def test_embedding_init_statistics():
    t = EmbeddingTable.init("V", [500, 500], 5, make_rng(0), std=0.01)
    assert t.values.shape == (1000, 5)
    assert abs(t.values.std() - 0.01) < 0.0005
