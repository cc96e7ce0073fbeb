"""Unit tests for datasets, slices and the two on-disk data formats."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from data import (
    ColumnMeta,
    DataFormatError,
    Dataset,
    DataSlice,
    audit_dataset,
    load_benchmark_file,
    load_benchmark_triplet,
    load_mixed_csv,
    median_cutoff,
    split_rows,
    write_benchmark_file,
    write_mixed_csv,
)
from tests.conftest import binary_schema

pytestmark = pytest.mark.unit


def write_trio(stem: Path, train: str, valid: str, test: str) -> None:
    for suffix, text in zip((".ts.data", ".valid.data", ".test.data"), (train, valid, test)):
        Path(str(stem) + suffix).write_text(text, encoding="utf-8")


class TestColumnMeta:
    def test_discrete_needs_arity(self):
        with pytest.raises(ValueError):
            ColumnMeta(name="a", kind="discrete")

    def test_continuous_rejects_arity(self):
        with pytest.raises(ValueError):
            ColumnMeta(name="a", kind="continuous", arity=3)


class TestDataset:
    def test_values_are_read_only(self):
        dataset = Dataset(binary_schema(2), [[0, 1], [1, 0]])
        with pytest.raises(ValueError):
            dataset.values[0, 0] = 1.0

    def test_out_of_range_discrete(self):
        with pytest.raises(DataFormatError, match="outside"):
            Dataset(binary_schema(1), [[2.0]])

    def test_missing_cells_allowed(self):
        dataset = Dataset(binary_schema(2), [[math.nan, 1], [0, math.nan]])
        assert dataset.missing_fraction == 0.5

    def test_audit_reports_every_problem(self):
        schema = [ColumnMeta.discrete("a", 2), ColumnMeta.discrete("a", 3)]
        problems = audit_dataset(schema, np.array([[0.5, 1.0]]))
        assert len(problems) == 2

    def test_audit_clean(self):
        schema = [ColumnMeta.discrete("a", 3), ColumnMeta.continuous("b")]
        assert audit_dataset(schema, np.array([[2.0, -7.25], [math.nan, math.nan]])) == []

    def test_take_preserves_order(self):
        dataset = Dataset(binary_schema(1), [[0], [1], [1]])
        assert dataset.take([2, 0]).values[:, 0].tolist() == [1.0, 0.0]


class TestDataSlice:
    def test_composition_addresses_global_ids(self):
        dataset = Dataset(binary_schema(4), np.eye(4)[:, ::-1])
        outer = DataSlice(dataset, [0, 2, 3], [1, 2, 3])
        inner = outer.slice(local_rows=[1, 2], local_vars=[0, 2])
        assert inner.row_ids.tolist() == [2, 3]
        assert inner.var_ids.tolist() == [1, 3]
        assert np.array_equal(inner.matrix(), dataset.values[np.ix_([2, 3], [1, 3])])

    def test_with_vars_keeps_rows(self):
        dataset = Dataset(binary_schema(3), np.zeros((5, 3)))
        view = DataSlice(dataset, [1, 4], [0, 1]).with_vars([2])
        assert view.row_ids.tolist() == [1, 4]
        assert view.n_vars == 1

    def test_bad_ids(self):
        dataset = Dataset(binary_schema(2), np.zeros((3, 2)))
        with pytest.raises(IndexError):
            DataSlice(dataset, [0, 3], [0])
        with pytest.raises(ValueError):
            DataSlice(dataset, [0, 0], [0])


class TestMedianCutoff:
    def test_even_count_averages_middle(self):
        schema = [ColumnMeta.continuous("c")]
        dataset = Dataset(schema, [[4.0], [1.0], [math.nan], [3.0], [10.0]])
        assert median_cutoff(DataSlice.full(dataset), 0) == 3.5

    def test_permutation_invariant(self, rng):
        values = rng.normal(size=(41, 1))
        schema = [ColumnMeta.continuous("c")]
        base = median_cutoff(DataSlice.full(Dataset(schema, values)), 0)
        for _ in range(5):
            shuffled = Dataset(schema, values[rng.permutation(41)])
            assert median_cutoff(DataSlice.full(shuffled), 0) == base

    def test_all_missing(self):
        dataset = Dataset([ColumnMeta.continuous("c")], [[math.nan], [math.nan]])
        assert median_cutoff(DataSlice.full(dataset), 0) is None

    def test_discrete_column_rejected(self):
        with pytest.raises(ValueError):
            median_cutoff(DataSlice.full(Dataset(binary_schema(1), [[0]])), 0)


class TestSplitRows:
    def test_sizes_and_disjointness(self):
        dataset = Dataset(binary_schema(1), np.zeros((100, 1)))
        train, valid = split_rows(dataset, 0.2, seed=3)
        assert (train.size, valid.size) == (80, 20)
        assert set(train.tolist()).isdisjoint(valid.tolist())
        assert sorted(train.tolist() + valid.tolist()) == list(range(100))

    def test_deterministic(self):
        dataset = Dataset(binary_schema(1), np.zeros((50, 1)))
        first = split_rows(dataset, 0.3, seed=8)
        second = split_rows(dataset, 0.3, seed=8)
        assert all(np.array_equal(a, b) for a, b in zip(first, second))

    def test_each_side_non_empty(self):
        dataset = Dataset(binary_schema(1), np.zeros((2, 1)))
        train, valid = split_rows(dataset, 0.01, seed=0)
        assert train.size == 1 and valid.size == 1

    def test_fraction_range(self):
        dataset = Dataset(binary_schema(1), np.zeros((10, 1)))
        with pytest.raises(ValueError):
            split_rows(dataset, 1.0, seed=0)


class TestBenchmarkFormat:
    def test_trio_schema_from_max_value(self, tmp_path):
        stem = tmp_path / "toy"
        write_trio(stem, "0,1,0\n1,1,0\n", "0,0,2\n", "1,0,0\n")
        train, valid, test = load_benchmark_triplet(stem)
        assert [c.arity for c in train.schema] == [2, 2, 3]
        assert (train.n_rows, valid.n_rows, test.n_rows) == (2, 1, 1)
        assert train.schema == test.schema

    def test_round_trip_is_byte_identical(self, tmp_path):
        stem = tmp_path / "toy"
        texts = ("0,1,0\n1,1,0\n0,0,1\n", "0,0,1\n", "1,0,0\n1,1,1\n")
        write_trio(stem, *texts)
        for dataset, suffix, text in zip(load_benchmark_triplet(stem), (".ts", ".valid", ".test"), texts):
            out = tmp_path / f"copy{suffix}.data"
            write_benchmark_file(dataset, out)
            assert out.read_text(encoding="utf-8") == text

    def test_ragged_row(self, tmp_path):
        stem = tmp_path / "bad"
        write_trio(stem, "0,1\n1\n", "0,1\n", "0,1\n")
        with pytest.raises(DataFormatError) as info:
            load_benchmark_triplet(stem)
        assert info.value.line == 2

    def test_non_integer_token(self, tmp_path):
        stem = tmp_path / "bad"
        write_trio(stem, "0,1\n", "0,x\n", "0,1\n")
        with pytest.raises(DataFormatError, match="non-integer"):
            load_benchmark_triplet(stem)

    def test_width_mismatch_across_trio(self, tmp_path):
        stem = tmp_path / "bad"
        write_trio(stem, "0,1\n", "0,1,1\n", "0,1\n")
        with pytest.raises(DataFormatError, match="inconsistent"):
            load_benchmark_triplet(stem)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_benchmark_triplet(tmp_path / "absent")

    def test_single_file_with_schema(self, tmp_path):
        path = tmp_path / "rows.data"
        path.write_text("0,1\n", encoding="utf-8")
        assert load_benchmark_file(path, schema=binary_schema(2)).n_rows == 1
        with pytest.raises(DataFormatError, match="width"):
            load_benchmark_file(path, schema=binary_schema(3))

    def test_writer_rejects_missing(self, tmp_path):
        dataset = Dataset(binary_schema(1), [[math.nan]])
        with pytest.raises(DataFormatError):
            write_benchmark_file(dataset, tmp_path / "x.data")


class TestMixedCsv:
    def test_type_inference(self, tmp_path):
        path = tmp_path / "mixed.csv"
        path.write_text("a,b,c\n0,1.5,?\n2,,1\n1,3e2,0\n", encoding="utf-8")
        dataset = load_mixed_csv(path)
        assert dataset.schema[0] == ColumnMeta.discrete("a", 3)
        assert dataset.schema[1] == ColumnMeta.continuous("b")
        assert dataset.schema[2] == ColumnMeta.discrete("c", 2)
        assert math.isnan(dataset.values[1, 1]) and math.isnan(dataset.values[0, 2])
        assert dataset.values[2, 1] == 300.0

    def test_all_missing_column_needs_schema(self, tmp_path):
        path = tmp_path / "holes.csv"
        path.write_text("a,b\n0,?\n1,?\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="no observed"):
            load_mixed_csv(path)
        schema = [ColumnMeta.discrete("a", 2), ColumnMeta.continuous("b")]
        assert load_mixed_csv(path, schema=schema).missing_fraction == 0.5

    def test_ragged(self, tmp_path):
        path = tmp_path / "ragged.csv"
        path.write_text("a,b\n0,1\n1\n", encoding="utf-8")
        with pytest.raises(DataFormatError) as info:
            load_mixed_csv(path)
        assert info.value.line == 3

    def test_unparsable_cell(self, tmp_path):
        path = tmp_path / "text.csv"
        path.write_text("a\nhello\n", encoding="utf-8")
        with pytest.raises(DataFormatError, match="unparsable"):
            load_mixed_csv(path)

    def test_custom_missing_token(self, tmp_path):
        path = tmp_path / "na.csv"
        path.write_text("a\n1\nNA\n0\n", encoding="utf-8")
        assert load_mixed_csv(path, missing_token="NA").missing_fraction == pytest.approx(1 / 3)

    def test_write_then_read(self, tmp_path, sampled_mixed):
        values = sampled_mixed.values.copy()
        values[::7, 1] = np.nan
        dataset = Dataset(sampled_mixed.schema, values)
        path = tmp_path / "out.csv"
        write_mixed_csv(dataset, path)
        again = load_mixed_csv(path, schema=dataset.schema)
        assert np.array_equal(again.values, dataset.values, equal_nan=True)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
