"""Unit tests for factorized leaf fitting."""
import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from data import ColumnMeta, Dataset, DataSlice
from factorized import SliceEncoding, variance_floors
from learn_minispn import LearnConfig, fit_factorized
from spn_core import LeafNode, ProductNode, SpnBuilder, log_likelihoods, validate

pytestmark = pytest.mark.unit


def fit(dataset: Dataset, **overrides):
    builder = SpnBuilder(dataset.schema)
    root = fit_factorized(DataSlice.full(dataset), LearnConfig(**overrides), builder)
    return builder.build(root)


class TestFitFactorized:
    def test_smoothed_bernoulli(self):
        spn = fit(Dataset([ColumnMeta.discrete("x", 2)], [[1], [1], [0]]))
        leaf = spn.nodes[spn.root]
        assert isinstance(leaf, LeafNode)
        assert math.exp(leaf.dist.log_probs[1]) == pytest.approx(2.1 / 3.2, abs=1e-12)
        assert math.exp(leaf.dist.log_probs[1]) == pytest.approx(0.65625)

    def test_constant_column_hits_variance_floor(self):
        spn = fit(Dataset([ColumnMeta.continuous("c")], [[2.0], [2.0]]))
        leaf = spn.nodes[spn.root]
        assert leaf.dist.mean == 2.0
        assert leaf.dist.variance == pytest.approx(1e-6)

    def test_floor_scales_with_range(self):
        dataset = Dataset([ColumnMeta.continuous("c")], [[0.0], [10.0]])
        assert variance_floors(dataset, 1e-6)[0] == pytest.approx(1e-4)

    def test_all_missing_defaults(self):
        schema = [ColumnMeta.discrete("d", 4), ColumnMeta.continuous("c")]
        spn = fit(Dataset(schema, [[math.nan, math.nan]] * 3))
        root = spn.nodes[spn.root]
        assert isinstance(root, ProductNode)
        cat, gauss = (spn.nodes[c] for c in root.children)
        assert np.allclose(np.exp(cat.dist.log_probs), 0.25)
        assert (gauss.dist.mean, gauss.dist.variance) == (0.0, 1.0)

    def test_missing_cells_skipped_in_counts(self):
        spn = fit(Dataset([ColumnMeta.discrete("x", 2)], [[1], [math.nan], [0], [1]]), laplace=1.0)
        assert math.exp(spn.nodes[spn.root].dist.log_probs[1]) == pytest.approx(3 / 5)

    def test_product_over_slice_vars_only(self, sampled_mixed):
        builder = SpnBuilder(sampled_mixed.schema)
        root = fit_factorized(DataSlice(sampled_mixed, np.arange(50), [1]), LearnConfig(), builder)
        node = builder.build(root).nodes[root]
        assert isinstance(node, LeafNode) and node.var == 1

    def test_result_is_valid(self, sampled_mixed):
        assert validate(fit(sampled_mixed)).is_valid


class TestSliceEncoding:
    def test_log_likelihood_matches_tree(self, sampled_mixed):
        values = sampled_mixed.values.copy()
        values[::5, 0] = np.nan
        dataset = Dataset(sampled_mixed.schema, values)
        floors = variance_floors(dataset, 1e-6)
        encoding = SliceEncoding.of(dataset, np.arange(dataset.n_rows), np.arange(2))
        params = encoding.fit(0.1, floors)
        spn = fit(dataset)
        assert np.allclose(encoding.log_likelihood(params), log_likelihoods(spn, values), atol=1e-9)

    def test_fit_on_row_mask(self):
        dataset = Dataset([ColumnMeta.discrete("x", 2)], [[0], [0], [1], [1]])
        encoding = SliceEncoding.of(dataset, np.arange(4), np.arange(1))
        params = encoding.fit(0.1, np.ones(1), rows=np.array([False, False, True, True]))
        assert math.exp(params.flat_log_probs[1]) == pytest.approx(2.1 / 2.2)

    def test_log_prior(self):
        dataset = Dataset([ColumnMeta.discrete("x", 2)], [[0], [1]])
        params = SliceEncoding.of(dataset, np.arange(2), np.arange(1)).fit(0.5, np.ones(1))
        assert params.log_prior(0.5) == pytest.approx(0.5 * 2 * math.log(0.5))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
