"""Unit tests for the SPN arena: validation, scopes, inference, sampling, parameter counts."""
import itertools
import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.integrate import trapezoid
from scipy.special import logsumexp

sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from data import ColumnMeta
from spn_core import (
    LeafNode,
    ProductNode,
    RowFormatError,
    Spn,
    SpnBuilder,
    UnknownNodeError,
    log_density,
    log_likelihoods,
    num_free_parameters,
    rebuild,
    sample,
    sample_many,
    scope_of,
    validate,
)
from tests.conftest import binary_schema, random_spn

pytestmark = pytest.mark.unit


def bernoulli(p: float) -> Spn:
    builder = SpnBuilder(binary_schema(1))
    return builder.build(builder.add_categorical(0, [1 - p, p]))


class TestValidate:
    def test_single_leaf_is_valid(self):
        assert validate(bernoulli(0.5)).is_valid

    def test_product_over_same_variable(self):
        builder = SpnBuilder(binary_schema(1))
        leaves = [builder.add_categorical(0, [0.5, 0.5]), builder.add_categorical(0, [0.2, 0.8])]
        report = validate(builder.build(builder.add_product(leaves)))
        assert report.kinds() == ["decomposability"]
        assert report.violations[0].node_id == 2

    def test_sum_over_different_variables(self):
        builder = SpnBuilder(binary_schema(2))
        leaves = [builder.add_categorical(0, [0.5, 0.5]), builder.add_categorical(1, [0.5, 0.5])]
        report = validate(builder.build(builder.add_sum(leaves, weights=[0.5, 0.5])))
        assert report.kinds() == ["completeness"]

    def test_unnormalized_weights(self):
        builder = SpnBuilder(binary_schema(1))
        leaves = [builder.add_categorical(0, [0.5, 0.5]), builder.add_categorical(0, [0.2, 0.8])]
        report = validate(builder.build(builder.add_sum(leaves, weights=[0.5, 0.4])))
        assert report.kinds() == ["normalization"]

    def test_unreachable_node(self):
        builder = SpnBuilder(binary_schema(1))
        builder.add_categorical(0, [0.5, 0.5])
        root = builder.add_categorical(0, [0.1, 0.9])
        report = validate(builder.build(root))
        assert report.kinds() == ["unreachable"]
        assert report.violations[0].node_id == 0

    def test_cycle(self):
        leaf = LeafNode.model_validate({"var": 0, "dist": {"kind": "cat", "log_probs": [math.log(0.5)] * 2}})
        nodes = [ProductNode(children=(1, 2)), ProductNode(children=(0, 2)), leaf]
        report = validate(Spn(nodes, 0, binary_schema(1)))
        assert "cycle" in report.kinds()

    def test_unknown_child(self):
        nodes = [ProductNode(children=(5, 6))]
        assert validate(Spn(nodes, 0, binary_schema(1))).kinds() == ["unknown_child"]

    def test_root_scope_must_cover_schema(self):
        builder = SpnBuilder(binary_schema(3))
        root = builder.add_product([builder.add_categorical(0, [0.5, 0.5]), builder.add_categorical(1, [0.5, 0.5])])
        assert validate(builder.build(root)).kinds() == ["root_scope"]

    def test_gaussian_on_discrete_column(self):
        builder = SpnBuilder(binary_schema(1))
        assert validate(builder.build(builder.add_gaussian(0, 0.0, 1.0))).kinds() == ["leaf_kind"]

    def test_random_spns_are_valid(self, rng):
        schema = binary_schema(4) + [ColumnMeta.continuous("c")]
        for _ in range(20):
            assert validate(random_spn(rng, schema)).is_valid


class TestScope:
    def test_leaf(self):
        builder = SpnBuilder(binary_schema(4))
        spn = builder.build(builder.add_categorical(3, [0.5, 0.5]))
        assert scope_of(spn, 0) == {3}

    def test_product(self):
        builder = SpnBuilder(binary_schema(2))
        root = builder.add_product([builder.add_categorical(0, [0.5, 0.5]), builder.add_categorical(1, [0.5, 0.5])])
        assert scope_of(builder.build(root), root) == {0, 1}

    def test_fig1_root(self, fig1_spn):
        assert scope_of(fig1_spn, fig1_spn.root) == {0, 1}
        assert fig1_spn.leaf_vars == {0, 1}

    def test_unknown_node(self, fig1_spn):
        with pytest.raises(UnknownNodeError):
            scope_of(fig1_spn, 99)


class TestLogDensity:
    def test_bernoulli(self):
        assert log_density(bernoulli(0.5), [1]) == pytest.approx(-0.693147, abs=1e-6)

    def test_missing_is_marginalised(self, mixed_spn):
        assert log_density(bernoulli(0.3), [None]) == 0.0
        assert log_density(mixed_spn, [None, None]) == pytest.approx(0.0, abs=1e-12)

    def test_mixture_arithmetic(self):
        builder = SpnBuilder(binary_schema(1))
        leaves = [builder.add_categorical(0, [0.8, 0.2]), builder.add_categorical(0, [0.1, 0.9])]
        spn = builder.build(builder.add_sum(leaves, weights=[0.3, 0.7]))
        assert log_density(spn, [1]) == pytest.approx(math.log(0.69), abs=1e-12)
        assert log_density(spn, [1]) == pytest.approx(-0.371064, abs=1e-6)

    def test_row_width_mismatch(self, fig1_spn):
        with pytest.raises(RowFormatError):
            log_density(fig1_spn, [1])

    def test_out_of_range_value(self, fig1_spn):
        with pytest.raises(RowFormatError):
            log_density(fig1_spn, [2, 0])

    def test_single_row_matches_batch(self, mixed_spn, sampled_mixed):
        batch = log_likelihoods(mixed_spn, sampled_mixed.values[:10])
        for row, value in zip(sampled_mixed.values[:10], batch):
            assert log_density(mixed_spn, row.tolist()) == pytest.approx(value, abs=1e-12)

    def test_each_node_visited_once(self, rng):
        spn = random_spn(rng, binary_schema(5))
        visits = []
        log_likelihoods(spn, [[0, 1, 0, 1, 1]], on_visit=visits.append)
        assert len(visits) == spn.n_nodes
        assert len(set(visits)) == spn.n_nodes

    def test_normalization_by_enumeration(self, rng):
        for n_vars in (1, 4, 8):
            spn = random_spn(rng, binary_schema(n_vars))
            rows = np.array(list(itertools.product([0, 1], repeat=n_vars)), dtype=np.float64)
            assert float(np.exp(log_likelihoods(spn, rows)).sum()) == pytest.approx(1.0, abs=1e-9)

    def test_categorical_marginalization(self, rng):
        schema = [ColumnMeta.discrete("a", 3), ColumnMeta.discrete("b", 2), ColumnMeta.discrete("c", 4)]
        spn = random_spn(rng, schema)
        row = [2.0, 0.0, 1.0]
        for var, column in enumerate(schema):
            filled = []
            for value in range(column.arity or 0):
                candidate = list(row)
                candidate[var] = value
                filled.append(log_density(spn, candidate))
            marginal = list(row)
            marginal[var] = None
            assert float(logsumexp(filled)) == pytest.approx(log_density(spn, marginal), abs=1e-9)

    def test_gaussian_marginalization(self, mixed_spn):
        grid = np.linspace(-40.0, 40.0, 80001)
        rows = np.column_stack([np.full(grid.size, 1.0), grid])
        integral = trapezoid(np.exp(log_likelihoods(mixed_spn, rows)), grid)
        assert math.log(integral) == pytest.approx(log_density(mixed_spn, [1, None]), abs=1e-4)


class TestSampling:
    def test_near_deterministic_leaf(self, rng):
        draws = sample_many(bernoulli(1 - 1e-6), rng, 1000)
        assert (draws[:, 0] == 1).mean() >= 0.99

    def test_same_seed_same_rows(self, mixed_spn):
        assert sample(mixed_spn, np.random.default_rng(9)) == sample(mixed_spn, np.random.default_rng(9))
        assert np.array_equal(
            sample_many(mixed_spn, np.random.default_rng(3), 50), sample_many(mixed_spn, np.random.default_rng(3), 50)
        )

    def test_frequencies_match_density(self, fig1_spn):
        n = 100_000
        draws = sample_many(fig1_spn, np.random.default_rng(11), n).astype(np.int64)
        for a, b in itertools.product([0, 1], repeat=2):
            p = math.exp(log_density(fig1_spn, [a, b]))
            freq = float(np.mean((draws[:, 0] == a) & (draws[:, 1] == b)))
            assert abs(freq - p) <= 4 * math.sqrt(p * (1 - p) / n)

    def test_joint_frequencies_on_random_model(self):
        n_vars, n = 8, 100_000
        spn = random_spn(np.random.default_rng(12), binary_schema(n_vars))
        draws = sample_many(spn, np.random.default_rng(13), n).astype(np.int64)
        codes = draws @ (1 << np.arange(n_vars))
        freq = np.bincount(codes, minlength=2**n_vars) / n
        grid = np.array(list(itertools.product([0, 1], repeat=n_vars)), dtype=np.float64)
        p = np.exp(log_likelihoods(spn, grid))
        p_by_code = np.zeros(2**n_vars)
        p_by_code[grid.astype(np.int64) @ (1 << np.arange(n_vars))] = p
        assert p_by_code.sum() == pytest.approx(1.0, abs=1e-9)
        # 256 cells at once, so the per-cell band is wider than 3 SE
        assert np.all(np.abs(freq - p_by_code) <= 5 * np.sqrt(p_by_code * (1 - p_by_code) / n) + 5 / n)

    def test_samples_are_fully_observed(self, mixed_spn, rng):
        assert not np.isnan(sample_many(mixed_spn, rng, 200)).any()


class TestFreeParameters:
    def test_bernoulli_leaf(self):
        assert num_free_parameters(bernoulli(0.4)) == 1

    def test_gaussian_leaf(self):
        builder = SpnBuilder([ColumnMeta.continuous("c")])
        assert num_free_parameters(builder.build(builder.add_gaussian(0, 0.0, 1.0))) == 2

    def test_mixture_of_products(self):
        builder = SpnBuilder(binary_schema(3))
        products = [
            builder.add_product([builder.add_categorical(v, [0.5, 0.5]) for v in range(3)]) for _ in range(2)
        ]
        assert num_free_parameters(builder.build(builder.add_sum(products, weights=[0.5, 0.5]))) == 7

    def test_invariant_under_child_permutation(self, fig1_spn):
        root = fig1_spn.nodes[fig1_spn.root]
        swapped = root.model_copy(
            update={"children": root.children[::-1], "log_weights": root.log_weights[::-1]}
        )
        nodes = list(fig1_spn.nodes)
        nodes[fig1_spn.root] = swapped
        assert num_free_parameters(Spn(nodes, fig1_spn.root, fig1_spn.schema)) == num_free_parameters(fig1_spn)


class TestBuilder:
    def test_children_must_exist(self):
        builder = SpnBuilder(binary_schema(2))
        with pytest.raises(UnknownNodeError):
            builder.add_product([0, 1])

    def test_rebuild_replaces_subtree(self, fig1_spn):
        leaf_id = fig1_spn.nodes[fig1_spn.nodes[fig1_spn.root].children[0]].children[0]
        rebuilt = rebuild(fig1_spn, {leaf_id: lambda b: b.add_categorical(0, [0.5, 0.5])})
        assert validate(rebuilt).is_valid
        assert rebuilt.n_nodes == fig1_spn.n_nodes
        assert log_density(rebuilt, [0, None]) != log_density(fig1_spn, [0, None])
        assert log_density(rebuilt, [None, None]) == pytest.approx(0.0, abs=1e-12)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
