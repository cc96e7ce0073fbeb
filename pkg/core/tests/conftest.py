"""Shared builders for the MiniSPN test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from data import ColumnMeta, Dataset  # noqa: E402
from spn_core import Spn, SpnBuilder, sample_many  # noqa: E402


def binary_schema(n_vars: int) -> list[ColumnMeta]:
    return [ColumnMeta.discrete(f"x{j}", 2) for j in range(n_vars)]


def _random_subtree(builder: SpnBuilder, rng: np.random.Generator, variables: list[int], depth: int) -> int:
    if len(variables) == 1 or depth == 0:
        leaves = []
        for var in variables:
            column = builder.schema[var]
            if column.is_discrete:
                leaves.append(builder.add_categorical(var, rng.dirichlet(np.ones(column.arity or 2)).tolist()))
            else:
                leaves.append(builder.add_gaussian(var, float(rng.normal(0, 3)), float(rng.uniform(0.5, 2.0))))
        return leaves[0] if len(leaves) == 1 else builder.add_product(leaves)
    if rng.random() < 0.5:
        children = [_random_subtree(builder, rng, variables, depth - 1) for _ in range(2)]
        return builder.add_sum(children, weights=rng.dirichlet(np.ones(2)).tolist())
    shuffled = rng.permutation(variables).tolist()
    cut = int(rng.integers(1, len(shuffled)))
    groups = [sorted(shuffled[:cut]), sorted(shuffled[cut:])]
    return builder.add_product([_random_subtree(builder, rng, g, depth - 1) for g in groups])


def random_spn(rng: np.random.Generator, schema: list[ColumnMeta], depth: int = 4) -> Spn:
    """Valid random tree over the whole schema, rooted at a mixture."""
    builder = SpnBuilder(schema)
    variables = list(range(len(schema)))
    children = [_random_subtree(builder, rng, variables, depth - 1) for _ in range(2)]
    return builder.build(builder.add_sum(children, weights=rng.dirichlet(np.ones(2)).tolist()))


def two_cluster_data(n_rows: int, seed: int, n_vars: int = 6) -> tuple[Dataset, np.ndarray]:
    """Cluster A has every bit on with p=0.9, cluster B with p=0.1; returns data and true labels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n_rows)
    p_on = np.where(labels == 0, 0.9, 0.1)[:, None]
    values = (rng.random((n_rows, n_vars)) < p_on).astype(np.float64)
    return Dataset(binary_schema(n_vars), values), labels


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def fig1_spn() -> Spn:
    """Sum over two Products of Bernoulli leaves covering vars {0, 1}."""
    builder = SpnBuilder(binary_schema(2))
    a = builder.add_product([builder.add_categorical(0, [0.3, 0.7]), builder.add_categorical(1, [0.6, 0.4])])
    b = builder.add_product([builder.add_categorical(0, [0.8, 0.2]), builder.add_categorical(1, [0.1, 0.9])])
    return builder.build(builder.add_sum([a, b], weights=[0.4, 0.6]))


@pytest.fixture
def mixed_spn() -> Spn:
    schema = [ColumnMeta.discrete("color", 3), ColumnMeta.continuous("height")]
    builder = SpnBuilder(schema)
    a = builder.add_product([builder.add_categorical(0, [0.2, 0.3, 0.5]), builder.add_gaussian(1, -2.0, 1.5)])
    b = builder.add_product([builder.add_categorical(0, [0.6, 0.3, 0.1]), builder.add_gaussian(1, 4.0, 0.5)])
    return builder.build(builder.add_sum([a, b], weights=[0.35, 0.65]))


@pytest.fixture
def sampled_mixed(mixed_spn: Spn) -> Dataset:
    return Dataset(mixed_spn.schema, sample_many(mixed_spn, np.random.default_rng(5), 400))
