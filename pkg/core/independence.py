"""
Pairwise independence testing and variable partitioning.

Every pair of slice variables is tested on its pairwise-complete rows only
(rows where both cells are observed). Pairs with fewer such rows than
`min_overlap` are declared independent. Continuous members are binarised at
their median over the pair's complete rows. An edge joins a pair whose G-test
rejects independence at level `alpha`; the approximately independent variable
groups are the connected components of the resulting graph.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping

import numpy as np
from data import DataSlice, median_cutoff
from factorized import SliceEncoding
from numpy.typing import ArrayLike
from pydantic import BaseModel, ConfigDict
from scipy.special import gammaincc


class GTestResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    g: float
    dof: int
    p: float


def pairwise_g_test(table: ArrayLike) -> GTestResult:
    """
    G-test of independence on an r x c contingency table.

    dof only counts rows and columns with non-zero totals; dof 0 gives p = 1.
    """
    counts = np.asarray(table, dtype=np.float64)
    if counts.ndim != 2 or counts.size == 0 or counts.sum() <= 0:
        raise ValueError("empty contingency table")
    if np.any(counts < 0):
        raise ValueError("contingency counts must be non-negative")

    row_totals = counts.sum(axis=1)
    col_totals = counts.sum(axis=0)
    expected = np.outer(row_totals, col_totals) / counts.sum()
    observed = counts > 0
    g = 2.0 * float(np.sum(counts[observed] * np.log(counts[observed] / expected[observed])))
    g = max(g, 0.0)
    dof = (int(np.count_nonzero(row_totals)) - 1) * (int(np.count_nonzero(col_totals)) - 1)
    if dof <= 0:
        return GTestResult(g=g, dof=0, p=1.0)
    # chi-square upper tail = regularized upper incomplete gamma Q(dof/2, G/2)
    return GTestResult(g=g, dof=dof, p=float(gammaincc(dof / 2.0, g / 2.0)))


def _binary_or_discrete(
    data_slice: DataSlice, var: int, cells: np.ndarray, complete: DataSlice
) -> tuple[np.ndarray, int] | None:
    column = data_slice.dataset.schema[var]
    if column.is_discrete:
        return cells.astype(np.int64), int(column.arity or 0)
    cutoff = median_cutoff(complete, var)
    if cutoff is None:
        return None
    return (cells > cutoff).astype(np.int64), 2


def _mixed_pair_table(data_slice: DataSlice, u: int, v: int, min_overlap: int) -> np.ndarray | None:
    cu = data_slice.column(u)
    cv = data_slice.column(v)
    both = np.flatnonzero(~np.isnan(cu) & ~np.isnan(cv))
    if both.size < min_overlap or both.size == 0:
        return None
    complete = data_slice.slice(local_rows=both)
    coded_u = _binary_or_discrete(data_slice, u, cu[both], complete)
    coded_v = _binary_or_discrete(data_slice, v, cv[both], complete)
    if coded_u is None or coded_v is None:
        return None
    (xu, ku), (xv, kv) = coded_u, coded_v
    return np.bincount(xu * kv + xv, minlength=ku * kv).reshape(ku, kv).astype(np.float64)


def independence_graph(data_slice: DataSlice, min_overlap: int, alpha: float) -> dict[int, set[int]]:
    """Adjacency (global variable ids) of pairs whose independence is rejected."""
    var_ids = data_slice.var_ids.tolist()
    adjacency: dict[int, set[int]] = {v: set() for v in var_ids}
    if len(var_ids) < 2:
        return adjacency

    encoding = SliceEncoding(data_slice.dataset.schema, data_slice.var_ids, data_slice.matrix())
    # co-occurrence counts of every discrete value pair over pairwise-complete rows
    cooc = encoding.onehot.T @ encoding.onehot
    discrete_index = {var_ids[p]: d for d, p in enumerate(encoding.discrete_pos)}

    for i, u in enumerate(var_ids):
        for v in var_ids[i + 1:]:
            table: np.ndarray | None
            if u in discrete_index and v in discrete_index:
                du, dv = discrete_index[u], discrete_index[v]
                block = cooc[
                    encoding.offsets[du]:encoding.offsets[du + 1],
                    encoding.offsets[dv]:encoding.offsets[dv + 1],
                ]
                n_complete = block.sum()
                table = block if n_complete >= min_overlap and n_complete > 0 else None
            else:
                table = _mixed_pair_table(data_slice, u, v, min_overlap)
            if table is None:
                continue
            if pairwise_g_test(table).p < alpha:
                adjacency[u].add(v)
                adjacency[v].add(u)
    return adjacency


class UnionFind:
    """Disjoint sets with path compression and union by size."""

    def __init__(self, elements: Iterable[int]):
        self.parent = {e: e for e in elements}
        self.size = dict.fromkeys(self.parent, 1)

    def find(self, element: int) -> int:
        root = element
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[element] != root:
            self.parent[element], element = root, self.parent[element]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]

    def groups(self) -> list[list[int]]:
        found: dict[int, list[int]] = {}
        for element in self.parent:
            found.setdefault(self.find(element), []).append(element)
        return sorted((sorted(g) for g in found.values()), key=lambda g: g[0])


def connected_components(adjacency: Mapping[int, Iterable[int]]) -> list[list[int]]:
    """Undirected components, sorted by smallest member, members ascending."""
    vertices = set(adjacency)
    for neighbours in adjacency.values():
        vertices.update(neighbours)
    forest = UnionFind(sorted(vertices))
    for u, neighbours in adjacency.items():
        for v in neighbours:
            forest.union(u, v)
    return forest.groups()
