"""
MiniSPN Core

Sum-Product Networks stored as an arena of nodes addressed by integer NodeId.

Children are stored as id tuples and every builder-made arena lists children
before their parents, so bottom-up evaluation is a single pass over a
topological order. All densities are kept in log space: Sum nodes combine their
children with a max-shifted log-sum-exp, Product nodes add, and a Leaf over a
Missing cell contributes log 1 = 0 (exact marginalisation).

An Spn is immutable after construction. Evaluation, sampling with a
caller-owned generator and parameter counting are pure reads.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from functools import cached_property
from typing import Annotated, Literal, Union

import numpy as np
from data import ColumnMeta, Dataset
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import logsumexp
from scipy.stats import norm

NORMALIZATION_TOL = 1e-9


class UnknownNodeError(KeyError):
    """A NodeId that does not exist in the arena."""


class RowFormatError(ValueError):
    """A row that does not fit the model's schema."""


# --- Node types ---


class CategoricalDist(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["cat"] = "cat"
    log_probs: tuple[float, ...] = Field(..., description="Log-probability of each value")

    @property
    def arity(self) -> int:
        return len(self.log_probs)


class GaussianDist(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["gauss"] = "gauss"
    mean: float
    variance: float


LeafDistribution = Annotated[Union[CategoricalDist, GaussianDist], Field(discriminator="kind")]


class LeafNode(BaseModel):
    """Univariate distribution over one variable."""

    model_config = ConfigDict(frozen=True)

    type: Literal["leaf"] = "leaf"
    var: int = Field(..., description="Column index of the variable")
    dist: LeafDistribution


class ProductNode(BaseModel):
    """Partition over variables: children have disjoint scopes."""

    model_config = ConfigDict(frozen=True)

    type: Literal["prod"] = "prod"
    children: tuple[int, ...]


class SumNode(BaseModel):
    """Mixture over instances: children share one scope."""

    model_config = ConfigDict(frozen=True)

    type: Literal["sum"] = "sum"
    children: tuple[int, ...]
    log_weights: tuple[float, ...]


SpnNode = Union[LeafNode, ProductNode, SumNode]


class Spn:
    """Arena of nodes with a root and the schema of the modelled variables."""

    def __init__(self, nodes: Sequence[SpnNode], root: int, schema: Sequence[ColumnMeta]):
        self.nodes: tuple[SpnNode, ...] = tuple(nodes)
        self.root = root
        self.schema: tuple[ColumnMeta, ...] = tuple(schema)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_vars(self) -> int:
        return len(self.schema)

    def node(self, node_id: int) -> SpnNode:
        if not 0 <= node_id < len(self.nodes):
            raise UnknownNodeError(node_id)
        return self.nodes[node_id]

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Post-order (children first) of the nodes reachable from the root."""
        return tuple(_post_order(self, self.root))

    @cached_property
    def _scopes(self) -> dict[int, frozenset[int]]:
        scopes: dict[int, frozenset[int]] = {}
        for node_id in self.order:
            node = self.nodes[node_id]
            if isinstance(node, LeafNode):
                scopes[node_id] = frozenset((node.var,))
            elif isinstance(node, ProductNode):
                scopes[node_id] = frozenset().union(*(scopes[c] for c in node.children))
            else:
                scopes[node_id] = scopes[node.children[0]]
        return scopes

    @property
    def leaf_vars(self) -> frozenset[int]:
        """Variables modelled by at least one reachable leaf."""
        return frozenset(n.var for i in self.order if isinstance(n := self.nodes[i], LeafNode))

    @property
    def depth(self) -> int:
        depths: dict[int, int] = {}
        for node_id in self.order:
            node = self.nodes[node_id]
            children = () if isinstance(node, LeafNode) else node.children
            depths[node_id] = 1 + max((depths[c] for c in children), default=0)
        return depths[self.root]

    def __repr__(self) -> str:
        return f"Spn(n_nodes={self.n_nodes}, n_vars={self.n_vars}, root={self.root})"


def _children(node: SpnNode) -> tuple[int, ...]:
    return () if isinstance(node, LeafNode) else node.children


def _post_order(spn: Spn, start: int, stop_at: Iterable[int] = ()) -> list[int]:
    """Iterative DFS post-order; nodes in `stop_at` are emitted without descending."""
    spn.node(start)
    stop = set(stop_at)
    order: list[int] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[int, int]] = [(start, 0)]
    while stack:
        node_id, child_pos = stack.pop()
        if child_pos == 0:
            if state.get(node_id) == 2:
                continue
            state[node_id] = 1
        children = () if node_id in stop else _children(spn.node(node_id))
        if child_pos < len(children):
            stack.append((node_id, child_pos + 1))
            child = children[child_pos]
            if state.get(child) == 1:
                raise ValueError(f"cycle through node {child}")
            if state.get(child) != 2:
                stack.append((child, 0))
        else:
            state[node_id] = 2
            order.append(node_id)
    return order


def scope_of(spn: Spn, node_id: int) -> frozenset[int]:
    """Variables below a node: Leaf {var}, Product union, Sum scope of its first child."""
    spn.node(node_id)
    scopes = spn._scopes
    if node_id not in scopes:
        # unreachable from the root: compute from its own subtree
        sub = Spn(spn.nodes, node_id, spn.schema)
        return sub._scopes[node_id]
    return scopes[node_id]


# --- Construction ---


class SpnBuilder:
    """Append-only arena construction; children must already exist."""

    def __init__(self, schema: Sequence[ColumnMeta]):
        self.schema = tuple(schema)
        self._nodes: list[SpnNode] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _check_children(self, children: Sequence[int]) -> tuple[int, ...]:
        ids = tuple(int(c) for c in children)
        for c in ids:
            if not 0 <= c < len(self._nodes):
                raise UnknownNodeError(c)
        return ids

    def add_node(self, node: SpnNode) -> int:
        self._check_children(_children(node))
        self._nodes.append(node)
        return len(self._nodes) - 1

    def add_categorical(self, var: int, probs: Sequence[float]) -> int:
        with np.errstate(divide="ignore"):
            log_probs = np.log(np.asarray(probs, dtype=np.float64))
        return self.add_categorical_log(var, log_probs.tolist())

    def add_categorical_log(self, var: int, log_probs: Sequence[float]) -> int:
        return self.add_node(LeafNode(var=var, dist=CategoricalDist(log_probs=tuple(log_probs))))

    def add_gaussian(self, var: int, mean: float, variance: float) -> int:
        return self.add_node(LeafNode(var=var, dist=GaussianDist(mean=mean, variance=variance)))

    def add_product(self, children: Sequence[int]) -> int:
        return self.add_node(ProductNode(children=self._check_children(children)))

    def add_sum(
        self,
        children: Sequence[int],
        weights: Sequence[float] | None = None,
        log_weights: Sequence[float] | None = None,
    ) -> int:
        if (weights is None) == (log_weights is None):
            raise ValueError("pass exactly one of weights / log_weights")
        if log_weights is None:
            assert weights is not None
            with np.errstate(divide="ignore"):
                log_weights = np.log(np.asarray(weights, dtype=np.float64)).tolist()
        return self.add_node(
            SumNode(children=self._check_children(children), log_weights=tuple(float(w) for w in log_weights))
        )

    def build(self, root: int | None = None) -> Spn:
        if not self._nodes:
            raise ValueError("empty arena")
        return Spn(self._nodes, len(self._nodes) - 1 if root is None else root, self.schema)


def rebuild(spn: Spn, replacements: Mapping[int, Callable[[SpnBuilder], int]]) -> Spn:
    """
    Copy the reachable part of `spn` into a fresh arena, building the subtree
    returned by `replacements[node_id](builder)` in place of each listed node.
    """
    builder = SpnBuilder(spn.schema)
    mapping: dict[int, int] = {}
    for node_id in _post_order(spn, spn.root, stop_at=replacements.keys()):
        if node_id in replacements:
            mapping[node_id] = replacements[node_id](builder)
            continue
        node = spn.nodes[node_id]
        if isinstance(node, LeafNode):
            mapping[node_id] = builder.add_node(node)
        elif isinstance(node, ProductNode):
            mapping[node_id] = builder.add_product([mapping[c] for c in node.children])
        else:
            mapping[node_id] = builder.add_sum(
                [mapping[c] for c in node.children], log_weights=node.log_weights
            )
    return builder.build(mapping[spn.root])


# --- Validation ---


class Violation(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: str = Field(..., description="Violated invariant, e.g. 'completeness'")
    node_id: int | None = Field(default=None, description="Offending node, if any")
    message: str

    def __str__(self) -> str:
        where = f"node {self.node_id}: " if self.node_id is not None else ""
        return f"{self.kind}: {where}{self.message}"


class ValidationReport(BaseModel):
    violations: list[Violation] = Field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def kinds(self) -> list[str]:
        return [v.kind for v in self.violations]

    def __len__(self) -> int:
        return len(self.violations)


def _check_leaf(spn: Spn, node_id: int, node: LeafNode) -> list[Violation]:
    found: list[Violation] = []
    if not 0 <= node.var < spn.n_vars:
        return [Violation(kind="leaf_var", node_id=node_id, message=f"variable {node.var} not in schema")]
    column = spn.schema[node.var]
    dist = node.dist
    if isinstance(dist, CategoricalDist):
        if not column.is_discrete:
            found.append(Violation(kind="leaf_kind", node_id=node_id, message="categorical leaf on a continuous column"))
        elif dist.arity != column.arity:
            found.append(
                Violation(kind="leaf_categorical", node_id=node_id, message=f"arity {dist.arity} != column arity {column.arity}")
            )
        if dist.arity < 2:
            found.append(Violation(kind="leaf_categorical", node_id=node_id, message="arity below 2"))
        if not all(math.isfinite(lp) for lp in dist.log_probs):
            found.append(Violation(kind="leaf_categorical", node_id=node_id, message="non-finite log-probability"))
        else:
            total = float(np.exp(np.asarray(dist.log_probs)).sum())
            if abs(total - 1.0) > NORMALIZATION_TOL:
                found.append(
                    Violation(kind="normalization", node_id=node_id, message=f"probabilities sum to {total:.12g}")
                )
    else:
        if column.is_discrete:
            found.append(Violation(kind="leaf_kind", node_id=node_id, message="gaussian leaf on a discrete column"))
        if not (math.isfinite(dist.mean) and math.isfinite(dist.variance) and dist.variance > 0):
            found.append(Violation(kind="leaf_gaussian", node_id=node_id, message="mean/variance out of range"))
    return found


def validate(spn: Spn) -> ValidationReport:
    """Collect every violated structural invariant; never raises."""
    found: list[Violation] = []
    n = spn.n_nodes
    if not 0 <= spn.root < n:
        return ValidationReport(violations=[Violation(kind="root", node_id=spn.root, message="root does not exist")])

    # local structure
    edges_ok = True
    for node_id, node in enumerate(spn.nodes):
        if isinstance(node, LeafNode):
            found.extend(_check_leaf(spn, node_id, node))
            continue
        bad = [c for c in node.children if not 0 <= c < n]
        if bad:
            edges_ok = False
            found.append(Violation(kind="unknown_child", node_id=node_id, message=f"children {bad} do not exist"))
        if len(node.children) < 2:
            kind = "sum_arity" if isinstance(node, SumNode) else "product_arity"
            found.append(Violation(kind=kind, node_id=node_id, message=f"{len(node.children)} children, need >= 2"))
        if isinstance(node, SumNode):
            if len(node.log_weights) != len(node.children):
                found.append(Violation(kind="sum_weights", node_id=node_id, message="weights and children differ in length"))
            total = float(np.exp(np.asarray(node.log_weights, dtype=np.float64)).sum())
            if abs(total - 1.0) > NORMALIZATION_TOL:
                found.append(Violation(kind="normalization", node_id=node_id, message=f"weights sum to {total:.12g}"))
    if not edges_ok:
        return ValidationReport(violations=found)

    # cycles: DFS from every node
    color = [0] * n
    acyclic = True
    for start in range(n):
        if color[start]:
            continue
        stack: list[tuple[int, int]] = [(start, 0)]
        color[start] = 1
        while stack:
            node_id, pos = stack.pop()
            children = _children(spn.nodes[node_id])
            if pos < len(children):
                stack.append((node_id, pos + 1))
                child = children[pos]
                if color[child] == 1:
                    acyclic = False
                    found.append(Violation(kind="cycle", node_id=child, message=f"edge {node_id} -> {child} closes a cycle"))
                elif color[child] == 0:
                    color[child] = 1
                    stack.append((child, 0))
            else:
                color[node_id] = 2
    if not acyclic:
        return ValidationReport(violations=found)

    reachable = set(_post_order(spn, spn.root))
    for node_id in range(n):
        if node_id not in reachable:
            found.append(Violation(kind="unreachable", node_id=node_id, message="not reachable from the root"))

    # scopes as leaf-variable unions
    union: dict[int, frozenset[int]] = {}
    for node_id in _post_order(spn, spn.root):
        node = spn.nodes[node_id]
        if isinstance(node, LeafNode):
            union[node_id] = frozenset((node.var,))
            continue
        child_scopes = [union[c] for c in node.children]
        union[node_id] = frozenset().union(*child_scopes)
        if isinstance(node, SumNode):
            if any(s != child_scopes[0] for s in child_scopes[1:]):
                found.append(Violation(kind="completeness", node_id=node_id, message="children scopes differ"))
        else:
            seen: set[int] = set()
            overlap: set[int] = set()
            for s in child_scopes:
                overlap |= seen & s
                seen |= s
            if overlap:
                found.append(
                    Violation(kind="decomposability", node_id=node_id, message=f"children share variables {sorted(overlap)}")
                )
    if union[spn.root] != frozenset(range(spn.n_vars)):
        missing = sorted(set(range(spn.n_vars)) - union[spn.root])
        found.append(Violation(kind="root_scope", node_id=spn.root, message=f"variables {missing} not covered"))
    return ValidationReport(violations=found)


# --- Inference ---


def as_row_matrix(spn: Spn, rows: Sequence[Sequence[float | None]] | NDArray[np.float64]) -> NDArray[np.float64]:
    """Coerce rows (None or NaN = Missing) to a checked float matrix."""
    if isinstance(rows, np.ndarray):
        matrix = rows.astype(np.float64, copy=False)
    else:
        matrix = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[1] != spn.n_vars:
        width = matrix.shape[-1] if matrix.ndim else 0
        raise RowFormatError(f"row length {width} != {spn.n_vars} model variables")
    for j, column in enumerate(spn.schema):
        if not column.is_discrete:
            continue
        cells = matrix[:, j]
        observed = cells[~np.isnan(cells)]
        if observed.size and (
            np.any(observed != np.floor(observed)) or observed.min() < 0 or observed.max() >= (column.arity or 0)
        ):
            raise RowFormatError(f"variable {column.name!r}: value outside 0..{(column.arity or 0) - 1}")
    return matrix


def _leaf_values(node: LeafNode, matrix: NDArray[np.float64]) -> NDArray[np.float64]:
    cells = matrix[:, node.var]
    observed = ~np.isnan(cells)
    out = np.zeros(cells.shape[0], dtype=np.float64)
    dist = node.dist
    if isinstance(dist, CategoricalDist):
        out[observed] = np.asarray(dist.log_probs)[cells[observed].astype(np.int64)]
    else:
        out[observed] = norm.logpdf(cells[observed], loc=dist.mean, scale=math.sqrt(dist.variance))
    return out


def node_log_likelihoods(
    spn: Spn,
    matrix: NDArray[np.float64],
    on_visit: Callable[[int], None] | None = None,
) -> dict[int, NDArray[np.float64]]:
    """Bottom-up evaluation of every reachable node over all rows of `matrix`."""
    values: dict[int, NDArray[np.float64]] = {}
    for node_id in spn.order:
        if on_visit is not None:
            on_visit(node_id)
        node = spn.nodes[node_id]
        if isinstance(node, LeafNode):
            values[node_id] = _leaf_values(node, matrix)
        elif isinstance(node, ProductNode):
            values[node_id] = np.sum([values[c] for c in node.children], axis=0)
        else:
            stacked = np.vstack([values[c] + lw for c, lw in zip(node.children, node.log_weights)])
            with np.errstate(divide="ignore", invalid="ignore"):
                values[node_id] = logsumexp(stacked, axis=0)
    return values


def log_likelihoods(
    spn: Spn,
    rows: Sequence[Sequence[float | None]] | NDArray[np.float64],
    on_visit: Callable[[int], None] | None = None,
) -> NDArray[np.float64]:
    matrix = as_row_matrix(spn, rows)
    if matrix.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)
    return node_log_likelihoods(spn, matrix, on_visit)[spn.root]


def log_density(spn: Spn, row: Sequence[float | None]) -> float:
    """Exact log-density of one row; Missing cells are marginalised."""
    return float(log_likelihoods(spn, [row])[0])


def mean_log_likelihood(spn: Spn, dataset: Dataset) -> float:
    """Mean per-row log-likelihood, the single definition shared by learners, CLI and bench."""
    if dataset.n_rows == 0:
        raise ValueError("cannot average over an empty dataset")
    return float(np.mean(log_likelihoods(spn, dataset.values)))


# --- Sampling ---


def sample_many(spn: Spn, rng: np.random.Generator, n: int) -> NDArray[np.float64]:
    """Ancestral sampling of `n` fully observed rows; deterministic for a seeded generator."""
    out = np.full((n, spn.n_vars), np.nan, dtype=np.float64)
    routed: dict[int, list[NDArray[np.int64]]] = {spn.root: [np.arange(n)]}
    for node_id in reversed(spn.order):
        parts = routed.pop(node_id, [])
        idx = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        if idx.size == 0:
            continue
        node = spn.nodes[node_id]
        if isinstance(node, ProductNode):
            for child in node.children:
                routed.setdefault(child, []).append(idx)
        elif isinstance(node, SumNode):
            probs = np.exp(np.asarray(node.log_weights))
            choice = rng.choice(len(node.children), size=idx.size, p=probs / probs.sum())
            for k, child in enumerate(node.children):
                routed.setdefault(child, []).append(idx[choice == k])
        else:
            dist = node.dist
            if isinstance(dist, CategoricalDist):
                probs = np.exp(np.asarray(dist.log_probs))
                out[idx, node.var] = rng.choice(dist.arity, size=idx.size, p=probs / probs.sum())
            else:
                out[idx, node.var] = rng.normal(dist.mean, math.sqrt(dist.variance), size=idx.size)
    return out


def sample(spn: Spn, rng: np.random.Generator) -> list[float]:
    return sample_many(spn, rng, 1)[0].tolist()


# --- Parameter counting ---


def num_free_parameters(spn: Spn) -> int:
    """Sum: children - 1; Product: 0; Categorical: arity - 1; Gaussian: 2."""
    total = 0
    for node_id in spn.order:
        node = spn.nodes[node_id]
        if isinstance(node, SumNode):
            total += len(node.children) - 1
        elif isinstance(node, LeafNode):
            total += node.dist.arity - 1 if isinstance(node.dist, CategoricalDist) else 2
    return total

