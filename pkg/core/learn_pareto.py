"""
Pareto baseline learner and its MiniSPN-initialised Hybrid variant.

A set of mutually non-dominated models (fewer degrees of freedom vs higher
mean validation log-likelihood) is grown by randomly applying two production
rules to factorized nodes of its members:

    partition  factorized node -> Product of two factorized fits over a random
               bipartition of its scope
    mixture    factorized node -> 2-component Sum of factorized fits over a
               random bipartition of the training rows routed to it

The model with the highest validation log-likelihood is returned.
"""

from __future__ import annotations

import time
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from data import Dataset, DataSlice
from factorized import SliceEncoding, emit_factorized, variance_floors
from learn_minispn import DecisionLog, LearnConfig, LearningTimeout, factorized_baseline, fit_factorized, learn
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from rich.console import Console
from spn_core import (
    LeafNode,
    ProductNode,
    Spn,
    SpnBuilder,
    SumNode,
    mean_log_likelihood,
    node_log_likelihoods,
    num_free_parameters,
    rebuild,
    scope_of,
)

console = Console(stderr=True)

RULES = ("partition", "mixture")


class ParetoConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(50, ge=0, description="Search iterations")
    expansions_per_iteration: int = Field(10, ge=1, description="Rule applications per iteration")
    seed: int = Field(0, ge=0, description="Root of the per-iteration / per-expansion seed streams")
    refit_after_rule: bool = Field(True, description="Refit every leaf on its routed rows after a rule")
    laplace: float = Field(0.1, gt=0.0, description="Categorical and mixing-weight pseudo-count")
    variance_floor: float = Field(
        1e-6, gt=0.0, description="Gaussian variance floor, scaled by the squared data range"
    )

    def leaf_config(self) -> LearnConfig:
        return LearnConfig(laplace=self.laplace, variance_floor=self.variance_floor, seed=self.seed)


@dataclass(frozen=True)
class CandidateModel:
    spn: Spn
    dof: int
    valid_ll: float

    @classmethod
    def of(cls, spn: Spn, valid: Dataset) -> CandidateModel:
        return cls(spn, num_free_parameters(spn), mean_log_likelihood(spn, valid))


def dominates(a: CandidateModel, b: CandidateModel) -> bool:
    """a is no worse on both objectives and strictly better on one."""
    no_worse = a.dof <= b.dof and a.valid_ll >= b.valid_ll
    return no_worse and (a.dof < b.dof or a.valid_ll > b.valid_ll)


@dataclass
class ParetoSet:
    """Antichain of candidates, kept in insertion order."""

    models: list[CandidateModel] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.models)

    def __iter__(self) -> Iterator[CandidateModel]:
        return iter(self.models)

    def is_antichain(self) -> bool:
        return not any(dominates(a, b) for a in self.models for b in self.models if a is not b)

    def best(self) -> CandidateModel:
        """Highest valid_ll; ties go to lower dof, then to the earlier insertion."""
        if not self.models:
            raise ValueError("empty model set")
        return max(
            enumerate(self.models), key=lambda item: (item[1].valid_ll, -item[1].dof, -item[0])
        )[1]


def pareto_insert(models: ParetoSet, m: CandidateModel) -> ParetoSet:
    if any(member is m or dominates(member, m) for member in models):
        return models
    return ParetoSet([member for member in models if not dominates(m, member)] + [m])


# --- Routing and refitting ---


def route_rows(spn: Spn, matrix: NDArray[np.float64]) -> dict[int, NDArray[np.int64]]:
    """
    Hard routing of rows to nodes: Products pass rows to every child, Sums to
    the child with the highest log-weight + value (first child on ties).
    """
    values = node_log_likelihoods(spn, matrix)
    routed: dict[int, NDArray[np.int64]] = {spn.root: np.arange(matrix.shape[0])}
    for node_id in reversed(spn.order):
        rows = routed.get(node_id)
        if rows is None:
            continue
        node = spn.nodes[node_id]
        if isinstance(node, ProductNode):
            for child in node.children:
                routed[child] = rows
        elif isinstance(node, SumNode):
            scores = np.vstack([values[c][rows] + lw for c, lw in zip(node.children, node.log_weights)])
            winner = np.argmax(scores, axis=0) if rows.size else np.zeros(0, dtype=np.int64)
            for k, child in enumerate(node.children):
                routed[child] = rows[winner == k]
    return routed


def _fit_leaves(
    builder: SpnBuilder,
    train: Dataset,
    rows: NDArray[np.int64],
    var_ids: Sequence[int],
    config: ParetoConfig,
    floors: NDArray[np.float64],
) -> int:
    return fit_factorized(DataSlice(train, rows, list(var_ids)), config.leaf_config(), builder, floors)


def refit_leaves(spn: Spn, train: Dataset, config: ParetoConfig, floors: NDArray[np.float64]) -> Spn:
    """Refit every leaf on the training rows routed to it; structure and Sum weights are kept."""
    routed = route_rows(spn, train.values)
    replacements: dict[int, Callable[[SpnBuilder], int]] = {}
    for node_id in spn.order:
        node = spn.nodes[node_id]
        if not isinstance(node, LeafNode):
            continue
        rows = routed.get(node_id, np.zeros(0, dtype=np.int64))
        encoding = SliceEncoding.of(train, rows, np.asarray([node.var]))
        params = encoding.fit(config.laplace, floors)
        replacements[node_id] = lambda b, p=params: emit_factorized(b, p, train.schema)
    return rebuild(spn, replacements)


def factorized_nodes(spn: Spn) -> list[int]:
    """Leaves and Products whose children are all leaves, in post-order."""
    found = []
    for node_id in spn.order:
        node = spn.nodes[node_id]
        if isinstance(node, LeafNode):
            found.append(node_id)
        elif isinstance(node, ProductNode) and all(
            isinstance(spn.nodes[c], LeafNode) for c in node.children
        ):
            found.append(node_id)
    return found


# --- Production rules ---


def apply_production(
    m: CandidateModel,
    train: Dataset,
    valid: Dataset,
    rng: np.random.Generator,
    config: ParetoConfig,
    floors: NDArray[np.float64] | None = None,
) -> CandidateModel:
    """Apply one random rule at one random factorized node; inapplicable rules return `m`."""
    spn = m.spn
    eligible = factorized_nodes(spn)
    if not eligible:
        return m
    scale = variance_floors(train, config.variance_floor) if floors is None else floors
    node_id = eligible[int(rng.integers(len(eligible)))]
    rule = RULES[int(rng.integers(len(RULES)))]
    scope = sorted(scope_of(spn, node_id))
    rows = route_rows(spn, train.values).get(node_id, np.zeros(0, dtype=np.int64))

    if rule == "partition":
        if len(scope) < 2:
            return m
        shuffled = rng.permutation(scope)
        cut = int(rng.integers(1, len(scope)))
        left, right = sorted(shuffled[:cut].tolist()), sorted(shuffled[cut:].tolist())

        def replace(b: SpnBuilder) -> int:
            return b.add_product([_fit_leaves(b, train, rows, side, config, scale) for side in (left, right)])

    else:
        if rows.size < 2:
            return m
        shuffled_rows = rng.permutation(rows)
        cut = int(rng.integers(1, rows.size))
        halves = [np.sort(shuffled_rows[:cut]), np.sort(shuffled_rows[cut:])]
        sizes = np.asarray([h.size for h in halves], dtype=np.float64)
        weights = (sizes + config.laplace) / (sizes.sum() + 2 * config.laplace)

        def replace(b: SpnBuilder) -> int:
            components = [_fit_leaves(b, train, h, scope, config, scale) for h in halves]
            return b.add_sum(components, weights=weights.tolist())

    expanded = rebuild(spn, {node_id: replace})
    if config.refit_after_rule:
        expanded = refit_leaves(expanded, train, config, scale)
    return CandidateModel.of(expanded, valid)


# --- Search ---


@dataclass
class FrontTrace:
    """(iteration, dof, valid_ll) of every set member after each iteration."""

    rows: list[tuple[int, int, float]] = field(default_factory=list)

    def record(self, iteration: int, models: ParetoSet) -> None:
        self.rows.extend((iteration, m.dof, m.valid_ll) for m in models)

    def to_tsv(self) -> str:
        lines = ["iteration\tdof\tvalid_ll"] + [f"{i}\t{d}\t{ll!r}" for i, d, ll in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def search_front(
    train: Dataset,
    valid: Dataset,
    config: ParetoConfig,
    init: Spn | None = None,
    trace: FrontTrace | None = None,
    deadline: float | None = None,
) -> ParetoSet:
    if not train.same_schema(valid):
        raise ValueError("train and valid datasets have different schemas")
    if train.n_rows == 0:
        raise ValueError("training data is empty")
    if valid.n_rows == 0:
        raise ValueError("validation data is empty")

    floors = variance_floors(train, config.variance_floor)
    models = ParetoSet([CandidateModel.of(factorized_baseline(train, config.leaf_config()), valid)])
    if init is not None:
        models = pareto_insert(models, CandidateModel.of(init, valid))
    if trace is not None:
        trace.record(0, models)

    for i in range(1, config.iterations + 1):
        members = list(models)
        picks = np.random.default_rng(np.random.SeedSequence([config.seed, i])).integers(
            len(members), size=config.expansions_per_iteration
        )
        children = []
        for j, pick in enumerate(picks.tolist()):
            if deadline is not None and time.monotonic() > deadline:
                raise LearningTimeout(f"pareto passed its deadline in iteration {i}")
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, i, j]))
            children.append(apply_production(members[pick], train, valid, rng, config, floors))
        for child in children:
            models = pareto_insert(models, child)
        if trace is not None:
            trace.record(i, models)
    return models


def pareto_search(
    train: Dataset,
    valid: Dataset,
    config: ParetoConfig,
    init: Spn | None = None,
    trace: FrontTrace | None = None,
    deadline: float | None = None,
) -> Spn:
    """Random production-rule search; returns the front member with the best validation LL."""
    started = time.monotonic()
    label = "hybrid" if init is not None else "pareto"
    console.print(f"[dim]{label}: {config.iterations} iterations x {config.expansions_per_iteration} expansions[/dim]")
    models = search_front(train, valid, config, init, trace, deadline)
    best = models.best()
    console.print(
        f"[dim]{label}: front of {len(models)}, best dof {best.dof} valid_ll {best.valid_ll:.4f} "
        f"in {time.monotonic() - started:.2f}s[/dim]"
    )
    return best.spn


def hybrid(
    train: Dataset,
    valid: Dataset,
    learn_config: LearnConfig,
    config: ParetoConfig,
    trace: FrontTrace | None = None,
    deadline: float | None = None,
    decision_log: DecisionLog | None = None,
) -> Spn:
    """Pareto search whose initial set also holds the MiniSPN model."""
    init = learn(train, valid, learn_config, decision_log=decision_log, deadline=deadline)
    return pareto_search(train, valid, config, init=init, trace=trace, deadline=deadline)
