"""
MiniSPN structure learner.

Each slice first tries a two-cluster instance split fit by hard EM, kept only
when the mixture scores strictly higher than a single factorized model on the
validation rows routed to the slice. When clustering fails, the slice's
variables are partitioned into the connected components of the pairwise
dependency graph. Slices that are too small, single-variable, or that cannot
be split either way become factorized leaves.

The recursion runs on an explicit work stack, so learned trees are not bounded
by the interpreter's recursion limit.
"""

from __future__ import annotations

import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from data import DataFormatError, Dataset, DataSlice
from factorized import FactorizedParams, SliceEncoding, emit_factorized, variance_floors
from independence import connected_components, independence_graph
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from rich.console import Console
from scipy.special import logsumexp
from spn_core import Spn, SpnBuilder

console = Console(stderr=True)


class LearningTimeout(RuntimeError):
    """A learner passed its deadline; raised between slices / expansions."""


class LearnConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    min_instances: int = Field(30, ge=1, description="Row count below which a slice becomes factorized leaves")
    alpha: float = Field(0.05, gt=0.0, lt=1.0, description="G-test significance level")
    min_overlap: int = Field(
        30, ge=1, description="Pairwise-complete row count below which a pair is declared independent"
    )
    em_max_iters: int = Field(100, ge=1, description="Hard-EM iteration cap")
    laplace: float = Field(0.1, gt=0.0, description="Categorical and mixing-weight pseudo-count")
    variance_floor: float = Field(
        1e-6, gt=0.0, description="Gaussian variance floor, scaled by the squared data range"
    )
    seed: int = Field(0, ge=0, description="Seed of the hard-EM initialisation stream")


@dataclass(frozen=True)
class SliceContext:
    """Training rows of a subproblem plus the validation rows routed to it."""

    train: DataSlice
    valid: DataSlice

    def __post_init__(self) -> None:
        if not np.array_equal(self.train.var_ids, self.valid.var_ids):
            raise ValueError("train and valid slices must cover the same variables")

    @classmethod
    def root(cls, train: Dataset, valid: Dataset) -> SliceContext:
        return cls(DataSlice.full(train), DataSlice.full(valid))

    def cluster(self, k: int, train_assignments: NDArray[np.int64], valid_assignments: NDArray[np.int64]) -> SliceContext:
        return SliceContext(
            self.train.slice(local_rows=np.flatnonzero(train_assignments == k)),
            self.valid.slice(local_rows=np.flatnonzero(valid_assignments == k)),
        )

    def project(self, var_ids: list[int]) -> SliceContext:
        return SliceContext(self.train.with_vars(var_ids), self.valid.with_vars(var_ids))


def _encode(data_slice: DataSlice) -> SliceEncoding:
    return SliceEncoding(data_slice.dataset.schema, data_slice.var_ids, data_slice.matrix())


def _floors(data_slice: DataSlice, config: LearnConfig, floors: NDArray[np.float64] | None) -> NDArray[np.float64]:
    return variance_floors(data_slice.dataset, config.variance_floor) if floors is None else floors


def _mixing_log_weights(sizes: NDArray[np.int64], laplace: float) -> NDArray[np.float64]:
    return np.log((sizes + laplace) / (sizes.sum() + laplace * sizes.size))


def fit_factorized(
    data_slice: DataSlice,
    config: LearnConfig,
    builder: SpnBuilder,
    floors: NDArray[np.float64] | None = None,
) -> int:
    """Append smoothed leaves for the slice's variables; returns the Product (or single leaf) id."""
    if data_slice.n_vars == 0:
        raise ValueError("cannot factorize a slice without variables")
    params = _encode(data_slice).fit(config.laplace, _floors(data_slice, config, floors))
    return emit_factorized(builder, params, data_slice.dataset.schema)


def dependency_graph(data_slice: DataSlice, config: LearnConfig) -> dict[int, set[int]]:
    return independence_graph(data_slice, config.min_overlap, config.alpha)


# --- Hard EM ---


@dataclass(frozen=True)
class HardEMResult:
    """
    Outcome of one two-cluster hard-EM run.

    `assignments` is None when an iteration emptied a cluster (degenerate).
    `objective_trace[t]` is the smoothed complete-data objective after the
    M-step of iteration t + 1.
    """

    assignments: NDArray[np.int64] | None
    iterations: int
    converged: bool
    objective_trace: tuple[float, ...]

    @property
    def degenerate(self) -> bool:
        return self.assignments is None


def hard_em_two_clusters(
    data_slice: DataSlice,
    config: LearnConfig,
    rng: np.random.Generator,
    floors: NDArray[np.float64] | None = None,
    encoding: SliceEncoding | None = None,
) -> HardEMResult:
    n = data_slice.n_rows
    if n < 2:
        raise ValueError("hard EM needs at least 2 rows")
    encoding = encoding or _encode(data_slice)
    floors = _floors(data_slice, config, floors)
    laplace = config.laplace

    assignments = rng.integers(0, 2, size=n).astype(np.int64)
    for k in (0, 1):
        if not np.any(assignments == k):
            assignments[rng.integers(n)] = k

    trace: list[float] = []
    rows = np.arange(n)
    for iteration in range(1, config.em_max_iters + 1):
        log_w = _mixing_log_weights(np.bincount(assignments, minlength=2), laplace)
        params = [encoding.fit(laplace, floors, rows=assignments == k) for k in (0, 1)]
        scores = _mixture_scores(encoding, params, log_w)
        prior = laplace * float(log_w.sum()) + sum(p.log_prior(laplace) for p in params)
        trace.append(float(scores[rows, assignments].sum()) + prior)

        updated = (scores[:, 1] > scores[:, 0]).astype(np.int64)
        if not updated.any() or updated.all():
            return HardEMResult(None, iteration, False, tuple(trace))
        if np.array_equal(updated, assignments):
            return HardEMResult(assignments, iteration, True, tuple(trace))
        assignments = updated
    return HardEMResult(assignments, config.em_max_iters, False, tuple(trace))


# --- Instance split ---


@dataclass(frozen=True)
class SplitDecision:
    accepted: bool
    reason: str
    assignments: NDArray[np.int64] | None = None
    valid_assignments: NDArray[np.int64] | None = None
    log_weights: tuple[float, float] | None = None
    single_valid_ll: float | None = None
    mixture_valid_ll: float | None = None


def _mixture_scores(
    encoding: SliceEncoding, params: list[FactorizedParams], log_w: NDArray[np.float64]
) -> NDArray[np.float64]:
    return np.column_stack([encoding.log_likelihood(p) + log_w[k] for k, p in enumerate(params)])


def try_instance_split(
    ctx: SliceContext,
    config: LearnConfig,
    rng: np.random.Generator,
    floors: NDArray[np.float64] | None = None,
) -> SplitDecision:
    """Accept a two-cluster split iff its validation LL strictly beats the factorized model's."""
    if ctx.valid.n_rows == 0:
        return SplitDecision(False, "no validation rows")
    if ctx.train.n_rows < 2:
        return SplitDecision(False, "fewer than 2 training rows")

    floors = _floors(ctx.train, config, floors)
    train_enc = _encode(ctx.train)
    em = hard_em_two_clusters(ctx.train, config, rng, floors=floors, encoding=train_enc)
    if em.assignments is None:
        return SplitDecision(False, f"degenerate clustering after {em.iterations} iterations")

    valid_enc = _encode(ctx.valid)
    single = train_enc.fit(config.laplace, floors)
    single_ll = float(valid_enc.log_likelihood(single).sum())

    log_w = _mixing_log_weights(np.bincount(em.assignments, minlength=2), config.laplace)
    params = [train_enc.fit(config.laplace, floors, rows=em.assignments == k) for k in (0, 1)]
    scores = _mixture_scores(valid_enc, params, log_w)
    mixture_ll = float(logsumexp(scores, axis=1).sum())

    accepted = mixture_ll > single_ll
    return SplitDecision(
        accepted,
        "mixture improves validation LL" if accepted else "no validation improvement",
        assignments=em.assignments,
        valid_assignments=(scores[:, 1] > scores[:, 0]).astype(np.int64),
        log_weights=(float(log_w[0]), float(log_w[1])),
        single_valid_ll=single_ll,
        mixture_valid_ll=mixture_ll,
    )


# --- Decision log ---

DECISION_COLUMNS = (
    "depth",
    "n_train",
    "n_valid",
    "n_vars",
    "attempt",
    "accepted",
    "single_ll",
    "mixture_ll",
    "detail",
)


class Decision(BaseModel):
    model_config = ConfigDict(frozen=True)

    depth: int
    n_train: int
    n_valid: int
    n_vars: int
    attempt: Literal["leaves", "instance", "variable"]
    accepted: bool
    single_ll: float | None = None
    mixture_ll: float | None = None
    detail: str = ""

    @model_validator(mode="after")
    def _detail_is_one_field(self) -> Decision:
        if "\t" in self.detail or "\n" in self.detail:
            raise ValueError("detail must not contain tabs or newlines")
        return self

    @property
    def gate_violated(self) -> bool:
        """An instance decision whose outcome disagrees with its recorded validation LLs."""
        if self.attempt != "instance":
            return False
        if self.single_ll is None or self.mixture_ll is None:
            return self.accepted
        return self.accepted != (self.mixture_ll > self.single_ll)


def _cell(value: float | None) -> str:
    return "-" if value is None else repr(value)


@dataclass
class DecisionLog:
    """One record per split attempt, written as tab-separated text."""

    records: list[Decision] = field(default_factory=list)

    def record(self, ctx: SliceContext, depth: int, attempt: str, accepted: bool, **extra: object) -> None:
        self.records.append(
            Decision(
                depth=depth,
                n_train=ctx.train.n_rows,
                n_valid=ctx.valid.n_rows,
                n_vars=ctx.train.n_vars,
                attempt=attempt,  # type: ignore[arg-type]
                accepted=accepted,
                **extra,  # type: ignore[arg-type]
            )
        )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Decision]:
        return iter(self.records)

    def to_tsv(self) -> str:
        lines = ["\t".join(DECISION_COLUMNS)]
        for d in self.records:
            lines.append(
                "\t".join(
                    [
                        str(d.depth),
                        str(d.n_train),
                        str(d.n_valid),
                        str(d.n_vars),
                        d.attempt,
                        "1" if d.accepted else "0",
                        _cell(d.single_ll),
                        _cell(d.mixture_ll),
                        d.detail,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


def read_decision_log(path: str | Path) -> list[Decision]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != DECISION_COLUMNS:
        raise DataFormatError("not a decision log (bad header)", str(path), 1)
    decisions = []
    for line_no, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(DECISION_COLUMNS):
            raise DataFormatError(f"expected {len(DECISION_COLUMNS)} fields, got {len(cells)}", str(path), line_no)
        try:
            decisions.append(
                Decision(
                    depth=int(cells[0]),
                    n_train=int(cells[1]),
                    n_valid=int(cells[2]),
                    n_vars=int(cells[3]),
                    attempt=cells[4],  # type: ignore[arg-type]
                    accepted=cells[5] == "1",
                    single_ll=None if cells[6] == "-" else float(cells[6]),
                    mixture_ll=None if cells[7] == "-" else float(cells[7]),
                    detail=cells[8],
                )
            )
        except ValueError as e:
            raise DataFormatError(f"bad decision record: {e}", str(path), line_no) from None
    return decisions


def replay_decision_log(path: str | Path) -> list[Decision]:
    """Instance-split records whose accept/reject outcome contradicts their validation LLs."""
    return [d for d in read_decision_log(path) if d.gate_violated]


# --- Learner ---


@dataclass
class _Frame:
    kind: Literal["expand", "sum", "prod"]
    task: int
    ctx: SliceContext | None = None
    depth: int = 0
    children: list[int] = field(default_factory=list)
    log_weights: tuple[float, ...] = ()


def learn(
    train: Dataset,
    valid: Dataset,
    config: LearnConfig,
    decision_log: DecisionLog | None = None,
    deadline: float | None = None,
) -> Spn:
    """
    Learn a tree-structured SPN over the full schema of `train`.

    `deadline` is a `time.monotonic()` instant; passing it raises LearningTimeout.
    """
    if not train.same_schema(valid):
        raise ValueError("train and valid datasets have different schemas")
    if train.n_rows == 0:
        raise ValueError("training data is empty")

    started = time.monotonic()
    console.print(
        f"[dim]minispn: {train.n_rows} train / {valid.n_rows} valid rows, {train.n_vars} vars[/dim]"
    )
    rng = np.random.default_rng(config.seed)
    floors = variance_floors(train, config.variance_floor)
    builder = SpnBuilder(train.schema)
    log = decision_log if decision_log is not None else DecisionLog()

    built: dict[int, int] = {}
    stack = [_Frame("expand", 0, SliceContext.root(train, valid))]
    next_task = 1
    n_slices = 0

    while stack:
        frame = stack.pop()
        if frame.kind == "sum":
            built[frame.task] = builder.add_sum(
                [built[c] for c in frame.children], log_weights=frame.log_weights
            )
            continue
        if frame.kind == "prod":
            built[frame.task] = builder.add_product([built[c] for c in frame.children])
            continue

        if deadline is not None and time.monotonic() > deadline:
            raise LearningTimeout(f"minispn passed its deadline after {n_slices} slices")
        n_slices += 1
        ctx = frame.ctx
        assert ctx is not None

        if ctx.train.n_rows < config.min_instances or ctx.train.n_vars == 1:
            detail = "single variable" if ctx.train.n_vars == 1 else "too few instances"
            log.record(ctx, frame.depth, "leaves", True, detail=detail)
            built[frame.task] = fit_factorized(ctx.train, config, builder, floors)
            continue

        split = try_instance_split(ctx, config, rng, floors)
        log.record(
            ctx,
            frame.depth,
            "instance",
            split.accepted,
            single_ll=split.single_valid_ll,
            mixture_ll=split.mixture_valid_ll,
            detail=split.reason,
        )
        if split.accepted:
            assert split.assignments is not None and split.valid_assignments is not None
            assert split.log_weights is not None
            children = [next_task, next_task + 1]
            next_task += 2
            stack.append(_Frame("sum", frame.task, children=children, log_weights=split.log_weights))
            for k in (1, 0):
                child_ctx = ctx.cluster(k, split.assignments, split.valid_assignments)
                stack.append(_Frame("expand", children[k], child_ctx, frame.depth + 1))
            continue

        groups = connected_components(dependency_graph(ctx.train, config))
        if len(groups) >= 2:
            log.record(ctx, frame.depth, "variable", True, detail=f"{len(groups)} components")
            children = list(range(next_task, next_task + len(groups)))
            next_task += len(groups)
            stack.append(_Frame("prod", frame.task, children=children))
            for child, group in reversed(list(zip(children, groups))):
                stack.append(_Frame("expand", child, ctx.project(group), frame.depth + 1))
            continue

        log.record(ctx, frame.depth, "variable", False, detail="single component")
        built[frame.task] = fit_factorized(ctx.train, config, builder, floors)

    spn = builder.build(built[0])
    console.print(
        f"[dim]minispn: {spn.n_nodes} nodes from {n_slices} slices "
        f"in {time.monotonic() - started:.2f}s[/dim]"
    )
    return spn


def factorized_baseline(train: Dataset, config: LearnConfig) -> Spn:
    """Fully factorized model over all of `train`, the reference every learned model must beat."""
    builder = SpnBuilder(train.schema)
    root = fit_factorized(DataSlice.full(train), config, builder)
    return builder.build(root)
