"""
Benchmark harness: every (dataset, method) cell trains on `<stem>.ts.data`,
selects on `<stem>.valid.data` and reports the mean test log-likelihood on
`<stem>.test.data` together with the learning wall-clock time.

Cells run concurrently with adaptive limiting: the number of cells in flight
is sized from available memory, and a cell waits while memory pressure is high.
Each cell derives its own seed from the run seed and its dataset / method
names, so a row does not depend on scheduling order.
"""

from __future__ import annotations

import asyncio
import os
import time
import zlib
from enum import Enum
from pathlib import Path
from typing import Literal

import numpy as np
import psutil
from data import DataFormatError, Dataset, load_benchmark_triplet
from learn_minispn import DecisionLog, LearnConfig, LearningTimeout, learn
from learn_pareto import FrontTrace, ParetoConfig, hybrid, pareto_search
from pydantic import BaseModel, Field
from rich import box
from rich.console import Console
from rich.table import Table
from spn_core import Spn, mean_log_likelihood, num_free_parameters

console = Console(stderr=True)

TSV_COLUMNS = ("dataset", "method", "test_ll", "runtime_s", "dof", "seed")
MEMORY_PRESSURE_PERCENT = 85
COOL_DOWN_S = 3.0


class Method(str, Enum):
    minispn = "minispn"
    pareto = "pareto"
    hybrid = "hybrid"


METHOD_ORDER = [m.value for m in Method]


def calculate_optimal_concurrency() -> int:
    """
    Number of bench cells allowed in flight at once.

    MINISPN_MAX_CONCURRENT_CELLS overrides the automatic choice ("auto", the
    default, or an integer 1..16). Automatic sizing from available memory:
    below 2 GB -> 1, below 4 GB -> 2, below 8 GB -> 4, else min(8, cpu count).
    """
    env_override = os.getenv("MINISPN_MAX_CONCURRENT_CELLS", "auto")
    if env_override != "auto":
        try:
            override_value = int(env_override)
            if 1 <= override_value <= 16:
                return override_value
            console.print(
                f"[yellow]⚠ Invalid MINISPN_MAX_CONCURRENT_CELLS={override_value}, using auto[/yellow]"
            )
        except ValueError:
            console.print(
                f"[yellow]⚠ Invalid MINISPN_MAX_CONCURRENT_CELLS={env_override}, using auto[/yellow]"
            )

    try:
        available_ram_gb = psutil.virtual_memory().available / (1024**3)
    except Exception as e:
        console.print(f"[yellow]⚠ Could not detect memory, running 1 cell at a time: {e}[/yellow]")
        return 1
    if available_ram_gb < 2:
        console.print(f"[yellow]⚠ Low memory ({available_ram_gb:.1f}GB), running 1 cell at a time[/yellow]")
        return 1
    if available_ram_gb < 4:
        return 2
    if available_ram_gb < 8:
        return 4
    return min(8, os.cpu_count() or 1)


def derive_cell_seed(seed: int, dataset: str, method: str) -> int:
    sequence = np.random.SeedSequence([seed, zlib.crc32(dataset.encode()), zlib.crc32(method.encode())])
    return int(sequence.generate_state(1)[0])


def fit_method(
    method: Method | str,
    train: Dataset,
    valid: Dataset,
    learn_config: LearnConfig,
    pareto_config: ParetoConfig,
    deadline: float | None = None,
    decision_log: DecisionLog | None = None,
    trace: FrontTrace | None = None,
) -> Spn:
    method = Method(method)
    if method is Method.minispn:
        return learn(train, valid, learn_config, decision_log=decision_log, deadline=deadline)
    if method is Method.pareto:
        return pareto_search(train, valid, pareto_config, trace=trace, deadline=deadline)
    return hybrid(
        train, valid, learn_config, pareto_config, trace=trace, deadline=deadline, decision_log=decision_log
    )


# --- Report ---


class BenchRow(BaseModel):
    dataset: str
    method: str
    status: Literal["ok", "TIMEOUT", "ERROR"] = "ok"
    test_ll: float | None = None
    runtime_s: float = Field(0.0, ge=0.0)
    dof: int | None = None
    seed: int
    error: str = ""

    def cells(self) -> list[str]:
        """Formatted values shared by the rendered table and the TSV."""
        return [
            self.dataset,
            self.method,
            f"{self.test_ll:.4f}" if self.status == "ok" and self.test_ll is not None else self.status,
            f"{self.runtime_s:.2f}",
            "-" if self.dof is None else str(self.dof),
            str(self.seed),
        ]


class BenchReport(BaseModel):
    rows: list[BenchRow] = Field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["\t".join(TSV_COLUMNS)] + ["\t".join(row.cells()) for row in self.rows]
        return "\n".join(lines) + "\n"

    def to_table(self) -> Table:
        table = Table(title="Mean test log-likelihood", box=box.SIMPLE)
        for column in TSV_COLUMNS:
            table.add_column(column, justify="left" if column in ("dataset", "method") else "right")
        for row in self.rows:
            style = None if row.status == "ok" else "red"
            table.add_row(*row.cells(), style=style)
        return table

    def write(self, text_path: str | Path | None) -> Path:
        """Write the aligned table to `text_path` and the TSV next to it; returns the TSV path."""
        if text_path is None:
            tsv_path = Path("bench.tsv")
        else:
            text_path = Path(text_path)
            with open(text_path, "w", encoding="utf-8") as f:
                Console(file=f, width=120, color_system=None).print(self.to_table())
            tsv_path = text_path.parent / f"{text_path.stem}.tsv"
        tsv_path.write_text(self.to_tsv(), encoding="utf-8")
        return tsv_path


# --- Cells ---


def run_cell(
    dataset: str,
    method: str,
    data_dir: Path,
    seed: int,
    learn_config: LearnConfig,
    pareto_config: ParetoConfig,
    timeout_s: float | None = None,
) -> BenchRow:
    """Train, select and test one cell; failures become TIMEOUT / ERROR rows."""
    try:
        train, valid, test = load_benchmark_triplet(data_dir / dataset)
    except (DataFormatError, OSError) as e:
        return BenchRow(dataset=dataset, method=method, status="ERROR", seed=seed, error=str(e))

    started = time.monotonic()
    deadline = started + timeout_s if timeout_s is not None else None
    try:
        cell_seed = derive_cell_seed(seed, dataset, method)
        spn = fit_method(
            method,
            train,
            valid,
            learn_config.model_copy(update={"seed": cell_seed}),
            pareto_config.model_copy(update={"seed": cell_seed}),
            deadline=deadline,
        )
        runtime = time.monotonic() - started
        test_ll = mean_log_likelihood(spn, test)
    except LearningTimeout as e:
        runtime = time.monotonic() - started
        return BenchRow(dataset=dataset, method=method, status="TIMEOUT", runtime_s=runtime, seed=seed, error=str(e))
    except Exception as e:
        runtime = time.monotonic() - started
        return BenchRow(dataset=dataset, method=method, status="ERROR", runtime_s=runtime, seed=seed, error=str(e))
    return BenchRow(
        dataset=dataset,
        method=method,
        test_ll=test_ll,
        runtime_s=runtime,
        dof=num_free_parameters(spn),
        seed=seed,
    )


class BenchRunner:
    """Runs the dataset x method grid with a memory-aware concurrency limit."""

    def __init__(
        self,
        data_dir: str | Path,
        seed: int,
        learn_config: LearnConfig,
        pareto_config: ParetoConfig,
        timeout_s: float | None = None,
        max_concurrent_cells: int | None = None,
    ) -> None:
        self.data_dir = Path(data_dir)
        self.seed = seed
        self.learn_config = learn_config
        self.pareto_config = pareto_config
        self.timeout_s = timeout_s
        self.max_concurrent_cells = max_concurrent_cells or calculate_optimal_concurrency()
        self.semaphore = asyncio.Semaphore(self.max_concurrent_cells)

    async def _run_cell_with_safety(self, dataset: str, method: str) -> BenchRow:
        async with self.semaphore:
            try:
                mem = psutil.virtual_memory()
                if mem.percent > MEMORY_PRESSURE_PERCENT:
                    console.print(
                        f"[yellow]⚠ High memory usage ({mem.percent:.1f}%), cooling down {COOL_DOWN_S:.0f}s...[/yellow]"
                    )
                    await asyncio.sleep(COOL_DOWN_S)
            except Exception:
                pass

            loop = asyncio.get_running_loop()
            row = await loop.run_in_executor(
                None,
                run_cell,
                dataset,
                method,
                self.data_dir,
                self.seed,
                self.learn_config,
                self.pareto_config,
                self.timeout_s,
            )
            if row.status == "ok":
                console.print(f"[green]✓[/green] {dataset}/{method}: {row.test_ll:.4f} in {row.runtime_s:.2f}s")
            else:
                console.print(f"[red]✗ {dataset}/{method}: {row.status} {row.error}[/red]")
            return row

    async def run(self, datasets: list[str], methods: list[str]) -> BenchReport:
        if not datasets or not methods:
            raise ValueError("bench needs at least one dataset and one method")
        ordered = sorted(set(methods), key=METHOD_ORDER.index)
        console.print(
            f"[dim]bench: {len(datasets)} dataset(s) x {len(ordered)} method(s), "
            f"{self.max_concurrent_cells} cell(s) at a time[/dim]"
        )
        # gather keeps submission order: dataset order, then method order
        rows = await asyncio.gather(
            *[self._run_cell_with_safety(d, m) for d in datasets for m in ordered]
        )
        return BenchReport(rows=list(rows))
