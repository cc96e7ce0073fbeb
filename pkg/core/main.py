from dotenv import load_dotenv; load_dotenv()
import asyncio
import csv
import io
import os
import time
from importlib import metadata
from pathlib import Path
from typing import NoReturn, Optional

import numpy as np
import psutil
import typer
from pydantic import ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from bench import BenchRunner, Method, calculate_optimal_concurrency, fit_method
from data import DataFormatError, Dataset, format_cell, load_benchmark_file, load_benchmark_triplet, load_mixed_csv, split_rows
from learn_minispn import DecisionLog, LearnConfig, LearningTimeout
from learn_pareto import FrontTrace, ParetoConfig
from model_format import ModelParseError, ModelValidationError, deserialize, load_model, save_model
from spn_core import RowFormatError, Spn, mean_log_likelihood, num_free_parameters, sample_many, validate
from synthetic import SyntheticSpec, write_synthetic

# Diagnostics go to stderr; stdout carries only the command's payload
console = Console(stderr=True)
app = typer.Typer(help="MiniSPN: sum-product network learning for heterogeneous data with missing values")


# --- Utility Functions ---

def _fail(message: str) -> NoReturn:
    console.print(f"[bold red]Error:[/bold red] {message}")
    raise typer.Exit(code=1)


def _data_dir(data_dir: Optional[Path]) -> Path:
    return data_dir if data_dir is not None else Path(os.getenv("MINISPN_DATA_DIR", "./data"))


def _learn_config(seed: int, **overrides: object) -> LearnConfig:
    try:
        return LearnConfig(seed=seed, **{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as e:
        raise typer.BadParameter(str(e)) from None


def _pareto_config(seed: int, **overrides: object) -> ParetoConfig:
    try:
        return ParetoConfig(seed=seed, **{k: v for k, v in overrides.items() if v is not None})
    except ValidationError as e:
        raise typer.BadParameter(str(e)) from None


def load_training_data(
    data: str, data_dir: Path, valid_fraction: float, seed: int, missing_token: str
) -> tuple[Dataset, Dataset]:
    """A `.csv` is split into train/valid; anything else names a benchmark trio stem."""
    if data.endswith(".csv"):
        path = Path(data) if Path(data).is_file() else data_dir / data
        full = load_mixed_csv(path, missing_token=missing_token)
        train_ids, valid_ids = split_rows(full, valid_fraction, seed)
        return full.take(train_ids), full.take(valid_ids)
    stem = Path(data) if Path(f"{data}.ts.data").is_file() else data_dir / data
    train, valid, _ = load_benchmark_triplet(stem)
    return train, valid


def _load_model(model_path: Path) -> Spn:
    try:
        return load_model(model_path)
    except OSError as e:
        _fail(f"cannot read {model_path}: {e.strerror or e}")
    except (ModelParseError, ModelValidationError) as e:
        _fail(f"{model_path}: {e}")


# --- Commands ---

@app.command()
def learn(
    data: str = typer.Option(..., help="Benchmark stem (e.g. 'nltcs') or a mixed .csv file"),
    out: Path = typer.Option(..., help="Where to write the learned model"),
    method: Method = typer.Option(Method.minispn, help="Structure learner"),
    data_dir: Optional[Path] = typer.Option(None, help="Directory holding benchmark trios [env: MINISPN_DATA_DIR]"),
    seed: int = typer.Option(0, min=0, help="Random seed"),
    valid_fraction: float = typer.Option(0.1, min=0.0, max=1.0, help="Validation share carved from a .csv"),
    missing_token: str = typer.Option("?", help="Missing-cell token in .csv files"),
    timeout_s: Optional[float] = typer.Option(None, min=0.0, help="Abort learning after this many seconds"),
    decision_log: Optional[Path] = typer.Option(None, help="Write the MiniSPN split decisions (TSV)"),
    front_trace: Optional[Path] = typer.Option(None, help="Write the Pareto front evolution (TSV)"),
    min_instances: Optional[int] = typer.Option(None, help="LearnConfig.min_instances"),
    alpha: Optional[float] = typer.Option(None, help="LearnConfig.alpha"),
    min_overlap: Optional[int] = typer.Option(None, help="LearnConfig.min_overlap"),
    em_max_iters: Optional[int] = typer.Option(None, help="LearnConfig.em_max_iters"),
    laplace: Optional[float] = typer.Option(None, help="Smoothing pseudo-count"),
    variance_floor: Optional[float] = typer.Option(None, help="Gaussian variance floor"),
    iterations: Optional[int] = typer.Option(None, help="ParetoConfig.iterations"),
    expansions: Optional[int] = typer.Option(None, help="ParetoConfig.expansions_per_iteration"),
) -> None:
    """
    Learn a model and write it in the v1 text format.

    Prints one summary line: nodes, dof, train/valid mean log-likelihood and seconds.
    """
    if not 0.0 < valid_fraction < 1.0:
        raise typer.BadParameter("--valid-fraction must lie strictly between 0 and 1")
    if decision_log is not None and method is Method.pareto:
        raise typer.BadParameter("--decision-log needs --method minispn or hybrid")
    learn_config = _learn_config(
        seed,
        min_instances=min_instances,
        alpha=alpha,
        min_overlap=min_overlap,
        em_max_iters=em_max_iters,
        laplace=laplace,
        variance_floor=variance_floor,
    )
    pareto_config = _pareto_config(
        seed,
        iterations=iterations,
        expansions_per_iteration=expansions,
        laplace=laplace,
        variance_floor=variance_floor,
    )

    try:
        train, valid = load_training_data(data, _data_dir(data_dir), valid_fraction, seed, missing_token)
    except (DataFormatError, OSError) as e:
        _fail(str(e))
    if train.n_rows == 0:
        _fail("training data is empty")

    console.print(
        Panel.fit(
            f"[bold white]MINISPN LEARN[/bold white]\n\nData: [bold cyan]{data}[/bold cyan]\n"
            f"Method: {method.value}   Seed: {seed}\nRows: {train.n_rows} train / {valid.n_rows} valid, "
            f"{train.n_vars} vars",
            border_style="blue",
        )
    )

    log = DecisionLog() if decision_log is not None else None
    trace = FrontTrace() if front_trace is not None else None
    started = time.monotonic()
    deadline = started + timeout_s if timeout_s is not None else None
    try:
        spn = fit_method(method, train, valid, learn_config, pareto_config, deadline, log, trace)
    except LearningTimeout as e:
        _fail(f"timeout: {e}")
    except ValueError as e:
        _fail(str(e))
    seconds = time.monotonic() - started

    try:
        save_model(spn, out)
        if log is not None and decision_log is not None:
            log.write(decision_log)
        if trace is not None and front_trace is not None:
            trace.write(front_trace)
    except OSError as e:
        _fail(f"cannot write output: {e}")

    valid_ll = mean_log_likelihood(spn, valid) if valid.n_rows else float("nan")
    typer.echo(
        f"nodes={spn.n_nodes} dof={num_free_parameters(spn)} "
        f"train_ll={mean_log_likelihood(spn, train):.4f} valid_ll={valid_ll:.4f} seconds={seconds:.2f}"
    )


@app.command(name="eval")
def evaluate(
    model_path: Path = typer.Argument(..., help="Model file (v1 text format)"),
    data_path: Path = typer.Argument(..., help="Benchmark file (.data) or mixed .csv"),
    missing_token: str = typer.Option("?", help="Missing-cell token in .csv files"),
) -> None:
    """Print the mean log-likelihood of the data under the model (4 decimals)."""
    spn = _load_model(model_path)
    try:
        if data_path.suffix == ".csv":
            dataset = load_mixed_csv(data_path, missing_token=missing_token, schema=spn.schema)
        else:
            dataset = load_benchmark_file(data_path, schema=spn.schema)
        score = mean_log_likelihood(spn, dataset)
    except (DataFormatError, RowFormatError, OSError, ValueError) as e:
        _fail(str(e))
    typer.echo(f"{score:.4f}")


@app.command()
def sample(
    model_path: Path = typer.Argument(..., help="Model file (v1 text format)"),
    n: int = typer.Option(1, min=1, help="Number of rows"),
    seed: int = typer.Option(0, min=0, help="Random seed"),
) -> None:
    """Write n ancestral samples as CSV to standard output."""
    spn = _load_model(model_path)
    rows = sample_many(spn, np.random.default_rng(seed), n)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([column.name for column in spn.schema])
    for row in rows:
        writer.writerow([format_cell(v, column) for v, column in zip(row, spn.schema)])
    typer.echo(buffer.getvalue(), nl=False)


@app.command(name="validate")
def validate_model(model_path: Path = typer.Argument(..., help="Model file (v1 text format)")) -> None:
    """Check structural validity; exit 1 with one line per violation."""
    try:
        spn = deserialize(model_path.read_text(encoding="utf-8"), check=False)
    except OSError as e:
        _fail(f"cannot read {model_path}: {e.strerror or e}")
    except ModelParseError as e:
        _fail(f"{model_path}: {e}")
    report = validate(spn)
    if report.is_valid:
        typer.echo("valid")
        return
    for violation in report.violations:
        typer.echo(str(violation))
    raise typer.Exit(code=1)


@app.command()
def bench(
    datasets: str = typer.Option(..., help="Comma-separated benchmark stems"),
    methods: str = typer.Option("minispn,pareto,hybrid", help="Comma-separated methods"),
    data_dir: Optional[Path] = typer.Option(None, help="Directory holding benchmark trios [env: MINISPN_DATA_DIR]"),
    seed: int = typer.Option(0, min=0, help="Run seed; every cell derives its own stream from it"),
    timeout_s: Optional[float] = typer.Option(None, min=0.0, help="Per-cell learning timeout"),
    out: Optional[Path] = typer.Option(None, help="Aligned table file; the TSV goes to <stem>.tsv"),
    min_instances: Optional[int] = typer.Option(None, help="LearnConfig.min_instances"),
    alpha: Optional[float] = typer.Option(None, help="LearnConfig.alpha"),
    min_overlap: Optional[int] = typer.Option(None, help="LearnConfig.min_overlap"),
    em_max_iters: Optional[int] = typer.Option(None, help="LearnConfig.em_max_iters"),
    laplace: Optional[float] = typer.Option(None, help="Smoothing pseudo-count"),
    variance_floor: Optional[float] = typer.Option(None, help="Gaussian variance floor"),
    iterations: Optional[int] = typer.Option(None, help="ParetoConfig.iterations"),
    expansions: Optional[int] = typer.Option(None, help="ParetoConfig.expansions_per_iteration"),
) -> None:
    """Run the dataset x method grid and report mean test log-likelihood and runtime."""
    names = [d.strip() for d in datasets.split(",") if d.strip()]
    if not names:
        raise typer.BadParameter("--datasets needs at least one stem")
    chosen = [m.strip() for m in methods.split(",") if m.strip()]
    valid_methods = [m.value for m in Method]
    unknown = [m for m in chosen if m not in valid_methods]
    if not chosen or unknown:
        raise typer.BadParameter(f"--methods must be drawn from {', '.join(valid_methods)}")

    learn_config = _learn_config(
        seed,
        min_instances=min_instances,
        alpha=alpha,
        min_overlap=min_overlap,
        em_max_iters=em_max_iters,
        laplace=laplace,
        variance_floor=variance_floor,
    )
    pareto_config = _pareto_config(
        seed,
        iterations=iterations,
        expansions_per_iteration=expansions,
        laplace=laplace,
        variance_floor=variance_floor,
    )
    runner = BenchRunner(_data_dir(data_dir), seed, learn_config, pareto_config, timeout_s)
    console.print(
        Panel.fit(
            f"[bold white]MINISPN BENCH[/bold white]\n\nDatasets: [bold cyan]{', '.join(names)}[/bold cyan]\n"
            f"Methods: {', '.join(chosen)}   Seed: {seed}\nData dir: {runner.data_dir}",
            border_style="blue",
        )
    )
    report = asyncio.run(runner.run(names, chosen))
    Console().print(report.to_table())
    try:
        tsv_path = report.write(out)
    except OSError as e:
        _fail(f"cannot write report: {e}")
    console.print(f"[dim]TSV written to {tsv_path}[/dim]")


@app.command()
def synth(
    out: Path = typer.Option(..., help="Output stem: writes <stem>.csv and the generating model <stem>.spn"),
    rows: int = typer.Option(1000, help="Rows to draw"),
    discrete: int = typer.Option(4, help="Discrete columns"),
    continuous: int = typer.Option(2, help="Continuous columns"),
    missing_rate: float = typer.Option(0.0, help="MCAR masking probability"),
    components: Optional[int] = typer.Option(None, help="Mixture components (2-4, random if unset)"),
    arity: int = typer.Option(2, help="Arity of the discrete columns"),
    seed: int = typer.Option(0, min=0, help="Random seed"),
    missing_token: str = typer.Option("?", help="Missing-cell token"),
) -> None:
    """Generate a synthetic heterogeneous dataset with a known ground-truth model."""
    try:
        spec = SyntheticSpec(
            n_rows=rows,
            n_discrete=discrete,
            n_continuous=continuous,
            missing_rate=missing_rate,
            n_components=components,
            discrete_arity=arity,
            seed=seed,
        )
    except ValidationError as e:
        raise typer.BadParameter(str(e)) from None
    try:
        csv_path, model_path = write_synthetic(spec, out, missing_token)
    except OSError as e:
        _fail(f"cannot write output: {e}")
    typer.echo(f"{csv_path}\t{model_path}")


@app.command()
def status() -> None:
    """Environment diagnostic: package versions, data directory and bench concurrency."""
    table = Table(title="MiniSPN Environment", show_header=True, header_style="bold magenta")
    table.add_column("Item")
    table.add_column("Value")
    for package in ("numpy", "scipy", "pydantic", "typer", "rich", "psutil"):
        try:
            table.add_row(package, metadata.version(package))
        except metadata.PackageNotFoundError:
            table.add_row(package, "[red]not installed[/red]")
    data_dir = _data_dir(None)
    table.add_row("data dir", f"{data_dir} ({'found' if data_dir.is_dir() else 'missing'})")
    table.add_row("available memory", f"{psutil.virtual_memory().available / 1024**3:.1f} GB")
    table.add_row("bench cells in flight", str(calculate_optimal_concurrency()))
    console.print(table)


if __name__ == "__main__":
    app()
