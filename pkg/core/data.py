"""
MiniSPN Data Layer

Heterogeneous tabular data with explicit missingness.

Cells are stored in a float64 matrix where NaN marks a Missing cell. Discrete
cells hold non-negative integral values below their column's arity, continuous
cells hold finite reals. Datasets are immutable after construction; DataSlice
is a cheap read-only view (row ids x column ids) used by the recursive learners.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

MISSING = float("nan")

BENCHMARK_SUFFIXES = (".ts.data", ".valid.data", ".test.data")


class DataFormatError(ValueError):
    """Raised for unreadable, ragged or inconsistent data files."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class ColumnMeta(BaseModel):
    """
    Metadata of one dataset column.
    """

    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Column name, unique within a schema")
    kind: Literal["discrete", "continuous"] = Field(..., description="Value domain of the column")
    arity: int | None = Field(
        default=None, description="Number of values of a discrete column (>= 2); None when continuous"
    )

    @model_validator(mode="after")
    def _check_arity(self) -> ColumnMeta:
        if self.kind == "discrete" and (self.arity is None or self.arity < 2):
            raise ValueError(f"discrete column {self.name!r} needs arity >= 2")
        if self.kind == "continuous" and self.arity is not None:
            raise ValueError(f"continuous column {self.name!r} cannot declare an arity")
        return self

    @property
    def is_discrete(self) -> bool:
        return self.kind == "discrete"

    @classmethod
    def discrete(cls, name: str, arity: int) -> ColumnMeta:
        return cls(name=name, kind="discrete", arity=arity)

    @classmethod
    def continuous(cls, name: str) -> ColumnMeta:
        return cls(name=name, kind="continuous")


def audit_dataset(schema: Sequence[ColumnMeta], values: NDArray[np.float64]) -> list[str]:
    """
    Shared audit routine for Dataset invariants.

    Returns a list of human readable problems, empty when the data is consistent.
    """
    problems: list[str] = []
    names = [col.name for col in schema]
    if len(set(names)) != len(names):
        problems.append("column names are not unique")
    if values.ndim != 2:
        problems.append(f"values must be a matrix, got {values.ndim} dimensions")
        return problems
    if values.shape[1] != len(schema):
        problems.append(f"row length {values.shape[1]} != schema length {len(schema)}")
        return problems

    for j, col in enumerate(schema):
        column = values[:, j]
        observed = column[~np.isnan(column)]
        if observed.size == 0:
            continue
        if not np.all(np.isfinite(observed)):
            problems.append(f"column {col.name!r} contains non-finite values")
            continue
        if col.is_discrete:
            assert col.arity is not None
            if np.any(observed != np.floor(observed)):
                problems.append(f"discrete column {col.name!r} contains non-integral values")
            elif observed.min() < 0 or observed.max() >= col.arity:
                problems.append(
                    f"discrete column {col.name!r} has values outside [0, {col.arity - 1}]"
                )
    return problems


class Dataset:
    """Immutable schema + cell matrix (NaN = Missing)."""

    def __init__(self, schema: Sequence[ColumnMeta], values: NDArray[np.float64] | Sequence[Sequence[float]]):
        matrix = np.array(values, dtype=np.float64)
        if matrix.ndim == 1 and matrix.size == 0:
            matrix = matrix.reshape(0, len(schema))
        problems = audit_dataset(schema, matrix)
        if problems:
            raise DataFormatError("; ".join(problems))
        matrix.setflags(write=False)
        self.schema: tuple[ColumnMeta, ...] = tuple(schema)
        self.values: NDArray[np.float64] = matrix

    @property
    def n_rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_vars(self) -> int:
        return len(self.schema)

    @property
    def missing_fraction(self) -> float:
        if self.values.size == 0:
            return 0.0
        return float(np.isnan(self.values).mean())

    def take(self, row_ids: Sequence[int] | NDArray[np.int64]) -> Dataset:
        """New Dataset holding the given rows, in the given order."""
        return Dataset(self.schema, self.values[np.asarray(row_ids, dtype=np.int64)])

    def same_schema(self, other: Dataset) -> bool:
        return self.schema == other.schema

    def __repr__(self) -> str:
        return f"Dataset(n_rows={self.n_rows}, n_vars={self.n_vars})"


class DataSlice:
    """
    Row/column view into a Dataset.

    row_ids and var_ids are global indices into the underlying dataset.
    """

    def __init__(
        self,
        dataset: Dataset,
        row_ids: Sequence[int] | NDArray[np.int64],
        var_ids: Sequence[int] | NDArray[np.int64],
    ):
        rows = np.asarray(row_ids, dtype=np.int64)
        cols = np.asarray(var_ids, dtype=np.int64)
        for label, ids, bound in (("row", rows, dataset.n_rows), ("var", cols, dataset.n_vars)):
            if ids.size and (ids.min() < 0 or ids.max() >= bound):
                raise IndexError(f"{label} index out of range [0, {bound})")
            if np.unique(ids).size != ids.size:
                raise ValueError(f"duplicate {label} ids in slice")
        self.dataset = dataset
        self.row_ids = rows
        self.var_ids = cols

    @classmethod
    def full(cls, dataset: Dataset) -> DataSlice:
        return cls(dataset, np.arange(dataset.n_rows), np.arange(dataset.n_vars))

    @property
    def n_rows(self) -> int:
        return int(self.row_ids.size)

    @property
    def n_vars(self) -> int:
        return int(self.var_ids.size)

    def matrix(self) -> NDArray[np.float64]:
        """Dense copy of the viewed cells, shape (n_rows, n_vars)."""
        return self.dataset.values[np.ix_(self.row_ids, self.var_ids)]

    def column(self, var: int) -> NDArray[np.float64]:
        """Cells of global column `var` over the slice rows."""
        return self.dataset.values[self.row_ids, var]

    def slice(
        self,
        local_rows: Sequence[int] | NDArray[np.int64] | None = None,
        local_vars: Sequence[int] | NDArray[np.int64] | None = None,
    ) -> DataSlice:
        """Compose: local indices address positions inside this slice."""
        rows = self.row_ids if local_rows is None else self.row_ids[np.asarray(local_rows, dtype=np.int64)]
        cols = self.var_ids if local_vars is None else self.var_ids[np.asarray(local_vars, dtype=np.int64)]
        return DataSlice(self.dataset, rows, cols)

    def with_vars(self, var_ids: Sequence[int] | NDArray[np.int64]) -> DataSlice:
        """Same rows, a different set of global column ids."""
        return DataSlice(self.dataset, self.row_ids, var_ids)

    def __repr__(self) -> str:
        return f"DataSlice(rows={self.n_rows}, vars={self.var_ids.tolist()})"


def median_cutoff(data_slice: DataSlice, var: int) -> float | None:
    """
    Median of the observed values of continuous column `var` over the slice rows.

    Even counts average the two middle order statistics. Returns None when the
    slice has no observed value for the column.
    """
    if var not in set(data_slice.var_ids.tolist()):
        raise ValueError(f"variable {var} is not part of the slice")
    if data_slice.dataset.schema[var].is_discrete:
        raise ValueError(f"variable {var} is not continuous")
    column = data_slice.column(var)
    observed = column[~np.isnan(column)]
    if observed.size == 0:
        return None
    return float(np.median(observed))


def split_rows(
    dataset: Dataset, valid_fraction: float, seed: int
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Seeded shuffle into (train row ids, validation row ids), at least one row per side."""
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError("valid_fraction must lie in (0, 1)")
    n = dataset.n_rows
    if n < 2:
        raise DataFormatError("need at least 2 rows to carve out a validation set")
    order = np.random.default_rng(seed).permutation(n)
    n_valid = int(math.floor(valid_fraction * n + 0.5))
    n_valid = min(max(n_valid, 1), n - 1)
    return np.sort(order[n_valid:]), np.sort(order[:n_valid])


# --- Benchmark trio format ---


def _read_int_rows(path: Path) -> list[list[int]]:
    if not path.is_file():
        raise DataFormatError("file not found", path=str(path))
    rows: list[list[int]] = []
    width: int | None = None
    with open(path, encoding="utf-8", newline=None) as f:
        for line_no, raw in enumerate(f, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                row = [int(tok) for tok in line.split(",")]
            except ValueError:
                raise DataFormatError("non-integer token", path=str(path), line=line_no) from None
            if any(v < 0 for v in row):
                raise DataFormatError("negative value", path=str(path), line=line_no)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(
                    f"ragged row: {len(row)} values, expected {width}", path=str(path), line=line_no
                )
            rows.append(row)
    return rows


def _as_matrix(rows: list[list[int]], width: int) -> NDArray[np.float64]:
    if not rows:
        return np.zeros((0, width), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def load_benchmark_triplet(path_stem: str | Path) -> tuple[Dataset, Dataset, Dataset]:
    """
    Load `<stem>.ts.data`, `<stem>.valid.data`, `<stem>.test.data`.

    Every column is discrete with arity 1 + max value across the trio (minimum 2).
    """
    stem = str(path_stem)
    parts = [_read_int_rows(Path(stem + suffix)) for suffix in BENCHMARK_SUFFIXES]
    widths = {len(rows[0]) for rows in parts if rows}
    if not widths:
        raise DataFormatError("benchmark trio contains no rows", path=stem)
    if len(widths) != 1:
        raise DataFormatError(f"inconsistent row widths across the trio: {sorted(widths)}", path=stem)
    width = widths.pop()
    matrices = [_as_matrix(rows, width) for rows in parts]

    stacked = np.vstack(matrices)
    arities = np.maximum(stacked.max(axis=0).astype(np.int64) + 1, 2)
    schema = [ColumnMeta.discrete(f"x{j}", int(arities[j])) for j in range(width)]
    train, valid, test = (Dataset(schema, m) for m in matrices)
    return train, valid, test


def load_benchmark_file(path: str | Path, schema: Sequence[ColumnMeta] | None = None) -> Dataset:
    """Single benchmark-format file; schema inferred as in the trio loader unless given."""
    rows = _read_int_rows(Path(path))
    if schema is None:
        if not rows:
            raise DataFormatError("file contains no rows", path=str(path))
        width = len(rows[0])
        matrix = _as_matrix(rows, width)
        arities = np.maximum(matrix.max(axis=0).astype(np.int64) + 1, 2)
        schema = [ColumnMeta.discrete(f"x{j}", int(arities[j])) for j in range(width)]
    else:
        if rows and len(rows[0]) != len(schema):
            raise DataFormatError(
                f"row width {len(rows[0])} does not match the {len(schema)} model variables",
                path=str(path),
            )
        matrix = _as_matrix(rows, len(schema))
    return Dataset(schema, matrix)


def write_benchmark_file(dataset: Dataset, path: str | Path) -> None:
    """Inverse of the benchmark reader: comma-separated integers, one row per line."""
    if np.isnan(dataset.values).any():
        raise DataFormatError("benchmark format cannot represent missing cells", path=str(path))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in dataset.values.astype(np.int64):
            f.write(",".join(str(v) for v in row) + "\n")


# --- Mixed CSV format ---


def _is_real_token(token: str) -> bool:
    return any(ch in token for ch in ".eE")


def _parse_cell(token: str, missing_token: str, path: str, line_no: int) -> float:
    token = token.strip()
    if token == "" or token == missing_token:
        return MISSING
    try:
        value = float(token) if _is_real_token(token) else float(int(token))
    except ValueError:
        raise DataFormatError(f"unparsable cell {token!r}", path=path, line=line_no) from None
    if not math.isfinite(value):
        raise DataFormatError(f"non-finite cell {token!r}", path=path, line=line_no)
    return value


def load_mixed_csv(
    path: str | Path,
    missing_token: str = "?",
    schema: Sequence[ColumnMeta] | None = None,
) -> Dataset:
    """
    Headed CSV of integers, reals and missing tokens (an empty cell is also missing).

    Without a schema, a column is continuous when any observed cell has a decimal
    point or exponent, otherwise discrete with arity 1 + max (minimum 2).
    """
    path_str = str(path)
    if not Path(path).is_file():
        raise DataFormatError("file not found", path=path_str)
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = [name.strip() for name in next(reader)]
        except StopIteration:
            raise DataFormatError("missing header row", path=path_str) from None
        cells: list[list[float]] = []
        real_columns = [False] * len(header)
        for line_no, record in enumerate(reader, 2):
            if not record:
                continue
            if len(record) != len(header):
                raise DataFormatError(
                    f"ragged row: {len(record)} cells, expected {len(header)}", path=path_str, line=line_no
                )
            row = []
            for j, token in enumerate(record):
                value = _parse_cell(token, missing_token, path_str, line_no)
                if not math.isnan(value) and _is_real_token(token.strip()):
                    real_columns[j] = True
                row.append(value)
            cells.append(row)

    matrix = np.asarray(cells, dtype=np.float64).reshape(len(cells), len(header))

    if schema is not None:
        if len(schema) != len(header):
            raise DataFormatError(
                f"{len(header)} columns in file, {len(schema)} expected", path=path_str
            )
        return Dataset(schema, matrix)

    inferred: list[ColumnMeta] = []
    for j, name in enumerate(header):
        column = matrix[:, j]
        observed = column[~np.isnan(column)]
        if observed.size == 0:
            raise DataFormatError(f"column {name!r} has no observed values", path=path_str)
        if real_columns[j]:
            inferred.append(ColumnMeta.continuous(name))
        else:
            if observed.min() < 0:
                raise DataFormatError(f"discrete column {name!r} has negative values", path=path_str)
            inferred.append(ColumnMeta.discrete(name, max(int(observed.max()) + 1, 2)))
    return Dataset(inferred, matrix)


def format_cell(value: float, column: ColumnMeta, missing_token: str = "?") -> str:
    if math.isnan(value):
        return missing_token
    if column.is_discrete:
        return str(int(value))
    return repr(float(value))


def write_mixed_csv(dataset: Dataset, path: str | Path, missing_token: str = "?") -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([col.name for col in dataset.schema])
        for row in dataset.values:
            writer.writerow(
                [format_cell(v, col, missing_token) for v, col in zip(row, dataset.schema)]
            )
