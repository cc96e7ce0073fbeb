"""
Factorized (fully independent) models over a data slice.

A slice's cells are encoded once: discrete variables as a one-hot block (a
Missing cell is an all-zero row segment, so counts skip it automatically) and
continuous variables as a dense block plus an observation mask. Fitting a
factorized model to any subset of rows is then a column sum, and per-row
log-likelihoods are a matrix-vector product plus masked Gaussian terms.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from data import ColumnMeta, Dataset
from numpy.typing import NDArray
from scipy.stats import norm
from spn_core import SpnBuilder

Rows = NDArray[np.int64] | NDArray[np.bool_] | None


def variance_floors(dataset: Dataset, variance_floor: float) -> NDArray[np.float64]:
    """Per-variable variance floor: variance_floor * (observed range)^2, range 0 counting as 1."""
    floors = np.full(dataset.n_vars, variance_floor, dtype=np.float64)
    for j, column in enumerate(dataset.schema):
        if column.is_discrete:
            continue
        cells = dataset.values[:, j]
        observed = cells[~np.isnan(cells)]
        if observed.size:
            spread = float(observed.max() - observed.min())
            floors[j] = variance_floor * (spread * spread if spread > 0 else 1.0)
    return floors


@dataclass(frozen=True)
class FactorizedParams:
    """Parameters of a product of univariate leaves over `var_ids`."""

    var_ids: NDArray[np.int64]
    flat_log_probs: NDArray[np.float64]
    means: NDArray[np.float64]
    variances: NDArray[np.float64]

    def log_prior(self, laplace: float) -> float:
        # Dirichlet pseudo-count term whose MAP estimate is the smoothed frequency
        return laplace * float(self.flat_log_probs.sum())


class SliceEncoding:
    """Encoded cells of a set of rows over fixed variables."""

    def __init__(self, schema: Sequence[ColumnMeta], var_ids: Sequence[int] | NDArray[np.int64], matrix: NDArray[np.float64]):
        self.var_ids = np.asarray(var_ids, dtype=np.int64)
        self.n_rows = int(matrix.shape[0])
        columns = [schema[int(v)] for v in self.var_ids]
        self.discrete_pos = [p for p, c in enumerate(columns) if c.is_discrete]
        self.continuous_pos = [p for p, c in enumerate(columns) if not c.is_discrete]
        self.arities = np.asarray([columns[p].arity for p in self.discrete_pos], dtype=np.int64)
        self.offsets = np.concatenate(([0], np.cumsum(self.arities))).astype(np.int64)

        width = int(self.offsets[-1])
        self.onehot = np.zeros((self.n_rows, width), dtype=np.float64)
        for d, p in enumerate(self.discrete_pos):
            cells = matrix[:, p]
            observed = np.flatnonzero(~np.isnan(cells))
            self.onehot[observed, self.offsets[d] + cells[observed].astype(np.int64)] = 1.0
        # per discrete variable block id of every one-hot column
        self.block = np.repeat(np.arange(len(self.discrete_pos)), self.arities)

        cont = matrix[:, self.continuous_pos] if self.continuous_pos else np.zeros((self.n_rows, 0))
        self.cont_observed = ~np.isnan(cont)
        self.cont_filled = np.where(self.cont_observed, cont, 0.0)

    @classmethod
    def of(cls, dataset: Dataset, row_ids: NDArray[np.int64], var_ids: NDArray[np.int64]) -> SliceEncoding:
        return cls(dataset.schema, var_ids, dataset.values[np.ix_(row_ids, var_ids)])

    def fit(self, laplace: float, floors: NDArray[np.float64], rows: Rows = None) -> FactorizedParams:
        """Smoothed categorical frequencies and floored Gaussian moments over `rows`."""
        onehot = self.onehot if rows is None else self.onehot[rows]
        counts = onehot.sum(axis=0)
        if self.discrete_pos:
            n_observed = np.bincount(self.block, weights=counts, minlength=len(self.discrete_pos))
            denominators = (n_observed + laplace * self.arities)[self.block]
            flat_log_probs = np.log((counts + laplace) / denominators)
        else:
            flat_log_probs = np.zeros(0, dtype=np.float64)

        observed = self.cont_observed if rows is None else self.cont_observed[rows]
        filled = self.cont_filled if rows is None else self.cont_filled[rows]
        n_cont = observed.sum(axis=0)
        means = np.zeros(len(self.continuous_pos), dtype=np.float64)
        variances = np.ones(len(self.continuous_pos), dtype=np.float64)
        seen = n_cont > 0
        if seen.any():
            means[seen] = filled[:, seen].sum(axis=0) / n_cont[seen]
            centred = np.where(observed[:, seen], filled[:, seen] - means[seen], 0.0)
            floor = floors[self.var_ids[self.continuous_pos]][seen]
            variances[seen] = np.maximum((centred * centred).sum(axis=0) / n_cont[seen], floor)
        return FactorizedParams(self.var_ids, flat_log_probs, means, variances)

    def log_likelihood(self, params: FactorizedParams, rows: Rows = None) -> NDArray[np.float64]:
        """Per-row log-likelihood; Missing cells contribute 0."""
        onehot = self.onehot if rows is None else self.onehot[rows]
        total = onehot @ params.flat_log_probs
        if self.continuous_pos:
            observed = self.cont_observed if rows is None else self.cont_observed[rows]
            filled = self.cont_filled if rows is None else self.cont_filled[rows]
            dens = norm.logpdf(filled, loc=params.means, scale=np.sqrt(params.variances))
            total = total + np.where(observed, dens, 0.0).sum(axis=1)
        return np.asarray(total, dtype=np.float64)


def emit_factorized(builder: SpnBuilder, params: FactorizedParams, schema: Sequence[ColumnMeta]) -> int:
    """Append the leaves (and their Product when there are several) to `builder`."""
    leaves: list[int] = []
    c = 0
    offset = 0
    for var in params.var_ids.tolist():
        column = schema[var]
        if column.is_discrete:
            arity = int(column.arity or 0)
            leaves.append(builder.add_categorical_log(var, params.flat_log_probs[offset:offset + arity].tolist()))
            offset += arity
        else:
            leaves.append(builder.add_gaussian(var, float(params.means[c]), float(params.variances[c])))
            c += 1
    if len(leaves) == 1:
        return leaves[0]
    return builder.add_product(leaves)


def fit_params(
    dataset: Dataset,
    row_ids: NDArray[np.int64],
    var_ids: NDArray[np.int64],
    laplace: float,
    floors: NDArray[np.float64],
) -> FactorizedParams:
    return SliceEncoding.of(dataset, row_ids, var_ids).fit(laplace, floors)
