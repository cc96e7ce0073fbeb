"""
Synthetic heterogeneous data with a known generating model.

A random mixture of 2-4 factorized components is sampled, then cells are
masked independently (MCAR) at the requested rate. The ground-truth SPN is
returned next to the data so tests can compare learned models against it.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from data import ColumnMeta, Dataset, write_mixed_csv
from model_format import save_model
from pydantic import BaseModel, ConfigDict, Field, model_validator
from spn_core import Spn, SpnBuilder, sample_many

# distance between neighbouring component means of a continuous variable
COMPONENT_SPACING = 6.0


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_rows: int = Field(1000, ge=1, description="Rows to draw")
    n_discrete: int = Field(4, ge=0, description="Number of discrete columns (named d0, d1, ...)")
    n_continuous: int = Field(2, ge=0, description="Number of continuous columns (named c0, c1, ...)")
    missing_rate: float = Field(0.0, ge=0.0, lt=1.0, description="Per-cell MCAR masking probability")
    seed: int = Field(0, ge=0, description="Seed for structure, parameters, rows and mask")
    n_components: int | None = Field(None, ge=2, le=4, description="Mixture size; random in 2..4 when unset")
    discrete_arity: int = Field(2, ge=2, description="Arity of every discrete column")

    @model_validator(mode="after")
    def _has_variables(self) -> SyntheticSpec:
        if self.n_discrete + self.n_continuous == 0:
            raise ValueError("zero variables requested")
        return self

    def schema(self) -> list[ColumnMeta]:
        return [ColumnMeta.discrete(f"d{i}", self.discrete_arity) for i in range(self.n_discrete)] + [
            ColumnMeta.continuous(f"c{i}") for i in range(self.n_continuous)
        ]


def ground_truth_spn(spec: SyntheticSpec, rng: np.random.Generator) -> Spn:
    schema = spec.schema()
    n_components = spec.n_components or int(rng.integers(2, 5))
    builder = SpnBuilder(schema)

    # per continuous variable, a shuffled ladder of well separated means
    ladders = [rng.permutation(n_components) * COMPONENT_SPACING for _ in range(spec.n_continuous)]
    components = []
    for k in range(n_components):
        leaves = []
        for var, column in enumerate(schema):
            if column.is_discrete:
                leaves.append(builder.add_categorical(var, rng.dirichlet(np.ones(spec.discrete_arity)).tolist()))
            else:
                c = var - spec.n_discrete
                mean = float(ladders[c][k] + rng.normal(0.0, 0.5))
                leaves.append(builder.add_gaussian(var, mean, float(rng.uniform(0.5, 2.0))))
        components.append(leaves[0] if len(leaves) == 1 else builder.add_product(leaves))

    weights = rng.dirichlet(np.full(n_components, 4.0))
    return builder.build(builder.add_sum(components, weights=weights.tolist()))


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Spn]:
    """Draw `spec.n_rows` rows from a fresh random mixture; same spec gives the same output."""
    rng = np.random.default_rng(spec.seed)
    spn = ground_truth_spn(spec, rng)
    values = sample_many(spn, rng, spec.n_rows)
    if spec.missing_rate > 0:
        values[rng.random(values.shape) < spec.missing_rate] = np.nan
    return Dataset(spn.schema, values), spn


def write_synthetic(spec: SyntheticSpec, stem: str | Path, missing_token: str = "?") -> tuple[Path, Path]:
    """Write `<stem>.csv` and the generating model `<stem>.spn`."""
    stem = Path(stem)
    dataset, spn = generate_synthetic(spec)
    csv_path = stem.parent / f"{stem.name}.csv"
    model_path = stem.parent / f"{stem.name}.spn"
    write_mixed_csv(dataset, csv_path, missing_token)
    save_model(spn, model_path)
    return csv_path, model_path
