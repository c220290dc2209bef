"""Dataset abstraction for partially labeled samples and CSV ingestion.

A dataset holds a labeled subset (true outcome, prediction, covariates,
prediction features) and an unlabeled subset (prediction, covariates,
features). Everything is stored as float64 arrays, frozen after load, and
safe to share across concurrent estimator runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, SchemaError, ValidationError

MISSING_TOKENS = ("", "NA")


@dataclass(frozen=True)
class LabeledRow:
    y: float
    y_hat: float
    x: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class UnlabeledRow:
    y_hat: float
    x: np.ndarray
    z: np.ndarray


@dataclass(frozen=True)
class ColumnSchema:
    """Column roles for CSV ingestion; categorical columns are declared, never inferred."""

    outcome: str = "y"
    prediction: str = "y_hat"
    covariates: tuple[str, ...] = ()
    features: tuple[str, ...] = ()

    @property
    def all_columns(self) -> tuple[str, ...]:
        return (self.outcome, self.prediction) + self.covariates + self.features


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Labeled and unlabeled rows with shared covariate/feature layout.

    ``y_unlabeled_true`` exists only in simulation settings and enables the
    oracle estimator; real ingestion leaves it None.
    """

    y_labeled: np.ndarray
    yhat_labeled: np.ndarray
    x_labeled: np.ndarray
    z_labeled: np.ndarray
    yhat_unlabeled: np.ndarray
    x_unlabeled: np.ndarray
    z_unlabeled: np.ndarray
    y_unlabeled_true: np.ndarray | None = None
    columns: ColumnSchema = field(default_factory=ColumnSchema)

    def __post_init__(self):
        for name in ("y_labeled", "yhat_labeled", "x_labeled", "z_labeled",
                     "yhat_unlabeled", "x_unlabeled", "z_unlabeled"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        if self.y_unlabeled_true is not None:
            object.__setattr__(self, "y_unlabeled_true", _freeze(self.y_unlabeled_true))
        n_l = self.y_labeled.shape[0]
        n_u = self.yhat_unlabeled.shape[0]
        if n_l < 1:
            raise ValidationError("dataset needs at least one labeled row")
        if self.yhat_labeled.shape[0] != n_l:
            raise ValidationError("y_labeled and yhat_labeled lengths differ")
        if self.x_labeled.ndim != 2 or self.z_labeled.ndim != 2:
            raise ValidationError("x and z must be 2-D arrays")
        if self.x_labeled.shape[0] != n_l or self.z_labeled.shape[0] != n_l:
            raise ValidationError("labeled covariate/feature row counts differ from outcomes")
        if self.x_unlabeled.shape[0] != n_u or self.z_unlabeled.shape[0] != n_u:
            raise ValidationError("unlabeled covariate/feature row counts differ from predictions")
        if n_u > 0 and self.x_unlabeled.shape[1] != self.x_labeled.shape[1]:
            raise ValidationError("labeled and unlabeled covariate dimensions differ")
        if n_u > 0 and self.z_unlabeled.shape[1] != self.z_labeled.shape[1]:
            raise ValidationError("labeled and unlabeled feature dimensions differ")
        if self.y_unlabeled_true is not None and self.y_unlabeled_true.shape[0] != n_u:
            raise ValidationError("y_unlabeled_true length differs from unlabeled rows")
        if not (np.all(np.isfinite(self.y_labeled)) and np.all(np.isfinite(self.yhat_labeled))):
            raise ValidationError("labeled outcomes and predictions must be finite")

    @property
    def n_l(self) -> int:
        return self.y_labeled.shape[0]

    @property
    def n_u(self) -> int:
        return self.yhat_unlabeled.shape[0]

    @property
    def n(self) -> int:
        return self.n_l + self.n_u

    @property
    def rho(self) -> float:
        return self.n_l / self.n

    @property
    def p_x(self) -> int:
        return self.x_labeled.shape[1]

    @property
    def p_z(self) -> int:
        return self.z_labeled.shape[1]

    @property
    def labeled(self) -> tuple[LabeledRow, ...]:
        return tuple(
            LabeledRow(float(self.y_labeled[i]), float(self.yhat_labeled[i]),
                       self.x_labeled[i], self.z_labeled[i])
            for i in range(self.n_l)
        )

    @property
    def unlabeled(self) -> tuple[UnlabeledRow, ...]:
        return tuple(
            UnlabeledRow(float(self.yhat_unlabeled[i]), self.x_unlabeled[i], self.z_unlabeled[i])
            for i in range(self.n_u)
        )

    @classmethod
    def from_rows(
        cls,
        labeled: Sequence[LabeledRow],
        unlabeled: Sequence[UnlabeledRow] = (),
        columns: ColumnSchema | None = None,
    ) -> "Dataset":
        if not labeled:
            raise ValidationError("at least one labeled row required")
        p_x = len(np.atleast_1d(labeled[0].x))
        p_z = len(np.atleast_1d(labeled[0].z))
        return cls(
            y_labeled=np.array([r.y for r in labeled]),
            yhat_labeled=np.array([r.y_hat for r in labeled]),
            x_labeled=np.array([np.atleast_1d(r.x) for r in labeled]).reshape(len(labeled), p_x),
            z_labeled=np.array([np.atleast_1d(r.z) for r in labeled]).reshape(len(labeled), p_z),
            yhat_unlabeled=np.array([r.y_hat for r in unlabeled]),
            x_unlabeled=np.array([np.atleast_1d(r.x) for r in unlabeled]).reshape(len(unlabeled), p_x),
            z_unlabeled=np.array([np.atleast_1d(r.z) for r in unlabeled]).reshape(len(unlabeled), p_z),
            columns=columns or ColumnSchema(
                covariates=tuple(f"x{i+1}" for i in range(p_x)),
                features=tuple(f"z{i+1}" for i in range(p_z)),
            ),
        )

    def with_labeled_outcome(self, y: np.ndarray) -> "Dataset":
        """Copy with the labeled outcome column replaced (diagnostics helper)."""
        return replace(self, y_labeled=np.asarray(y, dtype=float))


@dataclass(frozen=True)
class SplitSummary:
    n: int
    n_l: int
    n_u: int
    rho: float
    p_x: int
    classical_only: bool


def split_summary(d: Dataset) -> SplitSummary:
    """Labeled/unlabeled bookkeeping; rho = n_l / n exactly."""
    return SplitSummary(
        n=d.n, n_l=d.n_l, n_u=d.n_u, rho=d.n_l / d.n, p_x=d.p_x,
        classical_only=(d.n_u == 0),
    )


def _parse_cell(token: str, column: str, row_index: int) -> float:
    try:
        return float(token)
    except ValueError:
        raise ParseError(
            f"non-numeric value {token!r} in column {column!r} at data row {row_index}",
            row_index=row_index, column=column,
        ) from None


def load_csv(path: str | Path, schema: ColumnSchema | Mapping) -> Dataset:
    """Load a UTF-8, header-row CSV into a Dataset.

    An empty or ``NA`` outcome cell marks the row unlabeled; any other
    non-numeric token raises ParseError with the data row index (1-based).
    """
    if not isinstance(schema, ColumnSchema):
        schema = ColumnSchema(
            outcome=schema["outcome"],
            prediction=schema["prediction"],
            covariates=tuple(schema.get("covariates", ())),
            features=tuple(schema.get("features", ())),
        )
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty; a header row is required") from None
        col_index = {name: i for i, name in enumerate(header)}
        for name in schema.all_columns:
            if name not in col_index:
                raise SchemaError(f"column {name!r} not found in {path} (header: {header})")

        lab_y, lab_yhat, lab_x, lab_z = [], [], [], []
        unlab_yhat, unlab_x, unlab_z = [], [], []
        for i, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise ParseError(f"row {i} has {len(row)} cells, header has {len(header)}", row_index=i)
            out_tok = row[col_index[schema.outcome]].strip()
            yhat = _parse_cell(row[col_index[schema.prediction]], schema.prediction, i)
            xs = [_parse_cell(row[col_index[c]], c, i) for c in schema.covariates]
            zs = [_parse_cell(row[col_index[c]], c, i) for c in schema.features]
            if out_tok in MISSING_TOKENS:
                unlab_yhat.append(yhat)
                unlab_x.append(xs)
                unlab_z.append(zs)
            else:
                lab_y.append(_parse_cell(out_tok, schema.outcome, i))
                lab_yhat.append(yhat)
                lab_x.append(xs)
                lab_z.append(zs)

    if not lab_y:
        raise ValidationError(f"{path} contains no labeled rows (all outcomes missing)")
    p_x, p_z = len(schema.covariates), len(schema.features)
    return Dataset(
        y_labeled=np.array(lab_y),
        yhat_labeled=np.array(lab_yhat),
        x_labeled=np.array(lab_x, dtype=float).reshape(len(lab_y), p_x),
        z_labeled=np.array(lab_z, dtype=float).reshape(len(lab_y), p_z),
        yhat_unlabeled=np.array(unlab_yhat),
        x_unlabeled=np.array(unlab_x, dtype=float).reshape(len(unlab_yhat), p_x),
        z_unlabeled=np.array(unlab_z, dtype=float).reshape(len(unlab_yhat), p_z),
        columns=schema,
    )


def save_csv(d: Dataset, path: str | Path) -> None:
    """Write labeled rows then unlabeled rows; floats use shortest round-trip repr."""
    path = Path(path)
    schema = d.columns
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.all_columns)
        for i in range(d.n_l):
            writer.writerow(
                [repr(float(d.y_labeled[i])), repr(float(d.yhat_labeled[i]))]
                + [repr(float(v)) for v in d.x_labeled[i]]
                + [repr(float(v)) for v in d.z_labeled[i]]
            )
        for i in range(d.n_u):
            writer.writerow(
                ["", repr(float(d.yhat_unlabeled[i]))]
                + [repr(float(v)) for v in d.x_unlabeled[i]]
                + [repr(float(v)) for v in d.z_unlabeled[i]]
            )


@dataclass(frozen=True)
class CategoricalDataset:
    """Per-row categorical group (observed on labeled rows only), predicted
    group, and a binary outcome observed on all rows."""

    group: tuple
    group_hat: tuple[str, ...]
    outcome: np.ndarray
    categories: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "outcome", _freeze(self.outcome))
        object.__setattr__(self, "group", tuple(self.group))
        object.__setattr__(self, "group_hat", tuple(self.group_hat))
        n = len(self.group)
        if len(self.group_hat) != n or self.outcome.shape[0] != n:
            raise ValidationError("group, group_hat and outcome lengths differ")
        cats = set(self.categories)
        observed = {g for g in self.group if g is not None}
        if not observed <= cats:
            raise ValidationError(f"observed groups {sorted(observed - cats)} not in declared categories")
        if not set(self.group_hat) <= cats:
            raise ValidationError("predicted groups outside the declared category set")
        if not np.all(np.isin(self.outcome, (0.0, 1.0))):
            raise ValidationError("outcome must be binary 0/1")

    @property
    def n(self) -> int:
        return len(self.group)

    @property
    def labeled_mask(self) -> np.ndarray:
        return np.array([g is not None for g in self.group])

    @property
    def n_l(self) -> int:
        return int(self.labeled_mask.sum())


def load_categorical_csv(
    path: str | Path,
    group: str = "group",
    group_hat: str = "group_hat",
    outcome: str = "outcome",
    categories: Sequence[str] | None = None,
) -> CategoricalDataset:
    """Load a categorical CSV; empty/NA group cells mark rows unlabeled.

    When ``categories`` is omitted the category set is the sorted union of
    observed and predicted labels (acceptable for already-clean exports).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        idx = {name: i for i, name in enumerate(header)}
        for name in (group, group_hat, outcome):
            if name not in idx:
                raise SchemaError(f"column {name!r} not found in {path}")
        groups, hats, outs = [], [], []
        for i, row in enumerate(reader, start=1):
            g = row[idx[group]].strip()
            groups.append(None if g in MISSING_TOKENS else g)
            hats.append(row[idx[group_hat]].strip())
            outs.append(_parse_cell(row[idx[outcome]], outcome, i))
    if categories is None:
        categories = sorted({g for g in groups if g is not None} | set(hats))
    return CategoricalDataset(
        group=tuple(groups), group_hat=tuple(hats),
        outcome=np.array(outs), categories=tuple(categories),
    )


def save_categorical_csv(cd: CategoricalDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "group_hat", "outcome"])
        for g, gh, o in zip(cd.group, cd.group_hat, cd.outcome):
            writer.writerow(["" if g is None else g, gh, repr(float(o))])
