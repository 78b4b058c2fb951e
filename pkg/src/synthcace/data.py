"""Observed-data container, validation and CSV ingestion."""

from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DegenerateArm,
    DimensionMismatch,
    EmptyDataset,
    MissingColumn,
    NonBinaryColumn,
    NonFiniteValue,
    ParseFailure,
)


class MonotonicityWarning(UserWarning):
    """Some unit has Z=0 and S=1 (an always-taker or defier)."""


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(len(arr), -1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """One row per subject: outcome ``y``, assignment ``z``, treatment ``s``
    and an ``n x p`` covariate matrix ``x`` (``p`` may be zero)."""

    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    x: np.ndarray = None
    x_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = _frozen(self.y, 1)
        n = len(y)
        x = np.zeros((n, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        x = _frozen(x, 2)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", _frozen(self.z, 1))
        object.__setattr__(self, "s", _frozen(self.s, 1))
        object.__setattr__(self, "x", x)
        if not self.x_names:
            names = tuple(f"x{j + 1}" for j in range(x.shape[1]))
            object.__setattr__(self, "x_names", names)
        if not (len(self.z) == len(self.s) == n and x.shape[0] == n):
            raise DimensionMismatch(
                f"column lengths differ: y={n}, z={len(self.z)}, s={len(self.s)}, x={x.shape[0]}"
            )
        if len(self.x_names) != x.shape[1]:
            raise DimensionMismatch("x_names does not match covariate count")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.z[idx], self.s[idx], self.x[idx], self.x_names)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.x_names == other.x_names
            and all(
                np.array_equal(a, b)
                for a, b in zip((self.y, self.z, self.s, self.x), (other.y, other.z, other.s, other.x))
            )
        )


@dataclass(frozen=True)
class StrataCounts:
    n: int
    n_z: tuple[int, int]
    n_zs: dict = field(default_factory=dict)  # keyed by (z, s)
    pi_c_hat: float = float("nan")
    monotonicity_violations: int = 0

    @property
    def n0(self) -> int:
        return self.n_z[0]

    @property
    def n1(self) -> int:
        return self.n_z[1]

    @property
    def n11(self) -> int:
        return self.n_zs[(1, 1)]


def validate(dataset: Dataset) -> StrataCounts:
    """Check the dataset and return its assignment/treatment cell counts.

    Units with Z=0 and S=1 raise a :class:`MonotonicityWarning`; they do not
    make the data invalid.
    """
    n = dataset.n
    if n == 0:
        raise EmptyDataset("dataset has no rows")
    for name in ("z", "s"):
        col = getattr(dataset, name)
        bad = ~np.isin(col, (0.0, 1.0))
        if bad.any():
            i = int(np.argmax(bad))
            raise NonBinaryColumn(f"column {name!r} has non-binary value {col[i]!r} at row {i}")
    for name in ("y", "x"):
        if not np.all(np.isfinite(getattr(dataset, name))):
            raise NonFiniteValue(f"column {name!r} contains non-finite values")

    z = dataset.z.astype(bool)
    s = dataset.s.astype(bool)
    n1 = int(z.sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DegenerateArm(f"an assignment arm is empty (n0={n0}, n1={n1})")
    n_zs = {
        (0, 0): int((~z & ~s).sum()),
        (0, 1): int((~z & s).sum()),
        (1, 0): int((z & ~s).sum()),
        (1, 1): int((z & s).sum()),
    }
    violations = n_zs[(0, 1)]
    if violations:
        warnings.warn(
            f"strong monotonicity violated at {violations} unit{'s' if violations > 1 else ''}",
            MonotonicityWarning,
            stacklevel=2,
        )
    return StrataCounts(n, (n0, n1), n_zs, n_zs[(1, 1)] / n1, violations)


def _default_x_columns(header: Sequence[str]) -> list[str]:
    found = [(int(m.group(1)), h) for h in header if (m := re.fullmatch(r"x(\d+)", h))]
    return [h for _, h in sorted(found)]


def read_csv(path, schema: Mapping | None = None) -> Dataset:
    """Read a comma-separated file with a header row.

    ``schema`` maps the roles ``y``, ``z``, ``s`` to column names and ``x`` to
    a list of covariate columns. By default covariates are every column named
    ``x1``, ``x2``, ... in numeric order.
    """
    schema = dict(schema or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseFailure(f"{path}: missing header row") from None
        cols = {role: schema.get(role, role) for role in ("y", "z", "s")}
        xcols = list(schema["x"]) if "x" in schema else _default_x_columns(header)
        for name in [*cols.values(), *xcols]:
            if name not in header:
                raise MissingColumn(name)
        wanted = [*cols.values(), *xcols]
        pos = [header.index(c) for c in wanted]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseFailure(f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}")
            vals = []
            for name, j in zip(wanted, pos):
                try:
                    vals.append(float(row[j]))
                except ValueError:
                    raise ParseFailure(
                        f"{path}: line {lineno}, column {name!r}: cannot parse {row[j]!r}"
                    ) from None
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(len(rows), len(wanted))
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3:], tuple(xcols))


def fmt(v: float) -> str:
    """17 significant digits; round-trips any double."""
    return format(float(v), ".17g")


def write_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["y", "z", "s", *dataset.x_names])
        for i in range(dataset.n):
            w.writerow(
                [fmt(dataset.y[i]), fmt(dataset.z[i]), fmt(dataset.s[i]), *(fmt(v) for v in dataset.x[i])]
            )
