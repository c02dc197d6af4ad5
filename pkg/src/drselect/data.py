"""Data ingestion, feature expansion, and design standardization.

Observational data enter as a :class:`Dataset` (outcome, integer treatment
labels, raw covariates).  A :class:`DesignMatrix` is the high-dimensional
design actually handed to the penalized fits: intercept plus expanded
columns, each non-intercept column rescaled so its empirical second moment
``mean(x**2)`` equals one.  The rescaling is about zero, not the mean, so
back-transforming a coefficient is a plain division by the stored scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

SECOND_MOMENT_TOL = 1e-10


class DataError(ValueError):
    """Raised for malformed input data or expansion rules."""


@dataclass(frozen=True)
class Dataset:
    """Immutable observational sample.

    y : outcome vector, length n.
    d : integer treatment labels in {0, ..., T}, length n.
    x_raw : raw covariate matrix, n x k.
    column_names : names for the k raw covariate columns.
    treatment_map : original label -> dense label, in order of first appearance.
    """

    y: np.ndarray
    d: np.ndarray
    x_raw: np.ndarray
    column_names: tuple[str, ...]
    treatment_map: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        d = np.asarray(self.d, dtype=np.int64)
        x = np.asarray(self.x_raw, dtype=float)
        if x.ndim != 2:
            raise DataError("x_raw must be a 2-d array")
        n = y.shape[0]
        if n < 2:
            raise DataError("need at least 2 observations")
        if d.shape[0] != n or x.shape[0] != n:
            raise DataError("y, d, x_raw must have matching length")
        if len(self.column_names) != x.shape[1]:
            raise DataError("column_names must match x_raw width")
        if not np.all(np.isfinite(y)):
            raise DataError("non-finite values in outcome")
        if x.size and not np.all(np.isfinite(x)):
            raise DataError("non-finite values in covariates")
        if d.min(initial=0) < 0:
            raise DataError("treatment labels must be nonnegative")
        t_max = int(d.max(initial=0))
        if t_max < 1:
            raise DataError("need at least two treatment levels (T >= 1)")
        counts = np.bincount(d, minlength=t_max + 1)
        if np.any(counts == 0):
            missing = [t for t, c in enumerate(counts) if c == 0]
            raise DataError(f"treatment levels {missing} have no observations")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x_raw", x)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_treatments(self) -> int:
        """T: the largest treatment label (levels are 0..T)."""
        return int(self.d.max())

    @property
    def group_counts(self) -> np.ndarray:
        return np.bincount(self.d, minlength=self.n_treatments + 1)


@dataclass(frozen=True)
class DesignMatrix:
    """Standardized design: intercept column is exact ones and never penalized.

    col_scales holds sqrt(mean(x**2)) of each pre-standardization column
    (1.0 for the intercept); dividing fitted coefficients elementwise by
    col_scales reproduces raw-scale coefficients.
    """

    x_star: np.ndarray
    intercept_col: int | None
    col_means: np.ndarray
    col_scales: np.ndarray
    provenance: tuple[str, ...]
    dropped: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.x_star, dtype=float)
        object.__setattr__(self, "x_star", x)
        m2 = (x * x).mean(axis=0)
        for j in range(x.shape[1]):
            if j == self.intercept_col:
                if not np.all(x[:, j] == 1.0):
                    raise DataError("intercept column must be all ones")
            elif abs(m2[j] - 1.0) > SECOND_MOMENT_TOL:
                raise DataError(
                    f"column {self.provenance[j]!r} has second moment {m2[j]!r}, not 1"
                )

    @property
    def p(self) -> int:
        return self.x_star.shape[1]

    @property
    def x_max(self) -> float:
        """Largest absolute entry of the standardized design."""
        return float(np.abs(self.x_star).max())

    def penalized_columns(self) -> np.ndarray:
        keep = np.ones(self.p, dtype=bool)
        if self.intercept_col is not None:
            keep[self.intercept_col] = False
        return np.flatnonzero(keep)

    def to_raw_coefficients(self, coef: np.ndarray) -> np.ndarray:
        """Map coefficients on the standardized scale back to the raw scale."""
        coef = np.asarray(coef, dtype=float)
        if coef.shape[0] != self.p:
            raise ValueError("coefficient rows must match design width")
        scales = self.col_scales.reshape(-1, *([1] * (coef.ndim - 1)))
        return coef / scales


@dataclass(frozen=True)
class ExpansionSpec:
    """Rules for building the high-dimensional design from raw columns.

    base : raw columns to include linearly.
    indicators : columns that get an extra 1{value == 0} dummy.
    interactions : include all pairwise products among base + indicator columns.
    degrees : per-column maximum polynomial degree (>= 1); powers 2..degree
        are appended for listed columns.
    """

    base: tuple[str, ...]
    indicators: tuple[str, ...] = ()
    interactions: bool = False
    degrees: dict = field(default_factory=dict)


def load_csv(path, outcome_col: str, treatment_col: str) -> Dataset:
    """Read a UTF-8, comma-separated file with a header row into a Dataset.

    All columns other than the outcome and treatment become raw covariates.
    Treatment labels are relabeled to a dense 0..T in order of first
    appearance; the mapping is kept on the returned Dataset.
    """
    if isinstance(path, io.IOBase):
        rows = list(csv.reader(path))
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for name in (outcome_col, treatment_col):
        if name not in header:
            raise DataError(f"column {name!r} not found in header {header}")
    y_idx = header.index(outcome_col)
    d_idx = header.index(treatment_col)
    cov_idx = [j for j in range(len(header)) if j not in (y_idx, d_idx)]

    y, d_orig, x = [], [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"row {i}: expected {len(header)} cells, got {len(row)}")
        try:
            y.append(float(row[y_idx]))
        except ValueError:
            raise DataError(
                f"row {i}, column {outcome_col!r}: non-numeric cell {row[y_idx]!r}"
            ) from None
        cell = row[d_idx].strip()
        try:
            val = float(cell)
        except ValueError:
            raise DataError(
                f"row {i}, column {treatment_col!r}: non-numeric cell {cell!r}"
            ) from None
        if val < 0 or val != int(val):
            raise DataError(
                f"row {i}, column {treatment_col!r}: {cell!r} is not a nonnegative integer"
            )
        d_orig.append(int(val))
        xrow = []
        for j in cov_idx:
            try:
                xrow.append(float(row[j]))
            except ValueError:
                raise DataError(
                    f"row {i}, column {header[j]!r}: non-numeric cell {row[j]!r}"
                ) from None
        x.append(xrow)

    mapping: dict[int, int] = {}
    for lab in d_orig:
        if lab not in mapping:
            mapping[lab] = len(mapping)
    d = np.array([mapping[lab] for lab in d_orig], dtype=np.int64)
    names = tuple(header[j] for j in cov_idx)
    return Dataset(
        y=np.asarray(y),
        d=d,
        x_raw=np.asarray(x, dtype=float).reshape(len(y), len(cov_idx)),
        column_names=names,
        treatment_map=mapping,
    )


def parse_expansion_config(text: str) -> ExpansionSpec:
    """Parse the plain key-value expansion config.

    Recognized keys: ``base=`` (comma list), ``indicators=`` (comma list),
    ``interactions=`` (true/false), ``degree.<col>=<int>``.  Blank lines and
    lines starting with ``#`` are ignored.
    """
    base: list[str] = []
    indicators: list[str] = []
    interactions = False
    degrees: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"expansion config line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "base":
            base = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "indicators":
            indicators = [v.strip() for v in value.split(",") if v.strip()]
        elif key == "interactions":
            if value.lower() not in ("true", "false", "0", "1"):
                raise DataError(f"expansion config line {lineno}: bad bool {value!r}")
            interactions = value.lower() in ("true", "1")
        elif key.startswith("degree."):
            col = key[len("degree."):]
            try:
                degrees[col] = int(value)
            except ValueError:
                raise DataError(
                    f"expansion config line {lineno}: bad degree {value!r}"
                ) from None
        else:
            raise DataError(f"expansion config line {lineno}: unknown key {key!r}")
    return ExpansionSpec(
        base=tuple(base),
        indicators=tuple(indicators),
        interactions=interactions,
        degrees=degrees,
    )


def expand_features(ds: Dataset, spec: ExpansionSpec) -> DesignMatrix:
    """Build and standardize the expanded design.

    Column order is deterministic: intercept, base columns, zero indicators,
    pairwise interactions (lexicographic name pairs over base + indicators),
    then polynomial powers (by column, degree ascending from 2).  Duplicate
    and constant columns are dropped, recorded in ``dropped``.
    """
    name_to_idx = {nm: j for j, nm in enumerate(ds.column_names)}
    for nm in list(spec.base) + list(spec.indicators) + list(spec.degrees):
        if nm not in name_to_idx:
            raise DataError(f"unknown column {nm!r} in expansion rules")
    for nm, deg in spec.degrees.items():
        if deg < 1:
            raise DataError(f"degree for {nm!r} must be >= 1, got {deg}")

    n = ds.n
    cols: list[np.ndarray] = [np.ones(n)]
    prov: list[str] = ["intercept"]
    dropped: list[str] = []

    def col(nm: str) -> np.ndarray:
        return ds.x_raw[:, name_to_idx[nm]]

    for nm in spec.base:
        cols.append(col(nm))
        prov.append(nm)

    indicator_cols: dict[str, np.ndarray] = {}
    for nm in spec.indicators:
        v = (col(nm) == 0.0).astype(float)
        label = f"I({nm}==0)"
        if not v.any():
            dropped.append(label + " [no zeros]")
            continue
        indicator_cols[label] = v
        cols.append(v)
        prov.append(label)

    if spec.interactions:
        terms = [(nm, col(nm)) for nm in spec.base]
        terms += sorted(indicator_cols.items())
        terms.sort(key=lambda t: t[0])
        for a in range(len(terms)):
            for b in range(a + 1, len(terms)):
                cols.append(terms[a][1] * terms[b][1])
                prov.append(f"{terms[a][0]}*{terms[b][0]}")

    for nm in spec.base:
        deg = spec.degrees.get(nm, 1)
        for k in range(2, deg + 1):
            cols.append(col(nm) ** k)
            prov.append(f"{nm}^{k}")

    # drop exact duplicates and constants (intercept excepted)
    keep_cols: list[np.ndarray] = []
    keep_prov: list[str] = []
    seen: dict[bytes, str] = {}
    for j, (c, label) in enumerate(zip(cols, prov)):
        if j > 0 and np.all(c == c[0]):
            dropped.append(label + " [constant]")
            continue
        key = c.tobytes()
        if key in seen:
            dropped.append(label + f" [duplicate of {seen[key]}]")
            continue
        seen[key] = label
        keep_cols.append(c)
        keep_prov.append(label)

    x = np.column_stack(keep_cols)
    return standardize(x, intercept_col=0, provenance=keep_prov, dropped=dropped)


def standardize(
    x: np.ndarray,
    intercept_col: int | None = None,
    provenance=None,
    dropped=(),
) -> DesignMatrix:
    """Rescale each non-intercept column so mean(x**2) == 1.

    The scaling is the root second moment about zero, not the standard
    deviation; columns are not centered.  Constant non-intercept columns are
    rejected.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DataError("design must be 2-d")
    n, p = x.shape
    if provenance is None:
        provenance = [f"x{j}" for j in range(p)]
    scales = np.ones(p)
    out = np.array(x, dtype=float, copy=True)
    for j in range(p):
        if j == intercept_col:
            continue
        if np.all(x[:, j] == x[0, j]):
            raise DataError(f"column {provenance[j]!r} is constant; cannot standardize")
        s = float(np.sqrt(np.mean(x[:, j] ** 2)))
        scales[j] = s
        out[:, j] = x[:, j] / s
    return DesignMatrix(
        x_star=out,
        intercept_col=intercept_col,
        col_means=x.mean(axis=0),
        col_scales=scales,
        provenance=tuple(provenance),
        dropped=tuple(dropped),
    )
