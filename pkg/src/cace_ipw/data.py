"""Loading, validation, and in-memory representation of clustered trial data.

Rows carry a cluster id, a cluster-level binary treatment indicator, a binary
service-receipt indicator, a continuous outcome, and named covariates. The
`Dataset` groups rows contiguously by cluster (first-appearance order, original
order preserved within cluster) so downstream per-cluster reductions are plain
slice sums.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np


class DataError(ValueError):
    """Structured load/validation failure.

    Attributes
    ----------
    row : int or None
        1-based data-row number (excluding the header) when the failure is
        attributable to a specific row.
    column : str or None
        Offending column name when known.
    """

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        super().__init__(message)


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from file columns to variable roles.

    Parameters
    ----------
    cluster, treat, receipt, outcome : str
        Column names for the cluster id, cluster-level assignment indicator,
        service-receipt indicator, and outcome.
    covariates_wls : tuple of str
        Covariates entering the outcome regression.
    covariates_logit_t, covariates_logit_c : tuple of str
        Covariates for the treatment-arm and control-arm receipt models. The
        two lists may differ.
    delimiter : str
        Field separator for delimited text input, comma by default.
    """

    cluster: str
    treat: str
    receipt: str
    outcome: str
    covariates_wls: tuple[str, ...] = ()
    covariates_logit_t: tuple[str, ...] = ()
    covariates_logit_c: tuple[str, ...] = ()
    delimiter: str = ","

    def covariate_union(self) -> tuple[str, ...]:
        """All covariate names in first-mention order, without duplicates."""
        seen: dict[str, None] = {}
        for name in (*self.covariates_wls, *self.covariates_logit_t, *self.covariates_logit_c):
            seen.setdefault(name, None)
        return tuple(seen)


@dataclass(frozen=True)
class Observation:
    """A single row view. Mostly useful for tests and debugging."""

    cluster_id: str
    treat: int
    receipt: int
    outcome: float
    covariates: dict[str, float]


@dataclass(frozen=True)
class ValidationReport:
    n_clusters_t: int
    n_clusters_c: int
    receipt_rate_t: float
    receipt_rate_c: float
    warnings: tuple[str, ...]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable clustered trial data with rows grouped contiguously by cluster.

    Attributes
    ----------
    cluster_ids : tuple of str
        Cluster identifiers in first-appearance order; `cluster_starts[k]` to
        `cluster_starts[k+1]` delimit cluster k's rows.
    treat, receipt : ndarray of int8
        Per-row indicators. `treat` is constant within each cluster.
    outcome : ndarray of float64
    covariates : dict mapping name to per-row float64 array
    covariate_names_wls, covariate_names_logit_t, covariate_names_logit_c : tuple of str
        Role lists; every name must be a key of `covariates`.
    """

    cluster_ids: tuple[str, ...]
    cluster_starts: np.ndarray
    treat: np.ndarray
    receipt: np.ndarray
    outcome: np.ndarray
    covariates: dict[str, np.ndarray]
    covariate_names_wls: tuple[str, ...] = ()
    covariate_names_logit_t: tuple[str, ...] = ()
    covariate_names_logit_c: tuple[str, ...] = ()

    def __post_init__(self):
        n = self.outcome.shape[0]
        for label, arr in (("treat", self.treat), ("receipt", self.receipt)):
            if arr.shape != (n,):
                raise DataError(f"{label} length {arr.shape} does not match outcome length {n}")
            bad = ~np.isin(arr, (0, 1))
            if bad.any():
                raise DataError(f"non-binary {label} value at row {int(np.argmax(bad)) + 1}", row=int(np.argmax(bad)) + 1, column=label)
        if not np.isfinite(self.outcome).all():
            i = int(np.argmax(~np.isfinite(self.outcome)))
            raise DataError(f"non-finite outcome at row {i + 1}", row=i + 1, column="outcome")
        declared = set(self.covariate_names_wls) | set(self.covariate_names_logit_t) | set(self.covariate_names_logit_c)
        missing = declared - set(self.covariates)
        if missing:
            raise DataError(f"declared covariates not present: {sorted(missing)}")
        for name, arr in self.covariates.items():
            if arr.shape != (n,):
                raise DataError(f"covariate {name!r} length mismatch", column=name)
            if not np.isfinite(arr).all():
                i = int(np.argmax(~np.isfinite(arr)))
                raise DataError(f"non-finite covariate {name!r} at row {i + 1}", row=i + 1, column=name)
        starts = self.cluster_starts
        if starts.shape != (len(self.cluster_ids) + 1,) or starts[0] != 0 or starts[-1] != n:
            raise DataError("cluster_starts must partition the rows")
        if (np.diff(starts) <= 0).any():
            raise DataError("empty cluster ranges are not allowed")
        # Treatment is assigned at cluster level: constant within each slice.
        for k, cid in enumerate(self.cluster_ids):
            seg = self.treat[starts[k]:starts[k + 1]]
            if seg.min() != seg.max():
                raise DataError(f"mixed treatment in cluster {cid}", column="treat")
        if len(set(self.cluster_ids)) != len(self.cluster_ids):
            raise DataError("duplicate cluster id in cluster_ids")
        ct = self.cluster_treat
        if ct.sum() == 0 or ct.sum() == ct.size:
            raise DataError("both treatment and control clusters are required")
        for arr in (self.treat, self.receipt, self.outcome, self.cluster_starts, *self.covariates.values()):
            arr.setflags(write=False)

    # -- sizes ------------------------------------------------------------

    @property
    def n(self) -> int:
        return int(self.outcome.shape[0])

    @property
    def m(self) -> int:
        return len(self.cluster_ids)

    @property
    def cluster_treat(self) -> np.ndarray:
        """Per-cluster treatment indicator, aligned with `cluster_ids`."""
        return self.treat[self.cluster_starts[:-1]]

    @property
    def m_t(self) -> int:
        return int(self.cluster_treat.sum())

    @property
    def m_c(self) -> int:
        return self.m - self.m_t

    @property
    def n_t(self) -> int:
        return int(self.treat.sum())

    @property
    def n_c(self) -> int:
        return self.n - self.n_t

    @property
    def cluster_index(self) -> dict[str, range]:
        s = self.cluster_starts
        return {cid: range(int(s[k]), int(s[k + 1])) for k, cid in enumerate(self.cluster_ids)}

    @property
    def row_cluster(self) -> np.ndarray:
        """Cluster ordinal for every row."""
        return np.repeat(np.arange(self.m), np.diff(self.cluster_starts))

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        """Column-stack the named covariates into an (n, k) float array."""
        names = tuple(names)
        if not names:
            return np.empty((self.n, 0))
        try:
            return np.column_stack([self.covariates[name] for name in names])
        except KeyError as exc:
            raise DataError(f"unknown covariate {exc.args[0]!r}") from exc

    def observations(self) -> Iterator[Observation]:
        for i in range(self.n):
            yield Observation(
                cluster_id=self.cluster_ids[int(np.searchsorted(self.cluster_starts, i, side="right")) - 1],
                treat=int(self.treat[i]),
                receipt=int(self.receipt[i]),
                outcome=float(self.outcome[i]),
                covariates={name: float(arr[i]) for name, arr in self.covariates.items()},
            )


def _parse_binary(text: str, *, row: int, column: str) -> int:
    value = text.strip()
    if value == "0":
        return 0
    if value == "1":
        return 1
    raise DataError(f"non-binary value {text!r} in column {column!r} at data row {row}", row=row, column=column)


def _parse_real(text: str, *, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"malformed number {text!r} in column {column!r} at data row {row}", row=row, column=column) from None
    if not math.isfinite(value):
        raise DataError(f"non-finite value in column {column!r} at data row {row}", row=row, column=column)
    return value


def from_rows(
    cluster_id: Iterable[str],
    treat: Iterable[int],
    receipt: Iterable[int],
    outcome: Iterable[float],
    covariates: dict[str, Iterable[float]],
    *,
    covariate_names_wls: tuple[str, ...] = (),
    covariate_names_logit_t: tuple[str, ...] = (),
    covariate_names_logit_c: tuple[str, ...] = (),
) -> Dataset:
    """Build a Dataset from per-row sequences, grouping rows by cluster.

    Rows are reordered so each cluster is contiguous; clusters keep their
    first-appearance order and rows keep their original order within cluster.
    """
    ids = [str(c) for c in cluster_id]
    n = len(ids)
    ordinal: dict[str, int] = {}
    for cid in ids:
        ordinal.setdefault(cid, len(ordinal))
    order = np.argsort(np.array([ordinal[c] for c in ids]), kind="stable")
    cluster_ids = tuple(ordinal)
    counts = np.bincount(np.array([ordinal[c] for c in ids]), minlength=len(ordinal))
    starts = np.concatenate(([0], np.cumsum(counts)))

    def take(seq, dtype):
        arr = np.asarray(list(seq) if not isinstance(seq, np.ndarray) else seq, dtype=dtype)
        if arr.shape != (n,):
            raise DataError("column length mismatch")
        return arr[order]

    return Dataset(
        cluster_ids=cluster_ids,
        cluster_starts=starts,
        treat=take(treat, np.int8),
        receipt=take(receipt, np.int8),
        outcome=take(outcome, np.float64),
        covariates={name: take(vals, np.float64) for name, vals in covariates.items()},
        covariate_names_wls=tuple(covariate_names_wls),
        covariate_names_logit_t=tuple(covariate_names_logit_t),
        covariate_names_logit_c=tuple(covariate_names_logit_c),
    )


def load_dataset(source: str | IO[str], schema: ColumnSchema) -> Dataset:
    """Read delimited text with a header row into a Dataset.

    Parameters
    ----------
    source : path or open text stream
    schema : ColumnSchema
        Column-name mapping. All mapped columns must exist in the header.

    Raises
    ------
    DataError
        On missing columns, malformed cells, non-binary treat/receipt,
        ragged rows, or a cluster with mixed treatment assignment.
    """
    if hasattr(source, "read"):
        return _load_stream(source, schema)  # type: ignore[arg-type]
    with open(source, newline="") as handle:
        return _load_stream(handle, schema)


def _load_stream(stream: IO[str], schema: ColumnSchema) -> Dataset:
    reader = csv.reader(stream, delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty input: header row is mandatory") from None
    header = [h.strip() for h in header]
    position: dict[str, int] = {}
    for idx, name in enumerate(header):
        position.setdefault(name, idx)
    needed = (schema.cluster, schema.treat, schema.receipt, schema.outcome, *schema.covariate_union())
    for name in needed:
        if name not in position:
            raise DataError(f"missing column {name!r} in header", column=name)

    cluster: list[str] = []
    treat: list[int] = []
    receipt: list[int] = []
    outcome: list[float] = []
    cov_lists: dict[str, list[float]] = {name: [] for name in schema.covariate_union()}
    width = len(header)
    for row_num, cells in enumerate(reader, start=1):
        if not cells:
            continue
        if len(cells) != width:
            raise DataError(f"malformed row {row_num}: expected {width} fields, got {len(cells)}", row=row_num)
        cluster.append(cells[position[schema.cluster]].strip())
        treat.append(_parse_binary(cells[position[schema.treat]], row=row_num, column=schema.treat))
        receipt.append(_parse_binary(cells[position[schema.receipt]], row=row_num, column=schema.receipt))
        outcome.append(_parse_real(cells[position[schema.outcome]], row=row_num, column=schema.outcome))
        for name, bucket in cov_lists.items():
            bucket.append(_parse_real(cells[position[name]], row=row_num, column=name))
    if not cluster:
        raise DataError("no data rows")
    return from_rows(
        cluster,
        treat,
        receipt,
        outcome,
        cov_lists,
        covariate_names_wls=schema.covariates_wls,
        covariate_names_logit_t=schema.covariates_logit_t,
        covariate_names_logit_c=schema.covariates_logit_c,
    )


def save_dataset(d: Dataset, dest: str | IO[str], schema: ColumnSchema, extra_columns: dict[str, np.ndarray] | None = None) -> None:
    """Write the dataset back out as delimited text.

    Floats are written with `repr` so a reload reproduces every value
    bit-for-bit. `extra_columns` (e.g. a weight vector) are appended after
    the schema columns.
    """
    extra = extra_columns or {}
    if hasattr(dest, "write"):
        _save_stream(d, dest, schema, extra)  # type: ignore[arg-type]
    else:
        with open(dest, "w", newline="") as handle:
            _save_stream(d, handle, schema, extra)


def _save_stream(d: Dataset, stream: IO[str], schema: ColumnSchema, extra: dict[str, np.ndarray]) -> None:
    writer = csv.writer(stream, delimiter=schema.delimiter, lineterminator="\n")
    cov_names = schema.covariate_union()
    writer.writerow([schema.cluster, schema.treat, schema.receipt, schema.outcome, *cov_names, *extra])
    starts = d.cluster_starts
    for k, cid in enumerate(d.cluster_ids):
        for i in range(int(starts[k]), int(starts[k + 1])):
            row = [
                cid,
                str(int(d.treat[i])),
                str(int(d.receipt[i])),
                repr(float(d.outcome[i])),
                *(repr(float(d.covariates[name][i])) for name in cov_names),
                *(repr(float(extra[name][i])) for name in extra),
            ]
            writer.writerow(row)


def validate(d: Dataset) -> ValidationReport:
    """Summarize group structure and flag degeneracies. Never raises."""
    t_rows = d.treat == 1
    rate_t = float(d.receipt[t_rows].mean()) if t_rows.any() else float("nan")
    rate_c = float(d.receipt[~t_rows].mean()) if (~t_rows).any() else float("nan")
    warnings: list[str] = []
    if rate_t in (0.0, 1.0):
        warnings.append("degenerate receipt in treatment group: rate is %g, propensity model cannot be fit" % rate_t)
    if rate_c in (0.0, 1.0):
        warnings.append("degenerate receipt in control group: rate is %g, propensity model cannot be fit" % rate_c)
    if d.m_t < 2:
        warnings.append("fewer than 2 treatment clusters: cluster-robust variances are unavailable")
    if d.m_c < 2:
        warnings.append("fewer than 2 control clusters: cluster-robust variances are unavailable")
    return ValidationReport(
        n_clusters_t=d.m_t,
        n_clusters_c=d.m_c,
        receipt_rate_t=rate_t,
        receipt_rate_c=rate_c,
        warnings=tuple(warnings),
    )
