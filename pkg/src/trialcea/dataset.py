"""Long-format trial data: ingestion, validation, and missingness reports.

A trial dataset holds one record per subject with J utility slots and J cost
slots (observed value or missing), a 0/1 arm indicator, and optional baseline
covariates. All containers are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

# EQ-5D-3L tariffs admit negative utilities down to -0.594; values outside
# this range are legal but worth flagging.
UTILITY_WARN_RANGE = (-0.594, 1.0)

OUTCOMES = ("utility", "cost")

OBSERVED_MARK = "-"
MISSING_MARK = "X"


def _as_slot(value, where: str) -> float | None:
    if value is None:
        return None
    v = float(value)
    if not math.isfinite(v):
        raise DataError(f"{where}: observed values must be finite, got {value!r}")
    return v


@dataclass(frozen=True)
class SubjectRecord:
    """One randomised participant: arm, per-visit outcome slots, covariates."""

    id: str
    arm: int
    utility: tuple[float | None, ...]
    cost: tuple[float | None, ...]
    covariates: Mapping[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise DataError(f"subject {self.id!r}: arm must be 0 or 1, got {self.arm!r}")
        obj = f"subject {self.id!r}"
        object.__setattr__(
            self, "utility", tuple(_as_slot(v, f"{obj} utility") for v in self.utility)
        )
        object.__setattr__(
            self, "cost", tuple(_as_slot(v, f"{obj} cost") for v in self.cost)
        )
        covs = {
            str(k): (None if v is None else _as_slot(v, f"{obj} covariate {k!r}"))
            for k, v in self.covariates.items()
        }
        object.__setattr__(self, "covariates", MappingProxyType(covs))

    def outcome(self, name: str) -> tuple[float | None, ...]:
        if name not in OUTCOMES:
            raise DataError(f"unknown outcome {name!r}; expected one of {OUTCOMES}")
        return self.utility if name == "utility" else self.cost

    def pattern(self) -> str:
        """Joint missingness pattern over (U_1..U_J, C_1..C_J)."""
        marks = [OBSERVED_MARK if v is not None else MISSING_MARK for v in self.utility]
        marks += [OBSERVED_MARK if v is not None else MISSING_MARK for v in self.cost]
        return "".join(marks)

    def is_complete(self) -> bool:
        return all(v is not None for v in self.utility + self.cost)


@dataclass(frozen=True)
class TrialDataset:
    """Validated long-format repeated-measures trial data."""

    subjects: tuple[SubjectRecord, ...]
    visit_schedule: tuple[float, ...]
    arm_labels: tuple[str, str] = ("control", "intervention")

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        times = tuple(float(t) for t in self.visit_schedule)
        if not times:
            raise DataError("visit_schedule must contain at least one visit time")
        if times[0] != 0.0:
            raise DataError(f"first visit time must be 0, got {times[0]}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DataError(f"visit times must be strictly increasing, got {times}")
        object.__setattr__(self, "visit_schedule", times)
        labels = tuple(str(x) for x in self.arm_labels)
        if len(labels) != 2:
            raise DataError("arm_labels must be a (control, intervention) pair")
        object.__setattr__(self, "arm_labels", labels)

        seen = set()
        n_visits = len(times)
        for s in self.subjects:
            if s.id in seen:
                raise DataError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)
            if len(s.utility) != n_visits or len(s.cost) != n_visits:
                raise DataError(
                    f"subject {s.id!r}: expected {n_visits} slots per outcome, "
                    f"got {len(s.utility)} utility and {len(s.cost)} cost"
                )

    @property
    def n_visits(self) -> int:
        return len(self.visit_schedule)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def arm_size(self, arm: int) -> int:
        return sum(1 for s in self.subjects if s.arm == arm)

    def outcome_matrix(self, outcome: str) -> np.ndarray:
        """(N, J) float matrix of one outcome, NaN where missing."""
        rows = [
            [math.nan if v is None else v for v in s.outcome(outcome)]
            for s in self.subjects
        ]
        return np.asarray(rows, dtype=float).reshape(self.n_subjects, self.n_visits)

    def arms(self) -> np.ndarray:
        return np.asarray([s.arm for s in self.subjects], dtype=int)

    def covariate_values(self, name: str) -> list[float | None]:
        if not any(name in s.covariates for s in self.subjects):
            raise DataError(f"unknown covariate {name!r}")
        return [s.covariates.get(name) for s in self.subjects]


def validation_warnings(data: TrialDataset) -> list[str]:
    """Non-fatal data quality flags: odd utilities, negative costs, empty subjects."""
    msgs: list[str] = []
    lo, hi = UTILITY_WARN_RANGE
    odd_u = [
        s.id
        for s in data.subjects
        if any(v is not None and not lo <= v <= hi for v in s.utility)
    ]
    if odd_u:
        msgs.append(
            f"{len(odd_u)} subject(s) with utility outside [{lo}, {hi}]: "
            + ", ".join(map(repr, odd_u[:5]))
            + ("..." if len(odd_u) > 5 else "")
        )
    neg_c = [s.id for s in data.subjects if any(v is not None and v < 0 for v in s.cost)]
    if neg_c:
        msgs.append(
            f"{len(neg_c)} subject(s) with negative cost values: "
            + ", ".join(map(repr, neg_c[:5]))
            + ("..." if len(neg_c) > 5 else "")
        )
    empty = [
        s.id
        for s in data.subjects
        if all(v is None for v in s.utility) and all(v is None for v in s.cost)
    ]
    if empty:
        msgs.append(
            f"{len(empty)} subject(s) with no observed outcome values (retained): "
            + ", ".join(map(repr, empty[:5]))
            + ("..." if len(empty) > 5 else "")
        )
    return msgs


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnMap:
    """Column names in a long-format delimited file."""

    id: str = "id"
    arm: str = "arm"
    time: str = "time"
    utility: str = "u"
    cost: str = "c"
    covariates: tuple[str, ...] = ()


DEFAULT_MISSING_TOKENS = ("", "NA")


def _open_source(source):
    if isinstance(source, (str, Path)):
        return open(source, "r", newline=""), True
    return source, False


def _parse_number(token: str, missing_tokens, where: str) -> float | None:
    if token in missing_tokens:
        return None
    try:
        v = float(token)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {token!r}") from None
    if not math.isfinite(v):
        raise DataError(f"{where}: non-finite value {token!r}")
    return v


def load_long(
    source,
    visit_times: Sequence[float],
    columns: ColumnMap | None = None,
    arm_labels: tuple[str, str] = ("control", "intervention"),
    missing_tokens: Iterable[str] = DEFAULT_MISSING_TOKENS,
    delimiter: str | None = None,
) -> TrialDataset:
    """Read a long-format delimited file into a validated :class:`TrialDataset`.

    One row per subject-visit; the time column holds the visit index 1..J.
    Visits without a row become missing slots. Missing values are encoded as
    an empty field or one of ``missing_tokens`` (case-sensitive). The
    delimiter is auto-detected (comma or tab) unless given.
    """
    cols = columns or ColumnMap()
    missing_tokens = tuple(missing_tokens)
    n_visits = len(visit_times)

    fh, should_close = _open_source(source)
    try:
        first = fh.readline()
        if not first:
            raise DataError("input is empty (no header row)")
        sep = delimiter or ("\t" if "\t" in first else ",")
        header = next(csv.reader([first], delimiter=sep))
        header = [h.strip() for h in header]
        idx: dict[str, int] = {}
        needed = {
            "id": cols.id,
            "arm": cols.arm,
            "time": cols.time,
            "utility": cols.utility,
            "cost": cols.cost,
        }
        for role, name in needed.items():
            if name not in header:
                raise DataError(f"missing required column {name!r} (maps to {role})")
            idx[role] = header.index(name)
        cov_idx = {}
        for name in cols.covariates:
            if name not in header:
                raise DataError(f"missing covariate column {name!r}")
            cov_idx[name] = header.index(name)

        order: list[str] = []
        arm_of: dict[str, int] = {}
        slots: dict[str, dict[int, tuple[float | None, float | None]]] = {}
        covs: dict[str, dict[str, float | None]] = {}

        reader = csv.reader(fh, delimiter=sep)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) < len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[idx["id"]].strip()
            if not sid:
                raise DataError(f"row {lineno}, column {cols.id!r}: empty subject id")
            arm_tok = row[idx["arm"]].strip()
            if arm_tok not in ("0", "1"):
                raise DataError(
                    f"row {lineno}, column {cols.arm!r}: arm must be 0 or 1, got {arm_tok!r}"
                )
            arm = int(arm_tok)
            t_tok = row[idx["time"]].strip()
            try:
                t = int(t_tok)
            except ValueError:
                raise DataError(
                    f"row {lineno}, column {cols.time!r}: non-integer time index {t_tok!r}"
                ) from None
            if not 1 <= t <= n_visits:
                raise DataError(
                    f"row {lineno}, column {cols.time!r}: time index {t} outside 1..{n_visits}"
                )
            u = _parse_number(
                row[idx["utility"]].strip(), missing_tokens,
                f"row {lineno}, column {cols.utility!r}",
            )
            c = _parse_number(
                row[idx["cost"]].strip(), missing_tokens,
                f"row {lineno}, column {cols.cost!r}",
            )

            if sid not in arm_of:
                order.append(sid)
                arm_of[sid] = arm
                slots[sid] = {}
                covs[sid] = {name: None for name in cols.covariates}
            elif arm_of[sid] != arm:
                raise DataError(
                    f"row {lineno}: subject {sid!r} has inconsistent arm "
                    f"({arm} vs {arm_of[sid]})"
                )
            if t in slots[sid]:
                raise DataError(f"row {lineno}: duplicate (id={sid!r}, time={t}) row")
            slots[sid][t] = (u, c)

            for name, j in cov_idx.items():
                v = _parse_number(
                    row[j].strip(), missing_tokens, f"row {lineno}, column {name!r}"
                )
                if v is None:
                    continue
                prev = covs[sid][name]
                if prev is None:
                    covs[sid][name] = v
                elif prev != v:
                    raise DataError(
                        f"row {lineno}, column {name!r}: covariate differs across rows "
                        f"of subject {sid!r} ({v} vs {prev})"
                    )
    finally:
        if should_close:
            fh.close()

    subjects = []
    for sid in order:
        u_slots = tuple(slots[sid].get(t, (None, None))[0] for t in range(1, n_visits + 1))
        c_slots = tuple(slots[sid].get(t, (None, None))[1] for t in range(1, n_visits + 1))
        subjects.append(
            SubjectRecord(id=sid, arm=arm_of[sid], utility=u_slots, cost=c_slots,
                          covariates=covs[sid])
        )
    data = TrialDataset(
        subjects=tuple(subjects),
        visit_schedule=tuple(float(t) for t in visit_times),
        arm_labels=arm_labels,
    )
    for msg in validation_warnings(data):
        warnings.warn(msg, stacklevel=2)
    return data


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(value)


def save_long(
    data: TrialDataset,
    dest,
    columns: ColumnMap | None = None,
    delimiter: str = ",",
) -> None:
    """Write a dataset back to long format (one row per subject-visit).

    Missing slots become empty fields, so ``load_long(save_long(x)) == x``.
    """
    cols = columns or ColumnMap(covariates=_covariate_names(data))
    fh, should_close = (open(dest, "w", newline=""), True) if isinstance(
        dest, (str, Path)
    ) else (dest, False)
    try:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([cols.id, cols.arm, cols.time, cols.utility, cols.cost, *cols.covariates])
        for s in data.subjects:
            for t in range(data.n_visits):
                w.writerow(
                    [s.id, s.arm, t + 1, _fmt(s.utility[t]), _fmt(s.cost[t])]
                    + [_fmt(s.covariates.get(name)) for name in cols.covariates]
                )
    finally:
        if should_close:
            fh.close()


def _covariate_names(data: TrialDataset) -> tuple[str, ...]:
    names: list[str] = []
    for s in data.subjects:
        for k in s.covariates:
            if k not in names:
                names.append(k)
    return tuple(names)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatternRow:
    pattern: str
    n_by_arm: tuple[int, int]
    pct_by_arm: tuple[float | None, float | None]
    n_total: int
    pct_total: float | None


@dataclass(frozen=True)
class PatternTable:
    """Distinct joint missingness patterns with per-arm counts and shares."""

    rows: tuple[PatternRow, ...]
    arm_sizes: tuple[int, int]
    arm_labels: tuple[str, str]
    n_visits: int

    def to_json_dict(self) -> dict:
        return {
            "n_visits": self.n_visits,
            "arm_labels": list(self.arm_labels),
            "arm_sizes": list(self.arm_sizes),
            "slot_order": [f"U{j}" for j in range(1, self.n_visits + 1)]
            + [f"C{j}" for j in range(1, self.n_visits + 1)],
            "rows": [
                {
                    "pattern": r.pattern,
                    "n_control": r.n_by_arm[0],
                    "n_intervention": r.n_by_arm[1],
                    "pct_control": r.pct_by_arm[0],
                    "pct_intervention": r.pct_by_arm[1],
                    "n_total": r.n_total,
                    "pct_total": r.pct_total,
                }
                for r in self.rows
            ],
        }

    def to_delimited(self, delimiter: str = ",") -> str:
        def pct(x):
            return "" if x is None else str(round(x))

        lines = [
            delimiter.join(
                ["pattern", "n_control", "pct_control", "n_intervention",
                 "pct_intervention", "n_total", "pct_total"]
            )
        ]
        for r in self.rows:
            lines.append(
                delimiter.join(
                    [
                        r.pattern,
                        str(r.n_by_arm[0]), pct(r.pct_by_arm[0]),
                        str(r.n_by_arm[1]), pct(r.pct_by_arm[1]),
                        str(r.n_total), pct(r.pct_total),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def pattern_table(data: TrialDataset) -> PatternTable:
    """Tabulate joint (utility, cost) missingness patterns, one row each."""
    counts: dict[str, list[int]] = {}
    for s in data.subjects:
        counts.setdefault(s.pattern(), [0, 0])[s.arm] += 1
    n0, n1 = data.arm_size(0), data.arm_size(1)
    n = n0 + n1
    rows = []
    for pattern, (c0, c1) in counts.items():
        rows.append(
            PatternRow(
                pattern=pattern,
                n_by_arm=(c0, c1),
                pct_by_arm=(
                    100.0 * c0 / n0 if n0 else None,
                    100.0 * c1 / n1 if n1 else None,
                ),
                n_total=c0 + c1,
                pct_total=100.0 * (c0 + c1) / n if n else None,
            )
        )
    rows.sort(key=lambda r: (-r.n_total, r.pattern))
    return PatternTable(
        rows=tuple(rows),
        arm_sizes=(n0, n1),
        arm_labels=data.arm_labels,
        n_visits=data.n_visits,
    )


@dataclass(frozen=True)
class DescriptiveCell:
    outcome: str
    arm: int
    visit: int  # 1-based
    time_years: float
    n: int
    mean: float | None
    sd: float | None


@dataclass(frozen=True)
class DescriptiveTable:
    """Available-case mean / SD / n per outcome, arm, and visit."""

    cells: tuple[DescriptiveCell, ...]
    arm_labels: tuple[str, str]

    def cell(self, outcome: str, arm: int, visit: int) -> DescriptiveCell:
        for c in self.cells:
            if (c.outcome, c.arm, c.visit) == (outcome, arm, visit):
                return c
        raise KeyError((outcome, arm, visit))

    def to_json_dict(self) -> dict:
        return {
            "arm_labels": list(self.arm_labels),
            "cells": [
                {
                    "outcome": c.outcome,
                    "arm": c.arm,
                    "visit": c.visit,
                    "time_years": c.time_years,
                    "n": c.n,
                    "mean": c.mean,
                    "sd": c.sd,
                }
                for c in self.cells
            ],
        }

    def to_delimited(self, delimiter: str = ",") -> str:
        lines = [delimiter.join(["outcome", "arm", "visit", "time_years", "n", "mean", "sd"])]
        for c in self.cells:
            lines.append(
                delimiter.join(
                    [
                        c.outcome, str(c.arm), str(c.visit), repr(c.time_years),
                        str(c.n),
                        "" if c.mean is None else repr(c.mean),
                        "" if c.sd is None else repr(c.sd),
                    ]
                )
            )
        return "\n".join(lines) + "\n"


def descriptives(data: TrialDataset) -> DescriptiveTable:
    """Observed means and standard deviations (n-1 denominator) per cell."""
    cells = []
    for outcome in OUTCOMES:
        mat = data.outcome_matrix(outcome)
        arms = data.arms() if data.n_subjects else np.empty(0, dtype=int)
        for arm in (0, 1):
            sub = mat[arms == arm] if data.n_subjects else np.empty((0, data.n_visits))
            for j in range(data.n_visits):
                col = sub[:, j] if sub.size else np.empty(0)
                vals = col[~np.isnan(col)] if col.size else np.empty(0)
                n = int(vals.size)
                mean = float(vals.mean()) if n else None
                sd = float(vals.std(ddof=1)) if n >= 2 else None
                cells.append(
                    DescriptiveCell(
                        outcome=outcome, arm=arm, visit=j + 1,
                        time_years=data.visit_schedule[j], n=n, mean=mean, sd=sd,
                    )
                )
    return DescriptiveTable(cells=tuple(cells), arm_labels=data.arm_labels)


def mean_impute_covariates(
    data: TrialDataset, covariate_names: Sequence[str]
) -> TrialDataset:
    """Replace missing baseline covariates by their overall observed mean.

    The mean is pooled across arms. Outcome slots are untouched; a new
    dataset is returned and the input is left unchanged.
    """
    means = {}
    for name in covariate_names:
        values = data.covariate_values(name)
        observed = [v for v in values if v is not None]
        if not observed:
            raise DataError(f"covariate {name!r} has no observed values to impute from")
        means[name] = sum(observed) / len(observed)

    changed = False
    subjects = []
    for s in data.subjects:
        new_covs = dict(s.covariates)
        for name, mean in means.items():
            if new_covs.get(name) is None:
                new_covs[name] = mean
                changed = True
        subjects.append(replace(s, covariates=new_covs))
    if not changed:
        return data
    return replace(data, subjects=tuple(subjects))
