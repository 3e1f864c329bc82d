"""Right-censored survival data with fixed or piecewise-constant covariates.

Covariate paths are left-continuous step functions: ``values[k]`` applies on
``(breakpoints[k], breakpoints[k+1]]``.  Internally every subject is stored
as a list of segments, which is the representation the baseline solver works
with; fixed covariates are the one-segment case.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Invalid survival data."""


@dataclass(frozen=True)
class CovariatePath:
    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v.reshape(len(b), -1) if len(b) > 1 else v.reshape(1, -1)
        if len(b) == 0 or b[0] != 0.0:
            raise DataError("covariate path must start at time 0")
        if np.any(np.diff(b) <= 0):
            raise DataError("covariate breakpoints must be strictly increasing")
        if v.shape[0] != len(b):
            raise DataError("one covariate value is needed per segment")
        if not np.all(np.isfinite(v)):
            raise DataError("NaN covariate")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "values", v)

    @classmethod
    def fixed(cls, z) -> "CovariatePath":
        return cls(np.zeros(1), np.atleast_1d(np.asarray(z, dtype=float)).reshape(1, -1))

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def is_fixed(self) -> bool:
        return len(self.breakpoints) == 1

    def __call__(self, t) -> np.ndarray:
        """Covariate value at time(s) ``t`` (left-continuous)."""
        k = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="left") - 1
        return self.values[np.maximum(k, 0)]


@dataclass(frozen=True)
class Subject:
    id: object
    V: float
    delta: int
    z: CovariatePath

    def __post_init__(self):
        if not (np.isfinite(self.V) and self.V > 0):
            raise DataError(f"subject {self.id}: nonpositive time")
        if self.delta not in (0, 1):
            raise DataError(f"subject {self.id}: invalid status {self.delta}")


@dataclass(frozen=True)
class FailureGrid:
    times: np.ndarray
    counts: np.ndarray


class Dataset:
    """An immutable collection of right-censored subjects on ``[0, tau]``.

    Subjects observed beyond ``tau`` are censored at ``tau``.
    """

    def __init__(self, subjects: Sequence[Subject], tau: float | None = None,
                 covariate_names: Sequence[str] | None = None):
        if len(subjects) == 0:
            raise DataError("no subjects")
        d = subjects[0].z.d
        if any(s.z.d != d for s in subjects):
            raise DataError("inconsistent covariate dimension")
        time = np.array([s.V for s in subjects], dtype=float)
        status = np.array([s.delta for s in subjects], dtype=np.int64)
        seg_subject, seg_start, seg_z = [], [], []
        for i, s in enumerate(subjects):
            seg_subject.extend([i] * len(s.z.breakpoints))
            seg_start.extend(s.z.breakpoints)
            seg_z.append(s.z.values)
        self._init_arrays(time, status, np.array(seg_subject), np.array(seg_start, dtype=float),
                          np.vstack(seg_z), tau, covariate_names, [s.id for s in subjects])

    @classmethod
    def from_arrays(cls, time, status, Z, tau: float | None = None,
                    covariate_names: Sequence[str] | None = None, ids=None) -> "Dataset":
        """Fast constructor for fixed covariates (``Z`` is n x d)."""
        time = np.asarray(time, dtype=float).ravel()
        status = np.asarray(status).ravel()
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z.reshape(-1, 1)
        n = len(time)
        if Z.shape[0] != n or len(status) != n:
            raise DataError("time, status and covariates must have the same length")
        if not np.all(np.isin(status, (0, 1))):
            raise DataError("invalid status")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise DataError("nonpositive time")
        if not np.all(np.isfinite(Z)):
            raise DataError("NaN covariate")
        self = cls.__new__(cls)
        self._init_arrays(time, status.astype(np.int64), np.arange(n), np.zeros(n), Z, tau,
                          covariate_names, ids)
        return self

    def _init_arrays(self, time, status, seg_subject, seg_start, seg_z, tau, names, ids):
        n = len(time)
        tau = float(time.max()) if tau is None else float(tau)
        if not tau > 0:
            raise DataError("tau must be positive")
        over = time > tau
        time = np.where(over, tau, time)
        status = np.where(over, 0, status)
        if status.sum() == 0:
            raise DataError("zero events")
        # segment stops: next start of the same subject, else the subject's time
        order = np.lexsort((seg_start, seg_subject))
        seg_subject, seg_start, seg_z = seg_subject[order], seg_start[order], seg_z[order]
        seg_stop = np.empty_like(seg_start)
        last = np.r_[seg_subject[1:] != seg_subject[:-1], True]
        seg_stop[~last] = seg_start[1:][~last[:-1]]
        seg_stop[last] = time[seg_subject[last]]
        keep = seg_start < seg_stop
        # the first segment always survives, even if V is tiny
        keep |= np.r_[True, seg_subject[1:] != seg_subject[:-1]]
        seg_subject, seg_start, seg_stop, seg_z = (a[keep] for a in (seg_subject, seg_start, seg_stop, seg_z))
        seg_stop = np.minimum(seg_stop, time[seg_subject])
        self.time = time
        self.status = status
        self.tau = tau
        self.seg_subject = seg_subject
        self.seg_start = seg_start
        self.seg_stop = seg_stop
        self.seg_z = np.ascontiguousarray(seg_z)
        self.n = n
        self.d = seg_z.shape[1]
        self.covariate_names = list(names) if names is not None else [f"z{j + 1}" for j in range(self.d)]
        if len(self.covariate_names) != self.d:
            raise DataError("wrong number of covariate names")
        self.ids = list(ids) if ids is not None else list(range(n))
        for a in (self.time, self.status, self.seg_subject, self.seg_start, self.seg_stop, self.seg_z):
            a.setflags(write=False)

    # -- views ---------------------------------------------------------------

    @property
    def n_events(self) -> int:
        return int(self.status.sum())

    @cached_property
    def is_fixed(self) -> bool:
        return len(self.seg_subject) == self.n

    @cached_property
    def Z(self) -> np.ndarray:
        """n x d covariate matrix (fixed covariates only)."""
        if not self.is_fixed:
            raise DataError("covariates are time-varying")
        return self.seg_z

    @cached_property
    def last_segment(self) -> np.ndarray:
        """Index of the segment holding each subject's covariate at V."""
        idx = np.empty(self.n, dtype=np.int64)
        idx[self.seg_subject] = np.arange(len(self.seg_subject))
        return idx

    def covariates_at(self, t: float) -> np.ndarray:
        """n x d matrix of Z_i(t) under the left-continuous convention."""
        inside = (self.seg_start < t) & (t <= self.seg_stop) | ((t <= 0) & (self.seg_start == 0))
        out = self.seg_z[self.last_segment].copy()
        out[self.seg_subject[inside]] = self.seg_z[inside]
        return out

    def at_risk(self, t) -> np.ndarray:
        """Y_i(t) = 1{V_i >= t}."""
        return (self.time >= t).astype(float)

    def counting(self, t) -> np.ndarray:
        """N_i(t) = 1{V_i <= t, delta_i = 1}."""
        return ((self.time <= t) & (self.status == 1)).astype(float)

    @cached_property
    def subjects(self) -> list[Subject]:
        out = []
        for i in range(self.n):
            rows = np.flatnonzero(self.seg_subject == i)
            path = CovariatePath(self.seg_start[rows], self.seg_z[rows])
            out.append(Subject(self.ids[i], float(self.time[i]), int(self.status[i]), path))
        return out

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DataError("empty subset")
        if self.is_fixed:
            return Dataset.from_arrays(self.time[mask], self.status[mask], self.Z[mask], self.tau,
                                       self.covariate_names, [self.ids[i] for i in np.flatnonzero(mask)])
        return Dataset([s for s, m in zip(self.subjects, mask) if m], self.tau, self.covariate_names)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.tau == other.tau and self.covariate_names == other.covariate_names
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("time", "status", "seg_subject", "seg_start", "seg_stop", "seg_z")))

    def __repr__(self):
        return f"Dataset(n={self.n}, d={self.d}, events={self.n_events}, tau={self.tau:g})"

    # -- io --------------------------------------------------------------------

    def to_long_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "start", "stop", "status", *self.covariate_names])
            for k in range(len(self.seg_subject)):
                i = self.seg_subject[k]
                last = self.last_segment[i] == k
                w.writerow([self.ids[i], repr(float(self.seg_start[k])), repr(float(self.seg_stop[k])),
                            int(self.status[i]) if last else 0, *map(repr, map(float, self.seg_z[k]))])

    def to_wide_csv(self, path) -> None:
        Z = self.Z
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "status", *self.covariate_names])
            for i in range(self.n):
                w.writerow([repr(float(self.time[i])), int(self.status[i]), *map(repr, map(float, Z[i]))])


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    return header, body


def _num(x, what, line):
    try:
        return float(x)
    except ValueError:
        raise DataError(f"line {line}: cannot parse {what} {x!r}") from None


def _status(x, line):
    v = _num(x, "status", line)
    if v not in (0.0, 1.0):
        raise DataError(f"line {line}: invalid status {x!r}")
    return int(v)


def load_wide_csv(path: str | Path, tau: float | None = None) -> Dataset:
    """Read ``time,status,<cov1>,...`` (one row per subject)."""
    header, body = _read_rows(path)
    if header[:2] != ["time", "status"]:
        raise DataError("wide csv header must start with time,status")
    names = header[2:]
    time, status, Z = [], [], []
    for line, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields")
        t = _num(r[0], "time", line)
        if not t > 0:
            raise DataError(f"line {line}: nonpositive time")
        time.append(t)
        status.append(_status(r[1], line))
        z = [_num(x, "covariate", line) for x in r[2:]]
        if any(np.isnan(z)):
            raise DataError(f"line {line}: NaN covariate")
        Z.append(z)
    if not body:
        raise DataError("no subjects")
    return Dataset.from_arrays(time, status, np.array(Z, dtype=float).reshape(len(time), len(names)), tau, names)


def load_long_csv(path: str | Path, tau: float | None = None) -> Dataset:
    """Read counting-process rows ``id,start,stop,status,<cov1>,...``."""
    header, body = _read_rows(path)
    if header[:4] != ["id", "start", "stop", "status"]:
        raise DataError("long csv header must start with id,start,stop,status")
    names = header[4:]
    by_id: dict[str, list] = {}
    for line, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields")
        z = [_num(x, "covariate", line) for x in r[4:]]
        if any(np.isnan(z)):
            raise DataError(f"line {line}: NaN covariate")
        by_id.setdefault(r[0].strip(), []).append(
            (_num(r[1], "start", line), _num(r[2], "stop", line), _status(r[3], line), z, line))
    subjects = []
    for sid, rows in by_id.items():
        rows.sort(key=lambda x: x[0])
        if rows[0][0] != 0.0:
            raise DataError(f"id {sid}: intervals must start at 0")
        for (_, e0, st0, _, ln0), (s1, _, _, _, _) in zip(rows, rows[1:]):
            if s1 > e0:
                raise DataError(f"id {sid}: gap between {e0} and {s1}")
            if s1 < e0:
                raise DataError(f"id {sid}: overlapping intervals at {s1}")
            if st0 == 1:
                raise DataError(f"id {sid}: event before the final interval (line {ln0})")
        for s, e, _, _, ln in rows:
            if not e > s:
                raise DataError(f"line {ln}: stop must exceed start")
        path = CovariatePath(np.array([r[0] for r in rows]), np.array([r[3] for r in rows], dtype=float))
        subjects.append(Subject(sid, rows[-1][1], rows[-1][2], path))
    if not subjects:
        raise DataError("no subjects")
    return Dataset(subjects, tau, names)


def failure_grid(data: Dataset) -> FailureGrid:
    """Distinct observed failure times with their multiplicities."""
    times, counts = np.unique(data.time[data.status == 1], return_counts=True)
    return FailureGrid(times, counts)
