"""In-memory cohort data model and the flat-file bundle format.

A bundle is three CSV files:

* ``covariates.csv`` -- ``subject_id,covariate_id,value`` (long/triplet form)
* ``cohort.csv``     -- ``subject_id,treatment,followup_days``
* ``outcomes.csv``   -- ``subject_id,outcome_id,event_day,prior_flag``

Rows with ``prior_flag == 1`` mark an occurrence before index and leave
``event_day`` empty.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

COVARIATES_FILE = "covariates.csv"
COHORT_FILE = "cohort.csv"
OUTCOMES_FILE = "outcomes.csv"

NO_EVENT = -1


class BundleError(ValueError):
    """A bundle file violates its schema or a table invariant."""

    def __init__(self, path, line, constraint):
        self.path = str(path)
        self.line = line
        self.constraint = constraint
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {constraint}")


@dataclass(frozen=True)
class CovariateMeta:
    name: str
    kind: str  # "binary" | "continuous"


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Design:
    """Dense subject x covariate matrix reconstructed for one fitting task."""

    x: np.ndarray
    subject_ids: np.ndarray
    covariate_ids: np.ndarray
    continuous: np.ndarray

    @property
    def shape(self):
        return self.x.shape


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """Sparse subject x covariate table stored as (subject, covariate, value) triples."""

    subject_ids: np.ndarray
    entry_subject: np.ndarray
    entry_covariate: np.ndarray
    entry_value: np.ndarray
    covariate_meta: Mapping[int, CovariateMeta] = field(default_factory=dict)

    @classmethod
    def from_entries(cls, subject_ids, entry_subject, entry_covariate, entry_value,
                     covariate_meta=None, *, source="<memory>"):
        subject_ids = _frozen(subject_ids, np.int64)
        es = np.asarray(entry_subject, dtype=np.int64)
        ec = np.asarray(entry_covariate, dtype=np.int64)
        ev = np.asarray(entry_value, dtype=np.float64)
        if not (len(es) == len(ec) == len(ev)):
            raise BundleError(source, None, "entry arrays differ in length")
        if len(np.unique(subject_ids)) != len(subject_ids):
            raise BundleError(source, None, "duplicate subject_id in subject list")
        if not np.all(np.isfinite(ev)):
            raise BundleError(source, None, "non-finite covariate value")
        known = np.isin(es, subject_ids)
        if not known.all():
            bad = int(es[~known][0])
            raise BundleError(source, None, f"entry for unknown subject {bad}")

        order = np.lexsort((ec, es))
        es, ec, ev = es[order], ec[order], ev[order]
        dup = (np.diff(es) == 0) & (np.diff(ec) == 0)
        if dup.any():
            i = int(np.flatnonzero(dup)[0]) + 1
            raise BundleError(source, None,
                              f"duplicate (subject_id, covariate_id) pair ({es[i]}, {ec[i]})")

        meta = dict(covariate_meta or {})
        for cid in np.unique(ec):
            vals = ev[ec == cid]
            if int(cid) not in meta:
                kind = "binary" if np.all(vals == 1.0) else "continuous"
                meta[int(cid)] = CovariateMeta(str(int(cid)), kind)
            elif meta[int(cid)].kind == "binary" and not np.all(vals == 1.0):
                raise BundleError(source, None,
                                  f"binary covariate {cid} stores a value other than 1")
        return cls(subject_ids, _frozen(es), _frozen(ec), _frozen(ev), meta)

    @property
    def covariate_ids(self) -> np.ndarray:
        return np.array(sorted(self.covariate_meta), dtype=np.int64)

    def __len__(self):
        return len(self.subject_ids)

    def __eq__(self, other):
        if not isinstance(other, CovariateTable):
            return NotImplemented
        return (np.array_equal(self.subject_ids, other.subject_ids)
                and np.array_equal(self.entry_subject, other.entry_subject)
                and np.array_equal(self.entry_covariate, other.entry_covariate)
                and np.array_equal(self.entry_value, other.entry_value)
                and {k: v.kind for k, v in self.covariate_meta.items()}
                == {k: v.kind for k, v in other.covariate_meta.items()})

    def design(self, subject_ids=None, covariate_ids=None) -> Design:
        """Dense design matrix for ``subject_ids`` (rows) and ``covariate_ids`` (columns).

        Covariates absent from the table yield all-zero columns.
        """
        subject_ids = self.subject_ids if subject_ids is None else np.asarray(subject_ids, np.int64)
        covariate_ids = (self.covariate_ids if covariate_ids is None
                         else np.asarray(covariate_ids, np.int64))
        x = np.zeros((len(subject_ids), len(covariate_ids)))
        rows = _positions(subject_ids, self.entry_subject)
        cols = _positions(covariate_ids, self.entry_covariate)
        keep = (rows >= 0) & (cols >= 0)
        x[rows[keep], cols[keep]] = self.entry_value[keep]
        continuous = np.array([self.covariate_meta.get(int(c), CovariateMeta("", "binary")).kind
                               == "continuous" for c in covariate_ids], dtype=bool)
        return Design(x, subject_ids, covariate_ids, continuous)


def _positions(keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Index of each value in ``keys`` or -1 when absent."""
    if len(keys) == 0:
        return np.full(len(values), -1, dtype=np.int64)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    pos = np.searchsorted(sorted_keys, values)
    pos = np.clip(pos, 0, len(keys) - 1)
    hit = sorted_keys[pos] == values
    return np.where(hit, order[pos], -1)


@dataclass(frozen=True, eq=False)
class CohortTable:
    """Per-subject treatment, follow-up and outcome records.

    ``events[outcome_id]`` holds the event day per subject (``NO_EVENT`` when
    absent) and ``prior[outcome_id]`` flags a pre-index occurrence.
    """

    subject_ids: np.ndarray
    treatment: np.ndarray
    followup_days: np.ndarray
    events: Mapping[str, np.ndarray] = field(default_factory=dict)
    prior: Mapping[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, subject_ids, treatment, followup_days, events=None, prior=None,
              *, source="<memory>"):
        subject_ids = _frozen(subject_ids, np.int64)
        treatment = _frozen(treatment, np.int8)
        followup = _frozen(followup_days, np.int64)
        n = len(subject_ids)
        if not (len(treatment) == len(followup) == n):
            raise BundleError(source, None, "column lengths differ")
        if len(np.unique(subject_ids)) != n:
            raise BundleError(source, None, "duplicate subject_id")
        if not np.isin(treatment, (0, 1)).all():
            raise BundleError(source, None, "treatment must be 0 or 1")
        if (followup < 0).any():
            raise BundleError(source, None, "followup_days must be >= 0")
        ev_out, pr_out = {}, {}
        ids = sorted(set(events or {}) | set(prior or {}))
        for oid in ids:
            ev = np.asarray((events or {}).get(oid, np.full(n, NO_EVENT)), dtype=np.int64)
            pr = np.asarray((prior or {}).get(oid, np.zeros(n, bool)), dtype=bool)
            if len(ev) != n or len(pr) != n:
                raise BundleError(source, None, f"outcome {oid}: wrong length")
            has = ev != NO_EVENT
            if (ev[has] < 0).any():
                raise BundleError(source, None, f"outcome {oid}: negative event_day")
            if (ev[has] > followup[has]).any():
                raise BundleError(source, None, f"outcome {oid}: event_day after followup_days")
            ev_out[str(oid)] = _frozen(ev)
            pr_out[str(oid)] = _frozen(pr)
        return cls(subject_ids, treatment, followup, ev_out, pr_out)

    @property
    def outcome_ids(self) -> list[str]:
        return sorted(self.events)

    def __len__(self):
        return len(self.subject_ids)

    def __eq__(self, other):
        if not isinstance(other, CohortTable):
            return NotImplemented
        return (np.array_equal(self.subject_ids, other.subject_ids)
                and np.array_equal(self.treatment, other.treatment)
                and np.array_equal(self.followup_days, other.followup_days)
                and self.outcome_ids == other.outcome_ids
                and all(np.array_equal(self.events[o], other.events[o])
                        and np.array_equal(self.prior[o], other.prior[o])
                        for o in self.outcome_ids))

    def index_of(self, subject_ids) -> np.ndarray:
        pos = _positions(self.subject_ids, np.asarray(subject_ids, np.int64))
        if (pos < 0).any():
            bad = np.asarray(subject_ids)[pos < 0][0]
            raise KeyError(f"unknown subject id {int(bad)}")
        return pos

    def restrict(self, subject_set: Iterable[int]) -> "CohortTable":
        """Rows whose subject is in ``subject_set``, original order preserved."""
        wanted = np.unique(np.fromiter(subject_set, dtype=np.int64))
        self.index_of(wanted)
        keep = np.isin(self.subject_ids, wanted)
        return CohortTable(
            _frozen(self.subject_ids[keep]), _frozen(self.treatment[keep]),
            _frozen(self.followup_days[keep]),
            {o: _frozen(v[keep]) for o, v in self.events.items()},
            {o: _frozen(v[keep]) for o, v in self.prior.items()},
        )

    def analyzable(self, outcome_id: str) -> np.ndarray:
        """Mask of subjects without a pre-index occurrence of ``outcome_id``."""
        if outcome_id not in self.prior:
            return np.ones(len(self), dtype=bool)
        return ~self.prior[outcome_id]

    def time_to_event(self, outcome_id: str, horizon: int):
        """Observed time and event indicator, censored at ``min(followup, horizon)``."""
        ev = self.events.get(outcome_id)
        censor = np.minimum(self.followup_days, horizon)
        if ev is None:
            return censor.copy(), np.zeros(len(self), dtype=bool)
        event = (ev != NO_EVENT) & (ev <= censor)
        time = np.where(event, ev, censor)
        return time, event


# --------------------------------------------------------------------- files

def _format_value(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def _read_csv(path, header):
    path = Path(path)
    if not path.exists():
        raise BundleError(path, None, "file does not exist")
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\r\n")
    if first.split(",") != header:
        raise BundleError(path, 1, f"expected header {','.join(header)!r}, got {first!r}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    return df


def _parse_int(df, col, path, *, allow_empty=False):
    s = df[col]
    empty = s == ""
    ok = s.str.fullmatch(r"-?\d+") | (empty if allow_empty else False)
    if not ok.all():
        i = int(np.flatnonzero(~ok.to_numpy())[0])
        raise BundleError(path, i + 2, f"{col} must be a base-10 integer, got {s.iloc[i]!r}")
    out = np.full(len(s), NO_EVENT, dtype=np.int64)
    out[~empty.to_numpy()] = s[~empty].astype(np.int64).to_numpy()
    return out


def _first_dup(keys: np.ndarray) -> int | None:
    """Row position of the first repeated key (in file order), else None."""
    _, first = np.unique(keys, axis=0, return_index=True)
    if len(first) == len(keys):
        return None
    seen = np.zeros(len(keys), dtype=bool)
    seen[first] = True
    return int(np.flatnonzero(~seen)[0])


def load_bundle(covariate_path, cohort_path, outcome_path):
    """Read and validate a bundle; returns ``(CovariateTable, CohortTable)``."""
    ch = _read_csv(cohort_path, ["subject_id", "treatment", "followup_days"])
    sid = _parse_int(ch, "subject_id", cohort_path)
    trt = _parse_int(ch, "treatment", cohort_path)
    fu = _parse_int(ch, "followup_days", cohort_path)
    dup = _first_dup(sid)
    if dup is not None:
        raise BundleError(cohort_path, dup + 2, f"duplicate subject {sid[dup]}")
    bad = np.flatnonzero(~np.isin(trt, (0, 1)))
    if len(bad):
        raise BundleError(cohort_path, int(bad[0]) + 2, "treatment must be 0 or 1")
    bad = np.flatnonzero(fu < 0)
    if len(bad):
        raise BundleError(cohort_path, int(bad[0]) + 2, "followup_days must be >= 0")
    fu_by_row = dict(zip(sid.tolist(), range(len(sid))))

    cv = _read_csv(covariate_path, ["subject_id", "covariate_id", "value"])
    csid = _parse_int(cv, "subject_id", covariate_path)
    ccid = _parse_int(cv, "covariate_id", covariate_path)
    try:
        cval = cv["value"].astype(float).to_numpy()
    except ValueError:
        vals = pd.to_numeric(cv["value"], errors="coerce").to_numpy()
        i = int(np.flatnonzero(np.isnan(vals))[0])
        raise BundleError(covariate_path, i + 2, "value must be a real number") from None
    bad = np.flatnonzero(~np.isfinite(cval))
    if len(bad):
        raise BundleError(covariate_path, int(bad[0]) + 2, "value must be finite")
    dup = _first_dup(np.column_stack([csid, ccid]))
    if dup is not None:
        raise BundleError(covariate_path, dup + 2,
                          f"duplicate (subject_id, covariate_id) pair ({csid[dup]}, {ccid[dup]})")
    bad = np.flatnonzero(~np.isin(csid, sid))
    if len(bad):
        raise BundleError(covariate_path, int(bad[0]) + 2,
                          f"subject {csid[bad[0]]} not in {COHORT_FILE}")
    cov = CovariateTable.from_entries(sid, csid, ccid, cval, source=covariate_path)

    oc = _read_csv(outcome_path, ["subject_id", "outcome_id", "event_day", "prior_flag"])
    osid = _parse_int(oc, "subject_id", outcome_path)
    oday = _parse_int(oc, "event_day", outcome_path, allow_empty=True)
    oflag = _parse_int(oc, "prior_flag", outcome_path)
    oid = oc["outcome_id"].to_numpy(dtype=str)
    events, prior = {}, {}
    seen = set()
    n = len(sid)
    for i in range(len(oc)):
        line = i + 2
        s, o, d, f = int(osid[i]), oid[i], int(oday[i]), int(oflag[i])
        if o == "":
            raise BundleError(outcome_path, line, "outcome_id is empty")
        if f not in (0, 1):
            raise BundleError(outcome_path, line, "prior_flag must be 0 or 1")
        if s not in fu_by_row:
            raise BundleError(outcome_path, line, f"subject {s} not in {COHORT_FILE}")
        if (s, o, f) in seen:
            raise BundleError(outcome_path, line, f"duplicate record for subject {s}, outcome {o}")
        seen.add((s, o, f))
        r = fu_by_row[s]
        ev = events.setdefault(o, np.full(n, NO_EVENT, dtype=np.int64))
        pr = prior.setdefault(o, np.zeros(n, dtype=bool))
        if f == 1:
            if d != NO_EVENT:
                raise BundleError(outcome_path, line, "prior rows must leave event_day empty")
            pr[r] = True
        else:
            if d == NO_EVENT or d < 0:
                raise BundleError(outcome_path, line, "event_day must be an integer >= 0")
            if d > fu[r]:
                raise BundleError(outcome_path, line, "event_day exceeds followup_days")
            ev[r] = d
    cohort = CohortTable.build(sid, trt, fu, events, prior, source=outcome_path)
    return cov, cohort


def write_bundle(cov: CovariateTable, cohort: CohortTable, directory) -> None:
    """Write the three bundle CSVs in canonical column and row order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if not os.access(directory, os.W_OK):
        raise PermissionError(f"directory not writable: {directory}")

    order = np.lexsort((cov.entry_covariate, cov.entry_subject))
    with open(directory / COVARIATES_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject_id,covariate_id,value\n")
        fh.writelines(
            f"{s},{c},{_format_value(v)}\n"
            for s, c, v in zip(cov.entry_subject[order].tolist(),
                               cov.entry_covariate[order].tolist(),
                               cov.entry_value[order].tolist()))

    order = np.argsort(cohort.subject_ids, kind="stable")
    with open(directory / COHORT_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject_id,treatment,followup_days\n")
        fh.writelines(
            f"{s},{t},{f}\n"
            for s, t, f in zip(cohort.subject_ids[order].tolist(),
                               cohort.treatment[order].tolist(),
                               cohort.followup_days[order].tolist()))

    rows = []
    for oid in cohort.outcome_ids:
        ev, pr = cohort.events[oid], cohort.prior[oid]
        for i in np.flatnonzero(pr):
            rows.append((int(cohort.subject_ids[i]), oid, 1, ""))
        for i in np.flatnonzero(ev != NO_EVENT):
            rows.append((int(cohort.subject_ids[i]), oid, 0, str(int(ev[i]))))
    rows.sort(key=lambda r: (r[0], r[1], -r[2]))
    with open(directory / OUTCOMES_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("subject_id,outcome_id,event_day,prior_flag\n")
        fh.writelines(f"{s},{o},{d},{f}\n" for s, o, f, d in rows)


def load_bundle_dir(directory):
    directory = Path(directory)
    return load_bundle(directory / COVARIATES_FILE, directory / COHORT_FILE,
                       directory / OUTCOMES_FILE)
