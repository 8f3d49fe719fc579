from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class SurvivalRecord:
    patient_id: str
    time: float  # months
    event: int  # 1 = recurrence observed, 0 = censored
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"{self.patient_id}: time must be non-negative")
        if self.event not in (0, 1):
            raise ValueError(f"{self.patient_id}: event must be 0 or 1")


def as_arrays(records):
    time = np.array([r.time for r in records], dtype=np.float64)
    event = np.array([r.event for r in records], dtype=np.int64)
    return time, event


def covariate_values(records, name) -> np.ndarray:
    return np.array([float(r.covariates[name]) for r in records], dtype=np.float64)


def read_cohort_csv(path) -> list[SurvivalRecord]:
    """Read ``patient_id,time,event,<covariates...>``.

    Numeric cells become floats, other non-empty cells stay strings, and empty
    cells are ``None`` (excluded later by :func:`complete_cases`).
    """
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            covs = {}
            for k, v in row.items():
                if k in ("patient_id", "time", "event"):
                    continue
                v = (v or "").strip()
                if v == "":
                    covs[k] = None
                else:
                    try:
                        covs[k] = float(v)
                    except ValueError:
                        covs[k] = v
            records.append(SurvivalRecord(row["patient_id"], float(row["time"]), int(row["event"]), covs))
    return records


def complete_cases(records, names):
    """Records with every covariate in ``names`` present, plus the exclusion count."""
    kept = [r for r in records if all(r.covariates.get(n) is not None for n in names)]
    dropped = len(records) - len(kept)
    if dropped:
        log.info("excluded %d records with missing %s", dropped, ",".join(names))
    return kept, dropped


def encode_categorical(records, name, reference):
    """Replace a categorical covariate by 0/1 indicators against ``reference``.

    Returns the new covariate names ``name[level]`` in sorted level order.
    """
    levels = sorted({str(r.covariates[name]) for r in records if r.covariates.get(name) is not None})
    reference = str(reference)
    if reference not in levels:
        raise ValueError(f"reference level {reference!r} not present for {name!r} (levels: {levels})")
    names = []
    for level in levels:
        if level == reference:
            continue
        col = f"{name}[{level}]"
        names.append(col)
        for r in records:
            v = r.covariates.get(name)
            r.covariates[col] = None if v is None else float(str(v) == level)
    return names
