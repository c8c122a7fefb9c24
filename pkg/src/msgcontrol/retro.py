"""Retrospective replay of recorded ICU data.

Input is a directory with three CSV files (schema version 1):

* ``bg.csv``: ``patient_id, time_hr, bg_mgdl``
* ``insulin.csv``: ``patient_id, time_hr, rate_u_per_hr``, one row per IV rate change
* ``nutrition.csv``: ``patient_id, time_hr, rate_units_per_hr``, one row per change

Rows may appear in any order; each patient's rows are sorted by time and
duplicate timestamps are rejected. Before a patient's first insulin or
nutrition row the rate is taken as zero. Adverse events are moderate/severe
BG readings between the second and the last insulin change; each is tied to
the latest insulin change strictly before it, where the recorded rate is
compared with what the protocol and the LQG controller would have chosen.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .config import RetroConfig
from .identification import InsufficientDataError, TrainingWindow, fit
from .lqg import ControlError, design, estimate_state, suggest_rate
from .msg_model import equilibrium
from .protocol import ProtocolSpec, decide
from .schedule import GlucoseTrace, RateSchedule
from .stats import GlycemicRegions

log = logging.getLogger(__name__)

HYPO, HYPER = "hypoglycemia", "hyperglycemia"
KINDS = (HYPO, HYPER)
CATEGORIES = (
    "both_appropriate",
    "protocol_better",
    "lqg_better",
    "both_inappropriate",
    "all_inappropriate",
    "all_appropriate",
)
FILES = {
    "bg": ("bg.csv", "bg_mgdl"),
    "insulin": ("insulin.csv", "rate_u_per_hr"),
    "nutrition": ("nutrition.csv", "rate_units_per_hr"),
}
HYPO_BELOW = 70.0
HYPER_ABOVE = 250.0


class RetroDataError(ValueError):
    pass


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    bg: GlucoseTrace
    insulin: RateSchedule
    nutrition: RateSchedule
    insulin_changes: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.insulin_changes) < 2:
            raise RetroDataError(f"patient {self.patient_id}: needs at least two insulin changes")


@dataclass(frozen=True)
class AdverseEvent:
    patient_id: str
    time: float
    bg: float
    kind: str
    intervention_time: float
    i_real: float
    i_protocol: float | None = None
    i_lqg: float | None = None
    classification: str | None = None

    def to_row(self) -> dict:
        return asdict(self)


# --- ingestion -----------------------------------------------------------


def _read_rows(path: Path, value_col: str) -> dict[str, list[tuple[float, float, int]]]:
    out: dict[str, list[tuple[float, float, int]]] = defaultdict(list)
    if not path.exists() or path.stat().st_size == 0:
        return out
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        header = [h.strip() for h in header]
        need = ["patient_id", "time_hr", value_col]
        missing = [c for c in need if c not in header]
        if missing:
            raise RetroDataError(f"{path.name}:1: missing columns {missing}")
        idx = [header.index(c) for c in need]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise RetroDataError(f"{path.name}:{lineno}: expected {len(header)} fields, got {len(row)}")
            pid, t_raw, v_raw = (row[i].strip() for i in idx)
            try:
                t, v = float(t_raw), float(v_raw)
            except ValueError:
                raise RetroDataError(f"{path.name}:{lineno}: non-numeric time or value") from None
            if not (math.isfinite(t) and math.isfinite(v)) or v < 0:
                raise RetroDataError(f"{path.name}:{lineno}: values must be finite and non-negative")
            if not pid:
                raise RetroDataError(f"{path.name}:{lineno}: empty patient_id")
            out[pid].append((t, v, lineno))
    return out


def _sorted_unique(rows: list[tuple[float, float, int]], fname: str, pid: str) -> list[tuple[float, float, int]]:
    rows = sorted(rows, key=lambda r: (r[0], r[2]))
    for a, b in zip(rows, rows[1:]):
        if a[0] == b[0]:
            raise RetroDataError(f"{fname}:{b[2]}: patient {pid} repeats time {b[0]} (also line {a[2]})")
    return rows


def _schedule(rows: list[tuple[float, float, int]], t0: float, horizon: float) -> RateSchedule:
    b = [r[0] for r in rows]
    v = [r[1] for r in rows]
    if not b or b[0] > t0:
        b.insert(0, t0)
        v.insert(0, 0.0)
    return RateSchedule(b, v, max(horizon, b[-1] + 1e-6))


def ingest(path: str | Path) -> list[PatientRecord]:
    """Load every patient in a data directory; records unusable for replay are skipped."""
    root = Path(path)
    if not root.is_dir():
        raise RetroDataError(f"{root}: not a directory")
    tables = {k: _read_rows(root / fname, col) for k, (fname, col) in FILES.items()}
    records = []
    for pid in sorted(set(tables["bg"]) | set(tables["insulin"])):
        bg = _sorted_unique(tables["bg"].get(pid, []), FILES["bg"][0], pid)
        ins = _sorted_unique(tables["insulin"].get(pid, []), FILES["insulin"][0], pid)
        nut = _sorted_unique(tables["nutrition"].get(pid, []), FILES["nutrition"][0], pid)
        if len(ins) < 2:
            log.warning("patient %s: %d insulin change(s), at least 2 needed; skipped", pid, len(ins))
            continue
        if not bg:
            log.warning("patient %s: no BG rows; skipped", pid)
            continue
        times = [r[0] for r in bg + ins + nut]
        t0, t1 = min(times), max(times)
        records.append(PatientRecord(
            patient_id=pid,
            bg=GlucoseTrace([r[0] for r in bg], [r[1] for r in bg]),
            insulin=_schedule(ins, t0, t1),
            nutrition=_schedule(nut, t0, t1),
            insulin_changes=tuple(r[0] for r in ins),
        ))
    return records


# --- events --------------------------------------------------------------


def event_kind(bg: float, regions: GlycemicRegions | None = None, include_mild: bool = False) -> str | None:
    lo, hi = HYPO_BELOW, HYPER_ABOVE
    if include_mild:
        if regions is None:
            raise ValueError("mild events need protocol regions")
        lo, hi = regions.target_lo, regions.target_hi
    if bg < lo:
        return HYPO
    if bg > hi:
        return HYPER
    return None


def find_events(
    record: PatientRecord, regions: GlycemicRegions | None = None, include_mild: bool = False
) -> list[AdverseEvent]:
    changes = record.insulin_changes
    t_second, t_last = changes[1], changes[-1]
    events = []
    for t, bg in zip(record.bg.times, record.bg.values):
        if not t_second <= t <= t_last:
            continue
        kind = event_kind(float(bg), regions, include_mild)
        if kind is None:
            continue
        t_iv = max(c for c in changes if c < t)
        events.append(AdverseEvent(record.patient_id, float(t), float(bg), kind, t_iv, record.insulin.rate_at(t_iv)))
    return events


def counterfactuals(
    record: PatientRecord, event: AdverseEvent, spec: ProtocolSpec, config: RetroConfig | None = None
) -> tuple[float, float]:
    """Protocol and LQG rates that would have been set at the intervention time."""
    config = config or RetroConfig()
    t = event.intervention_time
    history = record.bg.window(-math.inf, t)
    if len(history) == 0:
        raise InsufficientDataError(f"patient {record.patient_id}: no BG before t={t}")
    bg_now = float(history.values[-1])
    bg_prev = float(history.values[-2]) if len(history) > 1 else None
    prior = record.insulin.rate_at(t - 1e-9) if t > record.insulin.start else 0.0
    i_protocol = decide(spec, bg_now, bg_prev, prior).new_rate

    ctl = config.controller
    x_r = ctl.target_for(spec.upper_target)
    window = TrainingWindow.trailing(history, record.insulin, record.nutrition, t, config.window_hours)
    params = fit(window, config.fit).params
    n_rate = record.nutrition.rate_at(t)
    try:
        gains = design(params, x_r, n_rate, q_cost=ctl.q_cost, r_cost=ctl.r_cost, u_max=ctl.u_max)
    except ControlError:
        i_lqg = ctl.u_max if equilibrium(params, 0.0, n_rate) > x_r else 0.0
    else:
        state = estimate_state(params, window.trace, record.insulin, record.nutrition, t)
        i_lqg = suggest_rate(state, gains, ctl.u_max)
    return i_protocol, i_lqg


def _cmp(a: float, b: float, tol: float) -> int:
    if abs(a - b) <= tol:
        return 0
    return -1 if a < b else 1


def classify(i_real: float, i_protocol: float, i_lqg: float, kind: str, tol: float = 0.05) -> str:
    """Table-4 category of a (real, protocol, LQG) rate triple.

    Lower insulin is the right direction before hypoglycemia and higher
    before hyperglycemia. Rates within ``tol`` compare equal; when the
    tolerance makes the ordering intransitive, the raw LQG-vs-protocol
    comparison breaks the tie.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown event kind {kind!r}")
    if min(i_real, i_protocol, i_lqg) < 0:
        raise ValueError("insulin rates must be non-negative")
    lr, pr, lp = _cmp(i_lqg, i_real, tol), _cmp(i_protocol, i_real, tol), _cmp(i_lqg, i_protocol, tol)
    if lr == pr == lp == 0:
        if kind == HYPO and max(i_real, i_protocol, i_lqg) <= tol:
            return "all_appropriate"
        return "all_inappropriate"
    good = -1 if kind == HYPO else 1
    if lr == good and pr == good:
        return "both_appropriate"
    if lr == -good and pr == -good:
        return "both_inappropriate"
    if lp == 0:
        lp = -1 if i_lqg < i_protocol else 1
    return "lqg_better" if lp == good else "protocol_better"


@dataclass
class ReplayResult:
    events: list[AdverseEvent]
    unevaluable: int
    records: int

    def counts(self) -> dict[str, dict[str, int]]:
        return tally(self.events)


def tally(events: Iterable[AdverseEvent]) -> dict[str, dict[str, int]]:
    counts = {k: {c: 0 for c in CATEGORIES} for k in KINDS}
    for ev in events:
        if ev.classification is not None:
            counts[ev.kind][ev.classification] += 1
    return counts


def replay(records: Sequence[PatientRecord], spec: ProtocolSpec, config: RetroConfig | None = None) -> ReplayResult:
    config = config or RetroConfig()
    regions = GlycemicRegions.for_target(spec.target_range)
    out: list[AdverseEvent] = []
    skipped = 0
    for rec in records:
        for ev in find_events(rec, regions, config.include_mild):
            try:
                i_p, i_l = counterfactuals(rec, ev, spec, config)
            except InsufficientDataError as exc:
                log.warning("patient %s event at t=%.2f unevaluable: %s", rec.patient_id, ev.time, exc)
                skipped += 1
                out.append(ev)
                continue
            cat = classify(ev.i_real, i_p, i_l, ev.kind, config.tie_tolerance)
            out.append(AdverseEvent(**{**asdict(ev), "i_protocol": i_p, "i_lqg": i_l, "classification": cat}))
    return ReplayResult(out, skipped, len(records))


def write_events_csv(events: Sequence[AdverseEvent], path: str | Path, protocol: str = "") -> Path:
    path = Path(path)
    fields = list(AdverseEvent.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["protocol", *fields])
        w.writeheader()
        for ev in events:
            w.writerow({"protocol": protocol, **ev.to_row()})
    return path
