"""Simulated trial: cohort generation and closed-loop protocol / LQG arms.

Timeline: training window ``[0, ttw]`` with random open-loop insulin, then an
evaluation window ``(ttw, ttw + etw]`` in which each arm chooses the insulin.
Both arms start from the same simulated state and share the BG reading taken
at ``ttw``.

Randomness is split into independent streams keyed by ``(root_seed, stream,
index...)`` so any patient can be replayed in isolation, and results do not
depend on the order or process in which patients run.
"""

from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ScheduleConfig, TrialConfig
from .identification import FitResult, IdentificationError, TrainingWindow, fit
from .lqg import ControlError, design, estimate_state, suggest_rate
from .msg_model import MsgParams, equilibrium
from .protocol import ProtocolSpec, decide, load_protocol
from .schedule import GlucoseTrace, RateSchedule
from .stats import GlycemicRegions
from .virtual_patient import SimState, VirtualPatient, sample_measurement_times, sample_patient, simulate

log = logging.getLogger(__name__)

RESULTS_SCHEMA = 1

_S_SCHEDULE, _S_PATIENT, _S_ASSIGN, _S_TTW_TIMES, _S_TTW_NOISE, _S_PROTOCOL, _S_LQG = range(1, 8)


def _rng(config: TrialConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng([config.root_seed, *key])


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


@dataclass(frozen=True)
class ScheduleSet:
    insulin: RateSchedule
    nutrition: RateSchedule


@dataclass(frozen=True)
class CohortMember:
    patient: VirtualPatient
    group: int
    schedules: ScheduleSet
    ttw_trace: GlucoseTrace
    ttw_state: SimState


@dataclass(frozen=True)
class Cohort:
    patients: tuple[VirtualPatient, ...]
    schedules: tuple[ScheduleSet, ...]
    assignments: tuple[int, ...]
    members: tuple[CohortMember, ...]

    def __iter__(self):
        # unpacks as (patients, schedules, assignments)
        return iter((self.patients, self.schedules, self.assignments))


@dataclass(frozen=True)
class InterventionRecord:
    time: float
    bg: float
    prior_rate: float
    nutrition_rate: float
    rate: float
    rule: str
    next_time: float | None = None
    result_bg: float | None = None
    result_region: str | None = None
    fallback: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PatientRunRecord:
    patient_id: int
    arm: str
    protocol: str
    interventions: tuple[InterventionRecord, ...]
    etw_bg: GlucoseTrace
    fit_history: tuple[FitResult, ...] = ()

    @property
    def intervention_times(self) -> list[float]:
        return [iv.time for iv in self.interventions]

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "arm": self.arm,
            "protocol": self.protocol,
            "interventions": [iv.to_dict() for iv in self.interventions],
            "etw_bg": {"times": self.etw_bg.times.tolist(), "values": self.etw_bg.values.tolist()},
            "fit_history": [f.to_dict() for f in self.fit_history],
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatientRunRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]


# --- cohort --------------------------------------------------------------


def _random_schedule(
    rng: np.random.Generator, t0: float, t1: float, median: float, sigma: float, rate_range: tuple[float, float]
) -> RateSchedule:
    b, r = [t0], [float(rng.uniform(*rate_range))]
    while True:
        nxt = b[-1] + float(rng.lognormal(math.log(median), sigma))
        if nxt >= t1:
            break
        b.append(nxt)
        r.append(float(rng.uniform(*rate_range)))
    return RateSchedule(b, r, t1)


def generate_schedules(config: TrialConfig, index: int) -> ScheduleSet:
    sc: ScheduleConfig = config.schedules
    rng = _rng(config, _S_SCHEDULE, index)
    nutrition = _random_schedule(
        rng, 0.0, config.etw_end, sc.nutrition_median_hr, sc.nutrition_sigma, sc.nutrition_rate
    )
    ttw_insulin = _random_schedule(
        rng, 0.0, config.ttw_end, sc.insulin_median_hr, sc.insulin_sigma, sc.insulin_rate
    )
    # ETW insulin comes only from the arms
    insulin = ttw_insulin.extend(config.ttw_end, 0.0, config.etw_end)
    return ScheduleSet(insulin, nutrition)


def _measure(value: float, sd: float, rng: np.random.Generator) -> float:
    return max(1.0, value + sd * float(rng.standard_normal())) if sd > 0 else value


def _training_member(config: TrialConfig, patient: VirtualPatient, group: int, sched: ScheduleSet) -> CohortMember:
    pid = patient.patient_id
    times = sample_measurement_times((0.0, config.ttw_end), _rng(config, _S_TTW_TIMES, pid), config.measurement)
    if times[-1] < config.ttw_end:
        times = np.append(times, config.ttw_end)
    traj = simulate(patient, patient.basal_state(0.0), config.ttw_end, sched.insulin, sched.nutrition)
    noise = _rng(config, _S_TTW_NOISE, pid)
    values = [_measure(traj.glucose_at(t), config.measurement_noise_sd, noise) for t in times]
    return CohortMember(patient, group, sched, GlucoseTrace(times, values), traj.state_at(config.ttw_end))


def generate_cohort(config: TrialConfig) -> Cohort:
    """Sample patients and schedules, pair them in groups, simulate the TTW."""
    schedules = tuple(generate_schedules(config, m) for m in range(config.m_schedules))
    patients = tuple(
        sample_patient(_rng(config, _S_PATIENT, i), config.patient_box, patient_id=i)
        for i in range(config.n_patients)
    )
    per_group = config.n_patients // config.m_schedules
    perm = _rng(config, _S_ASSIGN).permutation(config.n_patients)
    assignments = [0] * config.n_patients
    for slot, pid in enumerate(perm):
        assignments[int(pid)] = slot // per_group
    members = tuple(
        _training_member(config, p, assignments[p.patient_id], schedules[assignments[p.patient_id]])
        for p in patients
    )
    return Cohort(patients, schedules, tuple(assignments), members)


# --- arms ----------------------------------------------------------------


def run_protocol_arm(member: CohortMember, spec: ProtocolSpec, config: TrialConfig) -> PatientRunRecord:
    """Protocol-driven ETW loop; stops once the next check would leave the ETW."""
    patient, nutrition = member.patient, member.schedules.nutrition
    regions = GlycemicRegions.for_target(spec.target_range)
    rng = _rng(config, _S_PROTOCOL, _name_key(spec.name), patient.patient_id)
    t_end = config.etw_end

    t = config.ttw_end
    bg_now = float(member.ttw_trace.values[-1])
    bg_prev = float(member.ttw_trace.values[-2]) if len(member.ttw_trace) > 1 else None
    rate = member.schedules.insulin.rate_at(t - 1e-9) if t > 0 else 0.0
    state = member.ttw_state
    records: list[InterventionRecord] = []
    etw_t: list[float] = []
    etw_v: list[float] = []
    while True:
        d = decide(spec, bg_now, bg_prev, rate)
        base = dict(time=t, bg=bg_now, prior_rate=rate, nutrition_rate=nutrition.rate_at(t), rate=d.new_rate, rule=d.rule_id)
        t_next = t + d.next_check
        if t_next > t_end + 1e-9:
            records.append(InterventionRecord(**base))
            break
        traj = simulate(patient, state, t_next, RateSchedule.constant(d.new_rate, t, t_next + 1.0), nutrition)
        y = _measure(traj.glucose_at(t_next), config.measurement_noise_sd, rng)
        records.append(InterventionRecord(**base, next_time=t_next, result_bg=y, result_region=regions.classify(y)))
        etw_t.append(t_next)
        etw_v.append(y)
        bg_prev, bg_now, rate, t, state = bg_now, y, d.new_rate, t_next, traj.final
    return PatientRunRecord(patient.patient_id, "protocol", spec.name, tuple(records), GlucoseTrace(etw_t, etw_v))


def lqg_intervention_times(protocol_times: Sequence[float], nutrition: RateSchedule) -> list[float]:
    """Protocol times plus nutrition changes strictly inside the protocol span."""
    t_first, t_last = protocol_times[0], protocol_times[-1]
    extra = [float(c) for c in nutrition.change_times() if t_first < c < t_last]
    return sorted(set(float(t) for t in protocol_times) | set(extra))


def _fallback_rate(params: MsgParams, x_r: float, n_rate: float, u_max: float) -> float:
    # limit of u_r as insulin authority vanishes: saturate toward the target
    return u_max if equilibrium(params, 0.0, n_rate) > x_r else 0.0


def lqg_decision(
    params: MsgParams, trace: GlucoseTrace, insulin: RateSchedule, nutrition: RateSchedule, t: float,
    x_r: float, q_cost: float, r_cost: float, u_max: float,
) -> float:
    n_rate = nutrition.rate_at(t)
    try:
        gains = design(params, x_r, n_rate, q_cost=q_cost, r_cost=r_cost, u_max=u_max)
    except ControlError:
        return _fallback_rate(params, x_r, n_rate, u_max)
    state = estimate_state(params, trace, insulin, nutrition, t)
    return suggest_rate(state, gains, u_max)


def run_lqg_arm(
    member: CohortMember, protocol_times: Sequence[float], spec: ProtocolSpec, config: TrialConfig
) -> PatientRunRecord:
    """LQG loop at protocol times plus nutrition changes, refitting on own history."""
    patient, nutrition = member.patient, member.schedules.nutrition
    ctl = config.controller
    x_r = ctl.target_for(spec.upper_target)
    regions = GlycemicRegions.for_target(spec.target_range)
    rng = _rng(config, _S_LQG, _name_key(spec.name), patient.patient_id)
    times = lqg_intervention_times(protocol_times, nutrition)

    ttw = member.schedules.insulin.restrict(0.0, config.ttw_end)
    ins_b, ins_r = list(ttw.breakpoints), list(ttw.rates)
    trace = member.ttw_trace
    state = member.ttw_state
    params: MsgParams | None = None
    fits: list[FitResult] = []
    records: list[InterventionRecord] = []
    pending: dict | None = None
    etw_t: list[float] = []
    etw_v: list[float] = []

    for t in times:
        if pending is not None:
            traj = simulate(patient, state, t, RateSchedule.constant(pending["rate"], pending["time"], t + 1.0), nutrition)
            state = traj.final
            y = _measure(traj.glucose_at(t), config.measurement_noise_sd, rng)
            trace = trace.append(t, y)
            etw_t.append(t)
            etw_v.append(y)
            records.append(InterventionRecord(**pending, next_time=t, result_bg=y, result_region=regions.classify(y)))
        insulin = RateSchedule(ins_b, ins_r, t)
        recent = trace.window(t - 24.0, t)
        prior_rate = ins_r[-1]
        fallback = False
        try:
            window = TrainingWindow.trailing(trace, insulin, nutrition, t, 24.0)
            result = fit(window, config.fit, initial_guesses=(params,) if params is not None else ())
            params = result.params
            fits.append(result)
        except IdentificationError as exc:
            fallback = True
            log.warning("patient %d t=%.2f: fit failed (%s); reusing previous parameters", patient.patient_id, t, exc)
        if params is None:
            rate = prior_rate
        else:
            rate = lqg_decision(params, recent, insulin, nutrition, t, x_r, ctl.q_cost, ctl.r_cost, ctl.u_max)
        pending = dict(
            time=t, bg=float(trace.values[-1]), prior_rate=prior_rate, nutrition_rate=nutrition.rate_at(t),
            rate=rate, rule="lqg", fallback=fallback,
        )
        ins_b.append(t)
        ins_r.append(rate)
    if pending is not None:
        records.append(InterventionRecord(**pending))
    return PatientRunRecord(
        patient.patient_id, "lqg", spec.name, tuple(records), GlucoseTrace(etw_t, etw_v), tuple(fits)
    )


# --- orchestration -------------------------------------------------------


@dataclass
class TrialResult:
    config: TrialConfig
    cohort: Cohort
    # records[protocol_name] -> list of (protocol_record, lqg_record), by patient id
    records: dict[str, list[tuple[PatientRunRecord, PatientRunRecord]]] = field(default_factory=dict)
    specs: dict[str, ProtocolSpec] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": RESULTS_SCHEMA,
            "config_digest": self.config.digest(),
            "protocols": {
                name: {
                    "target_range": list(self.specs[name].target_range),
                    "records": [[p.to_dict(), q.to_dict()] for p, q in pairs],
                }
                for name, pairs in self.records.items()
            },
        }


def run_patient(member: CohortMember, specs: Sequence[ProtocolSpec], config: TrialConfig):
    out = []
    for spec in specs:
        prot = run_protocol_arm(member, spec, config)
        lqg = run_lqg_arm(member, prot.intervention_times, spec, config)
        out.append((prot, lqg))
    return out


def _run_patient_star(args):
    return run_patient(*args)


def run_trial(config: TrialConfig, jobs: int = 1, protocols: Sequence[str] | None = None) -> TrialResult:
    names = list(protocols or config.protocols)
    specs = [load_protocol(n) for n in names]
    cohort = generate_cohort(config)
    tasks = [(m, specs, config) for m in cohort.members]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_patient = list(pool.map(_run_patient_star, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        per_patient = [_run_patient_star(t) for t in tasks]
    result = TrialResult(config, cohort, specs={n: s for n, s in zip(names, specs)})
    for k, name in enumerate(names):
        result.records[name] = [pp[k] for pp in per_patient]
    return result
