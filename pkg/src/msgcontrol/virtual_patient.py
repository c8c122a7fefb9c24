"""Nonlinear virtual ICU patient used as ground truth in simulated trials.

Minimal-model structure with endogenous secretion::

    G'  = -(p1 + X) G + p1 g_b + 1000 N / v_g
    X'  = -p2 X + p3 (I1 - i_b)
    I1' = -n_clear (I1 - i_b) + (max(0, I2) - s_b) / v_i + 1e6 u / v_i
    I2' = gamma_sec max(0, G - h_thresh) - n_clear I2

where ``s_b = gamma_sec max(0, g_b - h_thresh) / n_clear`` is the basal
secretion already reflected in ``i_b``; the unforced basal state is
therefore an exact equilibrium.

Units: hours, mg/dL, uU/mL, U/hr insulin, carb-units/hr nutrition with one
carb-unit = 1 g glucose appearing in plasma (no gut delay). I2 is the
secretion rate state (uU/hr).

This module deliberately knows nothing about the MSG model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numba
import numpy as np
from scipy.interpolate import CubicHermiteSpline

from .schedule import RateSchedule

log = logging.getLogger(__name__)

STEP_HR = 0.01
BG_FLOOR = 1.0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class VirtualPatient:
    p1: float
    p2: float
    p3: float
    n_clear: float
    gamma_sec: float
    h_thresh: float
    v_g: float
    v_i: float
    g_b: float
    i_b: float
    patient_id: int = field(default=-1, compare=False)

    def __post_init__(self) -> None:
        for f in fields(self):
            if f.name == "patient_id":
                continue
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"patient parameter {f.name} must be positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PATIENT_FIELDS], dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def basal_secretion(self) -> float:
        return self.gamma_sec * max(0.0, self.g_b - self.h_thresh) / self.n_clear

    def basal_state(self, t: float = 0.0) -> SimState:
        return SimState(g=self.g_b, x_remote=0.0, i1=self.i_b, i2=self.basal_secretion, t=t)


PATIENT_FIELDS = ("p1", "p2", "p3", "n_clear", "gamma_sec", "h_thresh", "v_g", "v_i", "g_b", "i_b")

# Stress-hyperglycemic ICU population: high basal glucose and low glucose
# effectiveness, so feeding changes move BG substantially.
DEFAULT_PATIENT_BOX: dict[str, tuple[float, float]] = {
    "p1": (0.15, 0.4),
    "p2": (0.8, 1.6),
    "p3": (0.002, 0.005),
    "n_clear": (4.0, 10.0),
    "gamma_sec": (1.0e3, 3.0e4),
    "h_thresh": (120.0, 180.0),
    "v_g": (120.0, 200.0),
    "v_i": (9000.0, 15000.0),
    "g_b": (150.0, 210.0),
    "i_b": (5.0, 15.0),
}


@dataclass(frozen=True)
class SimState:
    g: float
    x_remote: float
    i1: float
    i2: float
    t: float

    def as_array(self) -> np.ndarray:
        return np.array([self.g, self.x_remote, self.i1, self.i2])


@dataclass(frozen=True)
class IntervalDistribution:
    """Lognormal gap between BG measurements, clipped to [lo, hi] hours."""

    median: float = 1.5
    sigma: float = 0.5
    lo: float = 0.25
    hi: float = 6.0

    def sample(self, rng: np.random.Generator) -> float:
        return float(np.clip(rng.lognormal(math.log(self.median), self.sigma), self.lo, self.hi))


def sample_patient(
    rng_seed: int | np.random.Generator | None,
    box: dict[str, tuple[float, float]] | None = None,
    patient_id: int = -1,
) -> VirtualPatient:
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    box = box or DEFAULT_PATIENT_BOX
    values = {name: float(rng.uniform(*box[name])) for name in PATIENT_FIELDS}
    return VirtualPatient(**values, patient_id=patient_id)


def sample_measurement_times(
    window: tuple[float, float],
    rng_seed: int | np.random.Generator | None,
    dist: IntervalDistribution | None = None,
) -> np.ndarray:
    t0, t1 = window
    if t1 <= t0:
        raise ValueError("measurement window must have positive length")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    dist = dist or IntervalDistribution()
    times = [t0]
    while True:
        nxt = times[-1] + dist.sample(rng)
        if nxt > t1:
            break
        times.append(nxt)
    return np.array(times)


@numba.njit(cache=True)
def _rhs(y, pp, u, n_rate):
    p1, p2, p3, n_clear, gamma_sec, h_thresh, v_g, v_i, g_b, i_b = (
        pp[0], pp[1], pp[2], pp[3], pp[4], pp[5], pp[6], pp[7], pp[8], pp[9],
    )
    g, x, i1, i2 = y[0], y[1], y[2], y[3]
    s_b = gamma_sec * max(0.0, g_b - h_thresh) / n_clear
    out = np.empty(4)
    out[0] = -(p1 + x) * g + p1 * g_b + 1000.0 * n_rate / v_g
    out[1] = -p2 * x + p3 * (i1 - i_b)
    out[2] = -n_clear * (i1 - i_b) + (max(0.0, i2) - s_b) / v_i + 1.0e6 * u / v_i
    out[3] = gamma_sec * max(0.0, g - h_thresh) - n_clear * i2
    return out


@numba.njit(cache=True)
def _rk4_segment(y0, pp, u, n_rate, duration, h_max, floor):
    """Integrate one constant-input segment; returns states, derivatives, floor hits."""
    n = max(1, int(math.ceil(duration / h_max - 1e-9)))
    h = duration / n
    ys = np.empty((n + 1, 4))
    ds = np.empty((n + 1, 4))
    ys[0] = y0
    ds[0] = _rhs(y0, pp, u, n_rate)
    hits = 0
    y = y0.copy()
    for k in range(n):
        k1 = ds[k]
        k2 = _rhs(y + 0.5 * h * k1, pp, u, n_rate)
        k3 = _rhs(y + 0.5 * h * k2, pp, u, n_rate)
        k4 = _rhs(y + h * k3, pp, u, n_rate)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if y[0] < floor:
            y[0] = floor
            hits += 1
        ys[k + 1] = y
        ds[k + 1] = _rhs(y, pp, u, n_rate)
    return ys, ds, h, hits


class Trajectory:
    """Dense RK4 solution, queryable anywhere in its span.

    Held as one piece per constant-input segment so interpolation never
    straddles a forcing discontinuity.
    """

    def __init__(self, pieces: list[tuple[np.ndarray, np.ndarray, np.ndarray]]):
        self.pieces = pieces
        self._starts = np.array([p[0][0] for p in pieces])
        self._splines: dict[int, CubicHermiteSpline] = {}

    @property
    def times(self) -> np.ndarray:
        return np.concatenate([self.pieces[0][0]] + [p[0][1:] for p in self.pieces[1:]])

    @property
    def t0(self) -> float:
        return float(self.pieces[0][0][0])

    @property
    def t1(self) -> float:
        return float(self.pieces[-1][0][-1])

    @property
    def final(self) -> SimState:
        g, x, i1, i2 = self.pieces[-1][1][-1]
        return SimState(float(g), float(x), float(i1), float(i2), self.t1)

    def _state_vec(self, t: float) -> np.ndarray:
        if t < self.t0 - 1e-12 or t > self.t1 + 1e-12:
            raise ValueError(f"query {t} outside the simulated span [{self.t0}, {self.t1}]")
        k = max(0, int(np.searchsorted(self._starts, t, side="right")) - 1)
        ts, ys, ds = self.pieces[k]
        j = int(np.searchsorted(ts, t))
        if j < len(ts) and ts[j] == t:
            return ys[j]
        if len(ts) == 1:
            return ys[0]
        if k not in self._splines:
            self._splines[k] = CubicHermiteSpline(ts, ys, ds, axis=0)
        return self._splines[k](min(max(t, ts[0]), ts[-1]))

    def glucose_at(self, t):
        if np.ndim(t) == 0:
            return float(self._state_vec(float(t))[0])
        return np.array([self._state_vec(float(x))[0] for x in np.asarray(t)])

    def state_at(self, t: float) -> SimState:
        g, x, i1, i2 = self._state_vec(float(t))
        return SimState(float(g), float(x), float(i1), float(i2), float(t))


def simulate(
    patient: VirtualPatient,
    state0: SimState,
    until: float,
    insulin: RateSchedule,
    nutrition: RateSchedule,
    step: float = STEP_HR,
) -> Trajectory:
    """RK4 with step <= ``step``, realigned at every schedule breakpoint."""
    t0 = state0.t
    if until < t0:
        raise ValueError("cannot simulate backwards")
    insulin.require_cover(t0, until, "insulin schedule")
    nutrition.require_cover(t0, until, "nutrition schedule")
    pp = patient.as_array()
    y = state0.as_array()
    if until == t0:
        d = _rhs(y, pp, insulin.rate_at(t0), nutrition.rate_at(t0))
        return Trajectory([(np.array([t0]), y[None, :], d[None, :])])

    cuts = np.union1d(insulin.breakpoints, nutrition.breakpoints)
    cuts = cuts[(cuts > t0) & (cuts < until)]
    edges = np.concatenate([[t0], cuts, [until]])
    pieces = []
    total_hits = 0
    for a, b in zip(edges[:-1], edges[1:]):
        seg_y, seg_d, h, hits = _rk4_segment(
            y, pp, insulin.rate_at(a), nutrition.rate_at(a), b - a, step, BG_FLOOR
        )
        if not np.all(np.isfinite(seg_y)):
            bad = int(np.argmax(~np.all(np.isfinite(seg_y), axis=1)))
            raise SimulationError(
                f"integration blow-up for patient {patient.patient_id} near t={a + bad * h:.3f} hr"
            )
        total_hits += hits
        seg_t = a + h * np.arange(len(seg_y))
        seg_t[-1] = b
        pieces.append((seg_t, seg_y, seg_d))
        y = seg_y[-1]
    if total_hits:
        log.warning("patient %s: BG floored at %.0f mg/dL on %d steps", patient.patient_id, BG_FLOOR, total_hits)
    return Trajectory(pieces)
