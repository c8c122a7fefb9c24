"""Minimal stochastic glucose (MSG) model.

An Ornstein-Uhlenbeck variant driven by piecewise-constant nutrition and
insulin forcing::

    dG = [-gamma * (G - g_b) + beta_n * N(t) - beta_i * I(t)] dt + sigma dW

observed with independent Gaussian noise of variance ``r_meas``. Between
forcing changes the transition law is Gaussian and known in closed form, so
any finite set of observations is jointly normal.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from .schedule import GlucoseTrace, RateSchedule, ScheduleError

PARAM_NAMES = ("gamma", "g_b", "beta_n", "beta_i", "sigma", "r_meas")

DEFAULT_BOX: dict[str, tuple[float, float]] = {
    "gamma": (0.01, 3.0),
    "g_b": (40.0, 400.0),
    "beta_n": (0.0, 50.0),
    "beta_i": (0.0, 50.0),
    "sigma": (0.0, 60.0),
    "r_meas": (0.0, 400.0),
}


class InvalidParamsError(ValueError):
    pass


@dataclass(frozen=True)
class ParamBox:
    """Admissible parameter set: one closed interval per MsgParams field."""

    bounds: Mapping[str, tuple[float, float]]

    def __post_init__(self) -> None:
        missing = set(PARAM_NAMES) - set(self.bounds)
        extra = set(self.bounds) - set(PARAM_NAMES)
        if missing or extra:
            raise InvalidParamsError(f"box keys mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, (lo, hi) in self.bounds.items():
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise InvalidParamsError(f"bad bounds for {name}: [{lo}, {hi}]")
        if self.bounds["gamma"][0] <= 0:
            raise InvalidParamsError("gamma lower bound must be positive")
        for name in ("g_b", "beta_n", "beta_i", "sigma", "r_meas"):
            if self.bounds[name][0] < 0:
                raise InvalidParamsError(f"{name} lower bound must be non-negative")

    @classmethod
    def default(cls) -> ParamBox:
        return cls(dict(DEFAULT_BOX))

    def with_bounds(self, **overrides: tuple[float, float]) -> ParamBox:
        b = dict(self.bounds)
        b.update(overrides)
        return ParamBox(b)

    def lower(self) -> np.ndarray:
        return np.array([self.bounds[n][0] for n in PARAM_NAMES])

    def upper(self) -> np.ndarray:
        return np.array([self.bounds[n][1] for n in PARAM_NAMES])

    def contains(self, params: MsgParams) -> bool:
        v = params.as_array()
        return bool(np.all(v >= self.lower()) and np.all(v <= self.upper()))


@dataclass(frozen=True)
class MsgParams:
    """Identified MSG parameters.

    gamma: mean-reversion rate (1/hr); g_b: basal glucose (mg/dL);
    beta_n: nutrition gain (mg/dL/hr per carb-unit/hr); beta_i: insulin gain
    (mg/dL/hr per U/hr); sigma: diffusion (mg/dL/sqrt(hr)); r_meas:
    measurement-noise variance (mg^2/dL^2).
    """

    gamma: float
    g_b: float
    beta_n: float
    beta_i: float
    sigma: float
    r_meas: float

    def __post_init__(self) -> None:
        vals = [getattr(self, f.name) for f in fields(self)]
        if not all(math.isfinite(v) for v in vals):
            raise InvalidParamsError(f"non-finite parameter in {self}")
        if self.gamma <= 0:
            raise InvalidParamsError("gamma must be positive")
        if self.g_b <= 0:
            raise InvalidParamsError("g_b must be positive")
        if min(self.beta_n, self.beta_i, self.sigma, self.r_meas) < 0:
            raise InvalidParamsError("gains, sigma and r_meas must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> MsgParams:
        return cls(*(float(v) for v in values))

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def replace(self, **changes: float) -> MsgParams:
        d = self.to_dict()
        d.update(changes)
        return MsgParams(**d)


@dataclass(frozen=True)
class GaussianPrediction:
    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray


def equilibrium(params: MsgParams, insulin_rate: float, nutrition_rate: float) -> float:
    """Fixed point of the drift under constant forcing (mg/dL)."""
    return params.g_b + (params.beta_n * nutrition_rate - params.beta_i * insulin_rate) / params.gamma


def drift(params: MsgParams, g: float, insulin_rate: float, nutrition_rate: float) -> float:
    return -params.gamma * (g - params.g_b) + params.beta_n * nutrition_rate - params.beta_i * insulin_rate


def stationary_variance(params: MsgParams) -> float:
    return params.sigma**2 / (2.0 * params.gamma)


def transition(
    params: MsgParams, g0: float, dt: float, insulin_rate: float, nutrition_rate: float
) -> tuple[float, float]:
    """Mean and variance of G(dt) given G(0) = g0 under constant forcing."""
    if dt < 0:
        raise ValueError(f"negative time step {dt}")
    if dt == 0:
        return float(g0), 0.0
    eq = equilibrium(params, insulin_rate, nutrition_rate)
    decay = math.exp(-params.gamma * dt)
    mean = eq + (g0 - eq) * decay
    # -expm1(-x) keeps precision for small gamma*dt
    var = params.sigma**2 * -math.expm1(-2.0 * params.gamma * dt) / (2.0 * params.gamma)
    return mean, var


def forcing_grid(
    t0: float,
    times: Sequence[float],
    insulin: RateSchedule,
    nutrition: RateSchedule,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Split ``[t0, times[-1]]`` at every breakpoint and measurement time.

    Returns per-segment ``(dt, insulin, nutrition, ends_at_measurement)``.
    A measurement at ``t0`` itself yields a zero-length segment.
    """
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        empty = np.zeros(0)
        return empty, empty, empty, np.zeros(0, dtype=bool)
    if np.any(np.diff(times) < 0):
        raise ScheduleError("measurement times must be sorted ascending")
    if times[0] < t0:
        raise ScheduleError(f"measurement time {times[0]} precedes the initial time {t0}")
    t_end = float(times[-1])
    insulin.require_cover(t0, t_end, "insulin schedule")
    nutrition.require_cover(t0, t_end, "nutrition schedule")

    cuts = np.concatenate(
        [
            insulin.breakpoints[(insulin.breakpoints > t0) & (insulin.breakpoints < t_end)],
            nutrition.breakpoints[(nutrition.breakpoints > t0) & (nutrition.breakpoints < t_end)],
        ]
    )
    dts, ins, nut, meas = [], [], [], []
    a = t0
    for t in times:
        inner = np.unique(cuts[(cuts > a) & (cuts < t)])
        for b in list(inner) + [float(t)]:
            dts.append(b - a)
            ins.append(insulin.rate_at(a))
            nut.append(nutrition.rate_at(a))
            meas.append(b == t)
            a = b
    return np.array(dts), np.array(ins), np.array(nut), np.array(meas, dtype=bool)


def predict_joint(
    params: MsgParams,
    g0: float,
    times: Sequence[float],
    insulin: RateSchedule,
    nutrition: RateSchedule,
    t0: float | None = None,
) -> GaussianPrediction:
    """Joint Gaussian law of the noisy observations at ``times``.

    ``g0`` is the exactly known state at ``t0`` (defaults to ``times[0]``).
    """
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0):
        raise ScheduleError("measurement times must be sorted ascending")
    if t0 is None:
        t0 = float(times[0]) if len(times) else insulin.start
    dts, ins, nut, meas = forcing_grid(t0, times, insulin, nutrition)

    k = len(times)
    mean = np.empty(k)
    state_var = np.empty(k)
    m, v, j = float(g0), 0.0, 0
    for dt, i_rate, n_rate, is_meas in zip(dts, ins, nut, meas):
        m, dv = transition(params, m, dt, i_rate, n_rate)
        v = v * math.exp(-2.0 * params.gamma * dt) + dv
        if is_meas:
            mean[j] = m
            state_var[j] = v
            j += 1

    # Cov(G_s, G_t) = Var(G_s) exp(-gamma (t - s)) for s <= t
    lag = np.abs(times[:, None] - times[None, :])
    earlier = np.minimum.outer(np.arange(k), np.arange(k))
    cov = state_var[earlier] * np.exp(-params.gamma * lag)
    cov[np.diag_indices(k)] += params.r_meas
    return GaussianPrediction(times=times.copy(), mean=mean, cov=cov)


def simulate_path(
    params: MsgParams,
    g0: float,
    times: Sequence[float],
    insulin: RateSchedule,
    nutrition: RateSchedule,
    rng_seed: int | np.random.Generator | None = None,
    t0: float | None = None,
) -> GlucoseTrace:
    """Exact sample of noisy observations by sequential transition draws."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    times = np.asarray(times, dtype=float)
    if t0 is None:
        t0 = float(times[0]) if len(times) else insulin.start
    dts, ins, nut, meas = forcing_grid(t0, times, insulin, nutrition)
    out = np.empty(len(times))
    g, j = float(g0), 0
    r_sd = math.sqrt(params.r_meas)
    for dt, i_rate, n_rate, is_meas in zip(dts, ins, nut, meas):
        m, v = transition(params, g, dt, i_rate, n_rate)
        g = m + math.sqrt(v) * rng.standard_normal() if v > 0 else m
        if is_meas:
            out[j] = g + r_sd * rng.standard_normal() if r_sd > 0 else g
            j += 1
    return GlucoseTrace(times, out)
