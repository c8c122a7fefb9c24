"""Scalar LQG glucose controller built on an identified MSG model.

The MSG model linearizes exactly to ``x' = a x + b u + w`` with ``a = -gamma``
and ``b = -beta_i``; nutrition and basal glucose enter as a known constant
offset, which is absorbed into the reference shift ``u_r``. The regulator and
the estimator gains come from two independent scalar Riccati equations
(separation principle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .msg_model import MsgParams, equilibrium, stationary_variance, transition
from .schedule import GlucoseTrace, RateSchedule


DEFAULT_Q_COST = 1.0
# Large enough that the feedback gain stays well below the pump range per
# mg/dL of error; smaller values make the clamped loop bang-bang.
DEFAULT_R_COST = 50.0


class ControlError(ValueError):
    pass


class UncontrollableError(ControlError):
    """Input coefficient is zero."""


class NoAuthorityError(ControlError):
    """Model has no insulin effect, so no steady-state shift exists."""


@dataclass(frozen=True)
class LinearSystem:
    a: float
    b: float
    c: float = 1.0
    q_noise: float = 0.0
    r_noise: float = 0.0

    @classmethod
    def from_params(cls, params: MsgParams) -> LinearSystem:
        return cls(a=-params.gamma, b=-params.beta_i, c=1.0, q_noise=params.sigma**2, r_noise=params.r_meas)


@dataclass(frozen=True)
class LqgGains:
    k_c: float
    k_f: float
    x_r: float
    u_r: float


@dataclass(frozen=True)
class ControllerState:
    x_hat: float
    p_cov: float
    last_update: float

    def __post_init__(self) -> None:
        if self.p_cov < 0:
            raise ValueError("estimate variance must be non-negative")


def _riccati_root(a: float, g: float, q: float, r: float) -> float:
    """Stabilizing root of ``2 a P - (g^2 / r) P^2 + q = 0``."""
    return r * (a + math.hypot(a, g * math.sqrt(q / r))) / (g * g)


def lqr_gain(sys: LinearSystem, q_cost: float, r_cost: float) -> float:
    if sys.b == 0:
        raise UncontrollableError("b = 0: insulin has no modeled effect")
    if q_cost < 0 or r_cost <= 0:
        raise ValueError("need q_cost >= 0 and r_cost > 0")
    p = _riccati_root(sys.a, sys.b, q_cost, r_cost)
    return sys.b * p / r_cost


def lqr_cost_to_go(sys: LinearSystem, q_cost: float, r_cost: float) -> float:
    """Riccati solution P: optimal cost is ``P x0^2`` for the noise-free loop."""
    return _riccati_root(sys.a, sys.b, q_cost, r_cost)


def kalman_gain(sys: LinearSystem) -> float:
    """Stationary observer gain.

    With ``r_noise = 0`` the measurement is substituted directly for the
    state, which is the ``k_f -> inf`` limit; that case returns ``math.inf``
    unless there is no process noise and the plant is stable, where the
    estimate needs no correction and the gain is 0.
    """
    if sys.c == 0:
        return 0.0
    if sys.r_noise == 0:
        if sys.q_noise == 0 and sys.a < 0:
            return 0.0
        return math.inf
    s = _riccati_root(sys.a, sys.c, sys.q_noise, sys.r_noise)
    return s * sys.c / sys.r_noise


def stationary_filter_variance(sys: LinearSystem) -> float:
    if sys.r_noise == 0:
        return 0.0
    return _riccati_root(sys.a, sys.c, sys.q_noise, sys.r_noise)


def reference_shift(
    sys: LinearSystem, params: MsgParams, x_r: float, nutrition_rate: float, u_max: float = 25.0
) -> float:
    """Constant insulin rate whose equilibrium is ``x_r``, clamped to [0, u_max]."""
    if params.beta_i == 0:
        raise NoAuthorityError("beta_i = 0: no insulin rate moves the equilibrium")
    u = (equilibrium(params, 0.0, nutrition_rate) - x_r) * params.gamma / params.beta_i
    return min(max(u, 0.0), u_max)


def design(
    params: MsgParams,
    x_r: float,
    nutrition_rate: float,
    q_cost: float = DEFAULT_Q_COST,
    r_cost: float = DEFAULT_R_COST,
    u_max: float = 25.0,
) -> LqgGains:
    sys = LinearSystem.from_params(params)
    return LqgGains(
        k_c=lqr_gain(sys, q_cost, r_cost),
        k_f=kalman_gain(sys),
        x_r=x_r,
        u_r=reference_shift(sys, params, x_r, nutrition_rate, u_max),
    )


def suggest_rate(state: ControllerState, gains: LqgGains, u_max: float = 25.0) -> float:
    u = -gains.k_c * (state.x_hat - gains.x_r) + gains.u_r
    return min(max(u, 0.0), u_max)


def filter_predict(
    state: ControllerState, params: MsgParams, u: float, nutrition_rate: float, dt: float
) -> ControllerState:
    mean, q = transition(params, state.x_hat, dt, u, nutrition_rate)
    p = state.p_cov * math.exp(-2.0 * params.gamma * dt) + q
    return ControllerState(mean, p, state.last_update + dt)


def filter_update(
    state: ControllerState,
    params: MsgParams,
    u: float,
    nutrition_rate: float,
    y: float,
    dt: float,
) -> ControllerState:
    """Exact discrete predict over ``dt`` followed by the measurement update."""
    prior = filter_predict(state, params, u, nutrition_rate, dt)
    denom = prior.p_cov + params.r_meas
    if denom == 0:
        return replace(prior, x_hat=y, p_cov=0.0)
    k = prior.p_cov / denom
    return replace(prior, x_hat=prior.x_hat + k * (y - prior.x_hat), p_cov=(1.0 - k) * prior.p_cov)


def estimate_state(
    params: MsgParams,
    trace: GlucoseTrace,
    insulin: RateSchedule,
    nutrition: RateSchedule,
    t_now: float | None = None,
) -> ControllerState:
    """Run the filter over ``trace`` and predict to ``t_now``.

    The prior at the first measurement is centred on that reading with the
    stationary process variance, so the first update weights it by the
    usual signal-to-noise ratio.
    """
    if len(trace) == 0:
        raise ValueError("cannot estimate state from an empty trace")
    times, values = trace.times, trace.values
    t_now = float(times[-1]) if t_now is None else float(t_now)
    if t_now < times[-1]:
        raise ValueError("t_now precedes the last measurement")
    insulin.require_cover(float(times[0]), t_now, "insulin schedule")
    nutrition.require_cover(float(times[0]), t_now, "nutrition schedule")

    p0 = stationary_variance(params)
    denom = p0 + params.r_meas
    k = p0 / denom if denom > 0 else 1.0
    state = ControllerState(float(values[0]), (1.0 - k) * p0, float(times[0]))

    def advance(st: ControllerState, t1: float) -> ControllerState:
        for a, b in _joint_pieces(insulin, nutrition, st.last_update, t1):
            st = filter_predict(st, params, insulin.rate_at(a), nutrition.rate_at(a), b - a)
        return replace(st, last_update=t1)

    for t, y in zip(times[1:], values[1:]):
        state = advance(state, float(t))
        denom = state.p_cov + params.r_meas
        if denom == 0:
            state = replace(state, x_hat=float(y), p_cov=0.0)
        else:
            k = state.p_cov / denom
            state = replace(state, x_hat=state.x_hat + k * (y - state.x_hat), p_cov=(1.0 - k) * state.p_cov)
    return advance(state, t_now)


def _joint_pieces(insulin: RateSchedule, nutrition: RateSchedule, t0: float, t1: float):
    if t1 <= t0:
        return
    cuts = np.union1d(insulin.breakpoints, nutrition.breakpoints)
    edges = np.concatenate([[t0], cuts[(cuts > t0) & (cuts < t1)], [t1]])
    for a, b in zip(edges[:-1], edges[1:]):
        yield float(a), float(b)
