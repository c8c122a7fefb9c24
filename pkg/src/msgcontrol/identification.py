"""Personalized MSG parameter estimation by Gaussian maximum likelihood.

The objective is the negative log of the joint normal density of a window of
BG measurements, conditioned on the first measurement as the exact initial
state. Because the latent process is Markov and measurement noise is
independent, the joint density factorizes into one-step Kalman predictions;
the kernel below evaluates that factorization in O(K) and is algebraically
identical to the dense ``1/2 log det S + 1/2 r' S^-1 r`` form.

Minimization is multi-start Nelder-Mead over a logit reparameterization of
the admissible box, so every candidate is inside the box by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .msg_model import PARAM_NAMES, MsgParams, ParamBox, forcing_grid
from .schedule import GlucoseTrace, RateSchedule

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MIN_MEASUREMENTS = 4


class IdentificationError(RuntimeError):
    pass


class InsufficientDataError(IdentificationError):
    """Training window too small or lacking insulin information."""


class DegenerateParamsError(IdentificationError):
    """Parameters give a singular or non-finite observation covariance."""


class FitError(IdentificationError):
    """Every restart diverged."""

    def __init__(self, message: str, best_effort: MsgParams | None, diagnostic: dict):
        super().__init__(message)
        self.best_effort = best_effort
        self.diagnostic = diagnostic


@dataclass(frozen=True)
class TrainingWindow:
    trace: GlucoseTrace
    insulin: RateSchedule
    nutrition: RateSchedule
    t_start: float
    t_end: float

    def __post_init__(self) -> None:
        if self.t_end <= self.t_start:
            raise InsufficientDataError("empty training window")
        t = self.trace.times
        if len(t) and (t[0] < self.t_start or t[-1] > self.t_end):
            raise InsufficientDataError("trace extends outside the training window")
        if len(t) < MIN_MEASUREMENTS:
            raise InsufficientDataError(
                f"{len(t)} BG measurements in window; at least {MIN_MEASUREMENTS} required"
            )
        self.insulin.require_cover(self.t_start, self.t_end, "insulin schedule")
        self.nutrition.require_cover(self.t_start, self.t_end, "nutrition schedule")
        if not self.insulin.has_positive_interval(self.t_start, self.t_end):
            raise InsufficientDataError("no insulin delivered in the training window")

    @classmethod
    def trailing(
        cls,
        trace: GlucoseTrace,
        insulin: RateSchedule,
        nutrition: RateSchedule,
        t_end: float,
        hours: float = 24.0,
    ) -> TrainingWindow:
        t_start = max(t_end - hours, insulin.start, nutrition.start)
        return cls(trace.window(t_start, t_end), insulin, nutrition, t_start, t_end)

    def compiled(self) -> tuple[float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Anchor value plus forcing grid and observations for the kernels."""
        t = self.trace.times
        dts, ins, nut, meas = forcing_grid(float(t[0]), t[1:], self.insulin, self.nutrition)
        return float(self.trace.values[0]), dts, ins, nut, meas.astype(np.uint8), self.trace.values[1:].copy()


@dataclass(frozen=True)
class FitConfig:
    restarts: int = 8
    xatol: float = 1e-8
    max_iter: int = 2000
    box: ParamBox = field(default_factory=ParamBox.default)
    fit_r_meas: bool = True
    r_meas_fixed: float = 4.0
    seed: int = 0
    jitter: float = 1e-9
    init_step: float = 1.0

    def effective_box(self) -> ParamBox:
        if self.fit_r_meas:
            return self.box
        return self.box.with_bounds(r_meas=(self.r_meas_fixed, self.r_meas_fixed))


@dataclass(frozen=True)
class FitResult:
    params: MsgParams
    neg_log_likelihood: float
    converged: bool
    iterations: int
    restarts_used: int

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "neg_log_likelihood": self.neg_log_likelihood,
            "converged": self.converged,
            "iterations": self.iterations,
            "restarts_used": self.restarts_used,
        }


@numba.njit(cache=True)
def _nll_kernel(theta, g0, dts, ins, nut, meas, y, jitter):
    gamma = theta[0]
    g_b = theta[1]
    beta_n = theta[2]
    beta_i = theta[3]
    s2 = theta[4] * theta[4]
    r = theta[5] + jitter
    m = g0
    p = 0.0
    total = 0.0
    j = 0
    for s in range(dts.shape[0]):
        dt = dts[s]
        if dt > 0.0:
            eq = g_b + (beta_n * nut[s] - beta_i * ins[s]) / gamma
            e = math.exp(-gamma * dt)
            m = eq + (m - eq) * e
            p = p * e * e - s2 * math.expm1(-2.0 * gamma * dt) / (2.0 * gamma)
        if meas[s]:
            S = p + r
            if not (S > 0.0) or not math.isfinite(S):
                return math.inf
            v = y[j] - m
            total += 0.5 * (math.log(S) + LOG_2PI + v * v / S)
            k = p / S
            m = m + k * v
            p = (1.0 - k) * p
            j += 1
    if not math.isfinite(total):
        return math.inf
    return total


@numba.njit(cache=True)
def _to_theta(z, free, fixed, lo, hi):
    theta = fixed.copy()
    for a in range(free.shape[0]):
        i = free[a]
        theta[i] = lo[i] + (hi[i] - lo[i]) / (1.0 + math.exp(-z[a]))
    return theta


@numba.njit(cache=True)
def _objective(z, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter):
    return _nll_kernel(_to_theta(z, free, fixed, lo, hi), g0, dts, ins, nut, meas, y, jitter)


@numba.njit(cache=True)
def _nelder_mead(z0, step, xatol, max_iter, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter):
    n = z0.shape[0]
    sim = np.empty((n + 1, n))
    fs = np.empty(n + 1)
    sim[0] = z0
    for i in range(n):
        sim[i + 1] = z0
        sim[i + 1, i] += step
    for i in range(n + 1):
        fs[i] = _objective(sim[i], free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)

    it = 0
    converged = False
    while it < max_iter:
        order = np.argsort(fs, kind="mergesort")
        sim = sim[order]
        fs = fs[order]
        size = 0.0
        for i in range(1, n + 1):
            for j in range(n):
                d = abs(sim[i, j] - sim[0, j])
                if d > size:
                    size = d
        if size <= xatol:
            converged = True
            break
        it += 1

        centroid = np.zeros(n)
        for i in range(n):
            centroid += sim[i]
        centroid /= n
        xr = 2.0 * centroid - sim[n]
        fr = _objective(xr, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)
        if fr < fs[0]:
            xe = 3.0 * centroid - 2.0 * sim[n]
            fe = _objective(xe, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)
            if fe < fr:
                sim[n] = xe
                fs[n] = fe
            else:
                sim[n] = xr
                fs[n] = fr
        elif fr < fs[n - 1]:
            sim[n] = xr
            fs[n] = fr
        else:
            shrink = False
            if fr < fs[n]:
                xc = 1.5 * centroid - 0.5 * sim[n]
                fc = _objective(xc, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)
                if fc <= fr:
                    sim[n] = xc
                    fs[n] = fc
                else:
                    shrink = True
            else:
                xcc = 0.5 * centroid + 0.5 * sim[n]
                fcc = _objective(xcc, free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)
                if fcc < fs[n]:
                    sim[n] = xcc
                    fs[n] = fcc
                else:
                    shrink = True
            if shrink:
                for i in range(1, n + 1):
                    sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
                    fs[i] = _objective(sim[i], free, fixed, lo, hi, g0, dts, ins, nut, meas, y, jitter)

    best = int(np.argmin(fs))
    return sim[best].copy(), fs[best], it, converged


def neg_log_likelihood(params: MsgParams, window: TrainingWindow, jitter: float = 1e-9) -> float:
    """Gaussian NLL of the window's measurements after the anchoring first one."""
    g0, dts, ins, nut, meas, y = window.compiled()
    value = _nll_kernel(params.as_array(), g0, dts, ins, nut, meas, y, jitter)
    if not math.isfinite(value):
        raise DegenerateParamsError(f"observation covariance is singular or non-finite for {params}")
    return float(value)


def latin_hypercube(n: int, lo: np.ndarray, hi: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d = len(lo)
    u = (rng.permuted(np.tile(np.arange(n), (d, 1)), axis=1).T + rng.random((n, d))) / n
    return lo + u * (hi - lo)


def _logit(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 1e-9, 1.0 - 1e-9)
    return np.log(u) - np.log1p(-u)


def fit(
    window: TrainingWindow,
    config: FitConfig | None = None,
    initial_guesses: Sequence[MsgParams] = (),
) -> FitResult:
    """Multi-start box-constrained maximum-likelihood fit.

    Restarts are Latin-hypercube points in the box drawn from ``config.seed``;
    ``initial_guesses`` (clipped into the box) are appended after them.
    """
    config = config or FitConfig()
    box = config.effective_box()
    lo, hi = box.lower(), box.upper()
    free = np.nonzero(hi > lo)[0].astype(np.int64)
    fixed = lo.copy()
    g0, dts, ins, nut, meas, y = window.compiled()

    rng = np.random.default_rng(config.seed)
    starts = list(latin_hypercube(config.restarts, lo, hi, rng)) if config.restarts > 0 else []
    for guess in initial_guesses:
        starts.append(np.clip(guess.as_array(), lo, hi))
    if not starts:
        raise ValueError("fit needs at least one restart or initial guess")

    span = np.where(hi > lo, hi - lo, 1.0)
    results = []
    for idx, theta0 in enumerate(starts):
        if len(free) == 0:
            f = _nll_kernel(fixed, g0, dts, ins, nut, meas, y, config.jitter)
            results.append((f, idx, fixed.copy(), 0, True))
            continue
        z0 = _logit((theta0[free] - lo[free]) / span[free])
        z, f, its, conv = _nelder_mead(
            z0, config.init_step, config.xatol, config.max_iter,
            free, fixed, lo, hi, g0, dts, ins, nut, meas, y, config.jitter,
        )
        results.append((float(f), idx, _to_theta(z, free, fixed, lo, hi), int(its), bool(conv)))

    finite = [r for r in results if math.isfinite(r[0])]
    if not finite:
        best_effort = MsgParams.from_array(np.clip(starts[0], lo, hi))
        raise FitError(
            "all restarts diverged",
            best_effort,
            {"restarts": len(results), "window": [window.t_start, window.t_end]},
        )
    f, idx, theta, its, conv = min(finite, key=lambda r: (r[0], r[1]))
    theta = np.clip(theta, lo, hi)
    return FitResult(
        params=MsgParams(**dict(zip(PARAM_NAMES, map(float, theta)))),
        neg_log_likelihood=float(f),
        converged=conv,
        iterations=its,
        restarts_used=len(results),
    )
