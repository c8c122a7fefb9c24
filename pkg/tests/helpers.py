"""Shared test utilities and independent numerical oracles."""

from __future__ import annotations

import math

import numpy as np
from hypothesis import strategies as st

from msgcontrol.msg_model import MsgParams, simulate_path
from msgcontrol.schedule import RateSchedule


def params_strategy(
    gamma=(0.05, 2.0), g_b=(60.0, 300.0), beta_n=(0.0, 30.0), beta_i=(0.0, 30.0),
    sigma=(0.0, 40.0), r_meas=(0.0, 100.0),
):
    f = lambda lo, hi: st.floats(lo, hi, allow_nan=False, allow_infinity=False)  # noqa: E731
    return st.builds(
        MsgParams, gamma=f(*gamma), g_b=f(*g_b), beta_n=f(*beta_n), beta_i=f(*beta_i),
        sigma=f(*sigma), r_meas=f(*r_meas),
    )


def random_schedule(rng: np.random.Generator, t0: float, t1: float, mean_gap: float, lo: float, hi: float,
                    first_rate: float | None = None) -> RateSchedule:
    b, r = [t0], [float(rng.uniform(lo, hi)) if first_rate is None else first_rate]
    while True:
        nxt = b[-1] + float(rng.exponential(mean_gap)) + 0.1
        if nxt >= t1:
            break
        b.append(nxt)
        r.append(float(rng.uniform(lo, hi)))
    return RateSchedule(b, r, t1)


def synthetic_window(params: MsgParams, seed: int, k: int = 40, hours: float = 24.0, g0: float | None = None):
    """K+1 noisy readings of an MSG path over ``[0, hours]`` with random forcing."""
    rng = np.random.default_rng(seed)
    insulin = random_schedule(rng, 0.0, hours, 3.0, 0.0, 6.0, first_rate=2.0)
    nutrition = random_schedule(rng, 0.0, hours, 6.0, 1.0, 8.0)
    times = np.sort(rng.uniform(0.0, hours, size=k - 1))
    times = np.concatenate([[0.0], times, [hours]])
    times = np.unique(times)
    g0 = params.g_b if g0 is None else g0
    trace = simulate_path(params, g0, times, insulin, nutrition, rng)
    return trace, insulin, nutrition


# --- Euler-Maruyama Monte Carlo ---------------------------------------------


def em_samples(g0, gamma, eq, sigma, obs_times, n_fine, n_paths, seed):
    """Euler-Maruyama values at ``obs_times`` (> 0) on a step-h and a step-2h grid.

    Both grids share Brownian increments, so ``2 * fine - coarse`` is the
    Richardson-extrapolated sample with O(h^2) weak error.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    t_end = float(obs_times[-1])
    n_fine += n_fine % 2
    h = t_end / n_fine
    idx = np.rint(obs_times / h).astype(int)
    idx += idx % 2  # observation points must sit on the coarse grid too
    rng = np.random.default_rng(seed)
    gf = np.full(n_paths, float(g0))
    gc = gf.copy()
    w1, w2 = np.empty(n_paths), np.empty(n_paths)
    fine = np.empty((n_paths, len(idx)))
    coarse = np.empty((n_paths, len(idx)))
    sd = sigma * math.sqrt(h)
    for k in range(2, n_fine + 1, 2):
        rng.standard_normal(out=w1)
        rng.standard_normal(out=w2)
        w1 *= sd
        w2 *= sd
        gf += gamma * h * (eq - gf)
        gf += w1
        gf += gamma * h * (eq - gf)
        gf += w2
        gc += 2.0 * gamma * h * (eq - gc)
        gc += w1
        gc += w2
        for j in np.nonzero(idx == k)[0]:
            fine[:, j] = gf
            coarse[:, j] = gc
    return fine, coarse


def richardson_moments(fine: np.ndarray, coarse: np.ndarray):
    """Extrapolated mean and variance of a scalar sample, with standard errors."""
    n = len(fine)
    x = 2.0 * fine - coarse
    mean, mean_se = float(x.mean()), float(x.std(ddof=1) / math.sqrt(n))
    w = 2.0 * (fine - fine.mean()) ** 2 - (coarse - coarse.mean()) ** 2
    var, var_se = float(w.mean()), float(w.std(ddof=1) / math.sqrt(n))
    return mean, mean_se, var, var_se


# --- dense linear-algebra oracles -------------------------------------------


def dense_nll(params: MsgParams, trace, insulin, nutrition) -> float:
    """Gaussian NLL of readings 1..K given reading 0, by full factorization."""
    from msgcontrol.msg_model import predict_joint

    t, y = trace.times, trace.values
    pred = predict_joint(params, float(y[0]), t[1:], insulin, nutrition, t0=float(t[0]))
    r = y[1:] - pred.mean
    sign, logdet = np.linalg.slogdet(pred.cov)
    assert sign > 0
    quad = float(r @ np.linalg.solve(pred.cov, r))
    return 0.5 * logdet + 0.5 * quad + 0.5 * len(r) * math.log(2.0 * math.pi)


def dense_filter(gamma, eq, sigma, r_meas, m0, p0, t0, times, y):
    """Posterior means and variances of x(t_k) given y_1..y_k via joint conditioning."""
    times = np.asarray(times, dtype=float)
    n = len(times)
    decay = np.exp(-gamma * (times - t0))
    mean = eq + (m0 - eq) * decay
    stat = sigma**2 / (2.0 * gamma)
    var = p0 * decay**2 + stat * (1.0 - decay**2)
    lag = np.abs(times[:, None] - times[None, :])
    earlier = np.minimum.outer(np.arange(n), np.arange(n))
    cov_x = var[earlier] * np.exp(-gamma * lag)
    cov_y = cov_x + r_meas * np.eye(n)
    post_m, post_v = np.empty(n), np.empty(n)
    for k in range(n):
        s_yy = cov_y[: k + 1, : k + 1]
        s_xy = cov_x[k, : k + 1]
        gain = np.linalg.solve(s_yy, s_xy)
        post_m[k] = mean[k] + gain @ (y[: k + 1] - mean[: k + 1])
        post_v[k] = cov_x[k, k] - gain @ s_xy
    return post_m, post_v


# --- event classification truth table -------------------------------------------------------

# every weak ordering of (L, P, R) with positive rates; letters inside a tie are
# written alphabetically. All-zero rates before hypoglycemia are all_appropriate.
TRUTH = {
    "hypoglycemia": {
        "both_appropriate": ["L=P<R", "L<P<R", "P<L<R"],
        "protocol_better": ["P<L=R", "P<R<L", "P=R<L"],
        "lqg_better": ["L<P=R", "L<R<P", "L=R<P"],
        "both_inappropriate": ["R<L=P", "R<L<P", "R<P<L"],
        "all_inappropriate": ["L=P=R"],
    },
    "hyperglycemia": {
        "both_appropriate": ["R<L=P", "R<L<P", "R<P<L"],
        "protocol_better": ["L=R<P", "L<R<P", "L<P=R"],
        "lqg_better": ["P=R<L", "P<R<L", "P<L=R"],
        "both_inappropriate": ["L=P<R", "L<P<R", "P<L<R"],
        "all_inappropriate": ["L=P=R"],
    },
}


def ordering(r, p, l):
    groups = {}
    for name, v in (("L", l), ("P", p), ("R", r)):
        groups.setdefault(v, []).append(name)
    return "<".join("=".join(sorted(groups[v])) for v in sorted(groups))
