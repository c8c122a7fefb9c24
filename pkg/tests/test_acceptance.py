"""Exit criteria. Each test prints one ``criterion N: PASS|FAIL`` line to the terminal."""

import json
import math
import time

import numba
import numpy as np
import pytest
from scipy import stats

from conftest import SMOKE_CONFIG
from helpers import TRUTH, em_samples, ordering, richardson_moments, synthetic_window
from msgcontrol.cli import main
from msgcontrol.config import TrialConfig
from msgcontrol.identification import TrainingWindow, fit
from msgcontrol.lqg import LinearSystem, lqr_cost_to_go, lqr_gain
from msgcontrol.msg_model import MsgParams, equilibrium, transition
from msgcontrol.protocol import load_protocol
from msgcontrol.retro import HYPER, HYPO, classify, ingest, replay
from msgcontrol.stats import ks_normality, paired_ttest, summarize
from msgcontrol.trial import run_trial

pytestmark = [pytest.mark.acceptance]


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return report


# --- criteria 1-3: desk-scale trial ---------------------------------------------


@pytest.fixture(scope="module")
def desk_trial():
    start = time.perf_counter()
    res = run_trial(TrialConfig(), jobs=1)
    elapsed = time.perf_counter() - start
    sums = {name: summarize(pairs, name, res.specs[name].target_range) for name, pairs in res.records.items()}
    return res, sums, elapsed


@pytest.mark.slow
def test_criterion_1_no_hypoglycemia(desk_trial, verdict):
    res, _, elapsed = desk_trial
    low = 0
    for pairs in res.records.values():
        for prot, lqg in pairs:
            low += int(np.sum(prot.etw_bg.values < 70.0)) + int(np.sum(lqg.etw_bg.values < 70.0))
    verdict(1, low == 0 and elapsed < 600.0, f"{low} ETW readings below 70 mg/dL, trial took {elapsed:.0f} s")


@pytest.mark.slow
def test_criterion_2_paired_difference_signs(desk_trial, verdict):
    _, sums, _ = desk_trial
    ok, parts = True, []
    for name, s in sums.items():
        lo_min = s.tests["min"].ci95
        lo_max = s.tests["max"].ci95
        ok &= lo_min[0] > 0 and lo_max[1] < 0
        parts.append(f"{name} min CI [{lo_min[0]:.2f}, {lo_min[1]:.2f}] max CI [{lo_max[0]:.2f}, {lo_max[1]:.2f}]")
    verdict(2, ok and len(sums) == 2, "; ".join(parts))


@pytest.mark.slow
def test_criterion_3_moderate_hyperglycemia(desk_trial, verdict):
    res, _, _ = desk_trial
    ok, parts = True, []
    for name, pairs in res.records.items():
        frac = float(np.mean([lqg.etw_bg.values.max() < 260.0 for _, lqg in pairs]))
        ok &= frac >= 0.95
        parts.append(f"{name} {frac:.3f}")
    verdict(3, ok, "fraction of LQG patients with max BG < 260: " + ", ".join(parts))


# --- criterion 4: LQR optimality among static gains --------------------------------


@numba.njit(cache=True)
def _quadratic_cost(a, b, k, q, r, x0, horizon):
    lam = a - b * k
    h = min(0.01, 0.04 / max(abs(lam), 1e-12))
    n = int(math.ceil(horizon / h))
    h = horizon / n
    w = q + r * k * k
    x, cost = x0, 0.0
    for _ in range(n):
        # RK4 on the augmented system x' = lam x, J' = w x^2
        k1x = lam * x
        k1j = w * x * x
        x2 = x + 0.5 * h * k1x
        k2x = lam * x2
        k2j = w * x2 * x2
        x3 = x + 0.5 * h * k2x
        k3x = lam * x3
        k3j = w * x3 * x3
        x4 = x + h * k3x
        k4x = lam * x4
        k4j = w * x4 * x4
        x += h * (k1x + 2 * k2x + 2 * k3x + k4x) / 6.0
        cost += h * (k1j + 2 * k2j + 2 * k3j + k4j) / 6.0
        if not math.isfinite(cost):
            return math.inf
    return cost


def test_criterion_4_lqr_beats_random_gains(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    systems, worst = 0, math.inf
    ok = True
    while systems < 100:
        a = rng.uniform(-2.0, 2.0)
        b = rng.uniform(0.2, 5.0) * rng.choice([-1.0, 1.0])
        q, r = rng.uniform(0.1, 10.0), rng.uniform(0.1, 10.0)
        if math.sqrt(a * a + b * b * q / r) < 0.3:
            continue  # slow closed loop: a 50 h horizon would truncate its cost
        systems += 1
        sys = LinearSystem(a=a, b=b)
        k_opt = lqr_gain(sys, q, r)
        j_opt = _quadratic_cost(a, b, k_opt, q, r, 1.0, 50.0)
        ok &= abs(j_opt - lqr_cost_to_go(sys, q, r)) <= 1e-6 * j_opt
        spread = 3.0 * abs(k_opt) + 1.0
        for k in rng.uniform(k_opt - spread, k_opt + spread, 50):
            j = _quadratic_cost(a, b, k, q, r, 1.0, 50.0)
            worst = min(worst, j / j_opt - 1.0)
            ok &= j_opt <= j * (1.0 + 1e-6)
    elapsed = time.perf_counter() - start
    verdict(4, ok and elapsed < 30.0,
            f"100 systems x 50 gains, smallest excess cost {worst:.3g}, {elapsed:.1f} s")


# --- criterion 5: OU moments ------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_transition_moments(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, ok = 0.0, True
    for d in range(20):
        gamma = math.exp(rng.uniform(math.log(0.05), math.log(1.5)))
        dt = rng.uniform(0.25, min(6.0, 2.0 / gamma))
        sigma = rng.uniform(2.0, 40.0)
        eq = rng.uniform(80.0, 250.0)
        g0 = eq + rng.uniform(-3.0, 3.0) * sigma / math.sqrt(2.0 * gamma)
        fine, coarse = em_samples(g0, gamma, eq, sigma, [dt], 150, 1_000_000, seed=100 + d)
        m, m_se, v, v_se = richardson_moments(fine[:, 0], coarse[:, 0])
        p = MsgParams(gamma=gamma, g_b=eq, beta_n=0.0, beta_i=0.0, sigma=sigma, r_meas=0.0)
        mean, var = transition(p, g0, dt, 0.0, 0.0)
        z = max(abs(m - mean) / m_se, abs(v - var) / v_se)
        worst = max(worst, z)
        ok &= z < 3.0
    elapsed = time.perf_counter() - start
    verdict(5, ok and elapsed < 120.0, f"20 draws, largest |z| {worst:.2f}, {elapsed:.0f} s")


# --- criterion 6: identification recovery ----------------------------------------------


def test_criterion_6_equilibrium_recovery(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2025)
    hits = 0
    for case in range(50):
        truth = MsgParams(
            gamma=rng.uniform(0.15, 0.55), g_b=rng.uniform(110.0, 235.0), beta_n=rng.uniform(2.5, 10.0),
            beta_i=rng.uniform(2.2, 9.4), sigma=rng.uniform(0.0, 8.7), r_meas=rng.uniform(0.0, 55.0),
        )
        trace, ins, nut = synthetic_window(truth, 1000 + case, k=40)
        est = fit(TrainingWindow(trace, ins, nut, 0.0, 24.0)).params
        i_bar, n_bar = ins.mean_rate(0.0, 24.0), nut.mean_rate(0.0, 24.0)
        ref = equilibrium(truth, i_bar, n_bar)
        hits += abs(equilibrium(est, i_bar, n_bar) - ref) <= 0.05 * abs(ref)
    elapsed = time.perf_counter() - start
    verdict(6, hits >= 45 and elapsed < 120.0, f"{hits}/50 within 5%, {elapsed:.0f} s")


# --- criterion 7: classification totality -----------------------------------------------------------


def test_criterion_7_classification_totality(verdict):
    mismatches, classes = [], 0
    for kind in (HYPO, HYPER):
        table = {o: cat for cat, orders in TRUTH[kind].items() for o in orders}
        seen = {}
        for r in (1.0, 2.0, 3.0):
            for p in (1.0, 2.0, 3.0):
                for l in (1.0, 2.0, 3.0):
                    key = ordering(r, p, l)
                    got = classify(r, p, l, kind)
                    seen.setdefault(key, set()).add(got)
                    if got != table[key]:
                        mismatches.append((kind, key, got))
        classes += len(seen)
        mismatches += [(kind, k, v) for k, v in seen.items() if len(v) != 1]
    if classify(0.0, 0.0, 0.0, HYPO) != "all_appropriate":
        mismatches.append((HYPO, "all zero", classify(0.0, 0.0, 0.0, HYPO)))
    verdict(7, not mismatches and classes == 26, f"{classes} classes, mismatches {mismatches}")


# --- criterion 8: determinism -----------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_simulate_is_deterministic(smoke_run, tmp_path, verdict):
    code = main(["simulate", "--config", str(SMOKE_CONFIG), "--out", str(tmp_path), "--jobs", "1"])

    def load(d):
        doc = json.loads((d / "summary.json").read_text())
        doc.pop("generated_at")
        return doc

    same = smoke_run["code"] == code == 0 and load(smoke_run["out"]) == load(tmp_path)
    verdict(8, same, "summary.json identical apart from generated_at" if same else "summaries differ")


# --- criterion 9: retro fixture conservation ----------------------------------------------------


@pytest.mark.slow
def test_criterion_9_retro_conservation(verdict):
    records = ingest_fixture()
    ok, parts = True, []
    for name in ("protocol_a", "protocol_b"):
        res = replay(records, load_protocol(name))
        counts = res.counts()
        n_hypo, n_hyper = sum(counts[HYPO].values()), sum(counts[HYPER].values())
        ok &= (n_hypo, n_hyper) == (19, 107) and res.unevaluable == 0
        parts.append(f"{name} {n_hypo}/{n_hyper}")
    verdict(9, ok, "hypo/hyper tallies " + ", ".join(parts))


def ingest_fixture():
    from importlib import resources

    with resources.as_file(resources.files("msgcontrol") / "data" / "retro_fixture") as p:
        return ingest(p)


# --- criterion 10: statistics cross-check ------------------------------------------------------


def test_criterion_10_statistics_cross_check(verdict):
    rng = np.random.default_rng(1010)
    worst = 0.0
    for i in range(20):
        n = int(rng.integers(8, 300))
        x = [rng.normal(rng.uniform(-5, 5), rng.uniform(0.5, 20), n), rng.standard_t(4, n) * 3,
             rng.exponential(2.0, n) - 1.0, rng.uniform(-4, 6, n)][i % 4]
        ours = paired_ttest(x)
        ref = stats.ttest_1samp(x, 0.0)
        ci = stats.t.interval(0.95, n - 1, loc=np.mean(x), scale=stats.sem(x))
        ks = ks_normality(x)
        z = (x - x.mean()) / x.std(ddof=1)
        d_ref = stats.kstest(z, "norm").statistic
        p_ref = stats.kstwobign.sf(math.sqrt(n) * d_ref)
        errs = [abs(ours.t - ref.statistic) / max(1.0, abs(ref.statistic)), abs(ours.p - ref.pvalue),
                abs(ours.ci95[0] - ci[0]) / max(1.0, abs(ci[0])), abs(ours.ci95[1] - ci[1]) / max(1.0, abs(ci[1])),
                abs(ks.d - d_ref), abs(ks.p - p_ref)]
        worst = max(worst, *errs)
    verdict(10, worst <= 1e-6, f"largest deviation from scipy over 20 samples {worst:.2e}")
