"""Regenerate the synthetic retrospective fixture shipped with the package.

The fixture is synthetic: 23 tube-fed patients with BG traces drawn from the
MSG model under a crude nurse-driven sliding scale, then 19 hypoglycemic and
107 hyperglycemic readings placed between each patient's second and last
insulin change. A few out-of-window excursions are added as well; replay must
ignore them.

    python scripts/make_retro_fixture.py [out_dir]
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np

from msgcontrol.msg_model import MsgParams, simulate_path
from msgcontrol.schedule import RateSchedule

N_RECORDS = 23
N_HYPO = 19
N_HYPER = 107
SEED = 20240611
DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "msgcontrol" / "data" / "retro_fixture"


def _record(pid: str, rng: np.random.Generator, n_hypo: int, n_hyper: int):
    hours = float(rng.uniform(60, 96))
    times = [0.0]
    while True:
        nxt = times[-1] + float(np.clip(rng.lognormal(np.log(1.5), 0.4), 0.5, 4.0))
        if nxt > hours:
            break
        times.append(round(nxt, 3))
    times = np.array(times)

    nut_b = [0.0]
    while nut_b[-1] < hours:
        nut_b.append(round(nut_b[-1] + float(rng.uniform(6, 18)), 3))
    nut_b = nut_b[:-1]
    nut_r = [round(float(rng.uniform(1, 8)), 2) for _ in nut_b]
    nutrition = RateSchedule(nut_b, nut_r, hours + 1)

    params = MsgParams(
        gamma=float(rng.uniform(0.2, 0.6)),
        g_b=float(rng.uniform(130, 190)),
        beta_n=float(rng.uniform(2, 8)),
        beta_i=float(rng.uniform(3, 10)),
        sigma=float(rng.uniform(5, 15)),
        r_meas=4.0,
    )

    # sliding scale decided at every other reading, applied from that reading on
    ins_b, ins_r, bg = [], [], []
    g = 180.0
    rate = 2.0
    for k, t in enumerate(times):
        if k:
            sched = RateSchedule(ins_b, ins_r, t + 1e-3)
            g = float(simulate_path(params, g, [times[k - 1], t], sched, nutrition, rng).values[-1])
        g = float(np.clip(g, 85, 240))
        bg.append(round(g, 1))
        if k % 2 == 0 or not ins_b:
            rate = float(np.clip(rate + (g - 160) / 40 + rng.normal(0, 0.3), 0.3, 15))
            ins_b.append(float(t))
            ins_r.append(round(rate, 2))

    second, last = ins_b[1], ins_b[-1]
    # need >= 4 readings in the 24 h before the intervention preceding an event
    eligible = [
        k for k, t in enumerate(times)
        if second < t <= last and t - 24 >= 0 and np.sum((times >= t - 26) & (times < t)) >= 6
    ]
    picks = rng.choice(eligible, size=n_hypo + n_hyper, replace=False)
    for j, k in enumerate(sorted(picks, key=lambda k: rng.random())):
        bg[k] = round(float(rng.uniform(45, 69)), 1) if j < n_hypo else round(float(rng.uniform(255, 380)), 1)
    # decoys outside the evaluation interval
    early = [k for k, t in enumerate(times) if t < second]
    late = [k for k, t in enumerate(times) if t > last]
    for pool in (early, late):
        if pool and rng.random() < 0.5:
            bg[int(rng.choice(pool))] = round(float(rng.uniform(260, 320)), 1)

    return (
        [(pid, float(t), v) for t, v in zip(times, bg)],
        [(pid, t, r) for t, r in zip(ins_b, ins_r)],
        [(pid, t, r) for t, r in zip(nut_b, nut_r)],
    )


def main(out: Path) -> None:
    rng = np.random.default_rng(SEED)
    hypo = np.bincount(rng.integers(0, N_RECORDS, N_HYPO), minlength=N_RECORDS)
    hyper = np.full(N_RECORDS, N_HYPER // N_RECORDS)
    hyper[rng.choice(N_RECORDS, N_HYPER % N_RECORDS, replace=False)] += 1
    tables = {"bg.csv": [], "insulin.csv": [], "nutrition.csv": []}
    for i in range(N_RECORDS):
        b, ins, nut = _record(f"S{i + 1:02d}", rng, int(hypo[i]), int(hyper[i]))
        tables["bg.csv"] += b
        tables["insulin.csv"] += ins
        tables["nutrition.csv"] += nut
    headers = {
        "bg.csv": ["patient_id", "time_hr", "bg_mgdl"],
        "insulin.csv": ["patient_id", "time_hr", "rate_u_per_hr"],
        "nutrition.csv": ["patient_id", "time_hr", "rate_units_per_hr"],
    }
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in tables.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(headers[name])
            w.writerows(rows)


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUT)
