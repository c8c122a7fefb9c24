"""Glycemic regions, paired comparisons and report files.

Student-t probabilities use the regularized incomplete beta function,
evaluated by its continued fraction (modified Lentz), accurate to ~1e-14 in
the range used here. The Kolmogorov-Smirnov p-value is the asymptotic
Kolmogorov distribution at ``sqrt(n) * D``; no Lilliefors correction is
applied even though mean and sd are estimated from the sample, so the test
is conservative.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

REPORT_SCHEMA = 1
REGIONS = (
    "severe_hypo",
    "moderate_hypo",
    "mild_hypo",
    "target",
    "mild_hyper",
    "moderate_hyper",
    "severe_hyper",
)
STATS = ("min", "max", "avg")


@dataclass(frozen=True)
class GlycemicRegions:
    target_lo: float
    target_hi: float
    severe_hypo_below: float = 40.0
    moderate_hypo_below: float = 70.0
    mild_hyper_max: float = 250.0
    moderate_hyper_max: float = 400.0

    def __post_init__(self) -> None:
        edges = (
            0.0, self.severe_hypo_below, self.moderate_hypo_below,
            self.target_lo, self.target_hi, self.mild_hyper_max, self.moderate_hyper_max,
        )
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"region edges must be strictly increasing: {edges}")

    @classmethod
    def for_target(cls, target_range: Sequence[float]) -> GlycemicRegions:
        return cls(float(target_range[0]), float(target_range[1]))

    def classify(self, bg: float) -> str:
        if bg < 0 or not math.isfinite(bg):
            raise ValueError(f"BG must be finite and non-negative, got {bg}")
        if bg < self.severe_hypo_below:
            return "severe_hypo"
        if bg < self.moderate_hypo_below:
            return "moderate_hypo"
        if bg < self.target_lo:
            return "mild_hypo"
        if bg <= self.target_hi:
            return "target"
        if bg <= self.mild_hyper_max:
            return "mild_hyper"
        if bg <= self.moderate_hyper_max:
            return "moderate_hyper"
        return "severe_hyper"


def classify_bg(bg: float, regions: GlycemicRegions) -> str:
    return regions.classify(bg)


# --- distributions -------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t."""
    t2 = t * t
    if t2 < df:
        # near zero the direct form cancels; use the complementary beta
        half = 0.5 * betainc(0.5, 0.5 * df, t2 / (df + t2))
        return 0.5 - half if t >= 0 else 0.5 + half
    tail = 0.5 * betainc(0.5 * df, 0.5, df / (df + t2))
    return tail if t >= 0 else 1.0 - tail


def t_ppf(p: float, df: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_ppf(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_sf(hi, df) > 1.0 - p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_sf(mid, df) > 1.0 - p:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def kolmogorov_sf(lam: float) -> float:
    """``P(K > lam)`` for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.18:
        # theta-function form converges fast for small lam
        s = sum(math.exp(-((2 * k - 1) ** 2) * math.pi**2 / (8 * lam * lam)) for k in range(1, 30))
        return 1.0 - math.sqrt(2 * math.pi) / lam * s
    s = sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, 101))
    return min(1.0, max(0.0, 2.0 * s))


# --- tests ---------------------------------------------------------------


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    ci95: tuple[float, float]
    mean: float
    n: int
    degenerate: bool = False


@dataclass(frozen=True)
class KsResult:
    d: float
    p: float
    n: int
    degenerate: bool = False


def paired_ttest(diffs: Sequence[float]) -> TTestResult:
    x = np.asarray(diffs, dtype=float)
    n = len(x)
    if n < 2:
        raise ValueError("paired t-test needs at least two differences")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0:
        t = 0.0 if mean == 0 else math.copysign(math.inf, mean)
        return TTestResult(t, 1.0 if mean == 0 else 0.0, (mean, mean), mean, n, degenerate=True)
    se = sd / math.sqrt(n)
    t = mean / se
    p = min(1.0, 2.0 * t_sf(abs(t), n - 1))
    half = t_ppf(0.975, n - 1) * se
    return TTestResult(t, p, (mean - half, mean + half), mean, n)


def ks_normality(sample: Sequence[float]) -> KsResult:
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if n < 5:
        raise ValueError("normality check needs at least five values")
    sd = float(x.std(ddof=1))
    if sd == 0:
        return KsResult(1.0, 0.0, n, degenerate=True)
    z = (x - x.mean()) / sd
    cdf = np.array([0.5 * math.erfc(-v / math.sqrt(2.0)) for v in z])
    i = np.arange(1, n + 1)
    d = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return KsResult(d, kolmogorov_sf(math.sqrt(n) * d), n)


# --- paired summaries ----------------------------------------------------


@dataclass
class PairedSummary:
    """One LQG-versus-protocol comparison over a cohort.

    ``arms[arm][stat]`` lists per-patient values aligned with ``patient_ids``;
    differences are LQG minus protocol.
    """

    protocol: str
    target_range: tuple[float, float]
    patient_ids: list[int]
    arms: dict[str, dict[str, list[float]]]
    all_values: dict[str, list[list[float]]]
    diffs: dict[str, list[float]]
    tests: dict[str, TTestResult | None]
    normality: dict[str, KsResult | None]
    excluded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_range"] = list(self.target_range)
        for group in ("tests", "normality"):
            for k, v in d[group].items():
                if v is not None and "ci95" in v:
                    v["ci95"] = list(v["ci95"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> PairedSummary:
        def tt(v):
            return None if v is None else TTestResult(**{**v, "ci95": tuple(v["ci95"])})

        def ks(v):
            return None if v is None else KsResult(**v)

        return cls(
            protocol=d["protocol"],
            target_range=tuple(d["target_range"]),
            patient_ids=list(d["patient_ids"]),
            arms=d["arms"],
            all_values=d["all_values"],
            diffs=d["diffs"],
            tests={k: tt(v) for k, v in d["tests"].items()},
            normality={k: ks(v) for k, v in d["normality"].items()},
            excluded=d.get("excluded", 0),
        )


def _patient_stats(values: Sequence[float]) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.min()), float(v.max()), float(v.mean())


def summarize(
    pairs: Iterable[tuple[object, object]],
    protocol: str = "",
    target_range: Sequence[float] = (0.0, 0.0),
) -> PairedSummary:
    """Per-patient min/max/avg of ETW BG for both arms and their paired tests.

    ``pairs`` yields ``(protocol_record, lqg_record)``; each record needs
    ``patient_id`` and ``etw_bg.values``. Pairs with a missing arm or an empty
    ETW trace are excluded and counted.
    """
    ids: list[int] = []
    arms = {arm: {s: [] for s in STATS} for arm in ("protocol", "lqg")}
    all_values: dict[str, list[list[float]]] = {"protocol": [], "lqg": []}
    excluded = 0
    for prot, lqg in pairs:
        if prot is None or lqg is None or len(prot.etw_bg) == 0 or len(lqg.etw_bg) == 0:
            excluded += 1
            continue
        if prot.patient_id != lqg.patient_id:
            raise ValueError(f"pair mismatch: {prot.patient_id} vs {lqg.patient_id}")
        ids.append(int(prot.patient_id))
        for arm, rec in (("protocol", prot), ("lqg", lqg)):
            for s, v in zip(STATS, _patient_stats(rec.etw_bg.values)):
                arms[arm][s].append(v)
            all_values[arm].append([float(v) for v in rec.etw_bg.values])

    order = np.argsort(ids, kind="stable")
    ids = [ids[i] for i in order]
    for arm in arms:
        for s in STATS:
            arms[arm][s] = [arms[arm][s][i] for i in order]
        all_values[arm] = [all_values[arm][i] for i in order]

    diffs = {s: [a - b for a, b in zip(arms["lqg"][s], arms["protocol"][s])] for s in STATS}
    tests = {s: paired_ttest(diffs[s]) if len(diffs[s]) >= 2 else None for s in STATS}
    normality = {s: ks_normality(diffs[s]) if len(diffs[s]) >= 5 else None for s in STATS}
    return PairedSummary(
        protocol=protocol,
        target_range=(float(target_range[0]), float(target_range[1])),
        patient_ids=ids,
        arms=arms,
        all_values=all_values,
        diffs=diffs,
        tests=tests,
        normality=normality,
        excluded=excluded,
    )


# --- report files --------------------------------------------------------


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def boxplot_rows(summary: PairedSummary) -> list[dict]:
    regions = GlycemicRegions.for_target(summary.target_range) if summary.target_range[1] > 0 else None
    rows = []
    for arm in ("protocol", "lqg"):
        for k, pid in enumerate(summary.patient_ids):
            values = [(s, summary.arms[arm][s][k]) for s in STATS]
            values += [("all", v) for v in summary.all_values[arm][k]]
            for stat, v in values:
                rows.append({
                    "protocol": summary.protocol,
                    "patient_id": pid,
                    "arm": arm,
                    "stat": stat,
                    "value": repr(float(v)),
                    "region": regions.classify(v) if regions else "",
                })
    return rows


def emit_report(
    summaries: Sequence[PairedSummary],
    metadata: dict,
    out_dir: str | Path,
    table4_counts: dict[str, dict[str, int]] | None = None,
) -> list[Path]:
    """Write summary.json, boxplot_data.csv and (for retro runs) table4_counts.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "schema_version": REPORT_SCHEMA,
        "generated_at": datetime.now(timezone.utc).isoformat(),
        "metadata": metadata,
        "comparisons": [s.to_dict() for s in summaries],
    }
    written = [out / "summary.json", out / "boxplot_data.csv"]
    _atomic_write(written[0], json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")

    fields = ["protocol", "patient_id", "arm", "stat", "value", "region"]
    tmp = written[1].with_name(written[1].name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for s in summaries:
            w.writerows(boxplot_rows(s))
    os.replace(tmp, written[1])

    if table4_counts is not None:
        written.append(write_table4_counts(table4_counts, out / "table4_counts.csv"))
    return written


def write_table4_counts(counts: dict[str, dict[str, int]], path: str | Path) -> Path:
    """``counts[event_kind][category]`` as long-format CSV."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_kind", "category", "count"])
        for kind in sorted(counts):
            for cat in sorted(counts[kind]):
                w.writerow([kind, cat, counts[kind][cat]])
    os.replace(tmp, path)
    return path


@dataclass
class LoadedReport:
    metadata: dict
    generated_at: str
    summaries: list[PairedSummary] = field(default_factory=list)


def load_report(out_dir: str | Path) -> LoadedReport:
    doc = json.loads((Path(out_dir) / "summary.json").read_text())
    if doc.get("schema_version") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')}")
    return LoadedReport(
        metadata=doc["metadata"],
        generated_at=doc["generated_at"],
        summaries=[PairedSummary.from_dict(c) for c in doc["comparisons"]],
    )
