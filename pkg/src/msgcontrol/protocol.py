"""Table-driven IV insulin protocol engine.

A protocol is a table of rows keyed by a BG band and a two-point trend. Each
row carries an action on the current IV rate and the time to the next check.
Tables live in TOML files; see ``data/protocols`` for the shipped examples.

File format (``schema_version = 1``)::

    name = "Protocol A (reconstructed)"
    target_range = [120.0, 150.0]
    max_rate = 25.0
    trend_threshold = 10.0          # mg/dL between consecutive readings

    [[rows]]
    id = "A-hypo"
    bg_band = [0.0, 70.0]           # [lo, hi) mg/dL, hi may be inf
    trend = "any"                   # or "falling" / "stable" / "rising" / a list
    action = "set"                  # set | scale | delta
    value = 0.0
    next_check = 0.5                # hr
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .config import ConfigError, load_toml

TRENDS = ("falling", "stable", "rising")
ACTIONS = ("set", "scale", "delta")
SHIPPED = ("protocol_a", "protocol_b")


class ProtocolError(ConfigError):
    pass


@dataclass(frozen=True)
class ProtocolRow:
    rule_id: str
    lo: float
    hi: float
    trend: str
    action: str
    value: float
    next_check: float

    def apply(self, current_rate: float) -> float:
        if self.action == "set":
            return self.value
        if self.action == "scale":
            return current_rate * self.value
        return current_rate + self.value


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    target_range: tuple[float, float]
    rows: tuple[ProtocolRow, ...]
    max_rate: float = 25.0
    trend_threshold: float = 10.0

    @property
    def upper_target(self) -> float:
        return self.target_range[1]

    def row_for(self, bg: float, trend: str) -> ProtocolRow:
        for row in self.rows:
            if row.trend == trend and row.lo <= bg < row.hi:
                return row
        raise ProtocolError(f"{self.name}: no row for bg={bg}, trend={trend}")


@dataclass(frozen=True)
class ProtocolDecision:
    new_rate: float
    next_check: float
    rule_id: str


_ROW_KEYS = {"id", "bg_band", "trend", "action", "value", "next_check"}
_TOP_KEYS = {"schema_version", "name", "target_range", "max_rate", "trend_threshold", "rows"}


def parse_protocol(doc: dict, source: str = "<memory>") -> ProtocolSpec:
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ProtocolError(f"{source}: unknown keys {sorted(unknown)}")
    if doc.get("schema_version", 1) != 1:
        raise ProtocolError(f"{source}: unsupported schema_version {doc.get('schema_version')}")
    try:
        name = str(doc["name"])
        lo_t, hi_t = (float(v) for v in doc["target_range"])
        raw_rows = doc["rows"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"{source}: missing or malformed field ({exc})") from exc
    max_rate = float(doc.get("max_rate", 25.0))
    threshold = float(doc.get("trend_threshold", 10.0))
    if not 0 <= lo_t < hi_t:
        raise ProtocolError(f"{source}: bad target_range [{lo_t}, {hi_t}]")
    if max_rate <= 0 or threshold < 0:
        raise ProtocolError(f"{source}: max_rate must be positive and trend_threshold non-negative")

    rows: list[ProtocolRow] = []
    for n, raw in enumerate(raw_rows):
        rid = str(raw.get("id", f"row{n}"))
        unknown = set(raw) - _ROW_KEYS
        if unknown:
            raise ProtocolError(f"{source}: row {rid}: unknown keys {sorted(unknown)}")
        try:
            lo, hi = (float(v) for v in raw["bg_band"])
            action = str(raw["action"])
            value = float(raw["value"])
            next_check = float(raw["next_check"])
            trend = raw.get("trend", "any")
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"{source}: row {rid}: missing or malformed field ({exc})") from exc
        trends = TRENDS if trend == "any" else ([trend] if isinstance(trend, str) else list(trend))
        if any(t not in TRENDS for t in trends):
            raise ProtocolError(f"{source}: row {rid}: bad trend {trend!r}")
        if action not in ACTIONS:
            raise ProtocolError(f"{source}: row {rid}: bad action {action!r}")
        if not (lo < hi) or lo < 0:
            raise ProtocolError(f"{source}: row {rid}: bad band [{lo}, {hi})")
        if not (next_check > 0 and math.isfinite(next_check)):
            raise ProtocolError(f"{source}: row {rid}: next_check must be positive")
        if not math.isfinite(value) or (action != "delta" and value < 0):
            raise ProtocolError(f"{source}: row {rid}: bad action value {value}")
        rows.extend(ProtocolRow(rid, lo, hi, t, action, value, next_check) for t in trends)

    _check_partition(rows, source)
    return ProtocolSpec(name, (lo_t, hi_t), tuple(rows), max_rate, threshold)


def _check_partition(rows: list[ProtocolRow], source: str) -> None:
    for trend in TRENDS:
        mine = sorted((r for r in rows if r.trend == trend), key=lambda r: (r.lo, r.hi))
        if not mine:
            raise ProtocolError(f"{source}: no rows for trend {trend!r}")
        edge, prev = 0.0, None
        for r in mine:
            if r.lo > edge:
                raise ProtocolError(
                    f"{source}: gap in {trend} bands: [{edge}, {r.lo}) between rows "
                    f"{prev.rule_id if prev else '<start>'} and {r.rule_id}"
                )
            if r.lo < edge:
                raise ProtocolError(
                    f"{source}: overlap in {trend} bands: rows {prev.rule_id if prev else '?'} and "
                    f"{r.rule_id} both cover [{r.lo}, {edge})"
                )
            edge, prev = r.hi, r
        if edge != math.inf:
            raise ProtocolError(f"{source}: gap in {trend} bands: [{edge}, inf) after row {prev.rule_id}")


def load_protocol(path: str | Path) -> ProtocolSpec:
    """Load a protocol from a TOML file, or a shipped one by name."""
    if str(path) in SHIPPED:
        ref = resources.files("msgcontrol") / "data" / "protocols" / f"{path}.toml"
        with resources.as_file(ref) as p:
            return parse_protocol(load_toml(p), str(path))
    return parse_protocol(load_toml(path), str(path))


def classify_trend(bg_now: float, bg_prev: float | None, threshold: float) -> str:
    if bg_prev is None:
        return "stable"
    delta = bg_now - bg_prev
    if delta <= -threshold:
        return "falling"
    if delta >= threshold:
        return "rising"
    return "stable"


def decide(
    spec: ProtocolSpec, bg_now: float, bg_prev: float | None, current_rate: float
) -> ProtocolDecision:
    if not bg_now > 0:
        raise ValueError(f"BG must be positive, got {bg_now}")
    row = spec.row_for(bg_now, classify_trend(bg_now, bg_prev, spec.trend_threshold))
    rate = min(max(row.apply(current_rate), 0.0), spec.max_rate)
    return ProtocolDecision(new_rate=rate, next_check=row.next_check, rule_id=row.rule_id)
