"""Regenerate the two shipped protocol tables.

Both are reconstructions: the source institutions' flow charts are not
reproduced here, only their target ranges and general structure (BG band x
two-point trend -> rate action and next check time).

    python scripts/make_protocols.py [out_dir]
"""

from __future__ import annotations

import sys
from pathlib import Path

DEFAULT_OUT = Path(__file__).resolve().parents[1] / "src" / "msgcontrol" / "data" / "protocols"
TRENDS = ("falling", "stable", "rising")

# band name -> (falling, stable, rising) actions as (action, value)
A_ACTIONS = {
    "hypo": [("set", 0.0)] * 3,
    "low": [("set", 0.0), ("scale", 0.5), ("scale", 0.75)],
    "below": [("scale", 0.5), ("scale", 0.75), ("scale", 1.0)],
    "target": [("scale", 0.75), ("scale", 1.0), ("delta", 0.5)],
    "high1": [("scale", 1.0), ("delta", 1.0), ("delta", 2.0)],
    "high2": [("delta", 0.5), ("delta", 2.0), ("delta", 3.0)],
    "high3": [("delta", 1.0), ("delta", 3.0), ("delta", 4.0)],
    "high4": [("delta", 2.0), ("delta", 4.0), ("delta", 5.0)],
}
# the wider-target protocol titrates upward in smaller steps
B_ACTIONS = {
    "hypo": [("set", 0.0)] * 3,
    "low": [("set", 0.0), ("scale", 0.5), ("scale", 0.75)],
    "below": [("scale", 0.5), ("scale", 0.75), ("scale", 1.0)],
    "target": [("scale", 0.75), ("scale", 1.0), ("delta", 0.5)],
    "high1": [("scale", 1.0), ("delta", 0.5), ("delta", 1.0)],
    "high2": [("scale", 1.0), ("delta", 1.0), ("delta", 1.5)],
    "high3": [("delta", 0.5), ("delta", 1.5), ("delta", 2.0)],
    "high4": [("delta", 1.0), ("delta", 2.0), ("delta", 3.0)],
}

PROTOCOLS = {
    "protocol_a": dict(
        title="Protocol A (reconstructed)",
        comment="Hourly-titration table, target 120-150 mg/dL.",
        prefix="A",
        target=(120.0, 150.0),
        edges=(0, 70, 100, 120, 150, 200, 250, 300),
        actions=A_ACTIONS,
        slow_checks=(),
    ),
    "protocol_b": dict(
        title="Protocol B (reconstructed)",
        comment="Conservative table, target 140-180 mg/dL.",
        prefix="B",
        target=(140.0, 180.0),
        edges=(0, 70, 110, 140, 180, 220, 260, 310),
        actions=B_ACTIONS,
        slow_checks=("high1",),
    ),
}
BANDS = ("hypo", "low", "below", "target", "high1", "high2", "high3", "high4")


def _fmt(x: float) -> str:
    return "inf" if x == float("inf") else repr(float(x))


def render(p: dict) -> str:
    lines = [
        f"# {p['comment']}",
        "schema_version = 1",
        f'name = "{p["title"]}"',
        f"target_range = [{_fmt(p['target'][0])}, {_fmt(p['target'][1])}]",
        "max_rate = 25.0",
        "trend_threshold = 10.0",
    ]
    edges = list(p["edges"]) + [float("inf")]
    for k, band in enumerate(BANDS):
        lo, hi = edges[k], edges[k + 1]
        for trend, (action, value) in zip(TRENDS, p["actions"][band]):
            if band == "hypo":
                check = 0.5
            elif band == "target" and trend == "stable":
                check = 2.0
            elif band in p["slow_checks"] and trend != "rising":
                check = 2.0
            else:
                check = 1.0
            lines += [
                "",
                "[[rows]]",
                f'id = "{p["prefix"]}-{band}-{trend}"',
                f"bg_band = [{_fmt(lo)}, {_fmt(hi)}]",
                f'trend = "{trend}"',
                f'action = "{action}"',
                f"value = {_fmt(value)}",
                f"next_check = {_fmt(check)}",
            ]
    return "\n".join(lines) + "\n"


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, p in PROTOCOLS.items():
        (out / f"{name}.toml").write_text(render(p))


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else DEFAULT_OUT)
