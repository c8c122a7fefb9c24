"""Configuration loading shared by the trial, retro and CLI layers.

Trial configs are TOML with ``schema_version = 1``. Every table is checked
against its dataclass and unknown keys are rejected, so a misspelled field
fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .identification import FitConfig
from .lqg import DEFAULT_Q_COST, DEFAULT_R_COST
from .msg_model import PARAM_NAMES, ParamBox
from .virtual_patient import DEFAULT_PATIENT_BOX, PATIENT_FIELDS, IntervalDistribution

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


def load_toml(path: str | Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class ControllerConfig:
    u_max: float = 25.0
    q_cost: float = DEFAULT_Q_COST
    r_cost: float = DEFAULT_R_COST
    # "protocol_upper" or an explicit mg/dL value
    target: str | float = "protocol_upper"

    def target_for(self, upper_bound: float) -> float:
        return upper_bound if self.target == "protocol_upper" else float(self.target)


@dataclass(frozen=True)
class ScheduleConfig:
    nutrition_median_hr: float = 6.0
    nutrition_sigma: float = 0.5
    nutrition_rate: tuple[float, float] = (1.0, 8.0)
    insulin_median_hr: float = 3.0
    insulin_sigma: float = 0.5
    insulin_rate: tuple[float, float] = (0.0, 6.0)


@dataclass(frozen=True)
class TrialConfig:
    n_patients: int = 200
    m_schedules: int = 20
    ttw_hours: float = 24.0
    etw_hours: float = 24.0
    root_seed: int = 20240501
    protocols: tuple[str, ...] = ("protocol_a", "protocol_b")
    measurement_noise_sd: float = 2.0
    measurement: IntervalDistribution = field(default_factory=IntervalDistribution)
    schedules: ScheduleConfig = field(default_factory=ScheduleConfig)
    patient_box: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_PATIENT_BOX))
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self) -> None:
        if self.n_patients < 1 or self.m_schedules < 1:
            raise ConfigError("n_patients and m_schedules must be positive")
        if self.n_patients % self.m_schedules:
            raise ConfigError(f"m_schedules={self.m_schedules} must divide n_patients={self.n_patients}")
        if self.ttw_hours <= 0 or self.etw_hours <= 0:
            raise ConfigError("ttw_hours and etw_hours must be positive")
        if not self.protocols:
            raise ConfigError("at least one protocol is required")
        for name in PATIENT_FIELDS:
            lo, hi = self.patient_box[name]
            if not 0 < lo <= hi:
                raise ConfigError(f"patient box for {name} must satisfy 0 < lo <= hi")

    @property
    def ttw_end(self) -> float:
        return self.ttw_hours

    @property
    def etw_end(self) -> float:
        return self.ttw_hours + self.etw_hours

    def with_seed(self, seed: int) -> TrialConfig:
        return dataclasses.replace(self, root_seed=int(seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fit"]["box"] = {k: list(v) for k, v in self.fit.box.bounds.items()}
        d["patient_box"] = {k: list(v) for k, v in self.patient_box.items()}
        d["protocols"] = list(self.protocols)
        return d

    def digest(self) -> str:
        blob = json.dumps({"schema_version": SCHEMA_VERSION, **self.to_dict()}, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()


def _build(cls, raw: Any, where: str, converters: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        conv = (converters or {}).get(key)
        try:
            kwargs[key] = conv(value) if conv else value
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{where}] bad value for {key}: {value!r} ({exc})") from exc
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _pair(v) -> tuple[float, float]:
    lo, hi = v
    return float(lo), float(hi)


def _box(raw: dict, names, defaults: dict, where: str) -> dict[str, tuple[float, float]]:
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    box = dict(defaults)
    for k, v in raw.items():
        try:
            box[k] = _pair(v)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{where}] bad interval for {k}: {v!r}") from exc
    return box


def fit_config_from_dict(raw: dict, where: str = "fit") -> FitConfig:
    raw = dict(raw)
    box_raw = raw.pop("box", {})
    cfg = _build(FitConfig, raw, where, {"restarts": int, "max_iter": int, "seed": int})
    try:
        box = ParamBox(_box(box_raw, PARAM_NAMES, dict(ParamBox.default().bounds), f"{where}.box"))
    except ValueError as exc:
        raise ConfigError(f"[{where}.box] {exc}") from exc
    return dataclasses.replace(cfg, box=box)


def trial_config_from_dict(doc: dict) -> TrialConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    sections = {"trial", "measurement", "schedules", "patient_box", "controller", "fit"}
    unknown = set(doc) - sections
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    trial_raw = dict(doc.get("trial", {}))
    nested = {}
    if "measurement" in doc:
        nested["measurement"] = _build(IntervalDistribution, doc["measurement"], "measurement")
    if "schedules" in doc:
        nested["schedules"] = _build(
            ScheduleConfig, doc["schedules"], "schedules",
            {"nutrition_rate": _pair, "insulin_rate": _pair},
        )
    if "patient_box" in doc:
        nested["patient_box"] = _box(doc["patient_box"], PATIENT_FIELDS, DEFAULT_PATIENT_BOX, "patient_box")
    if "controller" in doc:
        nested["controller"] = _build(ControllerConfig, doc["controller"], "controller")
    if "fit" in doc:
        nested["fit"] = fit_config_from_dict(doc["fit"])

    for key in nested:
        if key in trial_raw:
            raise ConfigError(f"[trial] {key} belongs in its own table")
    cfg = _build(
        TrialConfig, {**trial_raw}, "trial",
        {"n_patients": int, "m_schedules": int, "root_seed": int, "protocols": tuple},
    )
    return dataclasses.replace(cfg, **nested)


def load_trial_config(path: str | Path) -> TrialConfig:
    return trial_config_from_dict(load_toml(path))


@dataclass(frozen=True)
class RetroConfig:
    tie_tolerance: float = 0.05
    include_mild: bool = False
    window_hours: float = 24.0
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    fit: FitConfig = field(default_factory=FitConfig)


def retro_config_from_dict(doc: dict) -> RetroConfig:
    doc = dict(doc)
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    unknown = set(doc) - {"retro", "controller", "fit"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = _build(RetroConfig, doc.get("retro", {}), "retro")
    nested = {}
    if "controller" in doc:
        nested["controller"] = _build(ControllerConfig, doc["controller"], "controller")
    if "fit" in doc:
        nested["fit"] = fit_config_from_dict(doc["fit"])
    return dataclasses.replace(cfg, **nested)
