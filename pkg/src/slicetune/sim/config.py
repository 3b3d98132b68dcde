"""Scenario configuration: slices, radio parameters and the decision grid."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..errors import ConfigError


@dataclass(frozen=True)
class SliceSpec:
    ue_count: int
    bit_rate: float  # bits/s during On
    packet_size: int  # bytes
    mean_on: float  # seconds
    mean_off: float  # seconds
    delay_threshold: float  # seconds
    is_managed: bool = False
    name: str = ""

    def validate(self) -> None:
        if self.ue_count < 1:
            raise ConfigError(f"slice {self.name!r}: ue_count must be >= 1")
        for attr in ("bit_rate", "mean_on", "mean_off", "delay_threshold"):
            if not getattr(self, attr) > 0:
                raise ConfigError(f"slice {self.name!r}: {attr} must be strictly positive")
        if self.packet_size <= 0:
            raise ConfigError(f"slice {self.name!r}: packet_size must be > 0")


@dataclass(frozen=True)
class RadioParams:
    tx_power_dbm: float = 30.0
    antenna_gain_db: float = 0.0
    noise_figure_db: float = 5.0
    noise_density_dbm_hz: float = -174.0
    carrier_frequency_hz: float = 2.12e9
    # log-distance pathloss PL(d) = intercept + slope * log10(d_km)
    pathloss_intercept_db: float = 128.1
    pathloss_slope_db: float = 37.6
    shadowing_sigma_db: float = 4.0
    coherence_ttis: int = 10
    # 64-QAM, code rate 948/1024
    efficiency_cap: float = 5.5547
    min_distance_m: float = 50.0
    max_distance_m: float = 500.0

    def validate(self) -> None:
        if self.coherence_ttis < 1:
            raise ConfigError("radio: coherence_ttis must be >= 1")
        if self.shadowing_sigma_db < 0:
            raise ConfigError("radio: shadowing_sigma_db must be >= 0")
        if self.efficiency_cap <= 0:
            raise ConfigError("radio: efficiency_cap must be > 0")
        if not 0 < self.min_distance_m <= self.max_distance_m:
            raise ConfigError("radio: need 0 < min_distance_m <= max_distance_m")


def default_slices() -> tuple[SliceSpec, SliceSpec]:
    gbr = SliceSpec(
        ue_count=20, bit_rate=0.5e6, packet_size=512, mean_on=15.0, mean_off=15.0,
        delay_threshold=0.010, is_managed=True, name="gbr",
    )
    non_gbr = SliceSpec(
        ue_count=4, bit_rate=2.0e6, packet_size=512, mean_on=15.0, mean_off=15.0,
        delay_threshold=0.050, is_managed=False, name="non-gbr",
    )
    return gbr, non_gbr


@dataclass(frozen=True)
class SimConfig:
    slices: tuple[SliceSpec, ...] = field(default_factory=default_slices)
    total_prbs: int = 50
    prb_bandwidth: float = 180e3
    tti: float = 1e-3
    decision_interval: float = 0.1
    seed: int = 0
    queue_capacity: int = 200_000  # bytes per UE
    horizon: int = 300
    pf_smoothing: float = 0.01
    radio: RadioParams = field(default_factory=RadioParams)
    scenario_id: str = "gbr-nongbr"

    def __post_init__(self) -> None:
        object.__setattr__(self, "slices", tuple(self.slices))
        self.validate()

    @property
    def ttis_per_step(self) -> int:
        return int(round(self.decision_interval / self.tti))

    @property
    def managed_index(self) -> int:
        return next(i for i, s in enumerate(self.slices) if s.is_managed)

    @property
    def managed(self) -> SliceSpec:
        return self.slices[self.managed_index]

    @property
    def action_bounds(self) -> tuple[int, int]:
        return 1, self.total_prbs - 1

    def validate(self) -> None:
        if self.total_prbs < 2:
            raise ConfigError("total_prbs must be >= 2")
        if self.prb_bandwidth <= 0 or self.tti <= 0:
            raise ConfigError("prb_bandwidth and tti must be > 0")
        ratio = self.decision_interval / self.tti
        if self.decision_interval <= 0 or round(ratio) < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("decision_interval must be an integer multiple of tti")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.queue_capacity <= 0:
            raise ConfigError("queue_capacity must be > 0")
        if not 0 < self.pf_smoothing <= 1:
            raise ConfigError("pf_smoothing must lie in (0, 1]")
        if len(self.slices) != 2:
            raise ConfigError("exactly two slices are supported")
        if sum(s.is_managed for s in self.slices) != 1:
            raise ConfigError("exactly one slice must have is_managed = true")
        for s in self.slices:
            s.validate()
        self.radio.validate()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SimConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        try:
            if "slices" in data:
                data["slices"] = tuple(_build(SliceSpec, s) for s in data["slices"])
            if "radio" in data:
                data["radio"] = _build(RadioParams, data["radio"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes: Any) -> "SimConfig":
        data = self.to_dict()
        data.update(changes)
        return SimConfig.from_dict(data)


def _build(cls, data):
    if isinstance(data, cls):
        return data
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def load_scenario(path: str | Path) -> SimConfig:
    """Read a YAML (or JSON) scenario file; missing keys take the built-in defaults."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: scenario must be a mapping")
    return SimConfig.from_dict(data)


def dump_scenario(config: SimConfig, path: str | Path) -> None:
    text = yaml.safe_dump(json.loads(json.dumps(config.to_dict())), sort_keys=False)
    Path(path).write_text(text)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)

