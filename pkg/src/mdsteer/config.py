"""Run configuration and the shared domain types that flow between components.

Configuration files are flat ``key = value`` text with ``#`` comments.  Nested
groups use dotted keys (``optimizer.lr``, ``dbscan.eps``, ``sim.temperature``);
the same keys are accepted by ``--set`` overrides on the command line.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ConfigError


class Mode(str, enum.Enum):
    F = "F"  # sequential stages
    S = "S"  # concurrent streaming loops


class Policy(str, enum.Enum):
    ML_ONLY = "ML_ONLY"
    GREEDY_RMSD = "GREEDY_RMSD"
    ML_RMSD = "ML_RMSD"
    NONE = "NONE"  # unsteered ensemble: inference runs, no restarts are emitted


class Compression(str, enum.Enum):
    BITPACK_RLE = "BITPACK_RLE"
    NONE = "NONE"


class Coupling(str, enum.Enum):
    STREAM = "STREAM"
    FILE = "FILE"


class Clock(str, enum.Enum):
    VIRTUAL = "VIRTUAL"
    REAL = "REAL"


class InitialState(str, enum.Enum):
    EXTENDED = "EXTENDED"
    NATIVE = "NATIVE"
    MIXED = "MIXED"  # even sims start native, odd sims extended


AUTO = "AUTO"


# ---------------------------------------------------------------------------
# domain values


def _frozen_array(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ChainFrame:
    sim_id: int
    segment_index: int
    step: int
    positions: np.ndarray  # (B, 2)
    lineage_id: int

    def __post_init__(self):
        pos = _frozen_array(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError(f"positions must be (B, 2), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        object.__setattr__(self, "positions", pos)

    @property
    def beads(self) -> int:
        return self.positions.shape[0]

    @property
    def source(self) -> tuple[int, int]:
        return (self.sim_id, self.step)

    def __eq__(self, other):
        if not isinstance(other, ChainFrame):
            return NotImplemented
        return (
            (self.sim_id, self.segment_index, self.step, self.lineage_id)
            == (other.sim_id, other.segment_index, other.step, other.lineage_id)
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ContactMap:
    bits: np.ndarray  # (B, B) bool, symmetric, diagonal true

    def __post_init__(self):
        object.__setattr__(self, "bits", _frozen_array(self.bits, dtype=bool))

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ContactMap):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LatentPoint:
    z: np.ndarray
    source: tuple[int, int, int]  # (sim_id, segment_index, step)
    weights_version: int

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen_array(self.z))


@dataclass(frozen=True)
class RestartCandidate:
    frame: ChainFrame
    rmsd: float
    outlier_score: float
    policy: Policy
    weights_version: int

    def __post_init__(self):
        if not (math.isfinite(self.rmsd) and self.rmsd >= 0):
            raise ValueError(f"rmsd must be finite and >= 0, got {self.rmsd}")


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    rho: float = 0.9
    eps: float = 1e-8


@dataclass(frozen=True)
class DbscanConfig:
    eps: float | str = AUTO
    min_pts: int = 0  # 0 -> latent_dim + 1


@dataclass(frozen=True)
class Durations:
    """Virtual seconds charged per task of each type (defaults: the S-row task times)."""

    SIM: float = 576.0
    AGG: float = 3.2
    TRAIN: float = 216.0
    INFER: float = 13.0


@dataclass(frozen=True)
class SimConfig:
    bond_k: float = 100.0
    bond_len: float = 1.0
    eps_nat: float = 1.0
    rep_eps: float = 1.0
    rep_sigma: float = 1.0
    gamma: float = 1.0
    temperature: float = 0.6
    dt: float = 0.0005
    steps_per_segment: int = 4000
    report_interval: int = 200
    native_cutoff: float = 1.6
    row_length: int = 7


@dataclass(frozen=True)
class RunConfig:
    mode: Mode = Mode.S
    policy: Policy = Policy.ML_RMSD
    n_sims: int = 8
    n_aggregators: int = 2
    slots: int = 0  # F-mode resource slots; 0 -> n_sims
    beads: int = 28
    contact_cutoff: float = 2.1
    latent_dim: int = 10
    hidden_units: int = 128
    dropout: float = 0.4
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs_per_training: int = 50
    batch_size: int = 32
    train_window: int = 20000
    selection_window: int = 20000
    restart_count: int = 0  # 0 -> n_sims
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    lof_k: int = 20
    channel_capacity: int = 4
    agg_batch: int = 0  # 0 -> n_sims // n_aggregators
    compression: Compression = Compression.BITPACK_RLE
    coupling: Coupling = Coupling.STREAM
    budget_seconds: float = float("inf")  # virtual seconds; no new segment starts after this
    budget_segments: int = 20  # segments per simulation (F: iterations)
    kmeans_k: int = 50
    seed: int = 0
    launch_overhead: float = 0.0
    clock: Clock = Clock.VIRTUAL
    time_scale: float = 0.001
    initial_state: InitialState = InitialState.EXTENDED
    synthetic_durations: Durations = field(default_factory=Durations)
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def resolved_slots(self) -> int:
        return self.slots or self.n_sims

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr_dotted(self, k) for k in config_keys()}


# notation symbol -> RunConfig key
SYMBOLS = {
    "N": "n_sims",
    "M": "n_aggregators",
    "B": "beads",
    "d": "latent_dim",
    "Q": "channel_capacity",
    "W": "selection_window",
    "R": "restart_count",
    "k": "kmeans_k",
}


def _walk(cls, prefix=""):
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            yield from _walk(type(default), key + ".")
        else:
            yield key, default


_DEFAULTS: dict[str, Any] = dict(_walk(RunConfig))


def config_keys() -> list[str]:
    return list(_DEFAULTS)


def getattr_dotted(obj, key: str):
    for part in key.split("."):
        obj = getattr(obj, part)
    return obj


def _coerce(key: str, value: Any, default: Any):
    if isinstance(default, enum.Enum):
        if isinstance(value, enum.Enum):
            value = value.value
        try:
            return type(default)(str(value).strip().upper())
        except ValueError:
            allowed = ", ".join(m.value for m in type(default))
            raise ValueError(f"{key}: {value!r} not one of {allowed}") from None
    if key == "dbscan.eps":
        if isinstance(value, str) and value.strip().upper() == AUTO:
            return AUTO
        return float(value)
    if isinstance(default, bool):
        return str(value).strip().lower() in ("1", "true", "yes")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{key}: expected integer, got {value!r}")
        return int(str(value).strip()) if isinstance(value, str) else int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _check(cfg: dict[str, Any]) -> list[str]:
    bad = []
    n, m = cfg["n_sims"], cfg["n_aggregators"]
    if not m >= 1:
        bad.append(f"n_aggregators >= 1 (got {m})")
    if not n > m:
        bad.append(f"n_sims > n_aggregators (got {n} <= {m})")
    elif m >= 1 and n % m != 0:
        bad.append(f"n_sims divisible by n_aggregators (got {n} mod {m} = {n % m})")
    if cfg["latent_dim"] < 1:
        bad.append("latent_dim >= 1")
    if cfg["channel_capacity"] < 1:
        bad.append("channel_capacity >= 1")
    for key in ("beads", "hidden_units", "epochs_per_training", "batch_size", "train_window",
                "selection_window", "lof_k", "kmeans_k"):
        if cfg[key] < 1:
            bad.append(f"{key} >= 1")
    if cfg["beads"] < 2:
        bad.append("beads >= 2")
    if not 0.0 <= cfg["dropout"] < 1.0:
        bad.append("dropout in [0, 1)")
    for key in ("contact_cutoff", "time_scale", "optimizer.eps") + tuple(
        k for k in _DEFAULTS if k.startswith("sim.")
    ):
        if not cfg[key] > 0:
            bad.append(f"{key} > 0")
    if not cfg["optimizer.lr"] >= 0:
        bad.append("optimizer.lr >= 0")
    if not 0 <= cfg["optimizer.rho"] < 1:
        bad.append("optimizer.rho in [0, 1)")
    for key in ("budget_seconds", "launch_overhead", "restart_count", "dbscan.min_pts",
                "agg_batch", "slots", "budget_segments"):
        if cfg[key] < 0:
            bad.append(f"{key} >= 0")
    if cfg["dbscan.eps"] != AUTO and not cfg["dbscan.eps"] > 0:
        bad.append("dbscan.eps > 0 or AUTO")
    for key in ("AGG", "SIM", "TRAIN", "INFER"):
        if not cfg[f"synthetic_durations.{key}"] > 0:
            bad.append(f"synthetic_durations.{key} > 0")
    if cfg["selection_window"] < cfg["restart_count"]:
        bad.append("selection_window >= restart_count")
    if cfg["sim.steps_per_segment"] % cfg["sim.report_interval"] != 0:
        bad.append("sim.report_interval divides sim.steps_per_segment")
    stab = cfg["sim.dt"] * cfg["sim.bond_k"] / cfg["sim.gamma"]
    if not stab < 0.25:
        bad.append(f"sim.dt * sim.bond_k / sim.gamma < 0.25 (got {stab:g})")
    return bad


def _build(cls, flat: Mapping[str, Any], prefix=""):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), flat, key + ".")
        else:
            kwargs[f.name] = flat[key]
    return cls(**kwargs)


def validate_config(raw: Mapping[str, Any]) -> RunConfig:
    """Return a fully defaulted RunConfig or raise ConfigError listing every violation."""
    unknown = sorted(k for k in raw if k not in _DEFAULTS)
    if unknown:
        raise ConfigError("UNKNOWN_KEY", [f"unknown key {k!r}" for k in unknown])
    cfg = dict(_DEFAULTS)
    bad = []
    for key, value in raw.items():
        try:
            cfg[key] = _coerce(key, value, _DEFAULTS[key])
        except (TypeError, ValueError) as exc:
            bad.append(str(exc) if str(exc).startswith(key) else f"{key}: {exc}")
    if bad:
        raise ConfigError("CONSTRAINT_VIOLATION", bad)

    n, m = cfg["n_sims"], cfg["n_aggregators"]
    if cfg["restart_count"] == 0:
        cfg["restart_count"] = n
    if cfg["dbscan.min_pts"] == 0:
        cfg["dbscan.min_pts"] = cfg["latent_dim"] + 1
    if cfg["agg_batch"] == 0 and m >= 1:
        cfg["agg_batch"] = max(n // m, 1)
    if cfg["slots"] == 0:
        cfg["slots"] = n
    bad = _check(cfg)
    if bad:
        raise ConfigError("CONSTRAINT_VIOLATION", bad)
    return _build(RunConfig, cfg)


def _fmt(value) -> str:
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: RunConfig) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in config.to_dict().items()]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("CONSTRAINT_VIOLATION", [f"line {lineno}: expected 'key = value'"])
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def parse_overrides(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError("CONSTRAINT_VIOLATION", [f"override {item!r}: expected key=value"])
        key, value = (s.strip() for s in item.split("=", 1))
        out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    raw: dict[str, Any] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text()))
    raw.update(overrides or {})
    return validate_config(raw)


def replace(config: RunConfig, **changes) -> RunConfig:
    """Copy with dotted-key changes (``replace(cfg, **{"sim.temperature": 0.5})``), re-validated."""
    raw = config.to_dict()
    raw.update(changes)
    return validate_config(raw)
