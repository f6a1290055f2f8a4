"""Experiment configuration: nested dataclasses loaded from strict JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .address import MB, CacheGeometry, DramMapping
from .cache import POLICIES, CacheTiming
from .dram import DramTiming
from .kernel import NoiseConfig, TimingConfig
from .victim import VictimConfig

SCAN_MODES = ("scan", "known")

# Noise calibrated to about 4 % single-trace error with the default
# geometry, victim and decoder (see ``calibrate_noise``).
CALIBRATED_NOISE = NoiseConfig(
    interrupt_rate=2.4,
    interrupt_min=10_000,
    interrupt_max=50_000,
    victim_desched_prob=0.05,
    attacker_desched_prob=0.85,
    both_desched_prob=0.1,
    spurious_miss_rate=1e-4,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    lookahead: int = 20
    n_traces: int = 11
    # "scan" searches for a vulnerable set; "known" monitors an interior
    # set of the victim buffer directly (skips the scan)
    scan_mode: str = "scan"
    # which interior set to monitor in "known" mode (index among interior lines)
    known_line: int = 0
    # attacker memory (physically contiguous)
    memory_size: int = 16 * MB
    # hit/miss threshold override in cycles; None = automatic midpoint
    threshold: float | None = None
    # operation time for decoding in cycles; None = estimate from the trace
    mult_time: float | None = None
    # scan: candidate sets checked at most (None = all)
    max_scan_sets: int | None = None

    def __post_init__(self):
        if self.lookahead < 1:
            raise ConfigError("lookahead must be >= 1")
        if self.n_traces < 1:
            raise ConfigError("n_traces must be >= 1")
        if self.scan_mode not in SCAN_MODES:
            raise ConfigError(f"scan_mode must be one of {SCAN_MODES}")
        if self.memory_size < 8 * MB:
            raise ConfigError("memory_size must be >= 8 MB")


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = "out"
    write_traces: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    resolution: float = 0.87
    geometry: CacheGeometry = CacheGeometry()
    mapping: dict = field(default_factory=lambda: DramMapping().to_bits())
    timing: TimingConfig = TimingConfig()
    noise: NoiseConfig = CALIBRATED_NOISE
    victim: VictimConfig = VictimConfig()
    attack: AttackConfig = AttackConfig()
    output: OutputConfig = OutputConfig()

    def __post_init__(self):
        if self.timing.policy not in POLICIES:
            raise ConfigError(f"timing.policy must be one of {POLICIES}")
        try:
            DramMapping.from_bits(self.mapping)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"mapping: {e}") from None

    @property
    def dram_mapping(self) -> DramMapping:
        return DramMapping.from_bits(self.mapping)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """sha256 of the canonical JSON form (output paths excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        """``dataclasses.replace`` that also accepts dotted names (``noise.interrupt_rate``)."""
        nested: dict[str, dict] = {}
        flat = {}
        for k, v in changes.items():
            if "." in k:
                head, rest = k.split(".", 1)
                nested.setdefault(head, {})[rest] = v
            else:
                flat[k] = v
        for head, sub in nested.items():
            cur = getattr(self, head)
            if not dataclasses.is_dataclass(cur):
                raise ConfigError(f"{head} is not a section")
            flat[head] = dataclasses.replace(cur, **sub)
        return dataclasses.replace(self, **flat)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        """Strict load; sections given partially keep the remaining defaults."""
        if not isinstance(d, dict):
            raise ConfigError("config: expected an object")
        return _build(cls, _overlay(cls().to_dict(), d), "")

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from None
        return cls.from_dict(d)


def _overlay(base: dict, d: dict) -> dict:
    out = dict(base)
    for k, v in d.items():
        if k != "mapping" and isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _overlay(base[k], v)
        else:
            out[k] = v
    return out


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        tp = hints[name]
        path = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, path)
        elif name == "mapping":
            if not isinstance(value, dict):
                raise ConfigError("mapping: expected an object of bit lists")
            kwargs[name] = value
        else:
            kwargs[name] = _check_scalar(tp, value, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{where or 'config'}: {e}") from None


def _check_scalar(tp, value, path):
    args = typing.get_args(tp)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), tp) if args else tp
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{path}: may not be null")
    if base is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if base is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if base is bool and isinstance(value, bool):
        return value
    if base is str and isinstance(value, str):
        return value
    raise ConfigError(f"{path}: expected {getattr(base, '__name__', base)}, got {value!r}")

