"""Experiment configuration: a YAML document with a strict schema.

Every section maps onto a dataclass below; unknown keys anywhere are a
:class:`ConfigError`, so a typo in an SNR list cannot silently fall back to a
default. A minimal document::

    geometry: {kind: uca, M: 10, spacing: 0.5}
    K: 4
    train: {snr_db: [20], P: 60, T: 50}
    test: {snr_db: [0, 5, 10, 15, 20], P: 60, T: 50}
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .geometry import ArrayGeometry, make_rda, make_uca, make_ula

SELECTORS = ("oracle", "cnn", "svm", "ras", "full")


@dataclass
class GeometrySpec:
    kind: str = "uca"
    M: int = 10
    spacing: float = 0.5
    wavelength: float = 0.1
    # rda only
    rows: int = 4
    cols: int = 4
    perturb_max: float = 0.1
    seed: int = 0

    def build(self) -> ArrayGeometry:
        if self.kind == "ula":
            return make_ula(self.M, self.spacing, self.wavelength)
        if self.kind == "uca":
            return make_uca(self.M, self.spacing, self.wavelength)
        if self.kind == "rda":
            return make_rda(self.rows, self.cols, self.spacing, self.perturb_max, self.seed, self.wavelength)
        raise ConfigError(f"geometry.kind must be ula, uca or rda, not {self.kind!r}")


@dataclass
class DataSpec:
    snr_db: list = field(default_factory=lambda: [20.0])
    L: int = 100
    P: int = 60
    T: int = 50
    # elevation handling; P_theta > 1 gives a 2-D grid over theta_range
    P_theta: int = 1
    theta_range: list = field(default_factory=lambda: [90.0, 100.0])
    label_source: str = "sample"


@dataclass
class CnnSpec:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 500
    epochs: int = 50
    dropout: float = 0.5
    val_fraction: float = 0.1
    n_filters: int = 64
    n_hidden: int = 1024
    init_gain: float = 0.5


@dataclass
class SvmSpec:
    enabled: bool = True
    C: float = 1.0
    epochs: int = 200
    lr: float = 1e-3


@dataclass
class DoaSpec:
    snr_db: list = field(default_factory=lambda: [0.0, 10.0, 15.0, 20.0])
    n_doas: int = 60
    trials: int = 10
    L: int = 100
    selectors: list = field(default_factory=lambda: list(SELECTORS))
    ras_realizations: int = 1000
    ras_score: str = "peak_to_mean"
    phi_step: float = 0.5
    theta_step: float = 1.0


@dataclass
class ScanSpec:
    snr_levels: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 10.0, 0.0])
    blocks_per_level: int = 1000
    move_every: int = 500
    snapshots: int = 100
    selection_period: int = 10
    selection_snapshots: int = 100
    drift_deg: float = 0.0
    selectors: list = field(default_factory=lambda: ["oracle", "cnn", "svm", "ras"])


@dataclass
class BenchSpec:
    repetitions: int = 100
    ras_realizations: int = 1000
    L: int = 100
    snr_db: float = 15.0


@dataclass
class ExperimentConfig:
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    K: int = 4
    bound: str = "crb1d"
    seed: int = 0
    sigma_s2: float = 1.0
    train: DataSpec = field(default_factory=DataSpec)
    test: DataSpec = field(default_factory=lambda: DataSpec(snr_db=[0.0, 5.0, 10.0, 15.0, 20.0]))
    cnn: CnnSpec = field(default_factory=CnnSpec)
    svm: SvmSpec = field(default_factory=SvmSpec)
    doa: DoaSpec = field(default_factory=DoaSpec)
    scan: ScanSpec = field(default_factory=ScanSpec)
    bench: BenchSpec = field(default_factory=BenchSpec)
    plots: bool = True
    threads: int = 1

    def validate(self) -> "ExperimentConfig":
        if not self.train.snr_db or not self.test.snr_db or not self.doa.snr_db:
            raise ConfigError("SNR lists must be nonempty")
        if self.bound not in ("crb1d", "crb2d", "auto"):
            raise ConfigError(f"bound must be crb1d, crb2d or auto, not {self.bound!r}")
        for name in self.doa.selectors + self.scan.selectors:
            if name not in SELECTORS:
                raise ConfigError(f"unknown selector {name!r}; expected one of {SELECTORS}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            g = self.geometry.build()
        except ValueError as exc:
            raise ConfigError(f"geometry: {exc}") from exc
        if not 1 <= self.K < g.M:
            raise ConfigError(f"K={self.K} must satisfy 1 <= K < M={g.M}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of every resolved field."""
        doc = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(doc.encode("utf-8")).hexdigest()


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if default and isinstance(default[0], (int, float)) and not isinstance(default[0], bool):
            out = []
            for i, v in enumerate(value):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{where}[{i}]: expected a number, got {v!r}")
                out.append(float(v))
            return out
        return list(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, doc, where):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'config'}")
    for key, value in doc.items():
        default = getattr(obj, key)
        path = f"{where}.{key}" if where else key
        if dataclasses.is_dataclass(default):
            setattr(obj, key, _build(type(default), value, path))
        else:
            setattr(obj, key, _coerce(value, default, path))
    return obj


def config_from_dict(doc: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, doc, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_dict(doc or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
