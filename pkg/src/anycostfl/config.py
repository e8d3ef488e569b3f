"""Experiment configuration: JSON schema, defaults and validation.

Validation is strict: unknown keys and out-of-range values are collected
and reported together in one ConfigError rather than failing one at a time.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

from .model import ACTIVATIONS, ModelArch
from .sysmodel import SystemParams, noise_dbm_per_mhz_to_w_per_hz

MODES = ("anycost", "fedavg")
PARTITIONS = ("iid", "noniid")
DATASET_KINDS = ("synthetic", "idx")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists every issue found."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    classes: int = 3
    dim: int = 16
    train_size: int = 600
    test_size: int = 600
    separation: float = 3.0
    noise: float = 1.0
    # idx paths (used when kind == "idx")
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class TrainingConfig:
    lr: float = 0.05
    batch_size: int = 16
    epochs: int = 1  # tau, local passes per round


@dataclass
class BudgetConfig:
    t_max_s: float = 10.0
    e_max_low_j: float = 3.0
    e_max_high_j: float = 9.0
    alpha_min: float = 0.25
    beta_min: float = 1e-4
    beta_max: float = 1.0 / 15.0


@dataclass
class SystemConfig:
    bandwidth_hz: float = 1e6
    tx_power_w: float = 0.1
    noise_dbm_per_mhz: float = -114.0
    path_loss_exp: float = 3.76
    cell_radius_m: float = 550.0
    ref_snr_db: float = 10.0
    ref_distance_m: float = 400.0
    energy_coeff_low: float = 5e-27
    energy_coeff_high: float = 1e-26
    f_min: float = 1e9
    f_max_low: float = 2e9
    f_max_high: float = 4e9
    workload_per_sample: float = 0.0  # 0 = derive from the arch flop count
    update_bits: float = 0.0  # 0 = 32 bits per parameter


@dataclass
class PartitionConfig:
    mode: str = "iid"
    shards_per_device: int = 2


@dataclass
class AggregationConfig:
    # blend=0 uses the divergence-optimal coefficients; blend=1 weighs
    # purely by shard size; anything between mixes the two.
    data_size_blend: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    mode: str = "anycost"
    rounds: int = 50
    devices: int = 60
    threads: int = 1
    predictor_path: str = ""
    arch: ModelArch = field(
        default_factory=lambda: ModelArch(input_dim=16, hidden_sizes=(64, 64), output_dim=3)
    )
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    system: SystemConfig = field(default_factory=SystemConfig)
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)

    def system_params(self) -> SystemParams:
        s = self.system
        return SystemParams(
            bandwidth_hz=s.bandwidth_hz,
            tx_power_w=s.tx_power_w,
            noise_w_per_hz=noise_dbm_per_mhz_to_w_per_hz(s.noise_dbm_per_mhz),
            path_loss_exp=s.path_loss_exp,
            cell_radius_m=s.cell_radius_m,
            ref_snr_db=s.ref_snr_db,
            ref_distance_m=s.ref_distance_m,
            energy_coeff_low=s.energy_coeff_low,
            energy_coeff_high=s.energy_coeff_high,
            f_min=s.f_min,
            f_max_low=s.f_max_low,
            f_max_high=s.f_max_high,
        )

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["arch"] = {
            "input_dim": self.arch.input_dim,
            "hidden_sizes": list(self.arch.hidden_sizes),
            "output_dim": self.arch.output_dim,
            "activation": self.arch.activation,
        }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


_SECTIONS = {
    "dataset": DatasetConfig,
    "partition": PartitionConfig,
    "training": TrainingConfig,
    "budget": BudgetConfig,
    "system": SystemConfig,
    "aggregation": AggregationConfig,
}
_TOP_SCALARS = {
    "seed": int,
    "mode": str,
    "rounds": int,
    "devices": int,
    "threads": int,
    "predictor_path": str,
}


def _check_fields(raw: dict, cls, where: str, problems: list[str]) -> dict:
    known = cls.__dataclass_fields__
    out = {}
    for key, value in raw.items():
        if key not in known:
            problems.append(f"{where}: unknown key {key!r}")
            continue
        want = known[key].type  # annotations are strings here
        if want == "int":
            if isinstance(value, bool) or not isinstance(value, int):
                problems.append(f"{where}.{key}: expected an integer")
            else:
                out[key] = value
        elif want == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{where}.{key}: expected a number")
            else:
                out[key] = float(value)
        elif want == "str":
            if not isinstance(value, str):
                problems.append(f"{where}.{key}: expected a string")
            else:
                out[key] = value
        else:
            out[key] = value
    return out


def _validate_ranges(cfg: ExperimentConfig, problems: list[str]) -> None:
    if cfg.seed < 0:
        problems.append("seed: must be >= 0")
    if cfg.mode not in MODES:
        problems.append(f"mode: must be one of {MODES}")
    if cfg.rounds < 1:
        problems.append("rounds: must be >= 1")
    if cfg.devices < 1:
        problems.append("devices: must be >= 1")
    if cfg.threads < 1:
        problems.append("threads: must be >= 1")
    ds = cfg.dataset
    if ds.kind not in DATASET_KINDS:
        problems.append(f"dataset.kind: must be one of {DATASET_KINDS}")
    elif ds.kind == "synthetic":
        if ds.classes < 2:
            problems.append("dataset.classes: must be >= 2")
        if ds.dim < 1:
            problems.append("dataset.dim: must be >= 1")
        if ds.train_size < cfg.devices:
            problems.append("dataset.train_size: must be >= devices")
        if ds.test_size < 1:
            problems.append("dataset.test_size: must be >= 1")
        if ds.noise <= 0 or ds.separation <= 0:
            problems.append("dataset.noise and dataset.separation must be positive")
    else:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(ds, key):
                problems.append(f"dataset.{key}: required for kind='idx'")
    if cfg.partition.mode not in PARTITIONS:
        problems.append(f"partition.mode: must be one of {PARTITIONS}")
    if cfg.partition.shards_per_device < 1:
        problems.append("partition.shards_per_device: must be >= 1")
    tr = cfg.training
    if tr.lr <= 0:
        problems.append("training.lr: must be positive")
    if tr.batch_size < 1:
        problems.append("training.batch_size: must be >= 1")
    if tr.epochs < 0:
        problems.append("training.epochs: must be >= 0")
    b = cfg.budget
    if b.t_max_s <= 0:
        problems.append("budget.t_max_s: must be positive")
    if not 0 < b.e_max_low_j <= b.e_max_high_j:
        problems.append("budget.e_max range: need 0 < low <= high")
    if not 0 < b.alpha_min <= 1:
        problems.append("budget.alpha_min: must be in (0, 1]")
    if not 0 < b.beta_min <= b.beta_max <= 1:
        problems.append("budget.beta range: need 0 < beta_min <= beta_max <= 1")
    s = cfg.system
    for name in ("bandwidth_hz", "tx_power_w", "path_loss_exp", "cell_radius_m",
                 "ref_distance_m", "energy_coeff_low", "f_min"):
        if getattr(s, name) <= 0:
            problems.append(f"system.{name}: must be positive")
    if s.energy_coeff_high < s.energy_coeff_low:
        problems.append("system.energy_coeff range: need low <= high")
    if not (s.f_min <= s.f_max_low <= s.f_max_high):
        problems.append("system.f range: need f_min <= f_max_low <= f_max_high")
    if s.workload_per_sample < 0 or s.update_bits < 0:
        problems.append("system.workload_per_sample and system.update_bits must be >= 0")
    if not 0.0 <= cfg.aggregation.data_size_blend <= 1.0:
        problems.append("aggregation.data_size_blend: must be in [0, 1]")


def config_from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a JSON object"])
    problems: list[str] = []
    top: dict[str, Any] = {}
    sections: dict[str, Any] = {}
    for key, value in raw.items():
        if key in _TOP_SCALARS:
            want = _TOP_SCALARS[key]
            if want is int and (isinstance(value, bool) or not isinstance(value, int)):
                problems.append(f"{key}: expected an integer")
            elif want is str and not isinstance(value, str):
                problems.append(f"{key}: expected a string")
            else:
                top[key] = value
        elif key == "arch":
            if not isinstance(value, dict):
                problems.append("arch: expected an object")
                continue
            allowed = {"input_dim", "hidden_sizes", "output_dim", "activation"}
            for k in value:
                if k not in allowed:
                    problems.append(f"arch: unknown key {k!r}")
            try:
                sections["arch"] = ModelArch(
                    input_dim=value.get("input_dim", 16),
                    hidden_sizes=tuple(value.get("hidden_sizes", (64, 64))),
                    output_dim=value.get("output_dim", 3),
                    activation=value.get("activation", "relu"),
                )
            except (TypeError, ValueError) as exc:
                problems.append(f"arch: {exc}")
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected an object")
                continue
            fields = _check_fields(value, _SECTIONS[key], key, problems)
            try:
                sections[key] = _SECTIONS[key](**fields)
            except (TypeError, ValueError) as exc:
                problems.append(f"{key}: {exc}")
        else:
            problems.append(f"top level: unknown key {key!r}")
    if "seed" not in raw:
        problems.append("seed: required, runs must be reproducible")
    if problems:
        raise ConfigError(problems)
    cfg = ExperimentConfig(**top, **sections)
    _validate_ranges(cfg, problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    """Load and validate a JSON config file, applying defaults."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path} is not valid JSON: {exc}"]) from exc
    return config_from_dict(raw)
