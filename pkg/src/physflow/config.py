"""Config-file handling for the pipeline CLI.

The config is structured text (YAML) with sections mirroring the module map.
Every key has a default; unknown sections or keys are rejected by name; type
mismatches name the key and the expected type. Resolution order: defaults,
then file, then `section.key=value` overrides. A resolved config serializes
back to an identical config (fixpoint), and every run writes its resolved
config next to its artifacts.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields

import yaml


class ConfigError(ValueError):
    """Unknown key, bad type, or unparseable config file."""


@dataclass
class RunSection:
    out_dir: str = "runs/default"
    seed: int = 0
    workers: int = 1


@dataclass
class DatasetSection:
    kind: str = "oscillator"
    split: str = "random"            # random | extrapolation
    train_frac: float = 0.8
    train_max: float = 0.3
    test_min: float = 0.4
    # oscillator
    n_trajectories: int = 2000
    steps: int = 100
    dt: float = 0.1
    m: float = 1.0
    k: float = 1.0
    gamma_range: tuple = (0.0, 0.5)
    amplitude_range: tuple = (0.5, 1.5)
    # battery
    n_cells: int = 200
    cycles: int = 128
    temp_range_c: tuple = (15.0, 40.0)
    a_range: tuple = (0.10, 0.25)
    alpha_sqrt: float = 5e-5
    c_nominal: float = 1.0
    substeps: int = 16


@dataclass
class ModelSection:
    width: int = 32
    unet_width: int = 32


@dataclass
class ScheduleSection:
    lambda_base: tuple = (1.0, 0.5, 0.5, 0.1)
    beta1: float = 1.0
    kappa2: float = 10.0
    kappa3: float = 5.0
    beta_consist: float = 0.5
    flat: bool = False


@dataclass
class GuidanceSection:
    enabled: bool = True
    alpha_max: float = 0.1
    sharpness: float = 10.0
    t_threshold: float = 0.5
    dt: float = 0.01


@dataclass
class TrainSection:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0


@dataclass
class IntegratorSection:
    method: str = "rk4"
    steps: int = 100


@dataclass
class MetricsSection:
    violation_threshold: float = 0.05
    horizon_frac: float = 0.5
    n_eval: int = 128


@dataclass
class DiscoverySection:
    target_channel: int = 0
    alpha_sig: float = 0.01
    lambda_complexity: float = -1.0   # negative: auto (1e-3 * Var r)
    max_terms: int = 4
    gp_population: int = 200
    gp_generations: int = 50
    tournament: int = 4
    mutation_rate: float = 0.1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    train: TrainSection = field(default_factory=TrainSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    discovery: DiscoverySection = field(default_factory=DiscoverySection)

    def to_dict(self) -> dict:
        out = asdict(self)
        for sec in out.values():
            for key, val in sec.items():
                if isinstance(val, tuple):
                    sec[key] = list(val)
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def out_path(self, *parts: str) -> str:
        root = os.environ.get("PHYSFLOW_OUT_ROOT", "")
        base = self.run.out_dir
        if root and not os.path.isabs(base):
            base = os.path.join(root, base)
        return os.path.join(base, *parts)


def _coerce(section: str, key: str, default, value):
    tname = type(default).__name__
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected float, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected str, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{section}.{key}: expected a length-{len(default)} "
                              f"list, got {value!r}")
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: expected numeric list, "
                              f"got {value!r}") from None
    raise ConfigError(f"{section}.{key}: unsupported config type {tname}")


def _apply(cfg: RunConfig, tree: dict, origin: str) -> None:
    sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for sec_name, sec_value in tree.items():
        if sec_name not in sections:
            raise ConfigError(f"{origin}: unknown section {sec_name!r}")
        if sec_value is None:
            continue
        if not isinstance(sec_value, dict):
            raise ConfigError(f"{origin}: section {sec_name!r} must be a mapping")
        section = sections[sec_name]
        valid = {f.name for f in fields(section)}
        for key, value in sec_value.items():
            if key not in valid:
                raise ConfigError(f"{origin}: unknown key {sec_name}.{key}")
            default = getattr(type(section)(), key)
            setattr(section, key, _coerce(sec_name, key, default, value))


def resolve_config(path: str | None = None,
                   overrides: list[str] | None = None) -> RunConfig:
    """Defaults + file + `section.key=value` overrides, highest last."""
    cfg = RunConfig()
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path) as fh:
            try:
                tree = yaml.safe_load(fh.read())
            except yaml.YAMLError as exc:
                raise ConfigError(f"{path}: cannot parse config: {exc}") from None
        if tree is None:
            tree = {}
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping of sections")
        _apply(cfg, tree, path)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be section.key=value")
        dotted, raw = item.split("=", 1)
        if dotted.count(".") != 1:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        sec, key = dotted.split(".")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        _apply(cfg, {sec: {key: value}}, f"override {item!r}")
    return cfg


def write_resolved(cfg: RunConfig, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        fh.write(cfg.to_yaml())
