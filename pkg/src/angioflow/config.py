"""Pipeline configuration: one INI file with a section per stage.

Every key has a typed default, so an empty file is a valid (tiny) config.
Unknown sections or keys are rejected to catch typos early.

Keys
----
[global]    seed, n_geometries, n_train, n_val, n_test
[generate]  depth, branch_length_min/max, root_length, root_radius,
            murray_exponent, tortuosity_amplitude, tortuosity_wavelength,
            siphon_probability, half_angle_min/max, asymmetry_min/max,
            node_spacing, flow_gamma
[simulate]  n_bcs, q_mean, q_mean_sd, cycle_length, cycle_length_sd,
            profiles, q_max, t_lag, mixing, pre_injection_cycles,
            acquisition_lead, n_frames, frame_rate, diffusion, max_dt
[project]   trajectories ("alpha0:beta" pairs in degrees), delta_alpha, sid,
            sdd, det_rows, det_cols, pixel_pitch, w_ip, mu_rho_ip, mu_rho_w,
            rho_ca, noise_sigma
[featurize] sphere_points, u_cap
[train]     channels, kernel, slope, eps, epochs, lr, lr_schedule, lr_min
[eval]      mape_threshold, regression_stride
"""

from __future__ import annotations

import configparser
import dataclasses
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalSection:
    seed: int = 0
    n_geometries: int = 2
    n_train: int = 1
    n_val: int = 1
    n_test: int = 0


@dataclass(frozen=True)
class GenerateSection:
    depth: int = 2
    branch_length_min: float = 10.0
    branch_length_max: float = 14.0
    root_length: float = 16.0
    root_radius: float = 1.8
    murray_exponent: float = 3.0
    tortuosity_amplitude: float = 0.8
    tortuosity_wavelength: float = 16.0
    siphon_probability: float = 0.3
    half_angle_min: float = 0.35
    half_angle_max: float = 0.8
    asymmetry_min: float = 0.7
    asymmetry_max: float = 1.0
    node_spacing: float = 0.46
    flow_gamma: float = 2.0


@dataclass(frozen=True)
class SimulateSection:
    n_bcs: int = 1
    q_mean: float = 4.0
    q_mean_sd: float = 0.8
    cycle_length: float = 0.9
    cycle_length_sd: float = 0.12
    profiles: tuple[str, ...] = ("young", "elderly")
    q_max: float = 2.5
    t_lag: float = 0.25
    mixing: float = 0.3
    pre_injection_cycles: float = 2.0
    acquisition_lead: float = 0.1
    n_frames: int = 32
    frame_rate: float = 60.0
    diffusion: float = 1e-3
    max_dt: float = 1e-3


@dataclass(frozen=True)
class ProjectSection:
    trajectories: tuple[tuple[float, float], ...] = ((0.0, 0.0),)
    delta_alpha: float = 0.85
    sid: float = 750.0
    sdd: float = 1200.0
    det_rows: int = 64
    det_cols: int = 64
    pixel_pitch: float = 1.0
    # attenuation coefficients are placeholders; they scale the inputs only
    w_ip: float = 0.469
    mu_rho_ip: float = 3.25
    mu_rho_w: float = 0.206
    rho_ca: float = 1.328
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class FeaturizeSection:
    sphere_points: int = 16
    u_cap: float = 9.0


@dataclass(frozen=True)
class TrainSection:
    channels: tuple[int, ...] = (4, 8, 8)
    kernel: tuple[int, ...] = (3, 3)
    slope: float = 0.01
    eps: float = 1e-5
    epochs: int = 2
    lr: float = 1e-3
    lr_schedule: str = "constant"
    lr_min: float = 0.0


@dataclass(frozen=True)
class EvalSection:
    mape_threshold: float = 0.01
    regression_stride: int = 1


@dataclass(frozen=True)
class PipelineConfig:
    global_: GlobalSection = field(default_factory=GlobalSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    project: ProjectSection = field(default_factory=ProjectSection)
    featurize: FeaturizeSection = field(default_factory=FeaturizeSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        g = self.global_
        if g.n_train + g.n_val + g.n_test != g.n_geometries:
            raise ConfigError(
                f"split sizes {g.n_train}+{g.n_val}+{g.n_test} do not add up to "
                f"n_geometries={g.n_geometries}")
        if g.n_train < 1 or g.n_val < 1:
            raise ConfigError("need at least one training and one validation geometry")
        if self.simulate.n_bcs < 1 or not self.project.trajectories:
            raise ConfigError("need at least one boundary condition and one trajectory")
        if self.simulate.n_frames < 1:
            raise ConfigError("n_frames must be >= 1")

    @property
    def seed(self) -> int:
        return self.global_.seed

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, global_=dataclasses.replace(self.global_, seed=seed))

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {_section_name(f.name): dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}

    def to_ini(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"[{_section_name(f.name)}]")
            for key, value in dataclasses.asdict(getattr(self, f.name)).items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _section_name(attr: str) -> str:
    return attr.rstrip("_")


def _format(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(":".join(repr(v) for v in pair) for pair in value)
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, str):
            return raw
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(v) for v in item.split(":")) for item in items)
            kind = type(default[0]) if default else str
            return tuple(kind(v) for v in items)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    raise ConfigError(f"{where}: unsupported type {type(default).__name__}")


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    sections = {_section_name(f.name): f for f in fields(PipelineConfig)}
    kwargs = {}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError(f"{source}: unknown section [{name}]")
    for name, f in sections.items():
        default = f.default_factory()
        if not parser.has_section(name):
            kwargs[f.name] = default
            continue
        known = {sf.name: getattr(default, sf.name) for sf in fields(default)}
        values = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{name}]")
            values[key] = _parse(raw, known[key], f"{source} [{name}] {key}")
        kwargs[f.name] = dataclasses.replace(default, **values)
    return PipelineConfig(**kwargs)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def derived_rng(seed: int, key: str) -> np.random.Generator:
    """Generator keyed by ``(seed, key)`` so each case draws independently of the others."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(key.encode("utf-8"))]))


def derived_seed(seed: int, key: str) -> int:
    return int(derived_rng(seed, key).integers(2**31))
