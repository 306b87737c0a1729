"""
╔══════════════════════════════════════════════════════════════════════════════╗
║                            RUN CONFIGURATION                                 ║
║                                                                              ║
║  One TOML file drives every command. Sections map onto the settings models  ║
║  of each module; every key must be present in a file.                       ║
╚══════════════════════════════════════════════════════════════════════════════╝
"""

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core.base_policy import BaseRunConfig
from core.errors import ConfigError
from .diffusion import DiffusionSettings
from .kinematics import VehicleParams
from .nn import AdamWHyper, ArchSettings
from .refine import PlannerSettings
from .scenarios import FAMILIES
from .simloop import ExpertSettings, IdmParams, SimParams
from .teachers import TeacherParams
from .world import TokenizerSettings

RUN_KEYS = ("seed", "output_dir", "workers")


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class VocabSettings(_Section):
    size: int = Field(default=256, ge=2, le=4096, description="Number of anchor trajectories K")
    iterations: int = Field(default=50, ge=1, description="k-means iterations")


class ModelSettings(ArchSettings):
    """Network dimensions plus scene tokenizer limits."""
    max_agents: int = Field(default=8, ge=1)
    max_lanes: int = Field(default=8, ge=1)
    lane_sample_spacing: float = Field(default=4.0, gt=0)
    token_range: float = Field(default=60.0, gt=0)

    @property
    def arch(self) -> ArchSettings:
        return ArchSettings(**{k: getattr(self, k) for k in ArchSettings.model_fields})

    @property
    def tokenizer(self) -> TokenizerSettings:
        return TokenizerSettings(max_agents=self.max_agents, max_lanes=self.max_lanes,
                                 lane_sample_spacing=self.lane_sample_spacing, token_range=self.token_range)


class TrainSettings(_Section):
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=2e-4, gt=0)
    min_lr: float = Field(default=0.0, ge=0)
    weight_decay: float = Field(default=0.01, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    focal_gamma: float = Field(default=2.0, ge=0)
    holdout_every: int = Field(default=5, ge=2, description="Every n-th demo scenario is held out")

    @property
    def adamw(self) -> AdamWHyper:
        return AdamWHyper(beta1=self.beta1, beta2=self.beta2, weight_decay=self.weight_decay)


class SimSection(_Section):
    offroad_margin: float = Field(default=1.0, ge=0)


class CollectSettings(_Section):
    per_family: int = Field(default=16, ge=1, description="Demo scenarios per family")
    families: list[str] = Field(default_factory=lambda: list(FAMILIES))


class PathSettings(_Section):
    vocab: Path = Path("runs/vocab.json")
    demos: Path = Path("runs/demos.jsonl")
    checkpoint: Path = Path("runs/model.ckpt")
    episodes: Path = Path("runs/episodes")
    reports: Path = Path("runs/reports")


class RunConfig(BaseRunConfig):
    """Complete configuration of a run."""

    vocab: VocabSettings = VocabSettings()
    model: ModelSettings = ModelSettings()
    diffusion: DiffusionSettings = DiffusionSettings()
    planner: PlannerSettings = PlannerSettings()
    train: TrainSettings = TrainSettings()
    teachers: TeacherParams = TeacherParams()
    vehicle: VehicleParams = VehicleParams()
    idm: IdmParams = IdmParams()
    expert: ExpertSettings = ExpertSettings()
    sim: SimSection = SimSection()
    collect: CollectSettings = CollectSettings()
    paths: PathSettings = PathSettings()

    @classmethod
    def default(cls) -> "RunConfig":
        return cls()

    def sim_params(self) -> SimParams:
        return SimParams(vehicle=self.vehicle, idm=self.idm, offroad_margin=self.sim.offroad_margin)

    def config_hash(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, seed: Optional[int] = None, mode: Optional[str] = None,
                       sampler: Optional[str] = None, workers: Optional[int] = None) -> "RunConfig":
        data = self.model_dump()
        if seed is not None:
            data["seed"] = seed
        if workers is not None:
            data["workers"] = workers
        if mode is not None:
            data["planner"]["mode"] = mode
        if sampler is not None:
            data["diffusion"]["sampler"] = sampler
        return _validate(data)


# ══════════════════════════════════════════════════════════════════════════════
#  TOML
# ══════════════════════════════════════════════════════════════════════════════

def _validate(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"invalid config value at '{where}': {first['msg']}") from e


def _check_keys(expected: dict, given: Any, prefix: str) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"'{prefix}' must be a table")
    for key, value in expected.items():
        name = f"{prefix}.{key}" if prefix else key
        if key not in given:
            raise ConfigError(f"missing config key '{name}'")
        if isinstance(value, dict):
            _check_keys(value, given[key], name)


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from the TOML table layout (run keys under ``[run]``)."""
    expected = to_table(RunConfig.default())
    _check_keys(expected, data, "")
    flat = {k: v for k, v in data.items() if k != "run"}
    flat.update(data["run"])
    return _validate(flat)


def load_config(path: Path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"config {path} is not valid TOML: {e}") from e
    return config_from_dict(data)


def to_table(config: RunConfig) -> dict:
    data = config.model_dump(mode="json")
    table = {"run": {k: data.pop(k) for k in RUN_KEYS}}
    table.update(data)
    return table


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot encode {value!r} as TOML")


def _emit_table(name: str, table: dict, lines: list[str]) -> None:
    lines.append(f"[{name}]")
    nested = []
    for key, value in table.items():
        if isinstance(value, dict):
            nested.append((key, value))
        else:
            lines.append(f"{key} = {_toml_value(value)}")
    lines.append("")
    for key, value in nested:
        _emit_table(f"{name}.{key}", value, lines)


def dump_config(config: RunConfig) -> str:
    """Render a config as TOML that ``load_config`` reads back unchanged."""
    lines = [f"# config_hash = {config.config_hash()}", ""]
    for section, table in to_table(config).items():
        _emit_table(section, table, lines)
    return "\n".join(lines)


def write_config(config: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(config), encoding="utf-8")
    return path
