import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
from dotenv import load_dotenv

from app.detection import AnchorSpec, LossConfig, ModelConfig
from app.fusion import FusionConfig
from app.geometry import GridSpec
from app.scenario import NoiseSetting, SceneConfig, SensorConfig
from app.util import ConfigError, UsageError, stable_hash

load_dotenv()

logger = logging.getLogger(__name__)

LOGLEVEL = os.getenv("LOGLEVEL", "INFO")
DATA_DIR = Path(os.getenv("V2X_DATA_DIR", "data"))
OUT_DIR = Path(os.getenv("V2X_OUT_DIR", "runs"))
DEFAULT_SEED = int(os.getenv("V2X_SEED", "0"))
WORKERS = int(os.getenv("V2X_WORKERS", "2"))

SCHEMA_VERSION = 1
TRAINING_TYPES = ("perfect", "noise", "fine-tuned")

# key -> (type, default)
DEFAULTS: dict[str, tuple[str, object]] = {
    "schema_version": ("int", SCHEMA_VERSION),
    "preset": ("str", "desk"),
    # grid
    "x_min": ("float", -38.4),
    "x_max": ("float", 38.4),
    "y_min": ("float", -19.2),
    "y_max": ("float", 19.2),
    "cell": ("float", 0.8),
    # model
    "raster_channels": ("int", 3),
    "channels": ("int", 64),
    "compression": ("int", 8),
    "depth": ("int", 3),
    "ccl_rate": ("int", 4),
    "heads": ("int", 0),
    "dinat_kernel": ("int", 5),
    "dinat_dilations": ("int_list", (2, 1)),
    "satt_kind": ("str", "dinat"),
    "hrpe": ("bool", True),
    "tau": ("float", 100.0),
    "theta_bin": ("float", 10.0),
    "d_bin": ("float", 5.0),
    "arch": ("str", "parallel"),
    "use_aatt": ("bool", True),
    "use_satt": ("bool", True),
    "use_sconv": ("bool", True),
    "use_original": ("bool", True),
    "stcm": ("bool", True),
    "global_attention_max_cells": ("int", 2304),
    # loss and decoding
    "alpha": ("float", 0.25),
    "gamma": ("float", 2.0),
    "beta": ("float", 1.0 / 9.0),
    "pos_iou": ("float", 0.6),
    "neg_iou": ("float", 0.45),
    "score_thresh": ("float", 0.2),
    "nms_iou": ("float", 0.15),
    # noise
    "noise": ("str", "perfect"),
    "t_lag": ("float", 0.0),
    "sigma_hdg": ("float", 0.0),
    "sigma_loc": ("float", 0.0),
    # optimiser
    "lr": ("float", 3e-4),
    "warmup_lr": ("float", 2e-4),
    "weight_decay": ("float", 0.01),
    "epochs": ("int", 15),
    "warmup_epochs": ("int", 3),
    "restart_epochs": ("int", 0),
    # corpus
    "scenes": ("int", 64),
    "max_agents": ("int", 4),
    "aux_agents": ("int", 2),
    "objects": ("int", 6),
    "occluders": ("int", 2),
    "frames": ("int", 6),
    "vehicle_range": ("float", 40.0),
    "infra_range": ("float", 60.0),
    "ray_resolution": ("float", 0.5),
    # run
    "seed": ("int", DEFAULT_SEED),
    "training_type": ("str", "perfect"),
    "base_checkpoint": ("str", ""),
}

PRESETS: dict[str, dict[str, object]] = {
    "desk": {},
    "full": {
        "x_min": -140.8,
        "x_max": 140.8,
        "y_min": -38.4,
        "y_max": 38.4,
        "channels": 256,
        "compression": 32,
        "dinat_kernel": 7,
        "dinat_dilations": (4, 2),
        "theta_bin": 20.0,
        "d_bin": 25.0,
    },
    "dair": {
        "x_min": -102.4,
        "x_max": 102.4,
        "theta_bin": 10.0,
        "d_bin": 15.0,
    },
}

_json_types = {
    "int": {"type": "integer"},
    "float": {"type": "number"},
    "str": {"type": "string"},
    "bool": {"type": "boolean"},
    "int_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
}

config_schema = {
    "type": "object",
    "properties": {key: dict(_json_types[kind]) for key, (kind, _) in DEFAULTS.items()},
    "additionalProperties": False,
    "required": ["schema_version"],
}
config_schema["properties"]["schema_version"] = {"const": SCHEMA_VERSION}
config_schema["properties"]["preset"] = {"enum": list(PRESETS)}
config_schema["properties"]["training_type"] = {"enum": list(TRAINING_TYPES)}
config_schema["properties"]["noise"] = {"enum": ["perfect", "simple", "mild", "harsh"]}
for _key in ("channels", "compression", "raster_channels", "epochs", "scenes", "max_agents", "frames"):
    config_schema["properties"][_key]["minimum"] = 1
for _key in ("lr", "cell", "tau"):
    config_schema["properties"][_key]["exclusiveMinimum"] = 0


def _coerce(key: str, raw: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key}")
    kind = DEFAULTS[key][0]
    try:
        match kind:
            case "int":
                return int(raw)
            case "float":
                return float(raw)
            case "bool":
                lowered = raw.lower()
                if lowered not in ("on", "off", "true", "false", "1", "0"):
                    raise ValueError(raw)
                return lowered in ("on", "true", "1")
            case "int_list":
                return [int(part) for part in raw.split(",") if part.strip()]
            case _:
                return raw
    except ValueError as e:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from e


def _format(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, list | tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config_text(text: str) -> dict[str, object]:
    """Read flat key=value lines; blank lines and lines starting with # are skipped."""
    values: dict[str, object] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {number}: duplicate key {key}")
        values[key] = _coerce(key, raw)
    return values


def resolve(values: dict[str, object]) -> dict[str, object]:
    """Defaults, then the chosen preset, then explicit values; validated by schema."""
    try:
        jsonschema.validate(values, config_schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message}") from e
    preset = str(values.get("preset", "desk"))
    merged = {key: default for key, (_, default) in DEFAULTS.items()}
    merged.update(PRESETS[preset])
    merged.update(values)
    merged = {
        key: list(value) if isinstance(value, tuple) else value for key, value in merged.items()
    }
    try:
        jsonschema.validate(merged, config_schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid config: {e.message}") from e
    return merged


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float
    warmup_lr: float
    weight_decay: float
    epochs: int
    warmup_epochs: int
    restart_epochs: int


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(repr=False)
    grid: GridSpec
    model: ModelConfig
    loss: LossConfig
    noise: NoiseSetting
    optimizer: OptimizerConfig
    scene: SceneConfig

    @classmethod
    def from_values(cls, values: dict[str, object]) -> "ExperimentConfig":
        v = resolve(values)
        grid = GridSpec(v["x_min"], v["x_max"], v["y_min"], v["y_max"], v["cell"])
        fusion = FusionConfig(
            channels=v["channels"],
            depth=v["depth"],
            ccl_rate=v["ccl_rate"],
            heads=v["heads"],
            dinat_kernel=v["dinat_kernel"],
            dinat_dilations=tuple(v["dinat_dilations"]),
            hrpe=v["hrpe"],
            tau=v["tau"],
            theta_bin=v["theta_bin"],
            d_bin=v["d_bin"],
            arch=v["arch"],
            satt_kind=v["satt_kind"],
            use_aatt=v["use_aatt"],
            use_satt=v["use_satt"],
            use_sconv=v["use_sconv"],
            use_original=v["use_original"],
        )
        fusion.validate()
        if v["channels"] % v["compression"]:
            raise ConfigError(
                f"channels {v['channels']} are not divisible by compression {v['compression']}"
            )
        model = ModelConfig(grid, v["raster_channels"], v["channels"], v["compression"], fusion, AnchorSpec())
        loss = LossConfig(v["alpha"], v["gamma"], v["beta"], v["pos_iou"], v["neg_iou"])
        loss.validate()
        noise = NoiseSetting.preset(v["noise"], v["t_lag"], v["sigma_hdg"], v["sigma_loc"])
        optimizer = OptimizerConfig(
            v["lr"], v["warmup_lr"], v["weight_decay"], v["epochs"], v["warmup_epochs"], v["restart_epochs"]
        )
        scene = SceneConfig(
            grid=grid,
            n_aux=v["aux_agents"],
            n_objects=v["objects"],
            n_occluders=v["occluders"],
            frames=v["frames"],
            max_agents=v["max_agents"],
            sensor=SensorConfig(v["ray_resolution"], v["vehicle_range"], v["infra_range"]),
        )
        scene.validate()
        return cls(v, grid, model, loss, noise, optimizer, scene)

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def training_type(self) -> str:
        return str(self.values["training_type"])

    def canonical_lines(self) -> list[str]:
        return sorted(f"{key}={_format(value)}" for key, value in self.values.items())

    def to_text(self) -> str:
        return "\n".join(self.canonical_lines()) + "\n"

    @property
    def config_hash(self) -> str:
        return stable_hash("\n".join(self.canonical_lines()))

    @property
    def model_hash(self) -> str:
        """Hash of the keys that shape the network's parameters."""
        keys = (
            "x_min", "x_max", "y_min", "y_max", "cell", "raster_channels", "channels",
            "compression", "depth", "ccl_rate", "heads", "dinat_kernel", "dinat_dilations",
            "satt_kind", "arch", "use_aatt", "use_satt", "use_sconv",
        )  # fmt: skip
        return stable_hash("\n".join(f"{k}={_format(self.values[k])}" for k in keys))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = {k: v for k, v in self.values.items()}
        values.update(overrides)
        return ExperimentConfig.from_values(values)

    def training_noise(self) -> NoiseSetting:
        match self.training_type:
            case "perfect":
                return NoiseSetting.preset("perfect")
            case "noise":
                return NoiseSetting.preset("simple")
            case _:
                return NoiseSetting.preset("mild")

    def training_epochs(self) -> int:
        epochs = self.optimizer.epochs
        return max(1, epochs // 2) if self.training_type == "fine-tuned" else epochs

    def require_base_checkpoint(self, override: Path | None = None) -> Path | None:
        if self.training_type != "fine-tuned":
            return None
        base = override or (Path(self.values["base_checkpoint"]) if self.values["base_checkpoint"] else None)
        if base is None:
            raise ConfigError("training_type=fine-tuned needs base_checkpoint or --checkpoint")
        return base


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_values({"schema_version": SCHEMA_VERSION, **overrides})


def load_config(path: Path | None, **overrides) -> ExperimentConfig:
    if path is None:
        return default_config(**overrides)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    values = parse_config_text(text)
    if "schema_version" not in values:
        raise ConfigError(f"{path}: missing schema_version")
    values.update(overrides)
    config = ExperimentConfig.from_values(values)
    logger.info(f"Loaded config {path} (hash {config.config_hash})")
    return config
