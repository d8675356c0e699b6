import configparser
import dataclasses
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .exceptions import ActionTimelinesError, ConfigError
from .network import ModelConfig

__all__ = [
    "ScheduleConfig",
    "TrainConfig",
    "SampleConfig",
    "EvalConfig",
    "PathsConfig",
    "RunConfig",
    "load_config",
    "THUMOS_THRESHOLDS",
    "ACTIVITYNET_THRESHOLDS",
    "AR_IOU_GRID",
]

logger = logging.getLogger(__name__)

THUMOS_THRESHOLDS = [0.3, 0.4, 0.5, 0.6, 0.7]
ACTIVITYNET_THRESHOLDS = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95]
AR_IOU_GRID = list(ACTIVITYNET_THRESHOLDS)


@dataclass
class ScheduleConfig:
    total_steps: int = 1000
    offset: float = 0.008
    kind: str = "cosine"

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("schedule.total_steps must be >= 1")
        if not 0 < self.offset < 1:
            raise ConfigError("schedule.offset must lie in (0, 1)")
        if self.kind not in ("cosine", "linear"):
            raise ConfigError("schedule.kind must be 'cosine' or 'linear'")


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 4
    lr: float = 1e-3
    grad_clip_norm: float = 1.0
    num_proposals: int = 30
    top_k: int = 4
    weight_cls: float = 2.0
    weight_l1: float = 5.0
    weight_iou: float = 2.0
    weight_comp: float = 1.0
    self_cond_rate: float = 0.7
    conditioning_rate: float = 0.7
    jitter: float = 0.01
    score_targets: str = "primary"
    checkpoint_every: int = 500
    log_every: int = 50

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "num_proposals", "top_k", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError("train.{} must be >= 1".format(name))
        for name in ("self_cond_rate", "conditioning_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("train.{} must lie in [0, 1]".format(name))
        for name in ("lr", "grad_clip_norm", "jitter", "weight_cls", "weight_l1", "weight_iou", "weight_comp"):
            if getattr(self, name) < 0:
                raise ConfigError("train.{} must be non-negative".format(name))
        if self.score_targets not in ("primary", "all"):
            raise ConfigError("train.score_targets must be primary or all, got {!r}".format(self.score_targets))


@dataclass
class SampleConfig:
    steps: int = 10
    num_proposals: int = 30
    gamma: float = 0.5
    iterative_denoising: bool = True
    selective_conditioning: bool = True
    self_conditioning: bool = True
    union_similar: bool = False
    nms: bool = False
    nms_threshold: float = 0.5

    def validate(self, total_steps: int) -> None:
        if not 1 <= self.steps <= total_steps + 1:
            raise ConfigError("sample.steps must lie in [1, {}]".format(total_steps + 1))
        if self.num_proposals < 1:
            raise ConfigError("sample.num_proposals must be >= 1")
        if not -1.0 <= self.gamma <= 1.0:
            raise ConfigError("sample.gamma must lie in [-1, 1]")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("sample.nms_threshold must lie in [0, 1]")


@dataclass
class EvalConfig:
    thresholds: list = field(default_factory=lambda: list(THUMOS_THRESHOLDS))
    ar_budgets: list = field(default_factory=lambda: [50, 100, 500])
    ar_iou_grid: list = field(default_factory=lambda: list(AR_IOU_GRID))

    def validate(self) -> None:
        if not self.thresholds:
            raise ConfigError("eval.thresholds must not be empty")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds + self.ar_iou_grid):
            raise ConfigError("IoU thresholds must lie in [0, 1]")
        if any(b < 1 for b in self.ar_budgets):
            raise ConfigError("eval.ar_budgets must be positive")


@dataclass
class PathsConfig:
    data_dir: str = "data/synthetic"
    output_dir: str = "runs/default"

    @property
    def checkpoint(self) -> Path:
        return Path(self.output_dir) / "model.ckpt"

    @property
    def metrics_log(self) -> Path:
        return Path(self.output_dir) / "train_metrics.jsonl"

    @property
    def predictions(self) -> Path:
        return Path(self.output_dir) / "predictions.csv"

    def validate(self) -> None:
        pass


SECTIONS = {
    "schedule": ScheduleConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    """Every tunable of a run, grouped in sections.

    The file form is INI-style ``key = value`` lines under ``[section]``
    headers; ``seed`` lives in ``[run]``.
    """

    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> "RunConfig":
        if self.seed < 0:
            raise ConfigError("run.seed must be non-negative")
        self.schedule.validate()
        try:
            self.model.validate()
        except ActionTimelinesError as error:
            raise ConfigError(str(error)) from error
        self.train.validate()
        self.sample.validate(self.schedule.total_steps)
        self.eval.validate()
        if self.train.num_proposals < self.train.top_k:
            raise ConfigError("train.top_k cannot exceed train.num_proposals")
        return self

    def to_ini(self) -> str:
        """Canonical text echo of the configuration"""
        lines = ["[run]", "seed = {}".format(self.seed), ""]
        for section in SECTIONS:
            lines.append("[{}]".format(section))
            block = getattr(self, section)
            for f in dataclasses.fields(block):
                lines.append("{} = {}".format(f.name, _format(getattr(block, f.name))))
            lines.append("")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        flat = {"run.seed": self.seed}
        for section in SECTIONS:
            block = getattr(self, section)
            for f in dataclasses.fields(block):
                flat["{}.{}".format(section, f.name)] = getattr(block, f.name)
        return flat

    def override(self, key: str, value) -> None:
        """Set ``section.name`` (or ``seed``) to ``value``, converting strings by the field type"""
        if key in ("seed", "run.seed"):
            self.seed = int(value)
            return
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError("unknown configuration key {!r}".format(key))
        block = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(block)}
        if name not in types:
            raise ConfigError("unknown key {!r} in section [{}]".format(name, section))
        if isinstance(value, str):
            value = _convert(value, types[name], key)
        setattr(block, name, value)

    def copy(self) -> "RunConfig":
        return RunConfig.from_ini_text(self.to_ini())

    @staticmethod
    def from_ini_text(text: str, source: str = "<string>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as error:
            raise ConfigError("{}: {}".format(source, error)) from error

        config = RunConfig()
        for section in parser.sections():
            if section == "run":
                for key, value in parser.items("run"):
                    if key != "seed":
                        raise ConfigError("{}: unknown key {!r} in section [run]".format(source, key))
                    config.override("seed", value)
                continue
            if section not in SECTIONS:
                raise ConfigError("{}: unknown section [{}]".format(source, section))
            for key, value in parser.items(section):
                config.override("{}.{}".format(section, key), value)
        return config.validate()


def _format(value) -> str:
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(raw: str, typ, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list or typing.get_origin(typ) is list:
            items = [item.strip() for item in raw.split(",") if item.strip()]
            return [int(item) if item.lstrip("-").isdigit() else float(item) for item in items]
        return raw
    except ValueError as error:
        raise ConfigError("bad value {!r} for {}".format(raw, key)) from error


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a run configuration, or the defaults when no path is given

    Args:
        path (str | Path, optional): An INI-style configuration file. Defaults to None.

    Raises:
        ConfigError: On unknown sections or keys and on invalid values

    Returns:
        RunConfig: The validated configuration
    """
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as error:
        raise ConfigError("cannot read config {}: {}".format(path, error)) from error
    logger.debug("loading configuration from %s", path)
    return RunConfig.from_ini_text(text, str(path))
