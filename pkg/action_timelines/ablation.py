import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from tqdm import tqdm

from .config import RunConfig
from .dataset import ActionDataset
from .evaluation import evaluate
from .exceptions import ConfigError
from .network import StreamedDetector
from .sampler import SamplingPlan, predict_dataset
from .training import train

__all__ = ["ABLATIONS", "SIGNAL_SCALES", "SC_RATES", "AblationRow", "AblationTable", "run_ablation"]

logger = logging.getLogger(__name__)

SIGNAL_SCALES = (0.1, 0.5, 1.0, 2.0)
SC_RATES = (0.0, 0.35, 0.7, 1.0)
PROPOSAL_COUNTS = (10, 30, 50)
STEP_COUNTS = (1, 5, 10)


@dataclass
class AblationRow:
    setting: dict
    average_map: float
    maps: dict = field(default_factory=dict)


@dataclass
class AblationTable:
    name: str
    rows: list = field(default_factory=list)

    def to_text(self) -> str:
        if not self.rows:
            return "{}: no rows\n".format(self.name)
        keys = list(self.rows[0].setting)
        thresholds = list(self.rows[0].maps)
        header = keys + ["{:.2f}".format(t) for t in thresholds] + ["avg"]
        lines = ["# ablation: {}".format(self.name), "  ".join("{:>10}".format(h) for h in header)]
        for row in self.rows:
            cells = [str(row.setting[k]) for k in keys]
            cells += ["{:.4f}".format(row.maps[t]) for t in thresholds] + ["{:.4f}".format(row.average_map)]
            lines.append("  ".join("{:>10}".format(c) for c in cells))
        return "\n".join(lines) + "\n"

    def __str__(self) -> str:
        return self.to_text()


class _Bench:
    """Trains on demand and scores sampling plans against the dataset's ground truth"""

    def __init__(self, config: RunConfig, dataset: ActionDataset, progress: bool) -> None:
        self.config = config
        self.dataset = dataset
        self.progress = progress
        self.gts = dataset.ground_truth()

    def fit(self, config: Optional[RunConfig] = None, refinement: str = "selective") -> StreamedDetector:
        return train(config or self.config, self.dataset, refinement=refinement).detector

    def score(
        self, detector: StreamedDetector, setting: dict, config: Optional[RunConfig] = None, **flags
    ) -> AblationRow:
        config = config or self.config
        plan = replace(SamplingPlan.from_config(config.sample), **flags)
        predictions = predict_dataset(detector, self.dataset, config, plan)
        report = evaluate(
            predictions, self.gts, config.eval.thresholds, config.eval.ar_budgets, config.eval.ar_iou_grid
        )
        logger.info("%s: average mAP %.4f", setting, report.average_map)
        return AblationRow(setting, report.average_map, dict(report.maps.per_threshold))

    def variant(self, key: str, value) -> RunConfig:
        config = self.config.copy()
        config.override(key, value)
        return config.validate()


def _refinement(bench: _Bench) -> list[AblationRow]:
    rows = []
    for refinement in tqdm(("none", "concat", "selective"), desc="refinement", disable=not bench.progress):
        detector = bench.fit(refinement=refinement)
        rows.append(
            bench.score(
                detector,
                {"refinement": refinement},
                self_conditioning=refinement != "none",
                selective_conditioning=refinement == "selective",
            )
        )
    return rows


def _decomposition(bench: _Bench) -> list[AblationRow]:
    detector = bench.fit()
    rows = []
    for iterative in (False, True):
        for selective in (False, True):
            setting = {"ID": "on" if iterative else "off", "SC": "on" if selective else "off"}
            rows.append(bench.score(detector, setting, iterative_denoising=iterative, selective_conditioning=selective))
    return rows


def _signal_scale(bench: _Bench) -> list[AblationRow]:
    rows = []
    for scale in tqdm(SIGNAL_SCALES, desc="signal-scale", disable=not bench.progress):
        config = bench.variant("model.scale", scale)
        rows.append(bench.score(bench.fit(config), {"scale": scale}, config))
    return rows


def _proposals_steps(bench: _Bench) -> list[AblationRow]:
    detector = bench.fit()
    rows = []
    for proposals in PROPOSAL_COUNTS:
        for steps in STEP_COUNTS:
            rows.append(
                bench.score(detector, {"proposals": proposals, "steps": steps}, num_proposals=proposals, steps=steps)
            )
    return rows


def _fusion(bench: _Bench) -> list[AblationRow]:
    rows = []
    for fusion in tqdm(("rgb", "flow", "early", "late"), desc="fusion", disable=not bench.progress):
        config = bench.variant("model.fusion", fusion)
        rows.append(bench.score(bench.fit(config), {"fusion": fusion}, config))
    return rows


def _nms(bench: _Bench) -> list[AblationRow]:
    detector = bench.fit()
    rows = [bench.score(detector, {"nms": "off"})]
    config = bench.variant("sample.nms", True)
    rows.append(bench.score(detector, {"nms": "on@{:.2f}".format(config.sample.nms_threshold)}, config))
    return rows


def _sc_rate(bench: _Bench) -> list[AblationRow]:
    rows = []
    for rate in tqdm(SC_RATES, desc="sc-rate", disable=not bench.progress):
        config = bench.variant("train.conditioning_rate", rate)
        rows.append(bench.score(bench.fit(config), {"rate": rate}, config))
    return rows


ABLATIONS: dict[str, Callable[[_Bench], list]] = {
    "refinement": _refinement,
    "decomposition": _decomposition,
    "signal-scale": _signal_scale,
    "proposals-steps": _proposals_steps,
    "fusion": _fusion,
    "nms": _nms,
    "sc-rate": _sc_rate,
}


def run_ablation(name: str, config: RunConfig, dataset: ActionDataset, progress: bool = False) -> AblationTable:
    """Run one scripted sweep and tabulate mAP per setting

    Args:
        name (str): One of ABLATIONS
        config (RunConfig): Base configuration every variant starts from
        dataset (ActionDataset): Data used for training and scoring
        progress (bool, optional): Show progress bars. Defaults to False.

    Raises:
        ConfigError: If ``name`` is not a known ablation

    Returns:
        AblationTable: One row per setting
    """
    if name not in ABLATIONS:
        raise ConfigError("unknown ablation {!r}; choose from {}".format(name, ", ".join(ABLATIONS)))
    logger.info("running ablation %s", name)
    return AblationTable(name, ABLATIONS[name](_Bench(config, dataset, progress)))
