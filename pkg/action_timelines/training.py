import contextlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .checkpoint import save_checkpoint
from .codec import QuerySet, scale_signal
from .conditioning import apply_training_rate, condition_queries
from .config import RunConfig, TrainConfig
from .dataset import ActionDataset, AnnotatedVideo, atomic_write
from .exceptions import ConfigError, DivergenceError, InvalidValueError, ShapeMismatchError
from .interval import paired_iou, segment_iou_matrix
from .network import DenoiserModel, EncoderOutput, HeadOutputs, StreamedDetector
from .schedule import NoiseSchedule, build_schedule, corrupt
from .seeding import derive_generator, derive_numpy_generator, derive_seed

__all__ = [
    "REFINEMENTS",
    "SCORE_TARGETS",
    "LossWeights",
    "TrainingSettings",
    "VideoTargets",
    "PaddedProposals",
    "CorruptedProposals",
    "SelfConditionEstimate",
    "Assignment",
    "LossBreakdown",
    "VideoSample",
    "TrainingBatch",
    "TrainResult",
    "Trainer",
    "pad_ground_truth",
    "corruption_step",
    "self_condition_estimate",
    "ot_assign",
    "assignment_cost",
    "set_prediction_loss",
    "video_loss",
    "batch_loss",
    "loss_and_gradients",
    "train",
]

logger = logging.getLogger(__name__)

METRICS_LOG = "train_metrics.jsonl"
CHECKPOINT_FILE = "model.ckpt"

# selective: conditioning + self-conditioning; concat: self-conditioning only; none: neither
REFINEMENTS = ("selective", "concat", "none")
# primary: only the cheapest match of each ground truth is scored as foreground; all: every match is
SCORE_TARGETS = ("primary", "all")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    iou: float = 2.0
    comp: float = 1.0

    @staticmethod
    def from_config(config: TrainConfig) -> "LossWeights":
        return LossWeights(config.weight_cls, config.weight_l1, config.weight_iou, config.weight_comp)


@dataclass(frozen=True)
class TrainingSettings:
    """Per-step knobs of the training objective, resolved from a RunConfig"""

    num_proposals: int = 30
    top_k: int = 4
    weights: LossWeights = LossWeights()
    self_cond_rate: float = 0.7
    conditioning_rate: float = 0.7
    gamma: float = 0.5
    union_similar: bool = False
    jitter: float = 0.01
    scale: float = 0.5
    refinement: str = "selective"
    score_targets: str = "primary"

    def __post_init__(self) -> None:
        if self.refinement not in REFINEMENTS:
            raise InvalidValueError("refinement must be one of {}, got {!r}".format(REFINEMENTS, self.refinement))
        if self.score_targets not in SCORE_TARGETS:
            raise InvalidValueError(
                "score_targets must be one of {}, got {!r}".format(SCORE_TARGETS, self.score_targets)
            )

    @property
    def uses_self_conditioning(self) -> bool:
        return self.refinement != "none"

    @property
    def uses_selective_conditioning(self) -> bool:
        return self.refinement == "selective"

    @staticmethod
    def from_config(config: RunConfig, refinement: str = "selective") -> "TrainingSettings":
        return TrainingSettings(
            num_proposals=config.train.num_proposals,
            top_k=config.train.top_k,
            weights=LossWeights.from_config(config.train),
            self_cond_rate=config.train.self_cond_rate,
            conditioning_rate=config.train.conditioning_rate,
            gamma=config.sample.gamma,
            union_similar=config.sample.union_similar,
            jitter=config.train.jitter,
            scale=config.model.scale,
            refinement=refinement,
            score_targets=config.train.score_targets,
        )


@dataclass
class VideoTargets:
    """Ground truth of one video: (M, 2) normalized boundaries and (M,) class indices"""

    boundaries: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        if self.boundaries.shape != (len(self.labels), 2):
            shape = tuple(self.boundaries.shape)
            raise ShapeMismatchError("{} boundaries for {} labels".format(shape, len(self.labels)))

    def __len__(self) -> int:
        return len(self.labels)

    @staticmethod
    def from_video(video: AnnotatedVideo) -> "VideoTargets":
        return VideoTargets(video.normalized_boundaries(), video.labels())


@dataclass
class PaddedProposals:
    """N_train clean proposals. ``source[i]`` is the ground-truth index entry i repeats, -1 for background."""

    signals: torch.Tensor
    source: torch.Tensor

    def __len__(self) -> int:
        return self.signals.shape[0]


def pad_ground_truth(
    targets: VideoTargets,
    num_proposals: int,
    scale: float,
    generator: Optional[torch.Generator] = None,
    jitter: float = 0.01,
) -> PaddedProposals:
    """Repeat the ground truth cyclically to ``num_proposals`` signal-space proposals

    Every entry is perturbed by Gaussian noise of std ``jitter`` in normalized
    time, clamped to [0, 1] and reordered so start <= end. A video without
    instances is filled with standard-normal signal pairs marked background.

    Args:
        targets (VideoTargets): The video's ground truth
        num_proposals (int): N_train
        scale (float): Signal scaling factor
        generator (torch.Generator, optional): Seeded generator of this sample. Defaults to None.
        jitter (float, optional): Noise std in normalized time. Defaults to 0.01.

    Returns:
        PaddedProposals: Signal-space proposals and their ground-truth sources
    """
    if num_proposals < 1:
        raise InvalidValueError("num_proposals must be >= 1, got {}".format(num_proposals))
    noise = torch.randn((num_proposals, 2), generator=generator, dtype=torch.float64)
    if len(targets) == 0:
        return PaddedProposals(noise, torch.full((num_proposals,), -1, dtype=torch.long))
    source = torch.arange(num_proposals) % len(targets)
    pairs = (targets.boundaries[source] + jitter * noise).clamp(0.0, 1.0)
    pairs = torch.stack([pairs.min(dim=-1).values, pairs.max(dim=-1).values], dim=-1)
    return PaddedProposals(scale_signal(pairs, scale), source)


@dataclass
class CorruptedProposals:
    """One forward-noising draw shared by every stream of a video"""

    t: int
    eps: torch.Tensor
    clean: torch.Tensor
    noisy: torch.Tensor

    def queries(self, model: DenoiserModel, scale: float) -> QuerySet:
        """Project the noisy signals (clamped to the signal range) into query embeddings"""
        signals = self.noisy.clamp(-scale, scale).to(model.projection.hidden.weight.dtype)
        return model.project_queries(signals, self.t)


def corruption_step(
    padded: PaddedProposals,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    t: Optional[int] = None,
) -> CorruptedProposals:
    """Draw one timestep t ~ U[1, T] for the video and corrupt its padded proposals

    Args:
        padded (PaddedProposals): Clean signal-space proposals
        sched (NoiseSchedule): The noise schedule
        generator (torch.Generator, optional): Seeded generator of this sample. Defaults to None.
        t (int, optional): Forces the timestep; the draw still happens so later draws stay aligned.

    Returns:
        CorruptedProposals: t, the noise and the noisy signals
    """
    drawn = int(torch.randint(1, sched.total_steps + 1, (1,), generator=generator))
    eps = torch.randn(padded.signals.shape, generator=generator, dtype=torch.float64)
    t = drawn if t is None else int(t)
    return CorruptedProposals(t, eps, padded.signals, corrupt(padded.signals, t, eps, sched))


@dataclass
class SelfConditionEstimate:
    """The prior clean-signal estimate the main pass is conditioned on.

    ``reference`` holds the projected estimate once selective conditioning has
    computed it.
    """

    signals: torch.Tensor
    executed: bool
    reference: Optional[QuerySet] = None

    def with_reference(self, model: DenoiserModel, t: int, scale: float) -> "SelfConditionEstimate":
        if self.reference is not None:
            return self
        with torch.no_grad():
            reference = model.project_queries(self.signals.clamp(-scale, scale), t)
        return SelfConditionEstimate(self.signals, self.executed, reference)


def self_condition_estimate(
    model: DenoiserModel,
    queries: QuerySet,
    t: int,
    cond: EncoderOutput,
    rate: float,
    generator: Optional[torch.Generator] = None,
) -> SelfConditionEstimate:
    """With probability ``rate`` run one gradient-free pass with a zero estimate

    The uniform draw happens whatever the rate, keeping the generator stream
    independent of the outcome.

    Returns:
        SelfConditionEstimate: The detached estimate, or zeros when the pass did not run
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidValueError("self-conditioning rate must lie in [0, 1], got {}".format(rate))
    zeros = torch.zeros(queries.signals.shape, dtype=queries.embeddings.dtype)
    draw = float(torch.rand(1, generator=generator, dtype=torch.float64))
    if draw >= rate:
        return SelfConditionEstimate(zeros, False)
    with torch.no_grad():
        heads = model.apply_heads(model.decode(queries.embeddings, cond, t, zeros), queries.signals)
    return SelfConditionEstimate(heads.signals.detach(), True)


@dataclass(frozen=True)
class Assignment:
    """Predictions assigned to each ground truth; unassigned predictions are background"""

    matches: tuple
    num_predictions: int

    def prediction_targets(self) -> torch.Tensor:
        """(N,) ground-truth index per prediction, -1 where unassigned"""
        targets = torch.full((self.num_predictions,), -1, dtype=torch.long)
        for gt, preds in enumerate(self.matches):
            for pred in preds:
                targets[pred] = gt
        return targets

    def primary(self) -> torch.Tensor:
        """(N,) mask of the first accepted, i.e. cheapest, prediction of every ground truth"""
        mask = torch.zeros(self.num_predictions, dtype=torch.bool)
        for preds in self.matches:
            if preds:
                mask[preds[0]] = True
        return mask

    def pairs(self) -> list[tuple[int, int]]:
        return [(gt, pred) for gt, preds in enumerate(self.matches) for pred in preds]


def ot_assign(cost: torch.Tensor, k: int) -> Assignment:
    """Give every ground truth its k cheapest predictions, resolving conflicts by cost

    Candidate (gt, prediction) pairs are taken in ascending (cost, gt,
    prediction) order; a pair is accepted while the prediction is free and
    the ground truth holds fewer than k. A ground truth that loses a
    contested prediction therefore falls back to its next-best free one.
    When M·k exceeds N the predictions simply run out.

    Args:
        cost (torch.Tensor): (M, N) finite cost matrix
        k (int): Predictions per ground truth

    Raises:
        InvalidValueError: If k < 1 or the cost is not finite

    Returns:
        Assignment: The assignment
    """
    if k < 1:
        raise InvalidValueError("k must be >= 1, got {}".format(k))
    if cost.dim() != 2:
        raise ShapeMismatchError("cost must be (M, N), got {}".format(tuple(cost.shape)))
    values = cost.detach().to(torch.float64).cpu().numpy()
    if not np.isfinite(values).all():
        raise InvalidValueError("assignment cost must be finite")
    num_gt, num_pred = values.shape
    gt_index, pred_index = np.meshgrid(np.arange(num_gt), np.arange(num_pred), indexing="ij")
    order = np.lexsort((pred_index.ravel(), gt_index.ravel(), values.ravel()))

    matches = [[] for _ in range(num_gt)]
    taken = np.zeros(num_pred, dtype=bool)
    remaining = min(num_gt * k, num_pred)
    for flat in order:
        if remaining == 0:
            break
        gt, pred = divmod(int(flat), num_pred)
        if taken[pred] or len(matches[gt]) >= k:
            continue
        matches[gt].append(pred)
        taken[pred] = True
        remaining -= 1
    return Assignment(tuple(tuple(m) for m in matches), num_pred)


def assignment_cost(heads: HeadOutputs, targets: VideoTargets, weights: LossWeights) -> torch.Tensor:
    """(M, N) matching cost λ_cls·(1 − p_class) + λ_L1·L1 + λ_iou·(1 − IoU)"""
    with torch.no_grad():
        boundaries = heads.boundaries.to(torch.float64)
        gt = targets.boundaries.to(torch.float64)
        p_class = heads.class_probs.to(torch.float64)[:, targets.labels].transpose(0, 1)
        l1 = torch.cdist(gt, boundaries, p=1)
        overlap = segment_iou_matrix(gt, boundaries)
        return weights.cls * (1.0 - p_class) + weights.l1 * l1 + weights.iou * (1.0 - overlap)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    l1: torch.Tensor
    iou: torch.Tensor
    comp: torch.Tensor

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        return LossBreakdown(*(a + b for a, b in zip(self.components(), other.components())))

    def components(self) -> tuple:
        return (self.total, self.cls, self.l1, self.iou, self.comp)

    def as_dict(self) -> dict[str, float]:
        return {
            "loss_total": float(self.total),
            "loss_cls": float(self.cls),
            "loss_l1": float(self.l1),
            "loss_iou": float(self.iou),
            "loss_comp": float(self.comp),
        }

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self.as_dict().values())


def set_prediction_loss(
    heads: HeadOutputs,
    assignment: Assignment,
    targets: VideoTargets,
    weights: LossWeights = LossWeights(),
    primary_only: bool = False,
) -> LossBreakdown:
    """Set prediction loss over the N predictions of one video

    Cross-entropy covers every prediction (background for the unassigned);
    L1 and 1 − IoU are averaged over assigned predictions in normalized time;
    completeness and predicted IoU both regress the IoU of assigned
    predictions and 0 elsewhere.

    With ``primary_only`` only the cheapest prediction of each ground truth
    keeps its class label and completeness target; the other assigned ones
    still regress their boundaries and predicted IoU but are scored as
    background with completeness 0.
    """
    num_classes = heads.class_logits.shape[-1] - 1
    gt_of = assignment.prediction_targets()
    assigned = gt_of >= 0
    scored = assigned & assignment.primary() if primary_only else assigned
    labels = torch.full_like(gt_of, num_classes)
    labels[scored] = targets.labels[gt_of[scored]]
    cls = F.cross_entropy(heads.class_logits, labels)

    iou_target = torch.zeros_like(heads.predicted_iou)
    comp_target = torch.zeros_like(heads.completeness)
    if bool(assigned.any()):
        pred = heads.boundaries[assigned]
        gt = targets.boundaries[gt_of[assigned]].to(pred.dtype)
        l1 = (pred - gt).abs().sum(dim=-1).mean()
        overlaps = paired_iou(pred, gt)
        iou = (1.0 - overlaps).mean()
        iou_target[assigned] = overlaps
        comp_target[assigned] = overlaps * scored[assigned].to(overlaps.dtype)
    else:
        l1 = heads.signals.sum() * 0.0
        iou = heads.signals.sum() * 0.0
    comp = ((heads.completeness - comp_target) ** 2).mean() + ((heads.predicted_iou - iou_target) ** 2).mean()

    total = weights.cls * cls + weights.l1 * l1 + weights.iou * iou + weights.comp * comp
    return LossBreakdown(total, cls, l1, iou, comp)


@dataclass
class VideoSample:
    """One training element: stream inputs, targets, and the seed of its random draws"""

    video_id: str
    inputs: dict
    targets: VideoTargets
    seed: int


@dataclass
class TrainingBatch:
    samples: list
    batch_id: int = 0

    def __len__(self) -> int:
        return len(self.samples)


def video_loss(
    model: DenoiserModel,
    features: torch.Tensor,
    corrupted: CorruptedProposals,
    targets: VideoTargets,
    settings: TrainingSettings,
    generator: Optional[torch.Generator] = None,
    estimate: Optional[SelfConditionEstimate] = None,
) -> LossBreakdown:
    """Loss of one stream on one video: estimate, condition, decode, assign, score

    A given ``estimate`` (and its reference, when set) stands in for the
    gradient-free pass; the pass still consumes its draw from ``generator``.
    """
    cond = model.encode_video(features)
    queries = corrupted.queries(model, settings.scale)
    embeddings = queries.embeddings
    self_cond = None
    if settings.uses_self_conditioning:
        drawn = self_condition_estimate(model, queries, corrupted.t, cond, settings.self_cond_rate, generator)
        if estimate is None:
            estimate = drawn
        self_cond = estimate.signals
        mask = apply_training_rate(len(queries), settings.conditioning_rate, generator)
        if settings.uses_selective_conditioning and estimate.executed:
            reference = estimate.with_reference(model, corrupted.t, settings.scale).reference
            embeddings, _ = condition_queries(
                queries, reference, settings.scale, settings.gamma, mask, settings.union_similar
            )
    heads = model.apply_heads(model.decode(embeddings, cond, corrupted.t, self_cond), queries.signals)
    if len(targets) == 0:
        assignment = Assignment((), len(queries))
    else:
        assignment = ot_assign(assignment_cost(heads, targets, settings.weights), settings.top_k)
    return set_prediction_loss(heads, assignment, targets, settings.weights, settings.score_targets == "primary")


def batch_loss(
    detector: StreamedDetector, batch: TrainingBatch, sched: NoiseSchedule, settings: TrainingSettings
) -> tuple[LossBreakdown, float]:
    """Summed loss over every video and stream of a batch, plus the mean drawn timestep

    Each video reseeds its own generator, so duplicated samples contribute
    identical terms.
    """
    total = None
    timesteps = []
    for sample in batch.samples:
        generator = derive_generator(sample.seed)
        padded = pad_ground_truth(sample.targets, settings.num_proposals, settings.scale, generator, settings.jitter)
        corrupted = corruption_step(padded, sched, generator)
        timesteps.append(corrupted.t)
        for name, features in detector.stream_inputs(sample.inputs).items():
            loss = video_loss(detector.streams[name], features, corrupted, sample.targets, settings, generator)
            total = loss if total is None else total + loss
    if total is None:
        raise ShapeMismatchError("cannot compute the loss of an empty batch")
    return total, float(np.mean(timesteps))


def loss_and_gradients(
    detector: StreamedDetector, batch: TrainingBatch, sched: NoiseSchedule, settings: TrainingSettings
) -> tuple[LossBreakdown, dict[str, torch.Tensor], float]:
    """Batch loss and its gradient with respect to every parameter

    Raises:
        DivergenceError: If any loss component is not finite

    Returns:
        tuple: The loss breakdown, parameter name -> gradient, and the mean timestep
    """
    detector.zero_grad(set_to_none=True)
    loss, t_mean = batch_loss(detector, batch, sched, settings)
    if not loss.is_finite():
        raise DivergenceError(batch.batch_id, loss.as_dict())
    loss.total.backward()
    gradients = {
        name: (param.grad.detach().clone() if param.grad is not None else torch.zeros_like(param))
        for name, param in detector.named_parameters()
    }
    return loss, gradients, t_mean


@dataclass
class TrainResult:
    detector: StreamedDetector
    steps: int
    history: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss_total"] if self.history else float("nan")


class Trainer:
    """Adam training loop over an ActionDataset"""

    def __init__(
        self,
        config: RunConfig,
        dataset: ActionDataset,
        refinement: str = "selective",
        detector: Optional[StreamedDetector] = None,
    ) -> None:
        config.validate()
        if dataset.feature_dim and dataset.feature_dim != config.model.feat_dim:
            raise ConfigError(
                "dataset feature dim {} != model.feat_dim {}".format(dataset.feature_dim, config.model.feat_dim)
            )
        if dataset.num_classes > config.model.num_classes:
            message = "dataset has {} classes but model.num_classes is {}"
            raise ConfigError(message.format(dataset.num_classes, config.model.num_classes))
        self.config = config
        self.dataset = dataset
        self.sched = build_schedule(config.schedule.kind, config.schedule.total_steps, config.schedule.offset)
        self.settings = TrainingSettings.from_config(config, refinement)
        self.detector = detector or StreamedDetector.initialize(config.model, derive_seed(config.seed, "init"))
        self.optimizer = torch.optim.Adam(self.detector.parameters(), lr=config.train.lr)

    def batches(self, epoch: int) -> list[list[str]]:
        """Video ids of every batch of an epoch, shuffled by a seed derived from the epoch"""
        ids = self.dataset.video_ids
        order = derive_numpy_generator(self.config.seed, "shuffle", epoch).permutation(len(ids))
        size = self.config.train.batch_size
        return [[ids[i] for i in order[start:start + size]] for start in range(0, len(ids), size)]

    def make_batch(self, video_ids: Sequence[str], step: int) -> TrainingBatch:
        samples = []
        for position, video_id in enumerate(video_ids):
            samples.append(
                VideoSample(
                    video_id,
                    self.dataset.video_features(video_id),
                    VideoTargets.from_video(self.dataset.videos[video_id]),
                    derive_seed(self.config.seed, "train", step, position),
                )
            )
        return TrainingBatch(samples, step)

    def step(self, batch: TrainingBatch) -> dict:
        self.detector.train()
        loss, _, t_mean = loss_and_gradients(self.detector, batch, self.sched, self.settings)
        if self.config.train.grad_clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.detector.parameters(), self.config.train.grad_clip_norm)
        self.optimizer.step()
        record = {"step": batch.batch_id}
        record.update(loss.as_dict())
        record["lr"] = self.optimizer.param_groups[0]["lr"]
        record["t_mean"] = t_mean
        return record

    def fit(self, output_dir: Optional[Union[str, Path]] = None, progress: bool = False) -> TrainResult:
        """Run every epoch; with ``output_dir`` also write the metrics log and checkpoints

        Returns:
            TrainResult: The trained detector and the per-step records
        """
        if len(self.dataset) == 0:
            raise ConfigError("cannot train on an empty dataset")
        history = []
        schedule = [ids for epoch in range(self.config.train.epochs) for ids in self.batches(epoch)]
        with contextlib.ExitStack() as stack:
            log = None
            if output_dir is not None:
                output_dir = Path(output_dir)
                log = stack.enter_context(atomic_write(output_dir / METRICS_LOG))
                log.write(json.dumps({"config": self.config.to_dict()}, sort_keys=True) + "\n")
            for step, video_ids in enumerate(tqdm(schedule, desc="train", disable=not progress), start=1):
                record = self.step(self.make_batch(video_ids, step))
                history.append(record)
                logger.debug("step %d %s", step, record)
                if step % self.config.train.log_every == 0 or step == 1:
                    logger.info("step %d/%d loss %.4f", step, len(schedule), record["loss_total"])
                if log is not None:
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                    if step % self.config.train.checkpoint_every == 0:
                        save_checkpoint(output_dir / CHECKPOINT_FILE, self.detector, self.config)
        if output_dir is not None:
            save_checkpoint(output_dir / CHECKPOINT_FILE, self.detector, self.config)
        self.detector.eval()
        return TrainResult(self.detector, len(schedule), history)


def train(
    config: RunConfig,
    dataset: ActionDataset,
    output_dir: Optional[Union[str, Path]] = None,
    refinement: str = "selective",
    progress: bool = False,
) -> TrainResult:
    """Train a detector from scratch under ``config`` on ``dataset``"""
    return Trainer(config, dataset, refinement).fit(output_dir, progress)
