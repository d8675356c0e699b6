import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from tqdm import tqdm

from .conditioning import condition_queries
from .config import RunConfig, SampleConfig
from .dataset import ActionDataset
from .evaluation import Prediction
from .exceptions import InvalidValueError
from .interval import nms
from .network import DetectionResult, EncoderOutput, HeadOutputs, StreamedDetector, fuse_scores
from .schedule import NoiseSchedule, build_schedule
from .seeding import derive_generator

__all__ = [
    "SamplingPlan",
    "SamplingStep",
    "SamplingTrace",
    "VideoDetections",
    "make_time_pairs",
    "ddim_step",
    "sample",
    "fuse_scores",
    "late_fuse",
    "suppress",
    "detect_video",
    "predict_dataset",
]

logger = logging.getLogger(__name__)


def make_time_pairs(total_steps: int, steps: int) -> list[tuple[int, int]]:
    """(t_now, t_next) pairs of a sampling run

    ``steps + 1`` evenly spaced values from -1 to T are rounded to integers,
    deduplicated in order, reversed and paired consecutively, so the last
    pair always ends at -1.

    Args:
        total_steps (int): T
        steps (int): Number of sampling steps, in [1, T + 1]

    Raises:
        InvalidValueError: If steps is out of range

    Returns:
        list[tuple[int, int]]: Pairs with strictly decreasing t_now
    """
    if not 1 <= steps <= total_steps + 1:
        raise InvalidValueError("steps must lie in [1, {}], got {}".format(total_steps + 1, steps))
    times = []
    for value in np.rint(np.linspace(-1, total_steps, steps + 1)).astype(int).tolist():
        if value not in times:
            times.append(value)
    times.reverse()
    return list(zip(times[:-1], times[1:]))


def ddim_step(
    z_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t_now: int,
    t_next: int,
    sched: NoiseSchedule,
    clip: Optional[float] = None,
) -> torch.Tensor:
    """Deterministic DDIM update from t_now to t_next

    ε̂ = (z_t − √ᾱ_now·x0)/√(1 − ᾱ_now), then z_next = √ᾱ_next·x0 + √(1 − ᾱ_next)·ε̂
    with ᾱ_{-1} = 1. When ᾱ_now is exactly 1, ε̂ is taken as 0.

    Args:
        z_t (torch.Tensor): Current signals
        x0_hat (torch.Tensor): Predicted clean signals
        t_now (int): Current timestep, >= 0
        t_next (int): Target timestep in [-1, t_now)
        sched (NoiseSchedule): The noise schedule
        clip (float, optional): Clamp x0_hat and the output into [-clip, clip]. Defaults to None.

    Returns:
        torch.Tensor: Signals at t_next
    """
    if t_now < 0 or not -1 <= t_next < t_now:
        raise InvalidValueError("need t_now >= 0 and -1 <= t_next < t_now, got ({}, {})".format(t_now, t_next))
    alpha_now = sched.alpha_bar_at(t_now)
    alpha_next = sched.alpha_bar_at(t_next)
    if clip is not None:
        x0_hat = x0_hat.clamp(-clip, clip)
    if alpha_now >= 1.0:
        eps = torch.zeros_like(z_t)
    else:
        eps = (z_t - alpha_now ** 0.5 * x0_hat) / (1.0 - alpha_now) ** 0.5
    z_next = alpha_next ** 0.5 * x0_hat + (1.0 - alpha_next) ** 0.5 * eps
    if clip is not None:
        z_next = z_next.clamp(-clip, clip)
    return z_next


@dataclass(frozen=True)
class SamplingPlan:
    """How a sampling run proceeds.

    With ``iterative_denoising`` off, each step's prediction is fed straight
    back as the next input instead of taking a DDIM step.
    """

    steps: int = 10
    num_proposals: int = 30
    gamma: float = 0.5
    iterative_denoising: bool = True
    selective_conditioning: bool = True
    self_conditioning: bool = True
    union_similar: bool = False

    def time_pairs(self, total_steps: int) -> list[tuple[int, int]]:
        return make_time_pairs(total_steps, self.steps)

    @staticmethod
    def from_config(config: SampleConfig) -> "SamplingPlan":
        return SamplingPlan(
            steps=config.steps,
            num_proposals=config.num_proposals,
            gamma=config.gamma,
            iterative_denoising=config.iterative_denoising,
            selective_conditioning=config.selective_conditioning,
            self_conditioning=config.self_conditioning,
            union_similar=config.union_similar,
        )


@dataclass
class SamplingStep:
    t_now: int
    t_next: int
    heads: HeadOutputs
    signals: torch.Tensor


@dataclass
class SamplingTrace:
    """Per-step outputs of one sampling run and the final detections"""

    steps: list = field(default_factory=list)
    final: list = field(default_factory=list)

    @property
    def final_signals(self) -> torch.Tensor:
        return self.steps[-1].signals


def sample(
    model,
    cond: EncoderOutput,
    plan: SamplingPlan,
    sched: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    scale: float = 0.5,
) -> SamplingTrace:
    """Denoise ``plan.num_proposals`` Gaussian proposals into detections

    ``model`` needs project_queries, decode and apply_heads (a DenoiserModel
    or anything shaped like one). From the second step on, the current queries
    are conditioned on the previous step's denoised proposals; the previous
    clean estimate is carried along as the self-conditioning input.

    Args:
        model: The denoiser of one stream
        cond (EncoderOutput): The encoded video
        plan (SamplingPlan): Steps, proposal count and mechanism flags
        sched (NoiseSchedule): The noise schedule
        generator (torch.Generator, optional): Seeds the initial noise. Defaults to None.
        scale (float, optional): Signal scaling factor. Defaults to 0.5.

    Returns:
        SamplingTrace: Every step's head outputs and the final DetectionResult list
    """
    dtype = cond.features.dtype
    z = torch.randn((plan.num_proposals, 2), generator=generator, dtype=torch.float64).to(dtype)
    self_cond = torch.zeros_like(z) if plan.self_conditioning else None
    reference = None
    trace = SamplingTrace()
    with torch.no_grad():
        for t_now, t_next in plan.time_pairs(sched.total_steps):
            queries = model.project_queries(z.clamp(-scale, scale), t_now)
            embeddings = queries.embeddings
            if plan.selective_conditioning and reference is not None:
                embeddings, _ = condition_queries(queries, reference, scale, plan.gamma, None, plan.union_similar)
            heads = model.apply_heads(model.decode(embeddings, cond, t_now, self_cond), queries.signals)
            x0 = heads.signals
            if self_cond is not None:
                self_cond = x0
            if plan.iterative_denoising:
                z = ddim_step(z, x0, t_now, t_next, sched, clip=scale)
            else:
                z = x0.clamp(-scale, scale)
            reference = model.project_queries(x0.clamp(-scale, scale), t_now)
            trace.steps.append(SamplingStep(t_now, t_next, heads, z))
            logger.debug("step %d -> %d", t_now, t_next)
    trace.final = trace.steps[-1].heads.results()
    return trace


@dataclass
class VideoDetections:
    """Ranked detections of one video in normalized time"""

    video_id: str
    results: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.results)

    def ranked(self) -> "VideoDetections":
        return VideoDetections(self.video_id, sorted(self.results, key=lambda r: -r.score))

    def to_predictions(self, duration: float) -> list[Prediction]:
        predictions = []
        for r in self.results:
            start, end = r.proposal.to_seconds(duration)
            predictions.append(Prediction(self.video_id, start, end, r.label, r.score))
        return predictions


def late_fuse(rgb: VideoDetections, flow: VideoDetections) -> VideoDetections:
    """Union of two streams' detections, ranked by fused score (stable)

    Raises:
        InvalidValueError: If the detections belong to different videos
    """
    if rgb.video_id != flow.video_id:
        raise InvalidValueError("cannot fuse {} with {}".format(rgb.video_id, flow.video_id))
    return VideoDetections(rgb.video_id, list(rgb.results) + list(flow.results)).ranked()


def suppress(detections: VideoDetections, iou_threshold: float) -> VideoDetections:
    """Per-class non-maximum suppression"""
    kept: list[DetectionResult] = []
    for label in sorted({r.label for r in detections.results}):
        group = [r for r in detections.results if r.label == label]
        keep = nms([r.proposal for r in group], [r.score for r in group], iou_threshold)
        kept.extend(group[i] for i in keep)
    return VideoDetections(detections.video_id, kept).ranked()


def detect_video(
    detector: StreamedDetector,
    features: dict,
    video_id: str,
    plan: SamplingPlan,
    sched: NoiseSchedule,
    seed: int,
    nms_threshold: Optional[float] = None,
) -> VideoDetections:
    """Run every stream of ``detector`` on one video and merge the detections

    All streams start from the same initial noise, drawn from a generator
    derived from ``seed`` and the video id.
    """
    scale = detector.config.scale
    per_stream = []
    for name, inputs in detector.stream_inputs(features).items():
        model = detector.streams[name]
        with torch.no_grad():
            cond = model.encode_video(inputs)
        generator = derive_generator(seed, "sample", video_id)
        trace = sample(model, cond, plan, sched, generator, scale)
        per_stream.append(VideoDetections(video_id, trace.final))
    detections = per_stream[0].ranked()
    for other in per_stream[1:]:
        detections = late_fuse(detections, other)
    if nms_threshold is not None:
        detections = suppress(detections, nms_threshold)
    return detections


def predict_dataset(
    detector: StreamedDetector,
    dataset: ActionDataset,
    config: RunConfig,
    plan: Optional[SamplingPlan] = None,
    video_ids: Optional[Sequence[str]] = None,
    progress: bool = False,
) -> list[Prediction]:
    """Detections for every video of ``dataset`` in seconds

    NMS is applied when ``config.sample.nms`` is set.
    """
    plan = plan or SamplingPlan.from_config(config.sample)
    sched = build_schedule(config.schedule.kind, config.schedule.total_steps, config.schedule.offset)
    nms_threshold = config.sample.nms_threshold if config.sample.nms else None
    detector.eval()
    predictions = []
    for video_id in tqdm(video_ids or dataset.video_ids, desc="sample", disable=not progress):
        features = dataset.video_features(video_id)
        detections = detect_video(detector, features, video_id, plan, sched, config.seed, nms_threshold)
        predictions.extend(detections.to_predictions(dataset.videos[video_id].duration))
    logger.info("sampled %d detections over %d videos", len(predictions), len(video_ids or dataset.video_ids))
    return predictions
