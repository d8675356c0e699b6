import math
from typing import Sequence, Union

import torch

from .exceptions import InvalidValueError, ShapeMismatchError

__all__ = [
    "TemporalProposal",
    "segment_iou",
    "iou",
    "pairwise_iou",
    "segment_iou_matrix",
    "paired_iou",
    "canonicalize",
    "nms",
    "collision_sort",
]


class TemporalProposal:
    """One candidate action interval in normalized time.

    Like a timeline period, a proposal given with its end before its start is
    stored the other way round, so ``start <= end`` always holds.
    """

    start: float
    end: float

    def __init__(self, start: float, end: float) -> None:
        start = float(start)
        end = float(end)
        if not (math.isfinite(start) and math.isfinite(end)):
            raise InvalidValueError("proposal bounds must be finite, got ({}, {})".format(start, end))
        self.start = start
        self.end = end
        if end < start:
            self.start = end
            self.end = start

    def __str__(self) -> str:
        return "[{:.4f}, {:.4f}]".format(self.start, self.end)

    def __repr__(self) -> str:
        return "TemporalProposal({!r}, {!r})".format(self.start, self.end)

    def __iter__(self):
        yield self.start
        yield self.end

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TemporalProposal):
            return NotImplemented
        return self.start == other.start and self.end == other.end

    def __hash__(self) -> int:
        return hash((self.start, self.end))

    def __lt__(self, other: "TemporalProposal") -> bool:
        return (self.start, self.end) < (other.start, other.end)

    @property
    def width(self) -> float:
        return self.end - self.start

    @property
    def center(self) -> float:
        return (self.start + self.end) / 2

    def is_degenerate(self) -> bool:
        """Whether the proposal is a single point in time (zero width)"""
        return self.width == 0.0

    def to_seconds(self, duration: float) -> tuple:
        """Convert the normalized proposal into seconds

        Args:
            duration (float): The video duration in seconds

        Returns:
            tuple: (start, end) in seconds
        """
        return (self.start * duration, self.end * duration)

    @staticmethod
    def from_seconds(start: float, end: float, duration: float) -> "TemporalProposal":
        """Build a normalized proposal from an interval in seconds

        Args:
            start (float): Start time in seconds
            end (float): End time in seconds
            duration (float): The video duration in seconds

        Returns:
            TemporalProposal: The canonical normalized proposal
        """
        if duration <= 0:
            raise InvalidValueError("duration must be positive, got {}".format(duration))
        return canonicalize((start / duration, end / duration))


def canonicalize(pair: Sequence[float]) -> TemporalProposal:
    """Sort a raw (start, end) pair ascending and clamp it into [0, 1]

    Args:
        pair (Sequence[float]): A raw pair, possibly reversed or out of range

    Raises:
        InvalidValueError: If either component is NaN or infinite

    Returns:
        TemporalProposal: The canonical proposal
    """
    a, b = (float(v) for v in pair)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidValueError("cannot canonicalize non-finite pair ({}, {})".format(a, b))
    low, high = (a, b) if a <= b else (b, a)
    return TemporalProposal(min(max(low, 0.0), 1.0), min(max(high, 0.0), 1.0))


def segment_iou(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    """IoU of two ordered intervals on any time axis.

    A zero-length union gives 0, so two coincident points do not match.
    """
    inter = max(0.0, min(a_end, b_end) - max(a_start, b_start))
    union = (a_end - a_start) + (b_end - b_start) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou(a: TemporalProposal, b: TemporalProposal) -> float:
    """Intersection over union of two canonical proposals

    Args:
        a (TemporalProposal): First proposal
        b (TemporalProposal): Second proposal

    Returns:
        float: The IoU in [0, 1]
    """
    return segment_iou(a.start, a.end, b.start, b.end)


def _as_tensor(segments: Union[torch.Tensor, Sequence[TemporalProposal]]) -> torch.Tensor:
    if isinstance(segments, torch.Tensor):
        return segments
    if len(segments) == 0:
        return torch.zeros((0, 2), dtype=torch.float64)
    return torch.tensor([[p.start, p.end] for p in segments], dtype=torch.float64)


def segment_iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between two stacks of ordered segments.

    ``a`` is (N, 2) and ``b`` is (M, 2); the result is (N, M). Differentiable
    almost everywhere, which the assignment cost and the loss rely on.
    """
    a_start, a_end = a[:, 0:1], a[:, 1:2]
    b_start, b_end = b[:, 0].unsqueeze(0), b[:, 1].unsqueeze(0)
    inter = (torch.minimum(a_end, b_end) - torch.maximum(a_start, b_start)).clamp(min=0)
    union = (a_end - a_start) + (b_end - b_start) - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


def paired_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Element-wise IoU of two (N, 2) stacks of ordered segments"""
    if a.shape != b.shape:
        raise ShapeMismatchError("paired_iou needs equal shapes, got {} and {}".format(tuple(a.shape), tuple(b.shape)))
    inter = (torch.minimum(a[..., 1], b[..., 1]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    safe = torch.where(union > 0, union, torch.ones_like(union))
    return torch.where(union > 0, inter / safe, torch.zeros_like(inter))


def pairwise_iou(
    xs: Union[torch.Tensor, Sequence[TemporalProposal]], ys: Union[torch.Tensor, Sequence[TemporalProposal]]
) -> torch.Tensor:
    """IoU matrix between two proposal sequences

    Args:
        xs: Proposals (or an (N, 2) tensor of canonical segments)
        ys: Proposals (or an (M, 2) tensor of canonical segments)

    Returns:
        torch.Tensor: An (N, M) matrix whose entry (i, j) is iou(xs[i], ys[j])
    """
    return segment_iou_matrix(_as_tensor(xs), _as_tensor(ys))


def nms(proposals: Sequence[TemporalProposal], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Proposals are visited by descending score (ties: lower index first). A
    proposal is suppressed when its IoU with an already kept one exceeds
    ``iou_threshold``; pairs with IoU equal to the threshold are both kept.

    Args:
        proposals (Sequence[TemporalProposal]): Candidate proposals
        scores (Sequence[float]): One finite score per proposal
        iou_threshold (float): Suppression threshold

    Raises:
        ShapeMismatchError: If the two sequences differ in length
        InvalidValueError: If a score is not finite

    Returns:
        list[int]: Kept indices in descending score order
    """
    if len(proposals) != len(scores):
        raise ShapeMismatchError("{} proposals but {} scores".format(len(proposals), len(scores)))
    scores = [float(s) for s in scores]
    if not all(math.isfinite(s) for s in scores):
        raise InvalidValueError("nms scores must be finite")

    order = sorted(range(len(proposals)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou(proposals[i], proposals[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def collision_sort(proposals: Sequence[TemporalProposal]) -> list[list[int]]:
    """Pack proposals into lanes such that no two proposals in a lane overlap

    Proposals are placed in start order into the first lane whose last
    proposal ends before they start.

    Args:
        proposals (Sequence[TemporalProposal]): The proposals to pack

    Returns:
        list[list[int]]: Lanes of proposal indices
    """
    lanes = []
    for i in sorted(range(len(proposals)), key=lambda i: (proposals[i].start, proposals[i].end, i)):
        placed = False
        for lane in lanes:
            if proposals[i].start > proposals[lane[-1]].end:
                lane.append(i)
                placed = True
                break
        if not placed:
            lanes.append([i])
    return lanes
