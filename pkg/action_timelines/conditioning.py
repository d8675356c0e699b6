import math
from dataclasses import dataclass
from typing import Optional

import torch

from .codec import QuerySet
from .exceptions import InvalidValueError, ShapeMismatchError
from .interval import segment_iou_matrix

__all__ = [
    "PairSelection",
    "ConditioningState",
    "similarity_matrix",
    "select_pairs",
    "refine_queries",
    "apply_training_rate",
    "condition_queries",
]


def similarity_matrix(current: torch.Tensor, previous: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between current queries and the previous step's queries

    Args:
        current (torch.Tensor): (N, D) embeddings of this step
        previous (torch.Tensor): (N, D) embeddings of the previous step

    Raises:
        ShapeMismatchError: If the counts differ

    Returns:
        torch.Tensor: A, (N, N) with entries in [-1, 1]; rows or columns of zero vectors give 0
    """
    if current.shape != previous.shape:
        raise ShapeMismatchError(
            "similarity needs equal shapes, got {} and {}".format(tuple(current.shape), tuple(previous.shape))
        )
    current_norm = current.norm(dim=-1, keepdim=True)
    previous_norm = previous.norm(dim=-1, keepdim=True)
    a = current / torch.where(current_norm > 0, current_norm, torch.ones_like(current_norm))
    b = previous / torch.where(previous_norm > 0, previous_norm, torch.ones_like(previous_norm))
    return (a @ b.transpose(-1, -2)).clamp(-1.0, 1.0)


@dataclass(frozen=True)
class PairSelection:
    """Pair sets of one selection round.

    ``mask[i, j]`` is True exactly for the pairs in ``selected``.
    """

    similar: frozenset
    overlapping: frozenset
    selected: frozenset
    mask: torch.Tensor


def _pairs(mask: torch.Tensor) -> frozenset:
    return frozenset((int(i), int(j)) for i, j in mask.nonzero().tolist())


def select_pairs(A: torch.Tensor, B: torch.Tensor, gamma: float, union_similar: bool = False) -> PairSelection:
    """Threshold similarity and IoU matrices into the conditioning pair set

    P_sim = {(i, j) | A[i, j] > γ} and P_iou = {(i, j) | B[i, j] > γ}. The
    selected set is (P_iou minus P_sim) plus every self pair (i, i). With
    ``union_similar`` the similar pairs are added back instead of removed.

    Args:
        A (torch.Tensor): (N, N) cosine similarities
        B (torch.Tensor): (N, N) IoU matrix
        gamma (float): Threshold in [-1, 1]
        union_similar (bool, optional): Use (P_iou ∪ P_sim) instead of the difference. Defaults to False.

    Raises:
        InvalidValueError: If gamma is outside [-1, 1]
        ShapeMismatchError: If A and B differ in shape

    Returns:
        PairSelection: The pair sets and the boolean selection mask
    """
    if not -1.0 <= gamma <= 1.0 or math.isnan(gamma):
        raise InvalidValueError("gamma must lie in [-1, 1], got {}".format(gamma))
    if A.shape != B.shape or A.dim() != 2 or A.shape[0] != A.shape[1]:
        raise ShapeMismatchError("A {} and B {} must be equal square matrices".format(tuple(A.shape), tuple(B.shape)))
    similar = A > gamma
    overlapping = B > gamma
    selected = (overlapping | similar) if union_similar else (overlapping & ~similar)
    selected = selected | torch.eye(A.shape[0], dtype=torch.bool, device=A.device)
    return PairSelection(_pairs(similar), _pairs(overlapping), _pairs(selected), selected)


def refine_queries(
    queries: torch.Tensor, selection: torch.Tensor, keys: torch.Tensor, values: torch.Tensor
) -> torch.Tensor:
    """Let every query attend over the entries its selected pairs point at

    For query i the attended set is {keys[j] / values[j] | (i, j) selected, j != i}
    plus the query itself for the self pair (i, i). Attention is scaled dot
    product with scale 1/√D.

    Args:
        queries (torch.Tensor): (N, D) current queries
        selection (torch.Tensor): (N, N) boolean mask, diagonal set
        keys (torch.Tensor): (N, D) keys the off-diagonal pairs resolve to
        values (torch.Tensor): (N, D) values the off-diagonal pairs resolve to

    Returns:
        torch.Tensor: (N, D) refined queries
    """
    n, dim = queries.shape
    if selection.shape != (n, n) or keys.shape != queries.shape or values.shape != queries.shape:
        raise ShapeMismatchError("refine_queries got mismatched shapes")
    eye = torch.eye(n, dtype=torch.bool, device=queries.device)
    selection = selection | eye

    cross = queries @ keys.transpose(0, 1)
    own = (queries * queries).sum(dim=-1)
    logits = torch.where(eye, own.unsqueeze(-1).expand(n, n), cross) / math.sqrt(dim)
    logits = logits.masked_fill(~selection, float("-inf"))
    weights = torch.softmax(logits, dim=-1)

    off_diagonal = weights.masked_fill(eye, 0.0)
    return off_diagonal @ values + torch.diagonal(weights).unsqueeze(-1) * queries


def apply_training_rate(count: int, rate: float, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Independent Bernoulli(rate) mask choosing which proposals get conditioned

    Args:
        count (int): Number of proposals
        rate (float): Probability in [0, 1]
        generator (torch.Generator, optional): Seeded generator of the run. Defaults to None.

    Raises:
        InvalidValueError: If rate is outside [0, 1]

    Returns:
        torch.Tensor: Boolean mask of length ``count``
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidValueError("conditioning rate must lie in [0, 1], got {}".format(rate))
    return torch.rand(count, generator=generator, dtype=torch.float64) < rate


@dataclass
class ConditioningState:
    """Everything one selective-conditioning round looked at"""

    reference: QuerySet
    similarity: torch.Tensor
    overlap: torch.Tensor
    gamma: float
    selection: PairSelection


def condition_queries(
    current: QuerySet,
    reference: QuerySet,
    scale: float,
    gamma: float,
    mask: Optional[torch.Tensor] = None,
    union_similar: bool = False,
) -> tuple[torch.Tensor, ConditioningState]:
    """Refine the current queries against the previous step's denoised references

    Args:
        current (QuerySet): Queries of this step (noisy proposals)
        reference (QuerySet): Queries of the previous step's denoised proposals
        scale (float): Signal scale used to decode both proposal sets
        gamma (float): Selection threshold
        mask (torch.Tensor, optional): Which queries are conditioned; all when None. Defaults to None.
        union_similar (bool, optional): See select_pairs. Defaults to False.

    Returns:
        tuple[torch.Tensor, ConditioningState]: Refined (N, D) embeddings and the round's state
    """
    A = similarity_matrix(current.embeddings, reference.embeddings)
    B = segment_iou_matrix(current.proposals(scale), reference.proposals(scale)).to(A.dtype)
    selection = select_pairs(A, B, gamma, union_similar)
    refined = refine_queries(current.embeddings, selection.mask, reference.embeddings, reference.embeddings)
    if mask is not None:
        refined = torch.where(mask.unsqueeze(-1), refined, current.embeddings)
    return refined, ConditioningState(reference, A, B, gamma, selection)
