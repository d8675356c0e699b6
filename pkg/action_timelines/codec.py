import math
from dataclasses import dataclass
from typing import Union

import torch
from torch import nn

from .exceptions import InvalidValueError, ShapeMismatchError
from .interval import TemporalProposal

__all__ = [
    "FREQUENCY_BASE",
    "POSITION_RESOLUTION",
    "QuerySet",
    "QueryProjection",
    "scale_signal",
    "unscale_signal",
    "to_proposals",
    "sinusoid",
    "sinusoidal_embed",
    "timestep_embedding",
    "project_queries",
]

FREQUENCY_BASE = 10000.0
# signal coordinates are multiplied by this before the sinusoids of queries and snippet positions
POSITION_RESOLUTION = 16.0


def _check_scale(scale: float) -> None:
    if not scale > 0:
        raise InvalidValueError("signal scale must be positive, got {}".format(scale))


def scale_signal(p: Union[TemporalProposal, torch.Tensor], scale: float) -> torch.Tensor:
    """Map normalized boundaries into diffusion signal space, x ↦ (2x − 1)·scale

    Args:
        p (TemporalProposal | torch.Tensor): A proposal or a (..., 2) tensor of boundaries
        scale (float): The signal scaling factor

    Returns:
        torch.Tensor: The signal-space pair(s)
    """
    _check_scale(scale)
    if isinstance(p, TemporalProposal):
        p = torch.tensor([p.start, p.end], dtype=torch.float64)
    return (p * 2.0 - 1.0) * scale


def unscale_signal(sp: torch.Tensor, scale: float) -> torch.Tensor:
    """Map signal-space pairs back to canonical normalized boundaries

    Each component becomes clamp((x/scale + 1)/2, 0, 1) and every pair is then
    ordered ascending.

    Args:
        sp (torch.Tensor): A (..., 2) tensor of signal-space pairs
        scale (float): The signal scaling factor

    Returns:
        torch.Tensor: (..., 2) canonical boundaries in [0, 1]
    """
    _check_scale(scale)
    unit = ((sp / scale + 1.0) / 2.0).clamp(0.0, 1.0)
    return torch.stack([unit.min(dim=-1).values, unit.max(dim=-1).values], dim=-1)


def to_proposals(boundaries: torch.Tensor) -> list[TemporalProposal]:
    """Turn an (N, 2) tensor of canonical boundaries into TemporalProposal objects"""
    return [TemporalProposal(float(s), float(e)) for s, e in boundaries.detach().reshape(-1, 2).tolist()]


def sinusoid(x: torch.Tensor, dim: int, base: float = FREQUENCY_BASE) -> torch.Tensor:
    """Interleaved sin/cos features of a scalar coordinate.

    Entry 2k is sin(2π·x·base^(−2k/dim)) and entry 2k+1 the matching cos.
    Odd ``dim`` drops the last cos.
    """
    n_freq = (dim + 1) // 2
    exponents = torch.arange(n_freq, dtype=x.dtype, device=x.device) * 2.0 / dim
    freqs = 2.0 * math.pi * base ** (-exponents)
    angles = x.unsqueeze(-1) * freqs
    features = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)
    return features[..., :dim]


def sinusoidal_embed(sp: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal projection of signal-space (start, end) pairs

    Args:
        sp (torch.Tensor): A (..., 2) tensor of signal-space pairs
        dim (int): Output width, even and at least 4; each coordinate gets dim/2 features

    Raises:
        InvalidValueError: If dim is odd or smaller than 4

    Returns:
        torch.Tensor: (..., dim) embedding with entries in [-1, 1]
    """
    if dim < 4 or dim % 2:
        raise InvalidValueError("embedding dim must be even and >= 4, got {}".format(dim))
    if sp.shape[-1] != 2:
        raise ShapeMismatchError("expected (..., 2) signal pairs, got {}".format(tuple(sp.shape)))
    half = dim // 2
    return torch.cat([sinusoid(sp[..., 0], half), sinusoid(sp[..., 1], half)], dim=-1)


def timestep_embedding(t: Union[int, torch.Tensor], dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of a diffusion timestep"""
    if not isinstance(t, torch.Tensor):
        t = torch.tensor(float(t))
    t = t.to(dtype)
    half = dim // 2
    freqs = torch.exp(-math.log(FREQUENCY_BASE) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    angles = t.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class QueryProjection(nn.Module):
    """g: sinusoidal projection followed by two affine layers with a GELU between"""

    def __init__(self, embed_dim: int, model_dim: int, resolution: float = POSITION_RESOLUTION) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.model_dim = model_dim
        self.resolution = resolution
        self.hidden = nn.Linear(embed_dim, model_dim)
        self.activation = nn.GELU()
        self.output = nn.Linear(model_dim, model_dim)

    def features(self, signals: torch.Tensor) -> torch.Tensor:
        """The sinusoidal input of the first layer"""
        return sinusoidal_embed(signals * self.resolution, self.embed_dim).to(self.hidden.weight.dtype)

    def forward(self, signals: torch.Tensor) -> torch.Tensor:
        return self.output(self.activation(self.hidden(self.features(signals))))


@dataclass
class QuerySet:
    """N query embeddings with the signal-space proposals they came from.

    ``timestep`` is the diffusion step the signals belong to.
    """

    embeddings: torch.Tensor
    signals: torch.Tensor
    timestep: int

    def __len__(self) -> int:
        return self.embeddings.shape[-2]

    def proposals(self, scale: float) -> torch.Tensor:
        """Canonical normalized boundaries of the underlying signals"""
        return unscale_signal(self.signals, scale)


def project_queries(signals: torch.Tensor, projection: QueryProjection, timestep: int = 0) -> QuerySet:
    """Project signal-space proposals into continuous query embeddings

    Args:
        signals (torch.Tensor): (..., N, 2) signal-space proposals
        projection (QueryProjection): The learnable projection g
        timestep (int, optional): The diffusion step of ``signals``. Defaults to 0.

    Raises:
        ShapeMismatchError: If the signals are not pairs

    Returns:
        QuerySet: Embeddings of width D with their source signals
    """
    if signals.shape[-1] != 2:
        raise ShapeMismatchError("expected (..., N, 2) signals, got {}".format(tuple(signals.shape)))
    return QuerySet(projection(signals), signals, int(timestep))
