import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import torch
from torch import nn

from .codec import (
    POSITION_RESOLUTION,
    QueryProjection,
    QuerySet,
    project_queries,
    sinusoid,
    timestep_embedding,
    unscale_signal,
)
from .exceptions import InvalidValueError, ShapeMismatchError
from .interval import TemporalProposal

__all__ = [
    "MODALITIES",
    "FUSION_MODES",
    "ModelConfig",
    "EncoderOutput",
    "VideoEncoder",
    "ProposalDecoder",
    "DetectionHeads",
    "HeadOutputs",
    "DetectionResult",
    "DenoiserModel",
    "StreamedDetector",
    "fuse_scores",
    "temporal_position_encoding",
]

logger = logging.getLogger(__name__)

MODALITIES = ("rgb", "flow")
FUSION_MODES = ("late", "early", "rgb", "flow")


@dataclass
class ModelConfig:
    """Sizes of the denoiser. ``scale`` is the signal scaling factor the heads decode with."""

    feat_dim: int = 32
    model_dim: int = 64
    query_embed_dim: int = 64
    ffn_dim: int = 128
    n_layers: int = 2
    n_heads: int = 2
    n_scales: int = 3
    num_classes: int = 4
    scale: float = 0.5
    fusion: str = "rgb"

    def validate(self) -> None:
        for name in ("feat_dim", "model_dim", "ffn_dim", "n_layers", "n_heads", "n_scales", "num_classes"):
            if getattr(self, name) < 1:
                raise InvalidValueError("model.{} must be positive".format(name))
        if self.model_dim % self.n_heads:
            raise InvalidValueError("model_dim {} not divisible by n_heads {}".format(self.model_dim, self.n_heads))
        if self.query_embed_dim < 4 or self.query_embed_dim % 2:
            raise InvalidValueError("query_embed_dim must be even and >= 4")
        if not self.scale > 0:
            raise InvalidValueError("scale must be positive")
        if self.fusion not in FUSION_MODES:
            raise InvalidValueError("fusion must be one of {}, got {!r}".format(FUSION_MODES, self.fusion))


def fuse_scores(p_bc, p_c):
    """Final proposal score: the plain average of classification and completeness scores

    Args:
        p_bc (float | torch.Tensor): Best foreground class probability
        p_c (float | torch.Tensor): Completeness score

    Raises:
        InvalidValueError: If either input lies outside [0, 1]

    Returns:
        float | torch.Tensor: The fused score p_sc
    """
    for name, value in (("p_bc", p_bc), ("p_c", p_c)):
        tensor = torch.as_tensor(value)
        outside = bool((tensor < 0).any()) or bool((tensor > 1).any()) or not bool(tensor.isfinite().all())
        if tensor.numel() and outside:
            raise InvalidValueError("{} must lie in [0, 1]".format(name))
    return (p_bc + p_c) / 2


def temporal_position_encoding(
    length: int, dim: int, scale: float, dtype: torch.dtype = torch.float32, resolution: float = POSITION_RESOLUTION
) -> torch.Tensor:
    """Sinusoidal encoding of snippet centres, expressed in the same signal space as the queries"""
    centres = (torch.arange(length, dtype=dtype) + 0.5) / length
    return sinusoid((centres * 2.0 - 1.0) * scale * resolution, dim)


@dataclass
class EncoderOutput:
    """Per-scale global features concatenated along time.

    ``bounds`` holds the (start, stop) row range of every scale.
    """

    features: torch.Tensor
    bounds: list = field(default_factory=list)

    @property
    def num_scales(self) -> int:
        return len(self.bounds)

    def scale_features(self, level: int) -> torch.Tensor:
        start, stop = self.bounds[level]
        return self.features[..., start:stop, :]


class AttentionBlock(nn.Module):
    """Post-norm self-attention + feed-forward block"""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.attention = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attention(x, x, x, need_weights=False)[0])
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    """Query self-attention, cross-attention to the video features, then feed-forward"""

    def __init__(self, dim: int, n_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.self_attention = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attention = nn.MultiheadAttention(dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.self_attention(x, x, x, need_weights=False)[0])
        x = self.norm2(x + self.cross_attention(x, memory, memory, need_weights=False)[0])
        return self.norm3(x + self.ffn(x))


class VideoEncoder(nn.Module):
    """Multi-scale convolution stems followed by one shared self-attention block.

    Scale 0 keeps the snippet resolution; every further scale halves it with a
    stride-2 convolution over the previous one.
    """

    def __init__(self, feat_dim: int, model_dim: int, n_scales: int, n_heads: int, ffn_dim: int, scale: float) -> None:
        super().__init__()
        self.feat_dim = feat_dim
        self.model_dim = model_dim
        self.scale = scale
        self.stems = nn.ModuleList(
            [
                nn.Conv1d(feat_dim if level == 0 else model_dim, model_dim, 3, stride=1 if level == 0 else 2, padding=1)
                for level in range(n_scales)
            ]
        )
        self.activation = nn.GELU()
        self.block = AttentionBlock(model_dim, n_heads, ffn_dim)

    def forward(self, features: torch.Tensor) -> EncoderOutput:
        if features.dim() == 2:
            features = features.unsqueeze(0)
        if features.shape[-2] < 1:
            raise ShapeMismatchError("cannot encode a video with no snippets")
        if features.shape[-1] != self.feat_dim:
            raise ShapeMismatchError("expected feature dim {}, got {}".format(self.feat_dim, features.shape[-1]))

        hidden = features.to(self.stems[0].weight.dtype).transpose(1, 2)
        outputs = []
        bounds = []
        offset = 0
        for stem in self.stems:
            hidden = self.activation(stem(hidden))
            seq = hidden.transpose(1, 2)
            length = seq.shape[1]
            seq = seq + temporal_position_encoding(length, self.model_dim, self.scale, seq.dtype)
            outputs.append(self.block(seq))
            bounds.append((offset, offset + length))
            offset += length
        return EncoderOutput(torch.cat(outputs, dim=1), bounds)


class ProposalDecoder(nn.Module):
    """Conditions queries on the timestep and an optional prior estimate, then
    runs ``n_layers`` decoder layers against the encoder features."""

    def __init__(self, model_dim: int, n_layers: int, n_heads: int, ffn_dim: int) -> None:
        super().__init__()
        self.model_dim = model_dim
        self.time_mlp = nn.Linear(model_dim, model_dim)
        # bias-free so that a zero estimate adds an exact zero vector
        self.self_condition = nn.Linear(2, model_dim, bias=False)
        self.layers = nn.ModuleList([DecoderLayer(model_dim, n_heads, ffn_dim) for _ in range(n_layers)])

    def forward(
        self,
        queries: torch.Tensor,
        memory: torch.Tensor,
        t: Union[int, torch.Tensor],
        self_cond: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if queries.shape[-1] != self.model_dim:
            raise ShapeMismatchError("query width {} != model width {}".format(queries.shape[-1], self.model_dim))
        squeeze = queries.dim() == 2
        if squeeze:
            queries = queries.unsqueeze(0)
            if self_cond is not None:
                self_cond = self_cond.unsqueeze(0)
        if memory.dim() == 2:
            memory = memory.unsqueeze(0)

        time = self.time_mlp(timestep_embedding(t, self.model_dim, queries.dtype))
        if time.dim() == 1:
            time = time.unsqueeze(0)
        x = queries + time.unsqueeze(1)
        if self_cond is not None:
            x = x + self.self_condition(self_cond.to(queries.dtype))
        for layer in self.layers:
            x = layer(x, memory)
        return x.squeeze(0) if squeeze else x


@dataclass
class HeadOutputs:
    """Raw outputs of the three heads for a set of queries.

    ``signals`` are the predicted clean (start, end) pairs in signal space.
    """

    class_logits: torch.Tensor
    signals: torch.Tensor
    predicted_iou: torch.Tensor
    completeness: torch.Tensor
    scale: float

    @property
    def class_probs(self) -> torch.Tensor:
        return torch.softmax(self.class_logits, dim=-1)

    @property
    def boundaries(self) -> torch.Tensor:
        """Predicted boundaries decoded to canonical normalized time"""
        return unscale_signal(self.signals, self.scale)

    @property
    def foreground_scores(self) -> torch.Tensor:
        """The best non-background class probability"""
        return self.class_probs[..., :-1].max(dim=-1).values

    @property
    def scores(self) -> torch.Tensor:
        return fuse_scores(self.foreground_scores, self.completeness)

    def results(self) -> list["DetectionResult"]:
        """Per-query detection results for a single video (outputs must be 2-D)"""
        probs = self.class_probs.detach()
        boundaries = self.boundaries.detach()
        if probs.dim() != 2:
            raise ShapeMismatchError("results() expects outputs of one video, got {}".format(tuple(probs.shape)))
        results = []
        for i in range(probs.shape[0]):
            row = probs[i].tolist()
            foreground = row[:-1]
            p_bc = max(foreground)
            p_c = float(self.completeness[i])
            results.append(
                DetectionResult(
                    proposal=TemporalProposal(float(boundaries[i, 0]), float(boundaries[i, 1])),
                    class_distribution=tuple(row),
                    predicted_iou=float(self.predicted_iou[i]),
                    completeness=p_c,
                    score=fuse_scores(p_bc, p_c),
                    label=foreground.index(p_bc),
                )
            )
        return results


@dataclass(frozen=True)
class DetectionResult:
    """One decoded detection: proposal, class distribution over C+1 and its scores"""

    proposal: TemporalProposal
    class_distribution: tuple
    predicted_iou: float
    completeness: float
    score: float
    label: int

    @property
    def background_probability(self) -> float:
        return self.class_distribution[-1]


class DetectionHeads(nn.Module):
    """Classification (C + background), localization (start, end, IoU) and completeness"""

    def __init__(self, model_dim: int, num_classes: int, scale: float) -> None:
        super().__init__()
        self.num_classes = num_classes
        self.scale = scale
        self.classifier = nn.Linear(model_dim, num_classes + 1)
        self.localizer = nn.Linear(model_dim, 3)
        self.completeness = nn.Linear(model_dim, 1)

    def forward(self, decoded: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> HeadOutputs:
        """With ``anchors`` the (start, end) outputs are offsets added to the query's own signals"""
        loc = self.localizer(decoded)
        signals = loc[..., :2]
        if anchors is not None:
            if anchors.shape != signals.shape:
                shapes = (tuple(anchors.shape), tuple(signals.shape))
                raise ShapeMismatchError("anchors {} for outputs {}".format(*shapes))
            signals = anchors.to(signals.dtype) + signals
        return HeadOutputs(
            class_logits=self.classifier(decoded),
            signals=signals,
            predicted_iou=torch.sigmoid(loc[..., 2]),
            completeness=torch.sigmoid(self.completeness(decoded)[..., 0]),
            scale=self.scale,
        )


class DenoiserModel(nn.Module):
    """Video encoder, query projection, decoder and the three heads for one feature stream"""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.projection = QueryProjection(config.query_embed_dim, config.model_dim)
        self.encoder = VideoEncoder(
            config.feat_dim, config.model_dim, config.n_scales, config.n_heads, config.ffn_dim, config.scale
        )
        self.decoder = ProposalDecoder(config.model_dim, config.n_layers, config.n_heads, config.ffn_dim)
        self.heads = DetectionHeads(config.model_dim, config.num_classes, config.scale)

    def encode_video(self, features: torch.Tensor) -> EncoderOutput:
        """Run the encoder once per video; the result conditions every denoising step"""
        return self.encoder(features)

    def project_queries(self, signals: torch.Tensor, timestep: int = 0) -> QuerySet:
        return project_queries(signals, self.projection, timestep)

    def decode(
        self,
        queries: torch.Tensor,
        cond: EncoderOutput,
        t: Union[int, torch.Tensor],
        self_cond: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Denoise query embeddings into per-query features F_d

        Args:
            queries (torch.Tensor): (N, D) or (B, N, D) query embeddings
            cond (EncoderOutput): The encoded video
            t (int | torch.Tensor): Timestep of the queries
            self_cond (torch.Tensor, optional): Prior clean-signal estimate, (…, N, 2). Defaults to None.

        Returns:
            torch.Tensor: F_d, shaped like ``queries``
        """
        if queries.shape[-2] == 0:
            raise ShapeMismatchError("decode needs at least one query")
        return self.decoder(queries, cond.features, t, self_cond)

    def apply_heads(self, decoded: torch.Tensor, anchors: Optional[torch.Tensor] = None) -> HeadOutputs:
        """Run the three heads; ``anchors`` are the signals the queries were projected from"""
        return self.heads(decoded, anchors)

    def forward(
        self,
        signals: torch.Tensor,
        cond: EncoderOutput,
        t: Union[int, torch.Tensor],
        self_cond: Optional[torch.Tensor] = None,
    ) -> HeadOutputs:
        queries = self.project_queries(signals)
        return self.apply_heads(self.decode(queries.embeddings, cond, t, self_cond), queries.signals)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameters split into encoder, decoder, heads, projection and timestep groups"""
        groups = {"encoder": [], "decoder": [], "heads": [], "projection": [], "timestep": []}
        for name, param in self.named_parameters():
            if name.startswith("decoder.time_mlp"):
                groups["timestep"].append((name, param))
            else:
                groups[name.split(".")[0]].append((name, param))
        return groups


class StreamedDetector(nn.Module):
    """One denoiser per feature stream.

    ``late`` keeps independent rgb and flow models whose detections are merged
    afterwards; ``early`` feeds one model the two modalities concatenated
    feature-wise; ``rgb`` and ``flow`` use a single modality.
    """

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        config.validate()
        self.config = config
        self.fusion = config.fusion
        if config.fusion == "late":
            self.streams = nn.ModuleDict({m: DenoiserModel(config) for m in MODALITIES})
        elif config.fusion == "early":
            early = ModelConfig(**{**config.__dict__, "feat_dim": config.feat_dim * 2})
            self.streams = nn.ModuleDict({"early": DenoiserModel(early)})
        else:
            self.streams = nn.ModuleDict({config.fusion: DenoiserModel(config)})

    @staticmethod
    def initialize(config: ModelConfig, seed: int) -> "StreamedDetector":
        """Build a detector whose initial parameters depend only on ``seed``"""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return StreamedDetector(config)

    def stream_inputs(self, features: dict) -> dict[str, torch.Tensor]:
        """Select (or concatenate) the modality matrices each stream consumes

        Args:
            features (dict): modality name -> (T, feat_dim) tensor

        Returns:
            dict[str, torch.Tensor]: stream name -> input matrix
        """
        missing = [m for m in self.required_modalities() if m not in features]
        if missing:
            raise ShapeMismatchError("missing modalities {}".format(missing))
        if self.fusion == "early":
            return {"early": torch.cat([features["rgb"], features["flow"]], dim=-1)}
        return {name: features[name] for name in self.streams}

    def required_modalities(self) -> tuple:
        if self.fusion in ("late", "early"):
            return MODALITIES
        return (self.fusion,)

    def stream_names(self) -> list[str]:
        return list(self.streams.keys())
