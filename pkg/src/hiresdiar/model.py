"""The embedding model: strided conv backbone, self-attention enhancer, margin head.

The backbone compresses eight 10 ms feature frames into one feature-map
position (80 ms), with no pooling over time. The enhancer, a stack of five
self-attention blocks wrapped by a residual connection from its input to
its output, injects segment-wide context into every position; its final
projection is zero-initialized so an untrained enhancer is exactly the
identity. A frame-position classification head with additive angular
margin softmax (scale 30, margin 0.15) drives training and is removed for
inference.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

COMPRESSION = 8           # feature frames per embedding position
EMBEDDING_HOP_S = 0.080   # seconds per embedding position at a 10 ms frame hop
CHECKPOINT_SCHEMA = 1


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 64
    d_model: int = 128
    n_enhancer_blocks: int = 5
    n_heads: int = 4
    conv_expansion: int = 4
    n_classes: int | None = None

    def __post_init__(self):
        if self.d_model < 1 or self.n_mels < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_enhancer_blocks < 0:
            raise ValueError("enhancer block count must be >= 0")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class _ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        g = _norm_groups(channels)
        self.body = nn.Sequential(
            nn.Conv1d(channels, channels, 3, padding=1),
            nn.GroupNorm(g, channels),
            nn.ReLU(),
            nn.Conv1d(channels, channels, 3, padding=1),
            nn.GroupNorm(g, channels),
        )

    def forward(self, x):
        return F.relu(x + self.body(x))


def _down(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv1d(cin, cout, 5, stride=2, padding=2),
        nn.GroupNorm(_norm_groups(cout), cout),
        nn.ReLU(),
    )


class FeatureMapExtractor(nn.Module):
    """Convolutional backbone with three stride-2 stages (total stride 8).

    Input (B, T, n_mels) with T divisible by 8; output (B, T / 8, d_model).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.d_model
        w1, w2 = max(d // 2, 8), max(3 * d // 4, 8)
        self.stem = nn.Sequential(
            nn.Conv1d(config.n_mels, w1, 5, padding=2),
            nn.GroupNorm(_norm_groups(w1), w1),
            nn.ReLU(),
        )
        self.stages = nn.Sequential(
            _down(w1, w1), _ResBlock(w1),
            _down(w1, w2), _ResBlock(w2),
            _down(w2, d), _ResBlock(d),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 3:
            raise ValueError(f"expected (B, T, n_mels), got {tuple(frames.shape)}")
        if frames.shape[1] % COMPRESSION != 0:
            raise ValueError(
                f"frame count {frames.shape[1]} not divisible by {COMPRESSION}; "
                "pad the segment before extraction")
        h = self.stem(frames.transpose(1, 2))
        h = self.stages(h)
        return h.transpose(1, 2)


def sinusoidal_positions(n_positions: int, dim: int, device=None, dtype=None) -> torch.Tensor:
    """Fixed sinusoidal position encoding, shape (n_positions, dim)."""
    dtype = dtype or torch.float32
    pos = torch.arange(n_positions, device=device, dtype=dtype).unsqueeze(1)
    half = torch.arange(0, dim, 2, device=device, dtype=dtype)
    angles = pos * torch.exp(-math.log(10000.0) * half / dim)
    enc = torch.zeros(n_positions, dim, device=device, dtype=dtype)
    enc[:, 0::2] = torch.sin(angles)
    enc[:, 1::2] = torch.cos(angles[:, : dim // 2])
    return enc


class EnhancerBlock(nn.Module):
    """Pre-norm self-attention plus a pointwise-conv feed-forward (expansion 4)."""

    def __init__(self, d_model: int, n_heads: int, expansion: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(
            nn.Conv1d(d_model, expansion * d_model, 1),
            nn.SiLU(),
            nn.Conv1d(expansion * d_model, d_model, 1),
        )
        # Zero branches: a fresh block passes its input through unchanged.
        nn.init.zeros_(self.attn.out_proj.weight)
        nn.init.zeros_(self.attn.out_proj.bias)
        nn.init.zeros_(self.ff[2].weight)
        nn.init.zeros_(self.ff[2].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.ff(self.norm_ff(x).transpose(1, 2)).transpose(1, 2)
        return x


class Enhancer(nn.Module):
    """Five-block self-attention stack inside an input-to-output residual.

    The stack's zero-initialized output projection makes the whole module
    the identity before training.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            EnhancerBlock(config.d_model, config.n_heads, config.conv_expansion)
            for _ in range(config.n_enhancer_blocks))
        self.out_proj = nn.Linear(config.d_model, config.d_model)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x + sinusoidal_positions(x.shape[1], x.shape[2], x.device, x.dtype)
        for block in self.blocks:
            h = block(h)
        return x + self.out_proj(h)


class AamSoftmaxHead(nn.Module):
    """Additive-angular-margin softmax over cosine logits."""

    def __init__(self, d_model: int, n_classes: int, scale: float = 30.0, margin: float = 0.15):
        super().__init__()
        self.n_classes = n_classes
        self.scale = scale
        self.margin = margin
        self.weight = nn.Parameter(torch.empty(n_classes, d_model))
        nn.init.xavier_normal_(self.weight)

    def cosine_logits(self, embeddings: torch.Tensor) -> torch.Tensor:
        return F.linear(F.normalize(embeddings, dim=-1), F.normalize(self.weight, dim=-1))

    def forward(self, embeddings: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if labels.numel() and int(labels.max()) >= self.n_classes:
            raise ValueError(f"label {int(labels.max())} >= {self.n_classes} classes")
        cos = self.cosine_logits(embeddings)
        cos_m = math.cos(self.margin)
        sin_m = math.sin(self.margin)
        target = cos.gather(1, labels.view(-1, 1)).squeeze(1)
        sin_t = torch.sqrt(torch.clamp(1.0 - target * target, min=0.0))
        phi = target * cos_m - sin_t * sin_m
        # Past pi - margin the shifted cosine stops being monotone; fall back
        # to a linear penalty there.
        phi = torch.where(target > math.cos(math.pi - self.margin),
                          phi, target - self.margin * sin_m)
        logits = cos.clone()
        logits.scatter_(1, labels.view(-1, 1), phi.view(-1, 1))
        return F.cross_entropy(self.scale * logits, labels)


class TemporalStatsPooling(nn.Module):
    """Mean/std pooling over time: (B, T, d) -> (B, 2d)."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=1)
        std = torch.sqrt(x.var(dim=1, unbiased=False) + 1e-8)
        return torch.cat([mean, std], dim=-1)


class PooledSpeakerModel(nn.Module):
    """Stage-1 trainer: backbone + stats pooling + utterance-level speaker head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.n_classes is None:
            raise ValueError("pretraining requires n_classes")
        self.config = config
        self.backbone = FeatureMapExtractor(config)
        self.pooling = TemporalStatsPooling()
        self.projection = nn.Linear(2 * config.d_model, config.d_model)
        self.head = AamSoftmaxHead(config.d_model, config.n_classes)

    def embed_utterance(self, frames: torch.Tensor) -> torch.Tensor:
        return self.projection(self.pooling(self.backbone(frames)))

    def forward(self, frames: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed_utterance(frames), labels)


class HeeModel(nn.Module):
    """High-resolution extractor: backbone, optional enhancer, optional head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = FeatureMapExtractor(config)
        self.enhancer = Enhancer(config) if config.n_enhancer_blocks > 0 else None
        self.head = (AamSoftmaxHead(config.d_model, config.n_classes)
                     if config.n_classes is not None else None)

    def feature_map(self, frames: torch.Tensor) -> torch.Tensor:
        return self.backbone(frames)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        h = self.backbone(frames)
        if self.enhancer is not None:
            h = self.enhancer(h)
        return h

    @torch.no_grad()
    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings for inference, (B, T / 8, d_model)."""
        return F.normalize(self.forward(frames), dim=-1)


def strip_head(model: HeeModel) -> HeeModel:
    """Drop the classification head; embedding outputs are unchanged."""
    model.head = None
    object.__setattr__(model, "config",
                       ModelConfig(**{**asdict(model.config), "n_classes": None}))
    return model


def majority_vote_positions(frame_labels: np.ndarray, factor: int = COMPRESSION) -> np.ndarray:
    """Reduce per-frame labels to per-position labels by majority vote.

    Accepts (T,) or (B, T); positions straddling a change point take the
    majority speaker, ties breaking toward the smaller id.
    """
    labels = np.asarray(frame_labels)
    squeeze = labels.ndim == 1
    if squeeze:
        labels = labels[None, :]
    if labels.shape[1] % factor != 0:
        raise ValueError(f"frame count {labels.shape[1]} not divisible by {factor}")
    spans = labels.reshape(labels.shape[0], -1, factor)
    values = np.unique(spans)
    counts = np.stack([(spans == v).sum(axis=2) for v in values], axis=2)
    out = values[np.argmax(counts, axis=2)]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Checkpoints: self-describing containers with a schema version.
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: nn.Module, kind: str, extra: dict | None = None) -> None:
    """Atomically write a checkpoint; inference checkpoints exclude the head."""
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    if kind == "hee-inference":
        state = {k: v for k, v in state.items() if not k.startswith("head.")}
    config = asdict(model.config)
    if kind == "hee-inference":
        config["n_classes"] = None
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "model_config": config,
        "state_dict": state,
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise ValueError(f"{path} is not a model checkpoint")
    if payload["schema_version"] != CHECKPOINT_SCHEMA:
        raise ValueError(
            f"checkpoint schema {payload['schema_version']} unsupported "
            f"(expected {CHECKPOINT_SCHEMA})")
    return payload


def hee_from_checkpoint(payload: dict) -> HeeModel:
    if payload["kind"] not in ("hee-training", "hee-inference"):
        raise ValueError(f"checkpoint kind {payload['kind']!r} is not a HEE model")
    model = HeeModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def pooled_from_checkpoint(payload: dict) -> PooledSpeakerModel:
    if payload["kind"] != "backbone-pretrain":
        raise ValueError(f"checkpoint kind {payload['kind']!r} is not a pretrained backbone")
    model = PooledSpeakerModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
