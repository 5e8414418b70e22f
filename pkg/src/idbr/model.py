"""Encoder, generic/specific extractors and the three prediction heads."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .corpus import PAD, SEP


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_tasks: int
    n_classes: int
    embed_dim: int = 64
    hidden_dim: int = 128
    repr_dim: int = 128  # d, width of r
    feature_dim: int = 128  # width of g and of s
    seed: int = 0
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class MeanPoolEncoder(nn.Module):
    """Token embeddings, segment-wise mean pooling, 2-layer tanh MLP.

    The two segments on either side of ``[SEP]`` are pooled separately and
    concatenated, so segment order is visible to the MLP. An input without a
    separator is pooled as a whole into both halves.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.embed_dim, padding_idx=PAD)
        self.mlp = nn.Sequential(
            nn.Linear(2 * cfg.embed_dim, cfg.hidden_dim),
            nn.Tanh(),
            nn.Linear(cfg.hidden_dim, cfg.repr_dim),
            nn.Tanh(),
        )

    def pool(self, tokens: torch.Tensor) -> torch.Tensor:
        emb = self.embed(tokens)
        is_sep = tokens == SEP
        valid = (tokens != PAD) & ~is_sep
        if not bool(valid.any(dim=1).all()):
            raise ValueError("empty token sequence")
        after = torch.cumsum(is_sep.long(), dim=1) > 0
        has_sep = is_sep.any(dim=1, keepdim=True)
        seg_a = torch.where(has_sep, valid & ~after, valid)
        seg_b = torch.where(has_sep, valid & after, valid)
        return torch.cat([_masked_mean(emb, seg_a), _masked_mean(emb, seg_b)], dim=-1)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.pool(tokens))


def _masked_mean(emb, mask):
    mask = mask.to(emb.dtype).unsqueeze(-1)
    return (emb * mask).sum(1) / mask.sum(1).clamp(min=1.0)


class DisentangledClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig, encoder: nn.Module | None = None):
        super().__init__()
        self.config = cfg
        self.encoder = encoder if encoder is not None else MeanPoolEncoder(cfg)
        self.generic = nn.Sequential(nn.Linear(cfg.repr_dim, cfg.feature_dim), nn.Tanh())
        self.specific = nn.Sequential(nn.Linear(cfg.repr_dim, cfg.feature_dim), nn.Tanh())
        self.nsp_head = nn.Linear(cfg.feature_dim, 2)
        self.task_head = nn.Linear(cfg.feature_dim, cfg.n_tasks)
        self.cls_head = nn.Linear(2 * cfg.feature_dim, cfg.n_classes)

    def features(self, tokens: torch.Tensor):
        r = self.encoder(tokens)
        return r, self.generic(r), self.specific(r)

    def class_logits(self, g, s):
        return self.cls_head(torch.cat([g, s], dim=-1))


def build_model(cfg: ModelConfig) -> DisentangledClassifier:
    # seeded init without touching the caller's global RNG
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return DisentangledClassifier(cfg).to(getattr(torch, cfg.dtype))


def _check_dim(x: torch.Tensor, expected: int, what: str):
    if x.shape[-1] != expected:
        raise ValueError(f"{what}: expected last dimension {expected}, got {x.shape[-1]}")


def encode(model: DisentangledClassifier, tokens: torch.Tensor) -> torch.Tensor:
    if tokens.ndim == 1:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[-1] == 0:
        raise ValueError("empty token sequence")
    return model.encoder(tokens)


def extract(model: DisentangledClassifier, r: torch.Tensor):
    _check_dim(r, model.config.repr_dim, "encoder output")
    return model.generic(r), model.specific(r)


def predict_class(model: DisentangledClassifier, g, s, mask: torch.Tensor | None = None):
    """Class distribution from ``g ∘ s``; ``mask`` (bool, per class) restricts the support."""
    _check_dim(g, model.config.feature_dim, "generic features")
    _check_dim(s, model.config.feature_dim, "specific features")
    logits = model.class_logits(g, s)
    if mask is not None:
        logits = logits.masked_fill(~mask, float("-inf"))
    return torch.softmax(logits, dim=-1)


def predict_nsp(model: DisentangledClassifier, g):
    _check_dim(g, model.config.feature_dim, "generic features")
    return torch.softmax(model.nsp_head(g), dim=-1)


def predict_task(model: DisentangledClassifier, s):
    _check_dim(s, model.config.feature_dim, "specific features")
    return torch.softmax(model.task_head(s), dim=-1)


def clone_frozen(model: DisentangledClassifier) -> DisentangledClassifier:
    frozen = copy.deepcopy(model)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    return frozen


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
