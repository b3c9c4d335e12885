"""Dynamic-filter constraint head.

Pipeline: sentence matrix -> fully-convolutional word processing ->
(word attention | flatten) -> dynamic 1x1 filter generation -> depth-wise
cross-correlation with the search-image features -> linear -> sigmoid.
The ``with_attention=False`` ablation removes the word attention and feeds
the flattened processed sentence to the filter generator instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FEATURE_CHANNELS, FEATURE_SIZE
from .text_encoding import EMBED_DIM, SENTENCE_LEN


@dataclass(frozen=True)
class DfgConfig:
    sentence_len: int = SENTENCE_LEN
    embed_dim: int = EMBED_DIM
    feature_channels: int = FEATURE_CHANNELS
    feature_size: int = FEATURE_SIZE
    attention_hidden: int = 256
    with_attention: bool = True

    @property
    def processed_len(self) -> int:
        return self.sentence_len // 2

    @property
    def processed_dim(self) -> int:
        return self.embed_dim // 2


#: miniature dims used by the finite-difference gradient checks
DFG_MINI = DfgConfig(
    sentence_len=4, embed_dim=12, feature_channels=8, feature_size=5,
    attention_hidden=16,
)


class SentenceEncoderCnn(nn.Module):
    """1-D conv (kernel 3, padding 1) + ReLU + 2x2 max-pool over both axes.

    Maps (B, sentence_len, embed_dim) to (B, sentence_len/2, embed_dim/2);
    each output row mixes two adjacent word positions.
    """

    def __init__(self, cfg: DfgConfig):
        super().__init__()
        self.cfg = cfg
        self.conv = nn.Conv1d(cfg.embed_dim, cfg.embed_dim, kernel_size=3, padding=1)

    def forward(self, sentence: torch.Tensor) -> torch.Tensor:
        if sentence.shape[-2:] != (self.cfg.sentence_len, self.cfg.embed_dim):
            raise ValueError(
                f"expected sentence {self.cfg.sentence_len}x{self.cfg.embed_dim}, "
                f"got {tuple(sentence.shape[-2:])}"
            )
        x = F.relu(self.conv(sentence.transpose(-1, -2))).transpose(-1, -2)
        return F.max_pool2d(x.unsqueeze(1), kernel_size=2, stride=2).squeeze(1)


class WordAttention(nn.Module):
    """Image-conditioned word scoring.

    Per processed word row h_i, logit_i = w2 . relu(W1 [h_i ; g] + b1) where
    g is the globally pooled feature map projected to the sentence width;
    softmax over positions, then the weighted row sum.
    """

    def __init__(self, cfg: DfgConfig):
        super().__init__()
        self.cfg = cfg
        self.image_proj = nn.Linear(cfg.feature_channels, cfg.processed_dim)
        self.hidden = nn.Linear(2 * cfg.processed_dim, cfg.attention_hidden)
        self.score = nn.Linear(cfg.attention_hidden, 1)

    def forward(
        self, processed: torch.Tensor, features: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        g = self.image_proj(features.mean(dim=(-2, -1)))  # (B, processed_dim)
        g = g.unsqueeze(-2).expand(*processed.shape[:-1], g.shape[-1])
        logits = self.score(F.relu(self.hidden(torch.cat([processed, g], dim=-1))))
        weights = torch.softmax(logits.squeeze(-1), dim=-1)
        attended = (weights.unsqueeze(-1) * processed).sum(dim=-2)
        return attended, weights


class FilterGenerator(nn.Module):
    """Linear + tanh producing one 1x1 filter per feature channel."""

    def __init__(self, in_dim: int, feature_channels: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, feature_channels)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        if v.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"filter generator expects length {self.linear.in_features}, "
                f"got {v.shape[-1]}"
            )
        return torch.tanh(self.linear(v))


def cross_correlate(features: torch.Tensor, filters: torch.Tensor) -> torch.Tensor:
    """Depth-wise cross-correlation with 1x1 filters: per-channel scaling."""
    if features.shape[-3] != filters.shape[-1]:
        raise ValueError(
            f"channel mismatch: features {features.shape[-3]} vs filters {filters.shape[-1]}"
        )
    return features * filters.unsqueeze(-1).unsqueeze(-1)


class DynamicFilterHead(nn.Module):
    def __init__(self, cfg: DfgConfig = DfgConfig(), seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        self.sentence_cnn = SentenceEncoderCnn(cfg)
        self.attention = WordAttention(cfg) if cfg.with_attention else None
        filter_in = (
            cfg.processed_dim
            if cfg.with_attention
            else cfg.processed_dim * cfg.processed_len
        )
        self.filter_gen = FilterGenerator(filter_in, cfg.feature_channels)
        self.classifier = nn.Linear(cfg.feature_channels * cfg.feature_size ** 2, 1)
        nn.init.uniform_(self.classifier.weight, -1e-3, 1e-3)
        nn.init.zeros_(self.classifier.bias)

    def forward(
        self, sentence: torch.Tensor, features: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Returns (score in (0,1), word attention weights or None)."""
        squeeze = sentence.ndim == 2
        if squeeze:
            sentence = sentence.unsqueeze(0)
            features = features.unsqueeze(0)
        processed = self.sentence_cnn(sentence)
        if self.attention is not None:
            attended, weights = self.attention(processed, features)
        else:
            attended, weights = processed.flatten(-2), None
        filters = self.filter_gen(attended)
        activation = cross_correlate(features, filters)
        score = torch.sigmoid(self.classifier(activation.flatten(-3))).squeeze(-1)
        if squeeze:
            score = score.squeeze(0)
            weights = weights.squeeze(0) if weights is not None else None
        return score, weights
