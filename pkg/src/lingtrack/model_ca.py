"""Co-attention constraint head.

Pipeline: sentence matrix -> linear expansion to the model width ->
self-attention encoder stack; search-image features -> (optional pyramid
pooling) -> two-stage spatial reduction -> guided-attention stack queried
by image positions over the encoded sentence; both streams are then
attention-reduced to single vectors, summed, and projected to a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import FEATURE_CHANNELS, FEATURE_SIZE
from .text_encoding import EMBED_DIM, SENTENCE_LEN


@dataclass(frozen=True)
class CaHyperparams:
    num_layers: int = 3
    hidden: int = 768
    head_dim: int = 128
    heads: int = 6
    dropout: float = 0.1
    feed_forward: int = 512
    reduction_output: int = 1024
    sentence_len: int = SENTENCE_LEN
    embed_dim: int = EMBED_DIM
    feature_channels: int = FEATURE_CHANNELS
    feature_size: int = FEATURE_SIZE
    conv_groups: int = 8
    use_ppm: bool = False
    ppm_scales: tuple[int, ...] = (1, 2, 3, 6)
    mask_padding: bool = True

    def __post_init__(self) -> None:
        if self.hidden != self.heads * self.head_dim:
            raise ValueError(
                f"hidden size {self.hidden} must equal heads*head_dim "
                f"= {self.heads}x{self.head_dim}"
            )
        if self.use_ppm:
            extra = self.hidden - self.feature_channels
            if extra <= 0 or extra % len(self.ppm_scales):
                raise ValueError(
                    "hidden size minus feature channels must split evenly "
                    "over the pyramid scales"
                )


CA_DEFAULT = CaHyperparams()
CA_PPM_DEFAULT = CaHyperparams(hidden=1024, heads=8, use_ppm=True)

#: miniature dims used by the finite-difference gradient checks
CA_MINI = CaHyperparams(
    num_layers=1, hidden=8, head_dim=4, heads=2, dropout=0.0, feed_forward=16,
    reduction_output=8, sentence_len=4, embed_dim=12, feature_channels=8,
    feature_size=5, conv_groups=1,
)


@dataclass
class AttentionMaps:
    """All attention distributions of one forward pass.

    Each entry is a (batch, heads, queries, keys) tensor whose rows sum
    to 1.  ``sa`` attends the sentence over itself, ``sga_self`` the image
    over itself, ``sga_guided`` the image over the sentence.
    """

    sa: list[torch.Tensor] = field(default_factory=list)
    sga_self: list[torch.Tensor] = field(default_factory=list)
    sga_guided: list[torch.Tensor] = field(default_factory=list)


class MultiHeadAttention(nn.Module):
    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        d = cfg.hidden
        self.heads = cfg.heads
        self.head_dim = cfg.head_dim
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.merge = nn.Linear(d, d)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, query, key, value, key_mask=None):
        b, lq, _ = query.shape
        lk = key.shape[1]

        def split(x, proj):
            return proj(x).view(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(query, self.q_proj), split(key, self.k_proj), split(value, self.v_proj)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask.view(b, 1, 1, lk), float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = self.dropout(attn) @ v
        out = out.transpose(1, 2).reshape(b, lq, -1)
        return self.merge(out), attn


class FeedForward(nn.Module):
    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.feed_forward),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.feed_forward, cfg.hidden),
        )

    def forward(self, x):
        return self.net(x)


class SelfAttentionLayer(nn.Module):
    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg)
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask=None):
        attended, maps = self.attn(x, x, x, key_mask=mask)
        x = self.norm1(x + self.dropout(attended))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, maps


class GuidedAttentionLayer(nn.Module):
    """Image stream self-attends, then attends over the encoded sentence."""

    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg)
        self.guided_attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg)
        self.norm1 = nn.LayerNorm(cfg.hidden)
        self.norm2 = nn.LayerNorm(cfg.hidden)
        self.norm3 = nn.LayerNorm(cfg.hidden)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, guide, guide_mask=None):
        attended, self_maps = self.self_attn(x, x, x)
        x = self.norm1(x + self.dropout(attended))
        attended, guided_maps = self.guided_attn(x, guide, guide, key_mask=guide_mask)
        x = self.norm2(x + self.dropout(attended))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x, self_maps, guided_maps


class PyramidPooling(nn.Module):
    """Appends globally pooled, per-scale projected channels onto the map.

    The original channels pass through untouched; each scale contributes
    an equal share of the extra channels.
    """

    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        self.scales = cfg.ppm_scales
        self.feature_size = cfg.feature_size
        extra = (cfg.hidden - cfg.feature_channels) // len(cfg.ppm_scales)
        self.projections = nn.ModuleList(
            nn.Conv2d(cfg.feature_channels, extra, kernel_size=1)
            for _ in cfg.ppm_scales
        )

    def forward(self, x):
        size = x.shape[-1]
        outs = [x]
        for scale, proj in zip(self.scales, self.projections):
            if scale > size:
                raise ValueError(f"pyramid scale {scale} exceeds map size {size}")
            pooled = proj(F.adaptive_avg_pool2d(x, scale))
            outs.append(F.interpolate(pooled, size=(size, size), mode="nearest"))
        return torch.cat(outs, dim=-3)


class ImageReducer(nn.Module):
    """Two-stage reduction of the image positions.

    Stage 1 halves the spatial grid (conv + ReLU + 2x2 max-pool); stage 2
    flattens it to a sequence and pools it 3x down with a grouped 1-D conv.
    """

    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        d = cfg.hidden
        self.conv2d = nn.Conv2d(d, d, kernel_size=3, padding=1)
        self.conv1d = nn.Conv1d(d, d, kernel_size=3, padding=1, groups=cfg.conv_groups)

    def stage1(self, x):
        return F.max_pool2d(F.relu(self.conv2d(x)), kernel_size=2, stride=2)

    def forward(self, x):
        grid = self.stage1(x)
        seq = grid.flatten(-2)
        return F.max_pool1d(F.relu(self.conv1d(seq)), kernel_size=3, stride=3)


class AttentionalReduction(nn.Module):
    """Softmax-weighted pooling of a feature sequence into one vector."""

    def __init__(self, cfg: CaHyperparams):
        super().__init__()
        self.scorer = nn.Sequential(
            nn.Linear(cfg.hidden, cfg.feed_forward),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.feed_forward, 1),
        )
        self.project = nn.Linear(cfg.hidden, cfg.reduction_output)

    def forward(self, x, mask=None):
        logits = self.scorer(x).squeeze(-1)
        if mask is not None:
            logits = logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        return self.project((weights.unsqueeze(-1) * x).sum(dim=-2))


class CoAttentionHead(nn.Module):
    def __init__(self, cfg: CaHyperparams = CA_DEFAULT, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        self.sentence_proj = nn.Linear(cfg.embed_dim, cfg.hidden)
        self.ppm = PyramidPooling(cfg) if cfg.use_ppm else None
        self.reducer = ImageReducer(cfg)
        self.encoder = nn.ModuleList(
            SelfAttentionLayer(cfg) for _ in range(cfg.num_layers)
        )
        self.decoder = nn.ModuleList(
            GuidedAttentionLayer(cfg) for _ in range(cfg.num_layers)
        )
        self.reduce_sentence = AttentionalReduction(cfg)
        self.reduce_image = AttentionalReduction(cfg)
        self.classifier = nn.Linear(cfg.reduction_output, 1)
        nn.init.uniform_(self.classifier.weight, -1e-3, 1e-3)
        nn.init.zeros_(self.classifier.bias)

    def sentence_mask(self, valid_length, batch: int, device) -> torch.Tensor | None:
        if not self.cfg.mask_padding:
            return None
        if not torch.is_tensor(valid_length):
            valid_length = torch.as_tensor(valid_length)
        valid_length = valid_length.view(-1).clamp(min=1).to(device)
        positions = torch.arange(self.cfg.sentence_len, device=device)
        return positions.unsqueeze(0) < valid_length.unsqueeze(1)

    def forward(
        self, sentence: torch.Tensor, valid_length, features: torch.Tensor
    ) -> tuple[torch.Tensor, AttentionMaps]:
        squeeze = sentence.ndim == 2
        if squeeze:
            sentence = sentence.unsqueeze(0)
            features = features.unsqueeze(0)
        if sentence.shape[-2:] != (self.cfg.sentence_len, self.cfg.embed_dim):
            raise ValueError(
                f"expected sentence {self.cfg.sentence_len}x{self.cfg.embed_dim}, "
                f"got {tuple(sentence.shape[-2:])}"
            )
        mask = self.sentence_mask(valid_length, sentence.shape[0], sentence.device)
        maps = AttentionMaps()

        words = F.relu(self.sentence_proj(sentence))
        for layer in self.encoder:
            words, sa_map = layer(words, mask=mask)
            maps.sa.append(sa_map)

        if self.ppm is not None:
            features = self.ppm(features)
        image = self.reducer(features).transpose(-1, -2)  # (B, positions, hidden)
        for layer in self.decoder:
            image, self_map, guided_map = layer(image, words, guide_mask=mask)
            maps.sga_self.append(self_map)
            maps.sga_guided.append(guided_map)

        fused = self.reduce_sentence(words, mask=mask) + self.reduce_image(image)
        score = torch.sigmoid(self.classifier(fused)).squeeze(-1)
        if squeeze:
            score = score.squeeze(0)
        return score, maps


def config_for_variant(variant: str, **overrides) -> CaHyperparams:
    base = {"plain": CA_DEFAULT, "ppm": CA_PPM_DEFAULT}[variant]
    return replace(base, **overrides) if overrides else base
