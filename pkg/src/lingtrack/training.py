"""Loss, learning-rate schedules, and the training loop.

Two schedules are implemented: momentum-SGD with a constant warmup followed
by a log-space decay, and ADAM with a fractional warmup, a constant plateau,
and step decay every two epochs.  Epochs are 1-based throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import datasets
from .backbone import ToyBackbone
from .model_ca import CA_DEFAULT, CA_PPM_DEFAULT, CoAttentionHead, CaHyperparams
from .model_dfg import DfgConfig, DynamicFilterHead
from .text_encoding import HashedEmbeddingProvider, encode_sentence

SGD_WARMUP_EPOCHS = 5
SGD_WARMUP_LR = 0.01
SGD_LOG_START = 0.03
SGD_LOG_END = 5e-4

ADAM_BASE_LR = 1e-4
ADAM_WARMUP_FACTORS = (0.25, 0.5, 0.75)
ADAM_DECAY_START = 10
ADAM_DECAY_RATE = 0.2
ADAM_BETAS = (0.9, 0.98)

HEAD_NAMES = ("dfg", "dfg_no_att", "ca", "ca_ppm")


def bce_loss(score: torch.Tensor, label: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy with scores clamped away from {0, 1}."""
    score = torch.clamp(score, eps, 1 - eps)
    label = label.to(score.dtype)
    return -(label * torch.log(score) + (1 - label) * torch.log(1 - score)).mean()


def sgd_lr(epoch: int, t_total: int = 15) -> float:
    """Constant warmup for 5 epochs, then log-space decay over t_total epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if epoch <= SGD_WARMUP_EPOCHS:
        return SGD_WARMUP_LR
    step = epoch - SGD_WARMUP_EPOCHS - 1  # 0 at the first post-warmup epoch
    if step >= t_total:
        raise ValueError(f"epoch {epoch} beyond the {SGD_WARMUP_EPOCHS + t_total}-epoch schedule")
    frac = step / (t_total - 1) if t_total > 1 else 0.0
    return math.exp(
        (1 - frac) * math.log(SGD_LOG_START) + frac * math.log(SGD_LOG_END)
    )


def adam_lr(epoch: int) -> float:
    """Fractional warmup (epochs 1-3), base rate to epoch 10, then 0.2-step
    decay every 2 epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if epoch <= len(ADAM_WARMUP_FACTORS):
        return ADAM_BASE_LR * ADAM_WARMUP_FACTORS[epoch - 1]
    if epoch <= ADAM_DECAY_START:
        return ADAM_BASE_LR
    return ADAM_BASE_LR * ADAM_DECAY_RATE ** ((epoch - ADAM_DECAY_START) // 2)


@dataclass
class TrainConfig:
    head: str = "dfg"
    batch_size: int | None = None  # default per head
    epochs: int = 3
    samples_per_epoch: int = 2048
    frame_window: int = 100
    seed: int = 0
    desk_scale: bool = True
    sgd_momentum: float = 0.9
    dataset: str = ""

    def __post_init__(self) -> None:
        if self.head not in HEAD_NAMES:
            raise ValueError(f"unknown head {self.head!r}, expected one of {HEAD_NAMES}")
        if self.batch_size is None:
            self.batch_size = 128 if self.head.startswith("dfg") else 64

    @property
    def optimizer_kind(self) -> str:
        return "sgd" if self.head.startswith("dfg") else "adam"


DESK_DFG = DfgConfig(feature_channels=32, feature_size=7, attention_hidden=32)
DESK_CA = CaHyperparams(
    num_layers=2, hidden=32, head_dim=16, heads=2, feed_forward=32,
    reduction_output=32, feature_channels=32, feature_size=7, conv_groups=4,
)
DESK_CA_PPM = CaHyperparams(
    num_layers=2, hidden=48, head_dim=24, heads=2, feed_forward=32,
    reduction_output=32, feature_channels=32, feature_size=7, conv_groups=4,
    use_ppm=True, ppm_scales=(1, 2, 3, 6),
)


def build_head(head: str, desk_scale: bool = True, seed: int = 0):
    if head == "dfg":
        cfg = DESK_DFG if desk_scale else DfgConfig()
        return DynamicFilterHead(cfg, seed=seed)
    if head == "dfg_no_att":
        base = DESK_DFG if desk_scale else DfgConfig()
        from dataclasses import replace

        return DynamicFilterHead(replace(base, with_attention=False), seed=seed)
    if head == "ca":
        return CoAttentionHead(DESK_CA if desk_scale else CA_DEFAULT, seed=seed)
    if head == "ca_ppm":
        return CoAttentionHead(DESK_CA_PPM if desk_scale else CA_PPM_DEFAULT, seed=seed)
    raise ValueError(f"unknown head {head!r}")


def build_optimizer(model, config: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer_kind == "sgd":
        return torch.optim.SGD(params, lr=SGD_WARMUP_LR, momentum=config.sgd_momentum)
    return torch.optim.Adam(params, lr=ADAM_BASE_LR, betas=ADAM_BETAS)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    if config.optimizer_kind == "sgd":
        return sgd_lr(epoch, t_total=max(config.epochs - SGD_WARMUP_EPOCHS, 1))
    return adam_lr(epoch)


def save_checkpoint(path, model, config: TrainConfig, epoch: int) -> None:
    torch.save(
        {
            "state_dict": model.state_dict(),
            "model_config": model.cfg,
            "train_config": asdict(config),
            "seed": config.seed,
            "epoch": epoch,
        },
        path,
    )


def load_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    config = TrainConfig(**payload["train_config"])
    model = build_head(config.head, desk_scale=config.desk_scale, seed=config.seed)
    # rebuild on the stored module config in case it was customized
    if model.cfg != payload["model_config"]:
        cls = type(model)
        model = cls(payload["model_config"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, config, payload["epoch"]


class SampleBatcher:
    """Materializes constraint samples into model tensors.

    The backbone is frozen; its features are cached per (sequence, frame)
    so repeated epochs over the same frames stay cheap.
    """

    def __init__(self, backbone: ToyBackbone, provider=None, frames_root=None):
        self.backbone = backbone
        self.provider = provider or HashedEmbeddingProvider()
        self.frames_root = frames_root
        self._feature_cache: dict[tuple, torch.Tensor] = {}

    def features(self, sample: datasets.ConstraintSample) -> torch.Tensor:
        key = (sample.sequence_id, sample.frame_index, sample.label)
        feat = self._feature_cache.get(key)
        if feat is None:
            _, search = datasets.materialize_crops(
                sample, frames_root=self.frames_root,
                augment=sample.provenance.get("source") == "coco",
            )
            arr = search.astype(np.float32).transpose(2, 0, 1) / 255.0
            with torch.no_grad():
                feat = self.backbone(torch.from_numpy(arr)).squeeze(0)
            self._feature_cache[key] = feat
        return feat

    def batch(self, samples: list[datasets.ConstraintSample]):
        sentences, lengths, feats, labels = [], [], [], []
        for sample in samples:
            mat = encode_sentence(sample.sentence, self.provider)
            sentences.append(torch.from_numpy(mat.values))
            lengths.append(mat.valid_length)
            feats.append(self.features(sample))
            labels.append(sample.label)
        return (
            torch.stack(sentences),
            torch.tensor(lengths),
            torch.stack(feats),
            torch.tensor(labels, dtype=torch.float32),
        )


def forward_scores(model, sentences, lengths, features):
    if isinstance(model, CoAttentionHead):
        scores, _ = model(sentences, lengths, features)
    else:
        scores, _ = model(sentences, features)
    return scores


@dataclass
class TrainResult:
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)
    checkpoint_path: str | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "lr"])
            writer.writerows(self.loss_history)


def train(
    manifest: list[datasets.SequenceRecord],
    config: TrainConfig,
    out_dir=None,
    backbone: ToyBackbone | None = None,
    frames_root=None,
) -> tuple[torch.nn.Module, TrainResult]:
    """Run the configured schedule over epoch-sampled batches.

    Deterministic under a fixed seed and single worker; aborts on a
    non-finite loss.
    """
    torch.manual_seed(config.seed)
    model = build_head(config.head, desk_scale=config.desk_scale, seed=config.seed)
    if backbone is None:
        backbone = ToyBackbone(
            out_channels=model.cfg.feature_channels,
            out_size=model.cfg.feature_size,
            seed=config.seed,
        )
    batcher = SampleBatcher(backbone, frames_root=frames_root)
    optimizer = build_optimizer(model, config)
    result = TrainResult()

    from pathlib import Path

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    model.train()
    for epoch in range(1, config.epochs + 1):
        lr = lr_for_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        samples = datasets.sample_epoch(
            manifest,
            n=config.samples_per_epoch,
            frame_window=config.frame_window,
            rng_seed=config.seed * 100_003 + epoch,
        )
        losses = []
        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start : start + config.batch_size]
            sentences, lengths, feats, labels = batcher.batch(chunk)
            scores = forward_scores(model, sentences, lengths, feats)
            loss = bce_loss(scores, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss={loss}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        result.loss_history.append((epoch, float(np.mean(losses)), lr))
        if out_dir is not None:
            ckpt = out_dir / f"checkpoint_epoch{epoch:03d}.pt"
            save_checkpoint(ckpt, model, config, epoch)
            result.checkpoint_path = str(ckpt)
            result.write_csv(out_dir / "loss_history.csv")
    model.eval()
    return model, result
