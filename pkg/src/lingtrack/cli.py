"""Operator entry point.

Subcommands: build-dataset | pretrain | train | evaluate | calibrate |
report | extract-clips | attention-maps.  All randomness is behind
``--seed``; flags override ``--config`` (flat ``key=value`` lines), which
overrides the ``SIAMCT_DATA_ROOT`` environment default for data locations.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datasets, evaluation, training
from .model_ca import AttentionMaps, CoAttentionHead
from .text_encoding import HashedEmbeddingProvider, encode_sentence

DATA_ROOT_ENV = "SIAMCT_DATA_ROOT"


@dataclass
class ClipManifest:
    sequence_id: str
    clips: list[tuple[int, int]] = field(default_factory=list)
    threshold: float = 0.5
    model_id: str = ""

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "clips": [list(c) for c in self.clips],
            "threshold": self.threshold,
            "model_id": self.model_id,
        }


def extract_clips(
    records: list[evaluation.PredictionRecord],
    threshold: float,
    merge_gap: int = 0,
) -> ClipManifest:
    """Run-length group the frames scoring past the threshold.

    Groups separated by at most ``merge_gap`` frames are merged into one
    clip.  Records must be sorted by frame.
    """
    frames = [r.frame_index for r in records]
    if frames != sorted(frames):
        raise ValueError("records must be sorted by frame index")
    manifest = ClipManifest(
        sequence_id=records[0].sequence_id if records else "",
        threshold=threshold,
        model_id=records[0].model_id if records else "",
    )
    for rec in records:
        if rec.score < threshold:
            continue
        if manifest.clips and rec.frame_index - manifest.clips[-1][1] <= merge_gap + 1:
            manifest.clips[-1] = (manifest.clips[-1][0], rec.frame_index)
        else:
            manifest.clips.append((rec.frame_index, rec.frame_index))
    return manifest


def export_attention(model, maps, sample, out_dir, render: bool = True) -> list[Path]:
    """Write attention arrays (and best-effort heatmap images) for a sample.

    Co-attention models export per (layer, head) self- and guided-attention
    maps; dynamic-filter models export only their word-attention weights as
    a bar-chart CSV.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    if isinstance(maps, AttentionMaps):
        arrays = {}
        for kind, stack in (("sa", maps.sa), ("sga", maps.sga_guided)):
            for layer, tensor in enumerate(stack, start=1):
                grid = tensor.detach().numpy()
                if grid.ndim == 4:  # batched
                    grid = grid[0]
                for head in range(grid.shape[0]):
                    arrays[f"{kind}{layer}_head{head + 1}"] = grid[head]
        npz_path = out_dir / "attention_maps.npz"
        np.savez(npz_path, **arrays)
        written.append(npz_path)
        if render:
            written += _render_heatmaps(arrays, out_dir)
    elif maps is not None:
        weights = maps.detach().numpy().reshape(-1)
        csv_path = out_dir / "word_attention.csv"
        with open(csv_path, "w") as fh:
            fh.write("position,weight\n")
            for i, w in enumerate(weights):
                fh.write(f"{i},{w}\n")
        written.append(csv_path)
    else:
        raise ValueError("this model variant exposes no attention to export")
    return written


def _render_heatmaps(arrays: dict, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for name, grid in arrays.items():
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(grid, aspect="auto", cmap="viridis")
        ax.set_title(name)
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# command implementations


def load_config_file(path) -> dict:
    values = {}
    if path:
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _data_root(args, config: dict) -> Path | None:
    root = getattr(args, "data_root", None) or config.get("data_root") or os.environ.get(
        DATA_ROOT_ENV
    )
    return Path(root) if root else None


def cmd_build_dataset(args) -> int:
    config = load_config_file(args.config)
    root = _data_root(args, config)
    if args.kind == "cmot":
        gt_tables = {}
        for gt_file in sorted(Path(args.groundtruth).glob("*.txt")):
            gt_tables[gt_file.stem] = datasets.parse_mot_groundtruth(gt_file.read_text())
        descriptions = datasets.parse_descriptions(Path(args.descriptions).read_text())
        manifest = datasets.build_cmot(gt_tables, descriptions, t=args.threshold)
    elif args.kind == "clasot":
        rows = datasets.parse_clasot_annotations(Path(args.annotations).read_text())
        frame_counts = json.loads(Path(args.frame_counts).read_text())
        manifest = datasets.load_clasot(rows, frame_counts)
    elif args.kind == "coco":
        annotations = json.loads(Path(args.annotations).read_text())
        samples = list(
            datasets.generate_coco_samples(
                annotations, t=args.threshold, rng_seed=args.seed
            )
        )
        manifest = _coco_samples_to_manifest(samples)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(args.kind)
    if root is not None and not Path(args.out).is_absolute():
        args.out = root / args.out
    datasets.write_manifest(manifest, args.out)
    print(f"wrote {sum(len(s.frames) for s in manifest)} samples "
          f"({len(manifest)} sequences) to {args.out}")
    return 0


def _coco_samples_to_manifest(samples) -> list[datasets.SequenceRecord]:
    by_key: dict[tuple, datasets.SequenceRecord] = {}
    for i, sample in enumerate(samples):
        key = (sample.sequence_id, sample.sentence, sample.label)
        seq = by_key.get(key)
        if seq is None:
            seq = datasets.SequenceRecord(
                sequence_id=f"{sample.sequence_id}-{len(by_key)}",
                source="coco",
                sentence=sample.sentence,
                frames=[],
                provenance=sample.provenance,
            )
            by_key[key] = seq
        seq.frames.append(
            datasets.FrameRecord(
                frame_index=i,
                label=sample.label,
                target_box=sample.reference_box,
                constraint_box=sample.search_box,
            )
        )
    return list(by_key.values())


def _train_config_from(args, config: dict) -> training.TrainConfig:
    def pick(key, cast, default):
        if getattr(args, key, None) is not None:
            return cast(getattr(args, key))
        if key in config:
            return cast(config[key])
        return default

    return training.TrainConfig(
        head=pick("head", str, "dfg"),
        batch_size=pick("batch_size", int, None),
        epochs=pick("epochs", int, 3),
        samples_per_epoch=pick("samples_per_epoch", int, 2048),
        frame_window=pick("frame_window", int, 100),
        seed=pick("seed", int, 0),
        desk_scale=pick("desk_scale", lambda v: str(v).lower() != "false", True),
    )


def cmd_train(args) -> int:
    config = load_config_file(args.config)
    train_config = _train_config_from(args, config)
    manifest = datasets.read_manifest(args.manifest)
    _, result = training.train(
        manifest, train_config, out_dir=args.out, frames_root=args.frames_root
    )
    final = result.loss_history[-1]
    print(f"epoch {final[0]}: mean_loss={final[1]:.6f} lr={final[2]:.2e}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _predict(checkpoint, manifest_path, limit=None):
    model, config, _ = training.load_checkpoint(checkpoint)
    manifest = datasets.read_manifest(manifest_path)
    from .backbone import ToyBackbone

    backbone = ToyBackbone(
        out_channels=model.cfg.feature_channels,
        out_size=model.cfg.feature_size,
        seed=config.seed,
    )
    batcher = training.SampleBatcher(backbone)
    records = []
    import torch

    with torch.no_grad():
        for seq in manifest:
            frames = seq.frames[:limit] if limit else seq.frames
            for fr in frames:
                sample = datasets.ConstraintSample(
                    sequence_id=seq.sequence_id,
                    reference_frame_index=seq.frames[0].frame_index,
                    frame_index=fr.frame_index,
                    sentence=seq.sentence,
                    label=fr.label,
                    reference_box=seq.frames[0].target_box,
                    search_box=fr.target_box,
                    provenance=dict(seq.provenance, source=seq.source),
                )
                sentences, lengths, feats, _ = batcher.batch([sample])
                score = training.forward_scores(model, sentences, lengths, feats)
                records.append(
                    evaluation.PredictionRecord(
                        sequence_id=seq.sequence_id,
                        frame_index=fr.frame_index,
                        score=float(score.squeeze()),
                        label=fr.label,
                        sentence=seq.sentence,
                        model_id=config.head,
                    )
                )
    return records


def cmd_evaluate(args) -> int:
    if args.predictions:
        records = evaluation.read_predictions(args.predictions)
    else:
        if not (args.checkpoint and args.manifest):
            print("evaluate needs --predictions or --checkpoint with --manifest",
                  file=sys.stderr)
            return 2
        records = _predict(args.checkpoint, args.manifest)
        if args.save_predictions:
            evaluation.write_predictions(records, args.save_predictions)
    model_id = records[0].model_id or "model"
    val = None
    if args.val:
        val = {model_id: evaluation.read_predictions(args.val)}
    reports = evaluation.build_report({model_id: records}, val)
    evaluation.write_report(reports, args.out)
    print(f"report for {model_id}: AP={reports[model_id].ap:.4f} "
          f"ROC AUC={reports[model_id].roc_auc:.4f} -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    records = evaluation.read_predictions(args.predictions)
    threshold, objective = evaluation.calibrate_threshold(records, beta=args.beta)
    payload = {"threshold": threshold, "objective": objective, "beta": args.beta}
    if args.out:
        Path(args.out).write_text(json.dumps(payload) + "\n")
    print(json.dumps(payload))
    return 0


def cmd_report(args) -> int:
    records_by_model, val_by_model = {}, {}
    for path in args.predictions:
        records = evaluation.read_predictions(path)
        records_by_model[records[0].model_id or Path(path).stem] = records
    for path in args.val or []:
        records = evaluation.read_predictions(path)
        val_by_model[records[0].model_id or Path(path).stem] = records
    reports = evaluation.build_report(records_by_model, val_by_model or None)
    evaluation.write_report(reports, args.out)
    print(f"wrote reports for {sorted(reports)} to {args.out}")
    return 0


def cmd_extract_clips(args) -> int:
    records = evaluation.read_predictions(args.predictions)
    by_seq: dict[str, list] = {}
    for rec in records:
        by_seq.setdefault(rec.sequence_id, []).append(rec)
    manifests = [
        extract_clips(sorted(seq_records, key=lambda r: r.frame_index),
                      args.threshold, args.merge_gap)
        for _, seq_records in sorted(by_seq.items())
    ]
    payload = [m.to_dict() for m in manifests]
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    n_clips = sum(len(m.clips) for m in manifests)
    print(f"extracted {n_clips} clips over {len(manifests)} sequences -> {args.out}")
    return 0


def cmd_attention_maps(args) -> int:
    model, config, _ = training.load_checkpoint(args.checkpoint)
    provider = HashedEmbeddingProvider()
    mat = encode_sentence(args.sentence, provider)
    import torch

    from .backbone import ToyBackbone

    backbone = ToyBackbone(
        out_channels=model.cfg.feature_channels,
        out_size=model.cfg.feature_size,
        seed=config.seed,
    )
    sample = datasets.ConstraintSample(
        sequence_id=args.sequence_id, reference_frame_index=1, frame_index=1,
        sentence=args.sentence, label=0,
    )
    _, search = datasets.materialize_crops(sample)
    feats = backbone(
        torch.from_numpy(search.astype("float32").transpose(2, 0, 1) / 255.0)
    ).squeeze(0)
    sentence = torch.from_numpy(mat.values)
    with torch.no_grad():
        if isinstance(model, CoAttentionHead):
            _, maps = model(sentence, mat.valid_length, feats)
        else:
            _, maps = model(sentence, feats)
            if maps is None:
                print("this variant has no attention to export", file=sys.stderr)
                return 1
    written = export_attention(model, maps, sample, args.out, render=not args.no_render)
    print(f"wrote {len(written)} attention artifacts to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lingtrack",
        description="constraint-aware tracking toolkit: datasets, heads, "
                    "training, evaluation, clip extraction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="synthesize or load a manifest")
    p.add_argument("--kind", choices=["cmot", "clasot", "coco"], required=True)
    p.add_argument("--groundtruth", help="directory of MOT groundtruth .txt files")
    p.add_argument("--descriptions", help="track descriptions CSV")
    p.add_argument("--annotations", help="interval CSV or detection JSON")
    p.add_argument("--frame-counts", help="JSON of sequence_id -> frame count")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--data-root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_dataset)

    for name in ("train", "pretrain"):
        p = sub.add_parser(name, help="optimize a head on a manifest")
        p.add_argument("--head", choices=list(training.HEAD_NAMES))
        p.add_argument("--manifest", required=True)
        p.add_argument("--frames-root")
        p.add_argument("--config")
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--samples-per-epoch", type=int, dest="samples_per_epoch")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True)
        p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score predictions into a report")
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--val")
    p.add_argument("--save-predictions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", help="find the best F-beta threshold")
    p.add_argument("--predictions", required=True)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="multi-model comparison report")
    p.add_argument("--predictions", nargs="+", required=True)
    p.add_argument("--val", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("extract-clips", help="constraint-gated clip manifest")
    p.add_argument("--predictions", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--merge-gap", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_clips)

    p = sub.add_parser("attention-maps", help="export attention for a sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentence", required=True)
    p.add_argument("--sequence-id", default="demo")
    p.add_argument("--no-render", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attention_maps)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
