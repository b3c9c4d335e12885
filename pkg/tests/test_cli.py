import json

import numpy as np
import pytest
import torch

from lingtrack import datasets, evaluation
from lingtrack.cli import (
    ClipManifest,
    export_attention,
    extract_clips,
    load_config_file,
    main,
)
from lingtrack.geometry import BoundingBox
from lingtrack.training import build_head

from conftest import make_records


class TestExtractClips:
    def records_for_frames(self, positive_frames, n=10):
        return make_records(
            [1.0 if f in positive_frames else 0.0 for f in range(1, n + 1)],
            [1 if f in positive_frames else 0 for f in range(1, n + 1)],
            sequence_id="seq",
        )

    def test_two_runs(self):
        manifest = extract_clips(self.records_for_frames({2, 3, 5}), threshold=0.5)
        assert manifest.clips == [(2, 3), (5, 5)]

    def test_gap_merging(self):
        records = self.records_for_frames({2, 3, 5})
        assert extract_clips(records, 0.5, merge_gap=1).clips == [(2, 5)]

    def test_no_frames_past_threshold(self):
        manifest = extract_clips(self.records_for_frames(set()), threshold=0.5)
        assert manifest.clips == []

    def test_unsorted_rejected(self):
        records = list(reversed(self.records_for_frames({2})))
        with pytest.raises(ValueError):
            extract_clips(records, 0.5)

    def test_groundtruth_scores_recover_intervals(self):
        # scoring with the labels themselves must reproduce the label runs
        labels = [0, 1, 1, 1, 0, 0, 1, 0, 1, 1]
        records = make_records([float(l) for l in labels], labels)
        manifest = extract_clips(records, threshold=0.5)
        assert manifest.clips == [(2, 4), (7, 7), (9, 10)]

    def test_manifest_serialization(self):
        manifest = ClipManifest("seq", [(1, 3)], 0.6, "dfg")
        assert manifest.to_dict() == {
            "sequence_id": "seq",
            "clips": [[1, 3]],
            "threshold": 0.6,
            "model_id": "dfg",
        }


class TestExportAttention:
    def sample(self):
        return datasets.ConstraintSample(
            sequence_id="demo", reference_frame_index=1, frame_index=1,
            sentence="with a car", label=0,
        )

    def test_ca_exports_npz_per_layer_head(self, tmp_path):
        model = build_head("ca", desk_scale=True, seed=0)
        model.eval()
        _, maps = model(
            torch.randn(1, 20, 300), torch.tensor([3]), torch.randn(1, 32, 7, 7)
        )
        written = export_attention(model, maps, self.sample(), tmp_path, render=False)
        data = np.load(tmp_path / "attention_maps.npz")
        # desk-scale config: 2 layers x 2 heads, self and guided kinds
        assert len(data.files) == 8
        assert "sa1_head1" in data.files and "sga2_head2" in data.files
        assert written == [tmp_path / "attention_maps.npz"]

    def test_ca_renders_heatmaps(self, tmp_path):
        model = build_head("ca", desk_scale=True, seed=0)
        model.eval()
        _, maps = model(
            torch.randn(1, 20, 300), torch.tensor([3]), torch.randn(1, 32, 7, 7)
        )
        written = export_attention(model, maps, self.sample(), tmp_path, render=True)
        pngs = [p for p in written if p.suffix == ".png"]
        assert len(pngs) == 8
        assert all(p.exists() for p in pngs)

    def test_dfg_exports_word_csv(self, tmp_path):
        model = build_head("dfg", desk_scale=True, seed=0)
        _, weights = model(torch.randn(20, 300), torch.randn(32, 7, 7))
        written = export_attention(model, weights, self.sample(), tmp_path)
        csv_path = tmp_path / "word_attention.csv"
        assert written == [csv_path]
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "position,weight"
        assert len(lines) == 11  # header + 10 pooled positions

    def test_no_attention_rejected(self, tmp_path):
        model = build_head("dfg_no_att", desk_scale=True, seed=0)
        with pytest.raises(ValueError):
            export_attention(model, None, self.sample(), tmp_path)


class TestConfigFile:
    def test_flat_key_values(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nepochs = 4\nhead=ca\n\n")
        assert load_config_file(path) == {"epochs": "4", "head": "ca"}

    def test_missing_path_empty(self):
        assert load_config_file(None) == {}


def toy_manifest_file(tmp_path, n_sequences=3, n_frames=6):
    sentences = ["with a car", "with a person", "next to a cat"]
    manifest = []
    for s in range(n_sequences):
        frames = [
            datasets.FrameRecord(fi, label=(fi + s) % 2, target_box=BoundingBox(2, 2, 8, 8))
            for fi in range(1, n_frames + 1)
        ]
        manifest.append(
            datasets.SequenceRecord(f"toy-{s}", "cmot", sentences[s % 3], frames)
        )
    path = tmp_path / "manifest.jsonl"
    datasets.write_manifest(manifest, path)
    return path


class TestCommands:
    def test_build_dataset_cmot(self, tmp_path):
        gt_dir = tmp_path / "gt"
        gt_dir.mkdir()
        rows = []
        for fi in range(1, 4):
            rows.append(f"{fi},1,0,0,10,10,1,1,1.0")
            rows.append(f"{fi},2,{5 if fi < 3 else 80},0,10,10,1,1,1.0")
        (gt_dir / "video1.txt").write_text("\n".join(rows) + "\n")
        desc = tmp_path / "descriptions.csv"
        desc.write_text("video1,1,a person\nvideo1,2,a red car\n")
        out = tmp_path / "cmot.jsonl"
        rc = main([
            "build-dataset", "--kind", "cmot", "--groundtruth", str(gt_dir),
            "--descriptions", str(desc), "--out", str(out),
        ])
        assert rc == 0
        manifest = datasets.read_manifest(out)
        assert {s.sequence_id for s in manifest} == {"video1-1-2", "video1-2-1"}

    def test_build_dataset_clasot(self, tmp_path):
        ann = tmp_path / "annotations.csv"
        ann.write_text("ct-1,seq-1,car,2,3,adjacent to a car\n")
        counts = tmp_path / "counts.json"
        counts.write_text(json.dumps({"seq-1": 5}))
        out = tmp_path / "clasot.jsonl"
        rc = main([
            "build-dataset", "--kind", "clasot", "--annotations", str(ann),
            "--frame-counts", str(counts), "--out", str(out),
        ])
        assert rc == 0
        manifest = datasets.read_manifest(out)
        assert len(manifest[0].frames) == 5
        assert sum(fr.label for fr in manifest[0].frames) == 2

    def test_train_then_evaluate(self, tmp_path):
        manifest = toy_manifest_file(tmp_path)
        run_dir = tmp_path / "run"
        rc = main([
            "train", "--head", "dfg", "--manifest", str(manifest),
            "--epochs", "1", "--samples-per-epoch", "16", "--batch-size", "8",
            "--seed", "0", "--out", str(run_dir),
        ])
        assert rc == 0
        ckpt = run_dir / "checkpoint_epoch001.pt"
        assert ckpt.exists()

        report_dir = tmp_path / "report"
        preds = tmp_path / "preds.jsonl"
        rc = main([
            "evaluate", "--checkpoint", str(ckpt), "--manifest", str(manifest),
            "--save-predictions", str(preds), "--out", str(report_dir),
        ])
        assert rc == 0
        assert (report_dir / "summary.csv").exists()
        records = evaluation.read_predictions(preds)
        assert len(records) == 18  # 3 sequences x 6 frames
        assert all(0 < r.score < 1 for r in records)

    def test_train_deterministic(self, tmp_path):
        manifest = toy_manifest_file(tmp_path)
        args = [
            "train", "--head", "dfg", "--manifest", str(manifest),
            "--epochs", "1", "--samples-per-epoch", "16", "--batch-size", "8",
            "--seed", "1",
        ]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        hist_a = (tmp_path / "a" / "loss_history.csv").read_text()
        hist_b = (tmp_path / "b" / "loss_history.csv").read_text()
        assert hist_a == hist_b

    def test_calibrate_command(self, tmp_path):
        preds = tmp_path / "preds.jsonl"
        evaluation.write_predictions(
            make_records([0.9, 0.8, 0.6, 0.4, 0.2], [1, 1, 0, 1, 0]), preds
        )
        out = tmp_path / "threshold.json"
        rc = main(["calibrate", "--predictions", str(preds), "--out", str(out)])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload["threshold"] == pytest.approx(0.7)
        assert payload["objective"] == pytest.approx(10 / 11)

    def test_report_command_multi_model(self, tmp_path):
        paths = []
        for model_id, scores in (("good", [0.9, 0.8, 0.2, 0.1]), ("weak", [0.6, 0.4, 0.7, 0.1])):
            path = tmp_path / f"{model_id}.jsonl"
            evaluation.write_predictions(
                make_records(scores, [1, 1, 0, 0], model_id=model_id), path
            )
            paths.append(str(path))
        out = tmp_path / "reports"
        rc = main(["report", "--predictions", *paths, "--out", str(out)])
        assert rc == 0
        summary = (out / "summary.csv").read_text()
        for model_id in ("good", "weak", "majority_baseline"):
            assert model_id in summary

    def test_extract_clips_command(self, tmp_path):
        preds = tmp_path / "preds.jsonl"
        labels = [0, 1, 1, 0, 1]
        evaluation.write_predictions(
            make_records([float(l) for l in labels], labels), preds
        )
        out = tmp_path / "clips.json"
        rc = main([
            "extract-clips", "--predictions", str(preds),
            "--merge-gap", "1", "--out", str(out),
        ])
        assert rc == 0
        payload = json.loads(out.read_text())
        assert payload[0]["clips"] == [[2, 5]]

    def test_attention_maps_command_ca(self, tmp_path):
        manifest = toy_manifest_file(tmp_path)
        run_dir = tmp_path / "run"
        assert main([
            "train", "--head", "ca", "--manifest", str(manifest),
            "--epochs", "1", "--samples-per-epoch", "8", "--batch-size", "8",
            "--out", str(run_dir),
        ]) == 0
        out = tmp_path / "attn"
        rc = main([
            "attention-maps", "--checkpoint", str(run_dir / "checkpoint_epoch001.pt"),
            "--sentence", "with a red car", "--no-render", "--out", str(out),
        ])
        assert rc == 0
        data = np.load(out / "attention_maps.npz")
        assert len(data.files) == 8

    def test_attention_maps_rejects_no_att_variant(self, tmp_path, capsys):
        manifest = toy_manifest_file(tmp_path)
        run_dir = tmp_path / "run"
        assert main([
            "train", "--head", "dfg_no_att", "--manifest", str(manifest),
            "--epochs", "1", "--samples-per-epoch", "8", "--batch-size", "8",
            "--out", str(run_dir),
        ]) == 0
        rc = main([
            "attention-maps", "--checkpoint", str(run_dir / "checkpoint_epoch001.pt"),
            "--sentence", "with a car", "--no-render", "--out", str(tmp_path / "x"),
        ])
        assert rc == 1

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])  # missing required arguments
        assert exc.value.code == 2

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        rc = main([
            "calibrate", "--predictions", str(tmp_path / "missing.jsonl"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err

    def test_config_file_supplies_defaults(self, tmp_path):
        manifest = toy_manifest_file(tmp_path)
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs=1\nsamples_per_epoch=8\nbatch_size=8\nhead=dfg\n")
        run_dir = tmp_path / "run"
        rc = main([
            "train", "--manifest", str(manifest), "--config", str(cfg),
            "--out", str(run_dir),
        ])
        assert rc == 0
        assert (run_dir / "checkpoint_epoch001.pt").exists()
