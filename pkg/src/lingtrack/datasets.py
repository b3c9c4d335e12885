"""Constrained-tracking corpora: synthesis, loading, and epoch sampling.

Three sources feed the same manifest shape:

* multi-object tracking groundtruth, where every ordered pair of tracks
  whose boxes ever come into proximity becomes one constrained sequence,
* interval annotations over single-object tracking videos,
* detection-style image annotations, from which same-image pre-training
  pairs are generated with template sentences.

A manifest is a list of :class:`SequenceRecord`; the training/eval atom is
a :class:`ConstraintSample`.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    BoundingBox,
    ObjectDescription,
    compute_overlap,
    constraint_satisfied,
    description_subset,
    DEFAULT_THRESHOLD,
)

REFERENCE_CROP_SIZE = 127
SEARCH_CROP_SIZE = 255

SENTENCE_TEMPLATES = (
    "with a {object}",
    "close to a {object}",
    "close by a {object}",
    "adjacent to a {object}",
    "besides a {object}",
    "along a {object}",
)

CONSTRAINT_CLASSES = ("car", "person", "backpack", "cat", "hand", "bottle")


class MissingDescriptionError(ValueError):
    def __init__(self, track_ids):
        self.track_ids = sorted(track_ids)
        super().__init__(f"tracks without a description: {self.track_ids}")


class EmptyManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TrackFrame:
    frame_index: int
    track_id: int
    box: BoundingBox
    visibility: float | None = None


@dataclass(frozen=True)
class ConstraintTrackAnnotation:
    constraint_track: str
    sequence_id: str
    category: str
    constraint_from: int
    constraint_till: int
    sentence: str


@dataclass
class FrameRecord:
    frame_index: int
    label: int
    target_box: BoundingBox | None = None
    constraint_box: BoundingBox | None = None
    superset_boxes: tuple[BoundingBox, ...] = ()


@dataclass
class SequenceRecord:
    sequence_id: str
    source: str
    sentence: str
    frames: list[FrameRecord]
    provenance: dict = field(default_factory=dict)

    @property
    def frame_indices(self) -> list[int]:
        return [f.frame_index for f in self.frames]


@dataclass
class ConstraintSample:
    sequence_id: str
    reference_frame_index: int
    frame_index: int
    sentence: str
    label: int
    reference_box: BoundingBox | None = None
    search_box: BoundingBox | None = None
    provenance: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# external file formats


def parse_mot_groundtruth(text: str) -> list[TrackFrame]:
    """Parse ``frame,id,left,top,width,height,conf,class,visibility`` lines.

    Rows flagged inactive (conf 0) are dropped, per the MOT convention.
    """
    frames = []
    for row in csv.reader(io.StringIO(text)):
        if not row or not row[0].strip():
            continue
        frame, track = int(row[0]), int(row[1])
        left, top, width, height = (float(v) for v in row[2:6])
        conf = float(row[6]) if len(row) > 6 else 1.0
        if conf == 0:
            continue
        visibility = float(row[8]) if len(row) > 8 else None
        frames.append(
            TrackFrame(frame, track, BoundingBox(left, top, width, height), visibility)
        )
    return frames


def parse_descriptions(text: str) -> dict[tuple[str, int], str]:
    """Parse ``video_id,track_id,sentence`` lines with quoted sentences."""
    out = {}
    for row in csv.reader(io.StringIO(text)):
        if not row or not row[0].strip():
            continue
        out[(row[0].strip(), int(row[1]))] = row[2].strip()
    return out


def parse_clasot_annotations(text: str) -> list[ConstraintTrackAnnotation]:
    rows = []
    for row in csv.reader(io.StringIO(text)):
        if not row or not row[0].strip():
            continue
        if row[0].strip() == "constraint_track":  # optional header
            continue
        rows.append(
            ConstraintTrackAnnotation(
                constraint_track=row[0].strip(),
                sequence_id=row[1].strip(),
                category=row[2].strip(),
                constraint_from=int(row[3]),
                constraint_till=int(row[4]),
                sentence=row[5].strip(),
            )
        )
    return rows


def _box_json(box: BoundingBox | None):
    return None if box is None else box.to_list()


def _box_from_json(value):
    return None if value is None else BoundingBox.from_list(value)


def write_manifest(manifest: list[SequenceRecord], path) -> None:
    """JSON-lines export, one record per per-frame sample."""
    with open(path, "w") as fh:
        for seq in manifest:
            for fr in seq.frames:
                record = {
                    "sequence_id": seq.sequence_id,
                    "source": seq.source,
                    "sentence": seq.sentence,
                    "frame_index": fr.frame_index,
                    "label": fr.label,
                    "target_box": _box_json(fr.target_box),
                    "constraint_box": _box_json(fr.constraint_box),
                    "superset_boxes": [b.to_list() for b in fr.superset_boxes],
                    "provenance": seq.provenance,
                }
                fh.write(json.dumps(record) + "\n")


def read_manifest(path) -> list[SequenceRecord]:
    by_id: dict[str, SequenceRecord] = {}
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            seq = by_id.get(rec["sequence_id"])
            if seq is None:
                seq = SequenceRecord(
                    sequence_id=rec["sequence_id"],
                    source=rec["source"],
                    sentence=rec["sentence"],
                    frames=[],
                    provenance=rec.get("provenance", {}),
                )
                by_id[rec["sequence_id"]] = seq
            seq.frames.append(
                FrameRecord(
                    frame_index=rec["frame_index"],
                    label=rec["label"],
                    target_box=_box_from_json(rec.get("target_box")),
                    constraint_box=_box_from_json(rec.get("constraint_box")),
                    superset_boxes=tuple(
                        BoundingBox.from_list(b) for b in rec.get("superset_boxes", [])
                    ),
                )
            )
    return list(by_id.values())


# ---------------------------------------------------------------------------
# builders


def build_cmot(
    gt_tables: dict[str, list[TrackFrame]],
    descriptions: dict[tuple[str, int], str],
    t: float = DEFAULT_THRESHOLD,
) -> list[SequenceRecord]:
    """Synthesize constrained sequences from tracking groundtruth.

    Every ordered track pair (target A, constraint B) that is ever in
    proximity, directly or through a superset-described third track, yields
    one sequence spanning A's full visible track.  Frames where A is absent
    are skipped.
    """
    manifest = []
    for video, table in sorted(gt_tables.items()):
        track_ids = sorted({tf.track_id for tf in table})
        missing = [tid for tid in track_ids if (video, tid) not in descriptions]
        if missing:
            raise MissingDescriptionError([(video, tid) for tid in missing])
        descs = {
            tid: ObjectDescription(descriptions[(video, tid)]) for tid in track_ids
        }
        by_frame: dict[int, dict[int, BoundingBox]] = {}
        for tf in table:
            by_frame.setdefault(tf.frame_index, {})[tf.track_id] = tf.box

        for a in track_ids:
            a_frames = sorted(fi for fi, objs in by_frame.items() if a in objs)
            for b in track_ids:
                if b == a:
                    continue
                desc_b = descs[b]
                frames = []
                any_positive = False
                for fi in a_frames:
                    objs = by_frame[fi]
                    target = objs[a]
                    constraint_box = objs.get(b)
                    supersets = tuple(
                        box
                        for tid, box in sorted(objs.items())
                        if tid not in (a, b) and description_subset(desc_b, descs[tid])
                    )
                    label = 0
                    candidates = supersets if constraint_box is None else (
                        (constraint_box,) + supersets
                    )
                    if any(compute_overlap(target, box) >= t for box in candidates):
                        label = 1
                        any_positive = True
                    frames.append(
                        FrameRecord(fi, label, target, constraint_box, supersets)
                    )
                if any_positive:
                    manifest.append(
                        SequenceRecord(
                            sequence_id=f"{video}-{a}-{b}",
                            source="cmot",
                            sentence=desc_b.raw_sentence,
                            frames=frames,
                            provenance={"video": video, "target": a, "constraint": b},
                        )
                    )
    return manifest


def load_clasot(
    annotation_rows: list[ConstraintTrackAnnotation],
    frame_count: dict[str, int] | int,
) -> list[SequenceRecord]:
    """Expand interval annotations into per-frame labels.

    Labels are 1 exactly on the union of a constraint track's intervals.
    """
    by_track: dict[str, list[ConstraintTrackAnnotation]] = {}
    for row in annotation_rows:
        by_track.setdefault(row.constraint_track, []).append(row)

    manifest = []
    for track_id, rows in sorted(by_track.items()):
        n_frames = (
            frame_count if isinstance(frame_count, int) else frame_count[rows[0].sequence_id]
        )
        positive = set()
        for row in rows:
            if row.constraint_from > row.constraint_till:
                raise ValueError(
                    f"malformed interval on {track_id}: "
                    f"{row.constraint_from} > {row.constraint_till}"
                )
            if row.constraint_from < 1 or row.constraint_till > n_frames:
                raise ValueError(
                    f"interval on {track_id} outside [1, {n_frames}]"
                )
            positive.update(range(row.constraint_from, row.constraint_till + 1))
        manifest.append(
            SequenceRecord(
                sequence_id=track_id,
                source="clasot",
                sentence=rows[0].sentence,
                frames=[
                    FrameRecord(fi, int(fi in positive)) for fi in range(1, n_frames + 1)
                ],
                provenance={
                    "sequence_id": rows[0].sequence_id,
                    "category": rows[0].category,
                },
            )
        )
    return manifest


def generate_coco_samples(
    annotations: dict,
    allowed_classes=CONSTRAINT_CLASSES,
    t: float = DEFAULT_THRESHOLD,
    rng_seed: int = 0,
    templates=SENTENCE_TEMPLATES,
):
    """Yield same-image pre-training samples from detection annotations.

    Per image one annotation becomes the target; every other allowed-class
    object in vicinity yields a positive with a template sentence, matched
    by an equal number of negatives naming allowed classes with no object
    in vicinity.  Reference and search crops come from the same image.
    """
    unknown = set(allowed_classes) - set(CONSTRAINT_CLASSES)
    if unknown:
        raise ValueError(f"classes outside the constraint inventory: {sorted(unknown)}")
    rng = np.random.default_rng(rng_seed)
    categories = {c["id"]: c["name"] for c in annotations.get("categories", [])}
    by_image: dict[int, list[dict]] = {}
    for ann in annotations["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    for image_id in sorted(by_image):
        objs = sorted(by_image[image_id], key=lambda a: a["id"])
        if len(objs) < 2:
            continue
        target = objs[int(rng.integers(len(objs)))]
        target_box = BoundingBox.from_list(target["bbox"])
        others = [o for o in objs if o["id"] != target["id"]]
        in_vicinity, vicinity_classes = [], set()
        for other in others:
            box = BoundingBox.from_list(other["bbox"])
            name = categories[other["category_id"]]
            if compute_overlap(target_box, box) >= t:
                vicinity_classes.add(name)
                if name in allowed_classes:
                    in_vicinity.append((other, box, name))

        emitted = 0
        for other, box, name in in_vicinity:
            template = templates[int(rng.integers(len(templates)))]
            yield ConstraintSample(
                sequence_id=f"coco-{image_id}",
                reference_frame_index=0,
                frame_index=0,
                sentence=template.format(object=name),
                label=1,
                reference_box=target_box,
                search_box=box,
                provenance={
                    "source": "coco",
                    "image_id": image_id,
                    "target": target["id"],
                    "constraint": other["id"],
                    "augment_seed": int(rng.integers(2**31)),
                },
            )
            emitted += 1
        negative_classes = [c for c in allowed_classes if c not in vicinity_classes]
        for _ in range(emitted):
            if not negative_classes:
                break
            name = negative_classes[int(rng.integers(len(negative_classes)))]
            template = templates[int(rng.integers(len(templates)))]
            yield ConstraintSample(
                sequence_id=f"coco-{image_id}",
                reference_frame_index=0,
                frame_index=0,
                sentence=template.format(object=name),
                label=0,
                reference_box=target_box,
                search_box=None,
                provenance={
                    "source": "coco",
                    "image_id": image_id,
                    "target": target["id"],
                    "augment_seed": int(rng.integers(2**31)),
                },
            )


def sample_epoch(
    manifest: list[SequenceRecord],
    n: int,
    frame_window: int = 100,
    rng_seed: int = 0,
) -> list[ConstraintSample]:
    """Draw exactly ``n`` samples: uniform sequence, uniform reference frame,
    search frame uniform over existing frames within the window."""
    if not manifest:
        raise EmptyManifestError("cannot sample from an empty manifest")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(rng_seed)
    samples = []
    for _ in range(n):
        seq = manifest[int(rng.integers(len(manifest)))]
        ref = seq.frames[int(rng.integers(len(seq.frames)))]
        window = [
            fr
            for fr in seq.frames
            if abs(fr.frame_index - ref.frame_index) <= frame_window
        ]
        search = window[int(rng.integers(len(window)))]
        samples.append(
            ConstraintSample(
                sequence_id=seq.sequence_id,
                reference_frame_index=ref.frame_index,
                frame_index=search.frame_index,
                sentence=seq.sentence,
                label=search.label,
                reference_box=ref.target_box,
                search_box=search.target_box,
                provenance=dict(seq.provenance, source=seq.source),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# crop materialization


def _stable_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


def _synthesize_image(seed: int, size: int) -> np.ndarray:
    # low-frequency content: a coarse color grid blown up to full size, so
    # image identity survives downstream pooling instead of averaging out
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    return coarse.repeat(size // 8 + 1, axis=0).repeat(size // 8 + 1, axis=1)[:size, :size]


def crop_with_context(image: np.ndarray, box: BoundingBox, out_size: int) -> np.ndarray:
    """Square crop centered on the box, zero-padded at image borders."""
    cx, cy = box.center
    side = max(box.width, box.height) * 2
    scale = out_size / side
    out = np.zeros((out_size, out_size, 3), dtype=np.uint8)
    ys = np.clip((np.arange(out_size) / scale + cy - side / 2).astype(int), -1, image.shape[0])
    xs = np.clip((np.arange(out_size) / scale + cx - side / 2).astype(int), -1, image.shape[1])
    valid_y = (ys >= 0) & (ys < image.shape[0])
    valid_x = (xs >= 0) & (xs < image.shape[1])
    grid = np.ix_(valid_y, valid_x)
    out[grid] = image[np.ix_(ys[valid_y], xs[valid_x])]
    return out


def augment_crop(crop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Reproducible jitter: translation <=12%, scale in [0.95, 1.05],
    brightness +-10%.  A stand-in recipe, fixed for determinism."""
    size = crop.shape[0]
    shift = int(rng.uniform(-0.12, 0.12) * size)
    scale = rng.uniform(0.95, 1.05)
    brightness = rng.uniform(0.9, 1.1)
    out = np.roll(crop, shift, axis=(0, 1)).astype(np.float32)
    if scale != 1.0:
        idx = np.clip((np.arange(size) / scale).astype(int), 0, size - 1)
        out = out[np.ix_(idx, idx)]
    return np.clip(out * brightness, 0, 255).astype(np.uint8)


def materialize_crops(
    sample: ConstraintSample,
    frames_root=None,
    augment: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Produce (reference 127x127x3, search 255x255x3) uint8 crops.

    Frames are read from ``frames_root/<sequence_id>/<frame:06d>.jpg`` when
    present; otherwise a deterministic synthetic frame keyed on sequence and
    frame ids stands in, keeping the whole pipeline runnable at desk scale.
    """
    def load_frame(frame_index: int, fallback_size: int) -> np.ndarray:
        if frames_root is not None:
            from pathlib import Path
            from PIL import Image

            path = Path(frames_root) / sample.sequence_id / f"{frame_index:06d}.jpg"
            if path.exists():
                return np.asarray(Image.open(path).convert("RGB"))
        return _synthesize_image(
            _stable_seed(sample.sequence_id, frame_index, sample.label), fallback_size
        )

    ref_image = load_frame(sample.reference_frame_index, SEARCH_CROP_SIZE)
    search_image = load_frame(sample.frame_index, SEARCH_CROP_SIZE)

    def crop(image, box, out_size):
        if box is None:
            idx_y = np.linspace(0, image.shape[0] - 1, out_size).astype(int)
            idx_x = np.linspace(0, image.shape[1] - 1, out_size).astype(int)
            return image[np.ix_(idx_y, idx_x)]
        return crop_with_context(image, box, out_size)

    reference = crop(ref_image, sample.reference_box, REFERENCE_CROP_SIZE)
    search = crop(search_image, sample.search_box or sample.reference_box, SEARCH_CROP_SIZE)
    if augment:
        rng = np.random.default_rng(
            sample.provenance.get("augment_seed", _stable_seed(sample.sequence_id))
        )
        search = augment_crop(search, rng)
    return reference, search


def reevaluate_label(record: FrameRecord, sentence: str, t: float = DEFAULT_THRESHOLD) -> int:
    """Round-trip oracle: recompute the label from the stored boxes."""
    if record.target_box is None:
        return record.label
    desc = ObjectDescription(sentence)
    others = [(box, desc) for box in record.superset_boxes]
    if record.constraint_box is None:
        return int(
            any(compute_overlap(record.target_box, box) >= t for box, _ in others)
        )
    return constraint_satisfied(
        record.target_box, (record.constraint_box, desc), others, t
    )
