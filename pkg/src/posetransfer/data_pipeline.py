"""Dataset ingestion: annotations, manifests, pair indexes, batching.

On-disk layout (written by the toy synthesizer, readable for any dataset
that follows the same contract):

    root/
      manifest.json           dataset manifest (samples, splits, checksums)
      images/<name>.png       RGB images
      annotations/<name>.json keypoints / face box / face landmarks
      pairs_train.csv         header "source,target", one pair per row
      pairs_test.csv
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

import jsonschema

from .errors import AnnotationError, ConfigError, IngestionError
from .pose_codec import FaceBox, Keypoints, encode_pose_heatmaps

ANNOTATION_SCHEMA = {
    "type": "object",
    "required": ["keypoints"],
    "additionalProperties": False,
    "properties": {
        "keypoints": {
            "type": "array",
            "minItems": 18,
            "maxItems": 18,
            "items": {
                "type": "array",
                "prefixItems": [
                    {"type": "number"},
                    {"type": "number"},
                    {"enum": [0, 1]},
                ],
                "minItems": 3,
                "maxItems": 3,
            },
        },
        "face_bbox": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 4,
                    "maxItems": 4,
                },
            ]
        },
        "face_landmarks": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "array",
                    "items": {
                        "type": "array",
                        "items": {"type": "number"},
                        "minItems": 2,
                        "maxItems": 2,
                    },
                },
            ]
        },
    },
}


@dataclass(frozen=True)
class Annotation:
    keypoints: Keypoints
    face_bbox: FaceBox | None
    face_landmarks: np.ndarray | None  # (N, 2) float64

    def to_json_dict(self) -> dict:
        return {
            "keypoints": self.keypoints.to_list(),
            "face_bbox": self.face_bbox.to_list() if self.face_bbox else None,
            "face_landmarks": (
                [[float(x), float(y)] for x, y in self.face_landmarks]
                if self.face_landmarks is not None else None
            ),
        }


def parse_annotation(raw: dict) -> Annotation:
    try:
        jsonschema.validate(raw, ANNOTATION_SCHEMA)
    except jsonschema.ValidationError as e:
        raise AnnotationError(f"annotation rejected by schema: {e.message}") from e
    bbox = raw.get("face_bbox")
    lm = raw.get("face_landmarks")
    return Annotation(
        keypoints=Keypoints.from_list(raw["keypoints"]),
        face_bbox=FaceBox.from_list(bbox) if bbox is not None else None,
        face_landmarks=np.asarray(lm, dtype=np.float64) if lm else None,
    )


def load_annotation(path) -> Annotation:
    try:
        with open(path) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"cannot read annotation {path}: {e}") from e
    return parse_annotation(raw)


def load_image(path) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8 RGB."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e


def to_unit_range(raw: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    return (raw.astype(np.float32).transpose(2, 0, 1) / 127.5) - 1.0


def from_unit_range(img: np.ndarray) -> np.ndarray:
    """(3, H, W) float in [-1, 1] -> (H, W, 3) uint8."""
    arr = (np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(arr + 0.5).astype(np.uint8).transpose(1, 2, 0)


def preprocess(raw: np.ndarray, ann: Annotation, out_h: int, out_w: int):
    """Center-crop to (out_h, out_w), scale to [-1, 1], shift annotations to match.

    Keypoints leaving the crop are marked invisible; the face box is clamped.
    """
    h, w = raw.shape[:2]
    if h < out_h or w < out_w:
        raise IngestionError(f"image {w}x{h} smaller than requested crop {out_w}x{out_h}")
    off_y = (h - out_h) // 2
    off_x = (w - out_w) // 2
    img = to_unit_range(raw[off_y:off_y + out_h, off_x:off_x + out_w])
    kp = ann.keypoints.shifted(-off_x, -off_y, out_w, out_h)
    bbox = ann.face_bbox.shifted(-off_x, -off_y).clamped(out_w, out_h) if ann.face_bbox else None
    if bbox is not None and bbox.area == 0:
        bbox = None
    lm = ann.face_landmarks - np.array([off_x, off_y]) if ann.face_landmarks is not None else None
    return img, Annotation(keypoints=kp, face_bbox=bbox, face_landmarks=lm)


@dataclass(frozen=True)
class SampleRecord:
    name: str
    identity: str
    image_path: Path
    annotation_path: Path


@dataclass(frozen=True)
class PairRecord:
    source: SampleRecord
    target: SampleRecord


def load_dataset_manifest(root) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise IngestionError(f"no dataset manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    for key in ("image_size", "identities", "splits", "samples", "pair_index"):
        if key not in manifest:
            raise IngestionError(f"dataset manifest missing key {key!r}")
    return manifest


def sample_records(root, manifest: dict) -> dict:
    root = Path(root)
    records = {}
    for name, entry in manifest["samples"].items():
        records[name] = SampleRecord(
            name=name,
            identity=entry["identity"],
            image_path=root / entry["image"],
            annotation_path=root / entry["annotation"],
        )
    return records


def load_pair_index(csv_path, records: dict) -> list:
    """Parse a pair CSV; collect *all* problems before failing."""
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise IngestionError(f"pair index not found: {csv_path}")
    problems = []
    pairs = []
    with open(csv_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["source", "target"]:
            raise IngestionError(f"{csv_path}: expected header 'source,target', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                problems.append(f"line {lineno}: expected 2 fields, got {len(row)}")
                continue
            src, tgt = row
            missing = [n for n in (src, tgt) if n not in records]
            if missing:
                problems.append(f"line {lineno}: unknown sample(s) {missing}")
                continue
            for n in (src, tgt):
                rec = records[n]
                if not rec.image_path.exists():
                    problems.append(f"line {lineno}: missing image file {rec.image_path}")
                if not rec.annotation_path.exists():
                    problems.append(f"line {lineno}: missing annotation file {rec.annotation_path}")
            pairs.append(PairRecord(source=records[src], target=records[tgt]))
    if problems:
        raise IngestionError(
            f"{csv_path}: {len(problems)} bad row(s)", problems=problems
        )
    return pairs


def verify_checksums(root, manifest: dict) -> list:
    """Return a list of files whose sha256 does not match the manifest."""
    root = Path(root)
    bad = []
    for rel, want in manifest.get("checksums", {}).items():
        path = root / rel
        if not path.exists():
            bad.append(f"missing: {rel}")
            continue
        got = hashlib.sha256(path.read_bytes()).hexdigest()
        if got != want:
            bad.append(f"checksum mismatch: {rel}")
    return bad


class PairDataset:
    """Pose-transfer pairs for one split; items are float32 torch tensors.

    Samples are decoded and encoded to heatmaps once, then cached; toy-scale
    datasets fit comfortably in memory.
    """

    def __init__(self, root, split: str = "train", image_size=None,
                 heatmap_sigma: float = 6.0):
        self.root = Path(root)
        self.manifest = load_dataset_manifest(self.root)
        if split not in self.manifest["pair_index"]:
            raise ConfigError(f"split {split!r} not in dataset (have {list(self.manifest['pair_index'])})")
        self.split = split
        self.records = sample_records(self.root, self.manifest)
        self.pairs = load_pair_index(self.root / self.manifest["pair_index"][split], self.records)
        mh, mw = self.manifest["image_size"]
        self.image_size = tuple(image_size) if image_size else (mh, mw)
        self.heatmap_sigma = heatmap_sigma
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.pairs)

    def load_sample(self, record: SampleRecord):
        """(image float32 (3,H,W), Annotation, pose heatmaps float32 (18,H,W))."""
        hit = self._cache.get(record.name)
        if hit is None:
            raw = load_image(record.image_path)
            ann = load_annotation(record.annotation_path)
            img, ann = preprocess(raw, ann, *self.image_size)
            pose = encode_pose_heatmaps(
                ann.keypoints, *self.image_size, sigma=self.heatmap_sigma
            ).astype(np.float32)
            hit = (img, ann, pose)
            self._cache[record.name] = hit
        return hit

    def __getitem__(self, i: int) -> dict:
        pair = self.pairs[i]
        src_img, _, src_pose = self.load_sample(pair.source)
        tgt_img, _, tgt_pose = self.load_sample(pair.target)
        return {
            "src_image": torch.from_numpy(src_img),
            "tgt_image": torch.from_numpy(tgt_img),
            "src_pose": torch.from_numpy(src_pose),
            "tgt_pose": torch.from_numpy(tgt_pose),
        }


class FacePairDataset:
    """Face-patch pairs: source/target crops plus the target landmark sketch.

    Only pairs where both samples have a usable face box and the target has
    landmarks are kept.
    """

    def __init__(self, root, split: str = "train", crop_size: int = 64,
                 sketch_radius: int = 1, image_size=None):
        from .pose_codec import crop_resize_face, encode_landmark_sketch, landmarks_to_crop

        self._crop_resize = crop_resize_face
        self._sketch = encode_landmark_sketch
        self._to_crop = landmarks_to_crop
        self.body = PairDataset(root, split, image_size=image_size)
        self.crop_size = crop_size
        self.sketch_radius = sketch_radius
        self.pairs = [p for p in self.body.pairs if self._usable(p)]

    def _usable(self, pair: PairRecord) -> bool:
        _, src_ann, _ = self.body.load_sample(pair.source)
        _, tgt_ann, _ = self.body.load_sample(pair.target)
        return (
            src_ann.face_bbox is not None and src_ann.face_bbox.area >= 4
            and tgt_ann.face_bbox is not None and tgt_ann.face_bbox.area >= 4
            and tgt_ann.face_landmarks is not None and len(tgt_ann.face_landmarks) > 0
        )

    def __len__(self) -> int:
        return len(self.pairs)

    def __getitem__(self, i: int) -> dict:
        pair = self.pairs[i]
        src_img, src_ann, _ = self.body.load_sample(pair.source)
        tgt_img, tgt_ann, _ = self.body.load_sample(pair.target)
        s = self.crop_size
        src_crop = self._crop_resize(src_img, src_ann.face_bbox, s)
        tgt_crop = self._crop_resize(tgt_img, tgt_ann.face_bbox, s)
        lm = self._to_crop(tgt_ann.face_landmarks, tgt_ann.face_bbox, s)
        sketch = self._sketch(lm, s, s, radius=self.sketch_radius)
        return {
            "src_crop": torch.from_numpy(src_crop.astype(np.float32)),
            "tgt_crop": torch.from_numpy(tgt_crop.astype(np.float32)),
            "tgt_sketch": torch.from_numpy(sketch.astype(np.float32)),
        }


class BatchStream:
    """Infinite stream of fixed-size batches over shuffled passes.

    The shuffle order comes from an explicit torch.Generator; state() /
    restore() capture the generator bytes plus the in-pass position so a
    resumed run consumes exactly the batches the original would have.
    """

    def __init__(self, dataset, batch_size: int, generator: torch.Generator):
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(dataset) < batch_size:
            raise ConfigError(
                f"batch_size {batch_size} exceeds dataset size {len(dataset)}"
            )
        self.dataset = dataset
        self.batch_size = batch_size
        self.generator = generator
        self._perm: list = []
        self._cursor = 0
        self.batches_served = 0

    def next_batch(self) -> dict:
        if self._cursor + self.batch_size > len(self._perm):
            self._perm = torch.randperm(len(self.dataset), generator=self.generator).tolist()
            self._cursor = 0
        idxs = self._perm[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        self.batches_served += 1
        items = [self.dataset[i] for i in idxs]
        return {k: torch.stack([it[k] for it in items]) for k in items[0]}

    def __next__(self) -> dict:
        return self.next_batch()

    def __iter__(self):
        return self

    def state(self) -> dict:
        return {
            "generator": self.generator.get_state().numpy().tobytes().hex(),
            "perm": list(self._perm),
            "cursor": self._cursor,
            "batches_served": self.batches_served,
        }

    def restore(self, state: dict) -> None:
        raw = bytes.fromhex(state["generator"])
        self.generator.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
        self._perm = list(state["perm"])
        self._cursor = int(state["cursor"])
        self.batches_served = int(state["batches_served"])
