import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from posetransfer.data_pipeline import (
    Annotation,
    BatchStream,
    FacePairDataset,
    PairDataset,
    from_unit_range,
    load_dataset_manifest,
    load_pair_index,
    parse_annotation,
    preprocess,
    sample_records,
    to_unit_range,
    verify_checksums,
)
from posetransfer.errors import AnnotationError, ConfigError, IngestionError


def valid_raw(**extra):
    raw = {"keypoints": [[float(i), float(i + 1), 1] for i in range(18)]}
    raw.update(extra)
    return raw


def test_parse_minimal_annotation():
    ann = parse_annotation(valid_raw())
    assert ann.keypoints.xy.shape == (18, 2)
    assert ann.keypoints.visible.all()
    assert ann.face_bbox is None and ann.face_landmarks is None


def test_parse_full_annotation():
    ann = parse_annotation(valid_raw(
        face_bbox=[2.0, 3.0, 10.0, 11.0],
        face_landmarks=[[4.5, 5.5], [6.0, 7.0]],
    ))
    assert ann.face_bbox.to_list() == [2, 3, 10, 11]
    assert ann.face_landmarks.shape == (2, 2)
    assert ann.face_landmarks.dtype == np.float64


@pytest.mark.parametrize("raw", [
    {"keypoints": [[0.0, 0.0, 1]] * 17},                      # too few rows
    {"keypoints": [[0.0, 0.0, 2]] + [[0.0, 0.0, 1]] * 17},    # bad visibility
    valid_raw(face_bbox=[1, 2, 3]),                           # short bbox
    valid_raw(face_landmarks=[[1, 2, 3]]),                    # 3-wide landmark
    valid_raw(extra_field=1),                                 # unknown key
    {},                                                       # keypoints required
])
def test_parse_rejects_malformed(raw):
    with pytest.raises(AnnotationError):
        parse_annotation(raw)


def test_annotation_json_round_trip():
    ann = parse_annotation(valid_raw(
        face_bbox=[2, 3, 10, 11], face_landmarks=[[4.0, 5.0]],
    ))
    again = parse_annotation(json.loads(json.dumps(ann.to_json_dict())))
    assert np.array_equal(again.keypoints.xy, ann.keypoints.xy)
    assert again.face_bbox == ann.face_bbox
    assert np.array_equal(again.face_landmarks, ann.face_landmarks)


def test_unit_range_endpoints_exact():
    raw = np.array([[[0, 127, 255]]], dtype=np.uint8)  # (1, 1, 3)
    img = to_unit_range(raw)
    assert img.shape == (3, 1, 1) and img.dtype == np.float32
    assert img[0, 0, 0] == -1.0
    assert img[2, 0, 0] == 1.0
    assert img[1, 0, 0] == np.float32(127) / np.float32(127.5) - np.float32(1.0)


def test_unit_range_round_trips_every_byte():
    raw = np.arange(256, dtype=np.uint8).reshape(1, -1)[None].repeat(3, axis=0)
    raw = raw.transpose(1, 2, 0)  # (1, 256, 3)
    assert np.array_equal(from_unit_range(to_unit_range(raw)), raw)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_from_unit_range_clips_out_of_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.uniform(-1.6, 1.6, size=(3, 4, 5))
    out = from_unit_range(img)
    assert out.dtype == np.uint8 and out.shape == (4, 5, 3)
    assert np.array_equal(from_unit_range(np.clip(img, -1, 1)), out)


def test_preprocess_center_crop_and_shift():
    raw = np.zeros((10, 8, 3), dtype=np.uint8)
    raw[3, 2] = 255  # pixel that lands at crop origin (offsets 2, 3)
    rows = [[2.0, 3.0, 1]] + [[0.0, 0.0, 1]] + [[5.0, 8.0, 1]] * 16
    ann = parse_annotation({"keypoints": rows, "face_bbox": [0, 0, 3, 5],
                            "face_landmarks": [[2.0, 3.0]]})
    img, out = preprocess(raw, ann, 4, 4)
    assert img.shape == (3, 4, 4)
    assert img[0, 0, 0] == 1.0  # the marked pixel moved to (0, 0)
    assert np.array_equal(out.keypoints.xy[0], [0.0, 0.0])
    assert out.keypoints.visible[0]
    assert not out.keypoints.visible[1]  # (0, 0) falls outside the crop
    assert np.array_equal(out.face_landmarks[0], [0.0, 0.0])
    assert out.face_bbox.to_list() == [0, 0, 1, 2]  # clamped to the crop


def test_preprocess_drops_degenerate_face_box():
    raw = np.zeros((10, 8, 3), dtype=np.uint8)
    ann = parse_annotation(valid_raw(face_bbox=[0, 0, 2, 2]))
    _, out = preprocess(raw, ann, 4, 4)  # box entirely left of the crop
    assert out.face_bbox is None


def test_preprocess_rejects_too_small_image():
    raw = np.zeros((4, 4, 3), dtype=np.uint8)
    with pytest.raises(IngestionError):
        preprocess(raw, parse_annotation(valid_raw()), 8, 8)


def _write_sample(root, name):
    from PIL import Image

    img = Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8))
    img.save(root / f"{name}.png")
    (root / f"{name}.json").write_text(json.dumps(valid_raw()))


def test_pair_index_collects_every_problem(tmp_path):
    _write_sample(tmp_path, "a")
    _write_sample(tmp_path, "b")
    records = sample_records(tmp_path, {"samples": {
        name: {"identity": "id0", "image": f"{name}.png", "annotation": f"{name}.json"}
        for name in ("a", "b", "ghost")
    }})
    csv = tmp_path / "pairs.csv"
    csv.write_text(
        "source,target\n"
        "a,b\n"
        "a\n"              # wrong field count
        "a,nope\n"         # unknown sample
        "ghost,b\n"        # files missing on disk
    )
    with pytest.raises(IngestionError) as exc:
        load_pair_index(csv, records)
    problems = exc.value.problems
    assert len(problems) == 4  # ghost contributes image + annotation
    assert any("2 fields" in p for p in problems)
    assert any("nope" in p for p in problems)
    assert sum("ghost" in p for p in problems) == 2


def test_pair_index_rejects_bad_header(tmp_path):
    csv = tmp_path / "pairs.csv"
    csv.write_text("src,dst\na,b\n")
    with pytest.raises(IngestionError, match="header"):
        load_pair_index(csv, {})


def test_pair_index_missing_file(tmp_path):
    with pytest.raises(IngestionError, match="not found"):
        load_pair_index(tmp_path / "nope.csv", {})


def test_verify_checksums_flags_tampering(toy_root, tmp_path):
    manifest = load_dataset_manifest(toy_root)
    assert verify_checksums(toy_root, manifest) == []

    import shutil

    copy = tmp_path / "ds"
    shutil.copytree(toy_root, copy)
    victim = copy / sorted(manifest["checksums"])[0]
    victim.write_bytes(victim.read_bytes() + b"x")
    bad = verify_checksums(copy, load_dataset_manifest(copy))
    assert len(bad) == 1 and "mismatch" in bad[0]
    victim.unlink()
    bad = verify_checksums(copy, load_dataset_manifest(copy))
    assert len(bad) == 1 and "missing" in bad[0]


def test_pair_dataset_items(small_root):
    ds = PairDataset(small_root, "train", image_size=(64, 48), heatmap_sigma=4.0)
    assert len(ds) == 4
    item = ds[0]
    assert set(item) == {"src_image", "tgt_image", "src_pose", "tgt_pose"}
    for key in ("src_image", "tgt_image"):
        t = item[key]
        assert t.shape == (3, 64, 48) and t.dtype == torch.float32
        assert t.min() >= -1.0 and t.max() <= 1.0
    for key in ("src_pose", "tgt_pose"):
        t = item[key]
        assert t.shape == (18, 64, 48) and t.dtype == torch.float32
        flat = t.reshape(18, -1)
        assert torch.all(flat.max(dim=1).values <= 1.0)
        assert torch.all(flat.min(dim=1).values >= 0.0)


def test_pair_dataset_rejects_unknown_split(small_root):
    with pytest.raises(ConfigError, match="split"):
        PairDataset(small_root, "nope")


def test_face_pair_dataset_items(small_root):
    ds = FacePairDataset(small_root, "train", crop_size=16, image_size=(64, 48))
    assert len(ds) > 0
    item = ds[0]
    assert item["src_crop"].shape == (3, 16, 16)
    assert item["tgt_crop"].shape == (3, 16, 16)
    assert item["tgt_sketch"].shape == (1, 16, 16)
    assert set(item["tgt_sketch"].unique().tolist()) <= {0.0, 1.0}


class _FakeDataset:
    """Items carry their own index so batch contents identify the order."""

    def __init__(self, n):
        self.n = n

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return {"x": torch.tensor([float(i)])}


def _indices(batch):
    return batch["x"].flatten().tolist()


def test_batch_stream_partitions_each_pass():
    stream = BatchStream(_FakeDataset(6), 2, torch.Generator().manual_seed(0))
    seen = []
    for _ in range(3):
        seen.extend(_indices(stream.next_batch()))
    assert sorted(seen) == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]
    assert stream.batches_served == 3


def test_batch_stream_drops_remainder():
    stream = BatchStream(_FakeDataset(5), 2, torch.Generator().manual_seed(0))
    per_pass = [_indices(stream.next_batch()) for _ in range(4)]
    first_pass = per_pass[0] + per_pass[1]
    assert len(set(first_pass)) == 4  # fifth sample skipped this pass


def test_batch_stream_deterministic():
    a = BatchStream(_FakeDataset(8), 3, torch.Generator().manual_seed(5))
    b = BatchStream(_FakeDataset(8), 3, torch.Generator().manual_seed(5))
    for _ in range(7):
        assert _indices(a.next_batch()) == _indices(b.next_batch())


def test_batch_stream_restore_mid_pass():
    a = BatchStream(_FakeDataset(8), 3, torch.Generator().manual_seed(9))
    for _ in range(4):  # stop mid-pass (pass = 2 batches + reshuffle)
        a.next_batch()
    saved = json.loads(json.dumps(a.state()))  # must survive JSON

    b = BatchStream(_FakeDataset(8), 3, torch.Generator().manual_seed(0))
    b.restore(saved)
    assert b.batches_served == 4
    for _ in range(6):
        assert _indices(a.next_batch()) == _indices(b.next_batch())


def test_batch_stream_rejects_oversized_batch():
    with pytest.raises(ConfigError):
        BatchStream(_FakeDataset(3), 4, torch.Generator().manual_seed(0))
    with pytest.raises(ConfigError):
        BatchStream(_FakeDataset(3), 0, torch.Generator().manual_seed(0))


def test_batch_stream_is_iterator():
    stream = BatchStream(_FakeDataset(4), 2, torch.Generator().manual_seed(1))
    got = next(iter(stream))
    assert set(got) == {"x"} and got["x"].shape == (2, 1)
