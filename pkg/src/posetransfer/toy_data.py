"""Procedural stick-figure dataset for desk-scale training and evaluation.

Figures are drawn without anti-aliasing. Every joint gets a 5-pixel marker
in a palette color containing at least one odd channel value, while the
background and all body colors use only even channel values — so an exact
color match recovers each keypoint with zero pixel error, which gives the
keypoint-accuracy pipeline a perfect reference detector.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError
from .pose_codec import NUM_KEYPOINTS

BACKGROUND = (200, 200, 200)

# one unique marker color per keypoint; each contains 255 or 127 (odd)
MARKER_COLORS = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (255, 0, 255),
    (0, 255, 255), (255, 127, 0), (127, 0, 255), (0, 127, 255), (255, 0, 127),
    (127, 255, 0), (0, 255, 127), (255, 127, 127), (127, 127, 255),
    (255, 255, 127), (127, 255, 255), (255, 127, 255), (127, 63, 0),
)

@dataclass(frozen=True)
class ToyIdentity:
    shoulder_half: float
    hip_half: float
    torso_len: float
    neck_len: float
    head_r: int
    upper_arm: float
    fore_arm: float
    thigh: float
    shin: float
    body_color: tuple
    second_color: tuple
    limb_color: tuple
    head_color: tuple
    texture: int  # 0 solid, 1 h-stripes, 2 v-stripes, 3 checker


def _even_color(rng) -> tuple:
    return tuple(int(2 * rng.integers(20, 101)) for _ in range(3))


def _sample_identity(rng, height: int, width: int) -> ToyIdentity:
    sy = height / 128.0
    sx = width / 88.0
    return ToyIdentity(
        shoulder_half=float(rng.uniform(10, 15) * sx),
        hip_half=float(rng.uniform(8, 12) * sx),
        torso_len=float(rng.uniform(28, 36) * sy),
        neck_len=float(rng.uniform(6, 9) * sy),
        head_r=int(rng.integers(5, 9) * min(sx, sy)),
        upper_arm=float(rng.uniform(12, 16) * sy),
        fore_arm=float(rng.uniform(10, 14) * sy),
        thigh=float(rng.uniform(14, 18) * sy),
        shin=float(rng.uniform(12, 16) * sy),
        body_color=_even_color(rng),
        second_color=_even_color(rng),
        limb_color=_even_color(rng),
        head_color=_even_color(rng),
        texture=int(rng.integers(0, 4)),
    )


def _separate(joints: np.ndarray, height: int, width: int, min_d: float = 3.0) -> np.ndarray:
    # deterministic de-overlap so no marker paints over another's center
    offsets = [(0, 0), (0, 2), (0, -2), (2, 0), (-2, 0), (2, 2), (-2, -2),
               (2, -2), (-2, 2), (0, 4), (0, -4), (4, 0), (-4, 0), (4, 4), (-4, -4)]
    out = joints.copy()
    for i in range(len(out)):
        for dx, dy in offsets:
            cand = (
                min(max(joints[i, 0] + dx, 3), width - 4),
                min(max(joints[i, 1] + dy, 3), height - 4),
            )
            if all(max(abs(cand[0] - out[j, 0]), abs(cand[1] - out[j, 1])) >= min_d
                   for j in range(i)):
                out[i] = cand
                break
    return out


def _sample_joints(rng, idt: ToyIdentity, height: int, width: int) -> np.ndarray:
    """18 joint positions (x, y) as ints, clamped inside the frame margin."""
    cx = width / 2.0 + rng.uniform(-5, 5) * (width / 88.0)
    hip_y = 0.62 * height + rng.uniform(-3, 3)
    sh_y = hip_y - idt.torso_len
    head_cy = sh_y - idt.neck_len - idt.head_r
    eye_dx = max(2, idt.head_r // 2)

    j = np.zeros((NUM_KEYPOINTS, 2))
    j[1] = (cx, sh_y)  # neck
    j[2] = (cx - idt.shoulder_half, sh_y)
    j[5] = (cx + idt.shoulder_half, sh_y)
    j[8] = (cx - idt.hip_half, hip_y)
    j[11] = (cx + idt.hip_half, hip_y)
    j[0] = (cx, head_cy + 1)  # nose
    j[14] = (cx - eye_dx, head_cy - 2)
    j[15] = (cx + eye_dx, head_cy - 2)
    j[16] = (cx - idt.head_r, head_cy)
    j[17] = (cx + idt.head_r, head_cy)

    for side, sh_i, el_i, wr_i in ((-1, 2, 3, 4), (+1, 5, 6, 7)):
        theta_u = rng.uniform(-1.1, 1.1)
        theta_e = theta_u + rng.uniform(-1.2, 1.2)
        j[el_i] = j[sh_i] + (side * np.sin(theta_u) * idt.upper_arm,
                             np.cos(theta_u) * idt.upper_arm)
        j[wr_i] = j[el_i] + (side * np.sin(theta_e) * idt.fore_arm,
                             np.cos(theta_e) * idt.fore_arm)
    for side, hp_i, kn_i, an_i in ((-1, 8, 9, 10), (+1, 11, 12, 13)):
        theta_h = rng.uniform(-0.4, 0.4)
        theta_k = theta_h + rng.uniform(-0.35, 0.35)
        j[kn_i] = j[hp_i] + (side * np.sin(theta_h) * idt.thigh,
                             np.cos(theta_h) * idt.thigh)
        j[an_i] = j[kn_i] + (side * np.sin(theta_k) * idt.shin,
                             np.cos(theta_k) * idt.shin)

    j = np.floor(j + 0.5)
    j[:, 0] = np.clip(j[:, 0], 3, width - 4)
    j[:, 1] = np.clip(j[:, 1], 3, height - 4)
    return _separate(j, height, width).astype(np.int64)


def _apply_texture(arr: np.ndarray, mask: np.ndarray, idt: ToyIdentity) -> None:
    ys, xs = np.nonzero(mask)
    arr[ys, xs] = idt.body_color
    if idt.texture == 1:
        sel = (ys // 3) % 2 == 1
    elif idt.texture == 2:
        sel = (xs // 3) % 2 == 1
    elif idt.texture == 3:
        sel = ((ys // 4) + (xs // 4)) % 2 == 1
    else:
        return
    arr[ys[sel], xs[sel]] = idt.second_color


def render_figure(idt: ToyIdentity, joints: np.ndarray, height: int, width: int) -> np.ndarray:
    """Draw the figure and its joint markers; returns (H, W, 3) uint8."""
    arr = np.empty((height, width, 3), dtype=np.uint8)
    arr[:] = BACKGROUND

    torso = [tuple(joints[2]), tuple(joints[5]), tuple(joints[11]), tuple(joints[8])]
    mask_im = Image.new("1", (width, height), 0)
    ImageDraw.Draw(mask_im).polygon(torso, fill=1)
    _apply_texture(arr, np.asarray(mask_im, dtype=bool), idt)

    im = Image.fromarray(arr)
    d = ImageDraw.Draw(im)
    head_cx, head_cy = int(joints[0][0]), int(joints[0][1] - 1)
    r = idt.head_r
    d.line([tuple(joints[1]), (head_cx, head_cy + r)], fill=idt.limb_color, width=3)
    d.ellipse([head_cx - r, head_cy - r, head_cx + r, head_cy + r], fill=idt.head_color)
    for a, b in ((2, 3), (3, 4), (5, 6), (6, 7), (8, 9), (9, 10), (11, 12), (12, 13)):
        d.line([tuple(joints[a]), tuple(joints[b])], fill=idt.limb_color, width=3)
    arr = np.asarray(im).copy()

    for i, (x, y) in enumerate(joints):
        for dx, dy in ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)):
            arr[y + dy, x + dx] = MARKER_COLORS[i]
    return arr


def detect_marker_keypoints(img: np.ndarray) -> np.ndarray:
    """Recover joints by exact marker-color match; returns (18, 3) [x, y, found]."""
    out = np.zeros((NUM_KEYPOINTS, 3))
    for i, color in enumerate(MARKER_COLORS):
        hit = np.all(img == np.array(color, dtype=img.dtype), axis=-1)
        ys, xs = np.nonzero(hit)
        if len(ys):
            out[i] = (xs.mean(), ys.mean(), 1.0)
    return out


def _annotation(idt: ToyIdentity, joints: np.ndarray, height: int, width: int) -> dict:
    head_cx, head_cy = int(joints[0][0]), int(joints[0][1] - 1)
    r = idt.head_r
    x0 = max(0, head_cx - r - 2)
    y0 = max(0, head_cy - r - 2)
    x1 = min(width, head_cx + r + 3)
    y1 = min(height, head_cy + r + 3)
    landmarks = [joints[0], joints[14], joints[15], joints[16], joints[17]]
    return {
        "keypoints": [[int(x), int(y), 1] for x, y in joints],
        "face_bbox": [x0, y0, x1, y1],
        "face_landmarks": [[int(x), int(y)] for x, y in landmarks],
    }


def synth_toy_dataset(out_dir, n_identities: int = 4, poses_per_identity: int = 3,
                      seed: int = 0, image_size=(128, 88),
                      test_fraction: float = 0.25) -> dict:
    """Render a full dataset tree and return its manifest."""
    if n_identities < 2:
        raise ConfigError("need at least 2 identities (one may go to the test split)")
    if poses_per_identity < 2:
        raise ConfigError("need at least 2 poses per identity to form pairs")
    height, width = image_size
    if height < 48 or width < 48:
        raise ConfigError(f"image size {height}x{width} too small for the figure layout")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    identities = [f"id{i:03d}" for i in range(n_identities)]
    n_test = max(1, round(n_identities * test_fraction))
    split_of = {
        ident: ("test" if i >= n_identities - n_test else "train")
        for i, ident in enumerate(identities)
    }

    samples = {}
    names_by_identity = {}
    for ident in identities:
        idt = _sample_identity(rng, height, width)
        names = []
        for p in range(poses_per_identity):
            joints = _sample_joints(rng, idt, height, width)
            img = render_figure(idt, joints, height, width)
            name = f"{ident}_p{p}"
            Image.fromarray(img).save(out / "images" / f"{name}.png")
            with open(out / "annotations" / f"{name}.json", "w") as f:
                json.dump(_annotation(idt, joints, height, width), f)
            samples[name] = {
                "image": f"images/{name}.png",
                "annotation": f"annotations/{name}.json",
                "identity": ident,
            }
            names.append(name)
        names_by_identity[ident] = names

    pair_files = {}
    for split in ("train", "test"):
        rows = []
        for ident in identities:
            if split_of[ident] != split:
                continue
            names = names_by_identity[ident]
            rows.extend(
                (a, b) for a in names for b in names if a != b
            )
        fname = f"pairs_{split}.csv"
        with open(out / fname, "w") as f:
            f.write("source,target\n")
            f.writelines(f"{a},{b}\n" for a, b in rows)
        pair_files[split] = fname

    checksums = {}
    for entry in samples.values():
        for rel in (entry["image"], entry["annotation"]):
            checksums[rel] = hashlib.sha256((out / rel).read_bytes()).hexdigest()
    for fname in pair_files.values():
        checksums[fname] = hashlib.sha256((out / fname).read_bytes()).hexdigest()

    manifest = {
        "image_size": [height, width],
        "identities": identities,
        "splits": {
            s: [n for ident in identities if split_of[ident] == s
                for n in names_by_identity[ident]]
            for s in ("train", "test")
        },
        "samples": samples,
        "pair_index": pair_files,
        "checksums": checksums,
        "seed": seed,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest
