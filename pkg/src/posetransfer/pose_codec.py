"""Pose and face encodings: keypoint heatmaps, landmark sketches, blend masks.

All arrays produced here are float64 numpy; the data pipeline casts to
float32 when building torch batches. Images are channel-first (C, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AnnotationError, ConfigError, DimensionError

# Fixed 18-keypoint order used across annotations, heatmaps and metrics.
KEYPOINT_NAMES = (
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
)

NUM_KEYPOINTS = len(KEYPOINT_NAMES)


def _round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class Keypoints:
    """18 body keypoints in pixel coordinates with visibility flags."""

    xy: np.ndarray  # (18, 2) float64
    visible: np.ndarray  # (18,) bool

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        if xy.shape != (NUM_KEYPOINTS, 2):
            raise AnnotationError(f"expected ({NUM_KEYPOINTS}, 2) keypoints, got {xy.shape}")
        if vis.shape != (NUM_KEYPOINTS,):
            raise AnnotationError(f"expected ({NUM_KEYPOINTS},) visibility, got {vis.shape}")
        if not np.all(np.isfinite(xy[vis])):
            raise AnnotationError("visible keypoints must have finite coordinates")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", vis)

    @classmethod
    def from_list(cls, raw) -> "Keypoints":
        """Parse the annotation-file form: 18 rows of [x, y, v] with v in {0, 1}."""
        if len(raw) != NUM_KEYPOINTS:
            raise AnnotationError(f"expected {NUM_KEYPOINTS} keypoint rows, got {len(raw)}")
        xy = np.zeros((NUM_KEYPOINTS, 2))
        vis = np.zeros(NUM_KEYPOINTS, dtype=bool)
        for i, row in enumerate(raw):
            if len(row) != 3:
                raise AnnotationError(f"keypoint row {i} must be [x, y, v], got {row!r}")
            x, y, v = row
            if v not in (0, 1):
                raise AnnotationError(f"keypoint row {i}: visibility must be 0 or 1, got {v!r}")
            xy[i] = (x, y)
            vis[i] = bool(v)
        return cls(xy=xy, visible=vis)

    def to_list(self):
        return [
            [float(x), float(y), int(v)]
            for (x, y), v in zip(self.xy, self.visible)
        ]

    def shifted(self, dx: float, dy: float, width: int, height: int) -> "Keypoints":
        """Translate by (dx, dy); points leaving the frame become invisible."""
        xy = self.xy + np.array([dx, dy])
        inside = (xy[:, 0] >= 0) & (xy[:, 0] < width) & (xy[:, 1] >= 0) & (xy[:, 1] < height)
        return Keypoints(xy=xy, visible=self.visible & inside)


@dataclass(frozen=True)
class FaceBox:
    """Axis-aligned face region, half-open pixel interval [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @classmethod
    def from_list(cls, raw) -> "FaceBox":
        if len(raw) != 4:
            raise AnnotationError(f"face box must be [x0, y0, x1, y1], got {raw!r}")
        x0, y0, x1, y1 = (_round_half_up(v) for v in raw)
        if x1 < x0 or y1 < y0:
            raise AnnotationError(f"face box has negative extent: {raw!r}")
        return cls(x0, y0, x1, y1)

    def to_list(self):
        return [self.x0, self.y0, self.x1, self.y1]

    def clamped(self, width: int, height: int) -> "FaceBox":
        x0 = min(max(self.x0, 0), width)
        x1 = min(max(self.x1, 0), width)
        y0 = min(max(self.y0, 0), height)
        y1 = min(max(self.y1, 0), height)
        return FaceBox(x0, y0, max(x1, x0), max(y1, y0))

    def shifted(self, dx: int, dy: int) -> "FaceBox":
        return FaceBox(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height


def encode_pose_heatmaps(kp: Keypoints, height: int, width: int, sigma: float = 6.0) -> np.ndarray:
    """One Gaussian heatmap channel per keypoint, shape (18, H, W).

    The peak value is exactly 1 at the rounded keypoint pixel; invisible
    keypoints yield an all-zero channel.
    """
    if sigma <= 0:
        raise ConfigError(f"heatmap sigma must be positive, got {sigma}")
    if height <= 0 or width <= 0:
        raise DimensionError(f"bad heatmap size {height}x{width}")
    out = np.zeros((NUM_KEYPOINTS, height, width))
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    for i in range(NUM_KEYPOINTS):
        if not kp.visible[i]:
            continue
        cx = min(max(_round_half_up(kp.xy[i, 0]), 0), width - 1)
        cy = min(max(_round_half_up(kp.xy[i, 1]), 0), height - 1)
        d2 = (xs - cx) ** 2 + (ys - cy) ** 2
        out[i] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def encode_landmark_sketch(landmarks, height: int, width: int, radius: int = 1) -> np.ndarray:
    """Binary sketch map (1, H, W): filled discs at each landmark, clipped to frame."""
    lm = np.asarray(landmarks, dtype=np.float64)
    if lm.size == 0:
        raise AnnotationError("cannot rasterize a sketch from an empty landmark list")
    if lm.ndim != 2 or lm.shape[1] != 2:
        raise AnnotationError(f"landmarks must be (N, 2), got {lm.shape}")
    if radius < 0:
        raise ConfigError(f"sketch radius must be >= 0, got {radius}")
    out = np.zeros((1, height, width))
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    r2 = radius * radius
    for x, y in lm:
        cx, cy = _round_half_up(x), _round_half_up(y)
        if cx < -radius or cx > width - 1 + radius or cy < -radius or cy > height - 1 + radius:
            continue
        out[0][(xs - cx) ** 2 + (ys - cy) ** 2 <= r2] = 1.0
    return out


@dataclass(frozen=True)
class BlendMask:
    """Soft face-region weights in [0, 1]; degenerate marks an empty box."""

    data: np.ndarray  # (H, W) float64
    degenerate: bool


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Unit-sum 1-D Gaussian with half-width ceil(3*sigma); [1] when sigma == 0."""
    if sigma < 0:
        raise ConfigError(f"blur sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(1)
    r = int(np.ceil(3.0 * sigma))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _blur1d(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    # zero-padded 'same' convolution with an odd, symmetric kernel
    r = len(kernel) // 2
    if r == 0:
        return a * kernel[0]
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    ap = np.pad(a, pad)
    out = np.zeros_like(a)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i, i + a.shape[axis])
        out += w * ap[tuple(sl)]
    return out


def face_blend_mask(box: FaceBox, height: int, width: int, sigma: float = 3.0) -> BlendMask:
    """Box indicator blurred with a unit-sum Gaussian (zero padding at borders)."""
    b = box.clamped(width, height)
    if b.area == 0:
        return BlendMask(data=np.zeros((height, width)), degenerate=True)
    ind = np.zeros((height, width))
    ind[b.y0:b.y1, b.x0:b.x1] = 1.0
    k = gaussian_kernel1d(sigma)
    soft = _blur1d(_blur1d(ind, k, axis=0), k, axis=1)
    return BlendMask(data=np.clip(soft, 0.0, 1.0), degenerate=False)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Keys bicubic kernel with a = -0.5
    at = np.abs(t)
    at2 = at * at
    at3 = at2 * at
    near = 1.5 * at3 - 2.5 * at2 + 1.0
    far = -0.5 * at3 + 2.5 * at2 - 4.0 * at + 2.0
    return np.where(at <= 1.0, near, np.where(at < 2.0, far, 0.0))


def _resize_axis(img: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    in_len = img.shape[axis]
    if out_len == in_len:
        return img.copy()
    scale = in_len / out_len
    src = (np.arange(out_len) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    frac = src - base
    shape = [1] * img.ndim
    shape[axis] = out_len
    out = np.zeros([out_len if d == axis else s for d, s in enumerate(img.shape)])
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, in_len - 1)
        w = _cubic_kernel(frac - k).reshape(shape)
        out += w * np.take(img, idx, axis=axis)
    return out


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Keys bicubic resize of a (C, H, W) array, edge-clamped."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected (C, H, W) image, got shape {img.shape}")
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"bad output size {out_h}x{out_w}")
    return _resize_axis(_resize_axis(img, out_h, axis=1), out_w, axis=2)


def crop_resize_face(img: np.ndarray, box: FaceBox, out_size: int = 64) -> np.ndarray:
    """Crop the face box out of a (C, H, W) image and bicubic-resize to a square."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3:
        raise DimensionError(f"expected (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    b = box.clamped(w, h)
    if b.area < 4:
        raise AnnotationError(f"face box too small after clamping: area {b.area} px^2")
    crop = img[:, b.y0:b.y1, b.x0:b.x1]
    return bicubic_resize(crop, out_size, out_size)


def paste_face(face: np.ndarray, box: FaceBox, height: int, width: int) -> np.ndarray:
    """Resize a square face patch back into its box on an otherwise-zero canvas."""
    face = np.asarray(face, dtype=np.float64)
    if face.ndim != 3:
        raise DimensionError(f"expected (C, s, s) face patch, got shape {face.shape}")
    b = box.clamped(width, height)
    canvas = np.zeros((face.shape[0], height, width))
    if b.area == 0:
        return canvas
    canvas[:, b.y0:b.y1, b.x0:b.x1] = bicubic_resize(face, b.height, b.width)
    return canvas


def landmarks_to_crop(landmarks, box: FaceBox, out_size: int = 64) -> np.ndarray:
    """Map image-space landmarks into the coordinate frame of the resized crop."""
    lm = np.asarray(landmarks, dtype=np.float64)
    if box.width <= 0 or box.height <= 0:
        raise AnnotationError("cannot map landmarks into an empty face box")
    out = np.empty_like(lm)
    out[:, 0] = (lm[:, 0] - box.x0) * (out_size / box.width)
    out[:, 1] = (lm[:, 1] - box.y0) * (out_size / box.height)
    return out
