"""Evaluation metrics and the JSON evaluation report.

Covers keypoint error curves per part group, face identity distance,
style retrieval recall, Fréchet feature distance, paired perceptual
distance, SSIM, and a PCA projection for inspecting guidance maps.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass

import numpy as np
import torch

import jsonschema

from .errors import ProtocolError
from .losses import FeatureExtractor
from .pose_codec import NUM_KEYPOINTS

# keypoint index groups of the standard 18-point order used in reports;
# hand groups are wrist-anchored and evaluated on a doubled threshold axis
PART_GROUPS = {
    "body": tuple(range(NUM_KEYPOINTS)),
    "face": (0, 14, 15, 16, 17),
    "right_hand": (4,),
    "left_hand": (7,),
}

DEFAULT_THRESHOLDS = tuple(range(1, 11))


@dataclass(frozen=True)
class ErrorCurve:
    thresholds: tuple
    accuracy: tuple
    total: int


def _as_points(arr, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.shape != (NUM_KEYPOINTS, 3):
        raise ProtocolError(f"{what} must be ({NUM_KEYPOINTS}, 3) [x, y, flag], got {a.shape}")
    return a


def keypoint_error_curve(pred, gt, thresholds=DEFAULT_THRESHOLDS,
                         part_groups=None) -> dict:
    """Accuracy-vs-threshold curves per part group.

    ``pred``/``gt`` are aligned lists of (18, 3) arrays: [x, y, detected]
    for predictions, [x, y, visible] for ground truth. A ground-truth
    keypoint counts as correct when it was detected within the threshold
    (hand groups: within twice the threshold, reported on that axis).
    """
    if len(pred) != len(gt):
        raise ProtocolError(f"prediction/ground-truth counts differ: {len(pred)} vs {len(gt)}")
    if len(gt) == 0:
        raise ProtocolError("cannot evaluate an empty set")
    if part_groups is None:
        part_groups = PART_GROUPS
    thresholds = tuple(float(t) for t in thresholds)
    if not thresholds or any(t < 0 for t in thresholds):
        raise ProtocolError(f"bad thresholds {thresholds}")

    pred = [_as_points(p, "prediction") for p in pred]
    gt = [_as_points(g, "ground truth") for g in gt]

    dists = np.full((len(gt), NUM_KEYPOINTS), np.inf)
    visible = np.zeros((len(gt), NUM_KEYPOINTS), dtype=bool)
    for i, (p, g) in enumerate(zip(pred, gt)):
        visible[i] = g[:, 2] > 0
        found = p[:, 2] > 0
        d = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
        dists[i, found] = d[found]

    curves = {}
    for group, idxs in part_groups.items():
        idxs = list(idxs)
        axis = tuple(2.0 * t for t in thresholds) if "hand" in group else thresholds
        vis = visible[:, idxs]
        total = int(vis.sum())
        acc = []
        for t in axis:
            ok = (dists[:, idxs] <= t) & vis
            acc.append(float(ok.sum() / total) if total else 0.0)
        curves[group] = ErrorCurve(thresholds=axis, accuracy=tuple(acc), total=total)
    return curves


class Embedder:
    """Image -> fixed-length vector, with a provenance tag for reports."""

    def __init__(self, fn, provenance: str):
        self._fn = fn
        self.provenance = provenance

    def __call__(self, img: np.ndarray) -> np.ndarray:
        return np.asarray(self._fn(np.asarray(img, dtype=np.float32)), dtype=np.float64)

    def embed_batch(self, imgs) -> np.ndarray:
        return np.stack([self(im) for im in imgs])

    @classmethod
    def fixed_random(cls, seed: int = 3, dim: int = 32) -> "Embedder":
        g = torch.Generator().manual_seed(int(seed))
        convs = []
        c = 3
        for w in (8, 16, 32, dim):
            conv = torch.nn.Conv2d(c, w, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / np.sqrt(c * 9))
                conv.bias.zero_()
            conv.requires_grad_(False)
            convs.append(conv)
            c = w
        net = torch.nn.Sequential(*[m for conv in convs for m in (conv, torch.nn.LeakyReLU(0.2))])

        def fn(img):
            with torch.no_grad():
                x = torch.from_numpy(img).unsqueeze(0)
                return net(x).mean(dim=(-2, -1))[0].numpy()

        return cls(fn, f"fixed-random(seed={seed})")

    @classmethod
    def flatten(cls) -> "Embedder":
        return cls(lambda img: img.ravel(), "flatten")

    @classmethod
    def constant(cls, dim: int = 8) -> "Embedder":
        return cls(lambda img: np.zeros(dim, dtype=np.float32), f"constant(dim={dim})")

    @classmethod
    def from_provenance(cls, tag: str) -> "Embedder":
        if tag == "flatten":
            return cls.flatten()
        m = re.fullmatch(r"fixed-random\(seed=(\d+)\)", tag)
        if m:
            return cls.fixed_random(seed=int(m.group(1)))
        m = re.fullmatch(r"constant\(dim=(\d+)\)", tag)
        if m:
            return cls.constant(dim=int(m.group(1)))
        raise ProtocolError(f"unknown embedder provenance {tag!r}")


def _unit_rows(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(norms > 0, v / np.where(norms > 0, norms, 1.0), v)


def face_identity_eval(pairs, embedder: Embedder, eps=(0.6, 0.7)) -> dict:
    """Mean L2 distance between unit-normalized embeddings of (generated,
    reference) face pairs, plus match accuracy at each epsilon.

    Flags a degenerate embedder: all distances ~0 while some images differ.
    """
    if not pairs:
        raise ProtocolError("no face pairs to evaluate")
    gen = embedder.embed_batch([a for a, _ in pairs])
    ref = embedder.embed_batch([b for _, b in pairs])
    dists = np.linalg.norm(_unit_rows(gen) - _unit_rows(ref), axis=-1)
    images_differ = any(
        a.shape != b.shape or not np.array_equal(a, b) for a, b in pairs
    )
    return {
        "mean_distance": float(dists.mean()),
        "accuracy": {str(e): float((dists < e).mean()) for e in eps},
        "n": len(pairs),
        "degenerate_embedder": bool(images_differ and (dists < 1e-9).all()),
    }


def retrieval_recall(query_vecs, db_vecs, query_pos, db_ids, ks=(3, 5, 10)) -> dict:
    """recall@k by ascending L2 distance; ties broken by database index."""
    q = np.asarray(query_vecs, dtype=np.float64)
    db = np.asarray(db_vecs, dtype=np.float64)
    if q.ndim != 2 or db.ndim != 2 or q.shape[1] != db.shape[1]:
        raise ProtocolError(f"bad embedding shapes {q.shape} vs {db.shape}")
    if len(db_ids) != len(db):
        raise ProtocolError("db_ids length does not match database")
    if len(query_pos) != len(q):
        raise ProtocolError("query_pos length does not match queries")
    known = set(db_ids)
    missing = [p for p in query_pos if p not in known]
    if missing:
        raise ProtocolError(f"positives missing from database: {sorted(set(missing))[:5]}")
    ks = tuple(int(k) for k in ks)
    if any(k < 1 or k > len(db) for k in ks):
        raise ProtocolError(f"k out of range for database of {len(db)}: {ks}")
    db_ids = list(db_ids)
    hits = {k: 0 for k in ks}
    for vec, pos in zip(q, query_pos):
        d = np.linalg.norm(db - vec, axis=1)
        order = np.argsort(d, kind="stable")
        for k in ks:
            if any(db_ids[i] == pos for i in order[:k]):
                hits[k] += 1
    return {k: hits[k] / len(q) for k in ks}


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b, eps: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + tr(Ca + Cb - 2 (Ca Cb)^(1/2)) with eigenvalue clamping."""
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64) + eps * np.eye(len(mu_a))
    cov_b = np.asarray(cov_b, dtype=np.float64) + eps * np.eye(len(mu_b))
    diff = mu_a - mu_b
    wa, va = np.linalg.eigh(cov_a)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    wm = np.linalg.eigvalsh(root_a @ cov_b @ root_a)
    tr_sqrt = np.sqrt(np.clip(wm, 0.0, None)).sum()
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(0.0, val)


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (n, d)."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ProtocolError(f"bad feature shapes {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ProtocolError("need at least 2 samples per side to fit moments")
    return frechet_from_moments(
        a.mean(axis=0), np.cov(a, rowvar=False),
        b.mean(axis=0), np.cov(b, rowvar=False),
    )


def paired_perceptual_distance(imgs_a, imgs_b, extractor: FeatureExtractor,
                               layer_weights=None) -> float:
    """Mean over pairs of the weighted MSE between unit-normalized
    per-pixel feature vectors at each extractor stage."""
    if len(imgs_a) != len(imgs_b) or len(imgs_a) == 0:
        raise ProtocolError(f"need equal nonempty sets, got {len(imgs_a)} vs {len(imgs_b)}")
    a = torch.from_numpy(np.stack(imgs_a).astype(np.float32))
    b = torch.from_numpy(np.stack(imgs_b).astype(np.float32))
    if a.shape != b.shape:
        raise ProtocolError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        fa = extractor(a)
        fb = extractor(b)
    if layer_weights is None:
        layer_weights = [1.0 / len(fa)] * len(fa)
    if len(layer_weights) != len(fa):
        raise ProtocolError(f"{len(layer_weights)} weights for {len(fa)} stages")

    def unit(f):
        return f / f.pow(2).sum(dim=1, keepdim=True).clamp_min(1e-20).sqrt()

    total = 0.0
    for w, la, lb in zip(layer_weights, fa, fb):
        total += w * float((unit(la) - unit(lb)).pow(2).sum(dim=1).mean())
    return total


def ssim(a: np.ndarray, b: np.ndarray, window: int = 7) -> float:
    """Mean SSIM over valid uniform windows; inputs are [-1, 1] images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ProtocolError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ProtocolError(f"expected (C, H, W), got {a.shape}")
    h, w = a.shape[-2:]
    if window < 1 or window > min(h, w):
        raise ProtocolError(f"window {window} invalid for {h}x{w} image")
    x = (np.clip(a, -1.0, 1.0) + 1.0) / 2.0
    y = (np.clip(b, -1.0, 1.0) + 1.0) / 2.0
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    def win_mean(z):
        v = np.lib.stride_tricks.sliding_window_view(z, (window, window), axis=(1, 2))
        return v.mean(axis=(-2, -1))

    mx = win_mean(x)
    my = win_mean(y)
    mxx = win_mean(x * x)
    myy = win_mean(y * y)
    mxy = win_mean(x * y)
    var_x = mxx - mx * mx
    var_y = myy - my * my
    cov = mxy - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def pca_visualize_guidance(guidance: np.ndarray) -> np.ndarray:
    """Project a (C, h, w) feature map onto its top-3 principal components,
    each min-max scaled to [-1, 1]; constant components map to 0."""
    f = np.asarray(guidance, dtype=np.float64)
    if f.ndim != 3:
        raise ProtocolError(f"expected (C, h, w) guidance, got {f.shape}")
    c, h, w = f.shape
    x = f.reshape(c, h * w).T
    x = x - x.mean(axis=0, keepdims=True)
    _, sv, vt = np.linalg.svd(x, full_matrices=False)
    out = np.zeros((3, h, w))
    for i in range(min(3, vt.shape[0])):
        if sv[i] <= sv[0] * 1e-10:
            continue  # numerical-noise component: don't stretch it to full contrast
        comp = vt[i]
        # fix the SVD sign ambiguity for reproducible output
        if comp[np.argmax(np.abs(comp))] < 0:
            comp = -comp
        proj = x @ comp
        lo, hi = proj.min(), proj.max()
        if hi > lo:
            out[i] = (2.0 * (proj - lo) / (hi - lo) - 1.0).reshape(h, w)
    return out


REPORT_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "dataset", "image_metrics",
                 "keypoint_accuracy", "face_identity", "retrieval", "provenance"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "dataset": {
            "type": "object",
            "required": ["root", "split", "n_pairs"],
            "properties": {
                "root": {"type": "string"},
                "split": {"type": "string"},
                "n_pairs": {"type": "integer", "minimum": 0},
            },
        },
        "image_metrics": {
            "type": "object",
            "required": ["ssim", "frechet", "perceptual"],
            "properties": {
                "ssim": {"type": "number"},
                "frechet": {"type": "number"},
                "perceptual": {"type": "number"},
            },
        },
        "keypoint_accuracy": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["thresholds", "accuracy", "total"],
                "properties": {
                    "thresholds": {"type": "array", "items": {"type": "number"}},
                    "accuracy": {
                        "type": "array",
                        "items": {"type": "number", "minimum": 0, "maximum": 1},
                    },
                    "total": {"type": "integer", "minimum": 0},
                },
            },
        },
        "face_identity": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["mean_distance", "accuracy", "n", "degenerate_embedder"],
                    "properties": {
                        "mean_distance": {"type": "number"},
                        "accuracy": {
                            "type": "object",
                            "additionalProperties": {"type": "number"},
                        },
                        "n": {"type": "integer"},
                        "degenerate_embedder": {"type": "boolean"},
                    },
                },
            ]
        },
        "retrieval": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "required": ["recall", "n_queries"],
                    "properties": {
                        "recall": {
                            "type": "object",
                            "additionalProperties": {"type": "number"},
                        },
                        "n_queries": {"type": "integer"},
                    },
                },
            ]
        },
        "provenance": {
            "type": "object",
            "required": ["extractor", "embedder", "checkpoint"],
            "properties": {
                "extractor": {"type": "string"},
                "embedder": {"type": "string"},
                "checkpoint": {"type": "string"},
            },
        },
    },
}


def curves_to_json(curves: dict) -> dict:
    return {
        name: {
            "thresholds": list(c.thresholds),
            "accuracy": list(c.accuracy),
            "total": c.total,
        }
        for name, c in curves.items()
    }


def validate_report(report: dict) -> None:
    try:
        jsonschema.validate(report, REPORT_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ProtocolError(f"evaluation report rejected by schema: {e.message}") from e


def save_report(report: dict, path) -> None:
    validate_report(report)
    with open(path, "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)


def load_report(path) -> dict:
    with open(path) as f:
        report = json.load(f)
    validate_report(report)
    return report
