"""Alternating two-branch training.

Each step runs three phases:
  1. coarse phase  - update the transfer branch on recon + perceptual;
  2. full phase    - update both branches on the composed output with
                     style and adversarial terms added;
  3. critic phase  - k_disc discriminator updates, each on a fresh batch
                     with the generator output detached.

Learning rate is constant for the first ``decay_start_epoch`` epochs, then
decays linearly to zero at ``epochs``. All four optimizers share it.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .data_pipeline import BatchStream, FacePairDataset, PairDataset
from .detail_branch import (
    DetailBranch,
    DetailBranchConfig,
    FaceDetailModule,
    FaceModuleConfig,
    compose_final,
)
from .errors import ConfigError, NumericError, TrainingDiverged
from .losses import (
    Discriminator,
    FeatureExtractor,
    LossWeights,
    coarse_loss,
    full_loss,
    lsgan_d_loss,
)
from .pose_codec import (
    crop_resize_face,
    encode_landmark_sketch,
    encode_pose_heatmaps,
    face_blend_mask,
    landmarks_to_crop,
    paste_face,
)
from .transfer_branch import PoseTransferBranch, TransferBranchConfig

METRIC_KEYS = (
    "loss_coarse", "coarse_recon", "coarse_perceptual",
    "loss_full", "full_recon", "full_perceptual", "full_style", "adv_g",
    "d_app", "d_shape",
)


def lr_at(epoch: float, lr0: float = 1e-4, decay_start: int = 10, total: int = 40) -> float:
    """Piecewise schedule: flat at lr0, then linear to 0 at ``total``."""
    if total <= decay_start:
        raise ConfigError(f"total epochs {total} must exceed decay start {decay_start}")
    if epoch <= decay_start:
        return lr0
    return max(0.0, lr0 * (total - epoch) / (total - decay_start))


@dataclass
class TrainConfig:
    data_root: str = ""
    out_dir: str = ""
    epochs: int = 40
    decay_start_epoch: int = 10
    lr0: float = 1e-4
    weight_decay: float = 1e-5
    k_disc: int = 3
    batch_size: int = 4
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 10  # epochs
    image_size: tuple = (256, 176)
    heatmap_sigma: float = 6.0
    blend_sigma: float = 3.0
    # transfer branch
    base_channels: int = 64
    num_downsamples: int = 3
    num_blocks: int = 9
    # detail branch
    code_length: int = 128
    stage_channels: tuple = (512, 256, 128)
    num_res_blocks: int = 6
    style_channels: tuple = (64, 128)
    # discriminators
    disc_base_channels: int = 64
    disc_layers: int = 4
    # objective
    weights: LossWeights = field(default_factory=LossWeights)
    extractor: str = "fixed-random(seed=7)"
    optimizer: str = "radam"  # or "adamw"
    # face stage
    face_crop: int = 64
    face_epochs: int = 200
    face_lr: float = 1e-4
    face_stage_channels: tuple = (256, 128, 64)
    face_style_channels: tuple = (32, 64)
    face_res_blocks: int = 6
    face_code_length: int = 128

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.epochs < 1 or not (0 <= self.decay_start_epoch < self.epochs):
            raise ConfigError(
                f"need 0 <= decay_start_epoch < epochs, got {self.decay_start_epoch}/{self.epochs}"
            )
        if self.k_disc < 1:
            raise ConfigError("k_disc must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.stage_channels) != self.num_downsamples:
            raise ConfigError(
                "detail branch needs one upsampling stage per transfer downsample: "
                f"{len(self.stage_channels)} vs {self.num_downsamples}"
            )
        stride = 2 ** self.num_downsamples
        h, w = self.image_size
        if h % stride or w % stride:
            raise ConfigError(f"image size {h}x{w} must be divisible by {stride}")
        if self.optimizer not in ("radam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.weights)
        for key in ("image_size", "stage_channels", "style_channels",
                    "face_stage_channels", "face_style_channels"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        for key in ("image_size", "stage_channels", "style_channels",
                    "face_stage_channels", "face_style_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Networks:
    transfer: PoseTransferBranch
    detail: DetailBranch
    d_app: Discriminator
    d_shape: Discriminator


def build_networks(cfg: TrainConfig) -> Networks:
    tcfg = TransferBranchConfig(
        base_channels=cfg.base_channels,
        num_downsamples=cfg.num_downsamples,
        num_blocks=cfg.num_blocks,
    )
    dcfg = DetailBranchConfig(
        code_length=cfg.code_length,
        guidance_channels=tcfg.guidance_channels,
        stage_channels=tuple(cfg.stage_channels),
        num_res_blocks=cfg.num_res_blocks,
        style_channels=tuple(cfg.style_channels),
    )
    return Networks(
        transfer=PoseTransferBranch(tcfg),
        detail=DetailBranch(dcfg),
        d_app=Discriminator(3, base_channels=cfg.disc_base_channels, num_layers=cfg.disc_layers),
        d_shape=Discriminator(18, base_channels=cfg.disc_base_channels, num_layers=cfg.disc_layers),
    )


def _make_optimizer(params, cfg: TrainConfig, lr: float):
    params = [p for p in params if p.requires_grad]
    if cfg.optimizer == "radam":
        return torch.optim.RAdam(
            params, lr=lr, weight_decay=cfg.weight_decay, decoupled_weight_decay=True
        )
    return torch.optim.AdamW(params, lr=lr, weight_decay=cfg.weight_decay)


def build_optimizers(nets: Networks, cfg: TrainConfig) -> dict:
    return {
        "g_pose": _make_optimizer(nets.transfer.parameters(), cfg, cfg.lr0),
        "g_detail": _make_optimizer(nets.detail.parameters(), cfg, cfg.lr0),
        "d_app": _make_optimizer(nets.d_app.parameters(), cfg, cfg.lr0),
        "d_shape": _make_optimizer(nets.d_shape.parameters(), cfg, cfg.lr0),
    }


def set_lr(optimizers, lr: float) -> None:
    opts = optimizers.values() if isinstance(optimizers, dict) else optimizers
    for opt in opts:
        for group in opt.param_groups:
            group["lr"] = lr


def _zero_all(opts: dict) -> None:
    for opt in opts.values():
        opt.zero_grad(set_to_none=True)


def train_step(batch: dict, nets: Networks, opts: dict, extractor: FeatureExtractor,
               fresh_batches, cfg: TrainConfig, on_phase=None) -> dict:
    """One alternating step; returns a flat dict of float metrics.

    ``fresh_batches`` supplies the k_disc batches for the critic phase.
    """
    src, tgt = batch["src_image"], batch["tgt_image"]
    src_pose, tgt_pose = batch["src_pose"], batch["tgt_pose"]
    metrics = {}
    try:
        # phase 1: coarse objective updates the transfer branch only
        _zero_all(opts)
        coarse, _ = nets.transfer(src, src_pose, tgt_pose)
        l_coarse, parts = coarse_loss(coarse, tgt, extractor, cfg.weights)
        l_coarse.backward()
        opts["g_pose"].step()
        metrics["loss_coarse"] = float(l_coarse.detach())
        metrics["coarse_recon"] = float(parts["recon"].detach())
        metrics["coarse_perceptual"] = float(parts["perceptual"].detach())
        if on_phase:
            on_phase("coarse", nets)

        # phase 2: full objective updates both branches
        _zero_all(opts)
        coarse, guidance = nets.transfer(src, src_pose, tgt_pose)
        residual, _ = nets.detail(src, guidance)
        final = coarse + residual
        l_full, parts = full_loss(
            final, tgt, nets.d_app, nets.d_shape, src, tgt_pose, extractor, cfg.weights
        )
        l_full.backward()
        opts["g_pose"].step()
        opts["g_detail"].step()
        metrics["loss_full"] = float(l_full.detach())
        metrics["full_recon"] = float(parts["recon"].detach())
        metrics["full_perceptual"] = float(parts["perceptual"].detach())
        metrics["full_style"] = float(parts["style"].detach())
        metrics["adv_g"] = float(parts["adv_g"].detach())
        if on_phase:
            on_phase("full", nets)

        # phase 3: k_disc critic updates on fresh batches
        d_app_vals, d_shape_vals = [], []
        for _ in range(cfg.k_disc):
            b = next(fresh_batches)
            _zero_all(opts)
            with torch.no_grad():
                c, g = nets.transfer(b["src_image"], b["src_pose"], b["tgt_pose"])
                r, _ = nets.detail(b["src_image"], g)
                fake = c + r
            l_da = lsgan_d_loss(nets.d_app, b["src_image"], b["tgt_image"], fake)
            l_ds = lsgan_d_loss(nets.d_shape, b["tgt_pose"], b["tgt_image"], fake)
            if not torch.isfinite(l_da) or not torch.isfinite(l_ds):
                raise NumericError("discriminator loss is non-finite")
            (l_da + l_ds).backward()
            opts["d_app"].step()
            opts["d_shape"].step()
            d_app_vals.append(float(l_da.detach()))
            d_shape_vals.append(float(l_ds.detach()))
        metrics["d_app"] = float(np.mean(d_app_vals))
        metrics["d_shape"] = float(np.mean(d_shape_vals))
        if on_phase:
            on_phase("disc", nets)
    except NumericError as e:
        raise TrainingDiverged(str(e), diagnostics=dict(metrics)) from e
    return metrics


def _rng_payload(stream: BatchStream) -> dict:
    return {
        "torch": torch.get_rng_state().numpy().tobytes().hex(),
        "stream": stream.state(),
    }


def _restore_rng(payload: dict, stream: BatchStream) -> None:
    raw = bytes.fromhex(payload["torch"])
    torch.set_rng_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    stream.restore(payload["stream"])


class MetricsLog:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: dict) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]


def _dump_divergence(out_dir: Path, err: TrainingDiverged, step: int) -> None:
    payload = {"step": step, "message": str(err), "metrics": err.diagnostics}
    with open(out_dir / "diagnostics.json", "w") as f:
        json.dump(payload, f, indent=1)


def fit(cfg: TrainConfig, resume=None, progress=None) -> dict:
    """Train the two-branch model; returns the final checkpoint manifest."""
    cfg.validate()
    out_dir = Path(cfg.out_dir)
    dataset = PairDataset(
        cfg.data_root, "train", image_size=cfg.image_size, heatmap_sigma=cfg.heatmap_sigma
    )
    steps_per_epoch = max(1, len(dataset) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    torch.manual_seed(cfg.seed)
    nets = build_networks(cfg)
    opts = build_optimizers(nets, cfg)
    extractor = FeatureExtractor.from_provenance(cfg.extractor)
    stream = BatchStream(dataset, cfg.batch_size, torch.Generator().manual_seed(cfg.seed + 1))

    start_step = 0
    if resume is not None:
        manifest, blobs = ckpt.load_checkpoint(resume)
        ckpt.arrays_to_module(nets.transfer, blobs["g_pose"])
        ckpt.arrays_to_module(nets.detail, blobs["g_detail"])
        ckpt.arrays_to_module(nets.d_app, blobs["d_app"])
        ckpt.arrays_to_module(nets.d_shape, blobs["d_shape"])
        for name, opt in opts.items():
            ckpt.arrays_to_optimizer(opt, blobs[f"opt_{name}"])
        _restore_rng(manifest["rng"], stream)
        start_step = manifest["global_step"]

    out_dir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out_dir / "metrics.log")

    def save(tag: str, step: int, epoch: int) -> dict:
        payload = {
            "g_pose": nets.transfer, "g_detail": nets.detail,
            "d_app": nets.d_app, "d_shape": nets.d_shape,
        }
        payload.update({f"opt_{k}": v for k, v in opts.items()})
        return ckpt.save_checkpoint(
            out_dir / tag, payload, global_step=step, epoch=epoch,
            config=cfg.to_json_dict(), extractor_provenance=extractor.provenance,
            rng=_rng_payload(stream),
        )

    t0 = time.monotonic()
    epoch = start_step // steps_per_epoch
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        if step == start_step or step % steps_per_epoch == 0:
            set_lr(opts, lr_at(epoch, cfg.lr0, cfg.decay_start_epoch, cfg.epochs))
        batch = stream.next_batch()
        try:
            metrics = train_step(batch, nets, opts, extractor, stream, cfg)
        except TrainingDiverged as e:
            _dump_divergence(out_dir, e, step + 1)
            raise
        metrics.update(
            step=step + 1, epoch=epoch,
            lr=lr_at(epoch, cfg.lr0, cfg.decay_start_epoch, cfg.epochs),
        )
        log.append(metrics)
        if progress:
            progress(metrics)
        if (step + 1) % steps_per_epoch == 0 and (epoch + 1) % cfg.checkpoint_every == 0:
            save(f"checkpoint-epoch{epoch + 1:04d}", step + 1, epoch + 1)
    manifest = save("checkpoint-final", total_steps, epoch + 1 if total_steps else 0)
    manifest["wall_seconds"] = time.monotonic() - t0
    return manifest


def build_face_module(cfg: TrainConfig) -> FaceDetailModule:
    return FaceDetailModule(FaceModuleConfig(
        crop_size=cfg.face_crop,
        code_length=cfg.face_code_length,
        stage_channels=tuple(cfg.face_stage_channels),
        num_res_blocks=cfg.face_res_blocks,
        style_channels=tuple(cfg.face_style_channels),
    ))


def fit_face(cfg: TrainConfig, resume=None, progress=None) -> dict:
    """Train the face regenerator on face crops; constant learning rate."""
    cfg.validate()
    out_dir = Path(cfg.out_dir) / "face"
    dataset = FacePairDataset(
        cfg.data_root, "train", crop_size=cfg.face_crop, image_size=cfg.image_size
    )
    if len(dataset) == 0:
        raise ConfigError("no training pairs with usable face annotations")
    batch_size = min(cfg.batch_size, len(dataset))
    steps_per_epoch = max(1, len(dataset) // batch_size)
    total_steps = cfg.face_epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)

    torch.manual_seed(cfg.seed + 100)
    face = build_face_module(cfg)
    d_app = Discriminator(3, base_channels=cfg.disc_base_channels, num_layers=cfg.disc_layers)
    d_shape = Discriminator(1, base_channels=cfg.disc_base_channels, num_layers=cfg.disc_layers)
    opts = {
        "face": _make_optimizer(face.parameters(), cfg, cfg.face_lr),
        "face_d_app": _make_optimizer(d_app.parameters(), cfg, cfg.face_lr),
        "face_d_shape": _make_optimizer(d_shape.parameters(), cfg, cfg.face_lr),
    }
    extractor = FeatureExtractor.from_provenance(cfg.extractor)
    stream = BatchStream(dataset, batch_size, torch.Generator().manual_seed(cfg.seed + 101))

    start_step = 0
    if resume is not None:
        manifest, blobs = ckpt.load_checkpoint(resume)
        ckpt.arrays_to_module(face, blobs["face"])
        ckpt.arrays_to_module(d_app, blobs["face_d_app"])
        ckpt.arrays_to_module(d_shape, blobs["face_d_shape"])
        for name, opt in opts.items():
            ckpt.arrays_to_optimizer(opt, blobs[f"opt_{name}"])
        _restore_rng(manifest["rng"], stream)
        start_step = manifest["global_step"]

    out_dir.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out_dir / "metrics.log")

    def save(tag: str, step: int, epoch: int) -> dict:
        payload = {"face": face, "face_d_app": d_app, "face_d_shape": d_shape}
        payload.update({f"opt_{k}": v for k, v in opts.items()})
        return ckpt.save_checkpoint(
            out_dir / tag, payload, global_step=step, epoch=epoch,
            config=cfg.to_json_dict(), extractor_provenance=extractor.provenance,
            rng=_rng_payload(stream),
        )

    epoch = start_step // steps_per_epoch
    for step in range(start_step, total_steps):
        epoch = step // steps_per_epoch
        batch = stream.next_batch()
        metrics = {}
        try:
            _zero_all(opts)
            out = face(batch["src_crop"], batch["tgt_sketch"])
            l_full, parts = full_loss(
                out, batch["tgt_crop"], d_app, d_shape,
                batch["src_crop"], batch["tgt_sketch"], extractor, cfg.weights,
            )
            l_full.backward()
            opts["face"].step()
            metrics.update(
                loss_full=float(l_full.detach()),
                full_recon=float(parts["recon"].detach()),
                full_perceptual=float(parts["perceptual"].detach()),
                full_style=float(parts["style"].detach()),
                adv_g=float(parts["adv_g"].detach()),
            )
            da_vals, ds_vals = [], []
            for _ in range(cfg.k_disc):
                b = next(stream)
                _zero_all(opts)
                with torch.no_grad():
                    fake = face(b["src_crop"], b["tgt_sketch"])
                l_da = lsgan_d_loss(d_app, b["src_crop"], b["tgt_crop"], fake)
                l_ds = lsgan_d_loss(d_shape, b["tgt_sketch"], b["tgt_crop"], fake)
                if not torch.isfinite(l_da) or not torch.isfinite(l_ds):
                    raise NumericError("face discriminator loss is non-finite")
                (l_da + l_ds).backward()
                opts["face_d_app"].step()
                opts["face_d_shape"].step()
                da_vals.append(float(l_da.detach()))
                ds_vals.append(float(l_ds.detach()))
            metrics["d_app"] = float(np.mean(da_vals))
            metrics["d_shape"] = float(np.mean(ds_vals))
        except NumericError as e:
            err = TrainingDiverged(str(e), diagnostics=metrics)
            _dump_divergence(out_dir, err, step + 1)
            raise err from e
        metrics.update(step=step + 1, epoch=epoch, lr=cfg.face_lr)
        log.append(metrics)
        if progress:
            progress(metrics)
    return save("checkpoint-final", total_steps, epoch + 1 if total_steps else 0)


def load_networks(ckpt_dir) -> tuple:
    """Rebuild networks from a checkpoint directory; returns (cfg, nets)."""
    manifest, blobs = ckpt.load_checkpoint(ckpt_dir)
    cfg = TrainConfig.from_json_dict(manifest["config"])
    nets = build_networks(cfg)
    ckpt.arrays_to_module(nets.transfer, blobs["g_pose"])
    ckpt.arrays_to_module(nets.detail, blobs["g_detail"])
    ckpt.arrays_to_module(nets.d_app, blobs["d_app"])
    ckpt.arrays_to_module(nets.d_shape, blobs["d_shape"])
    return cfg, nets


def load_face_module(ckpt_dir) -> tuple:
    manifest, blobs = ckpt.load_checkpoint(ckpt_dir)
    cfg = TrainConfig.from_json_dict(manifest["config"])
    face = build_face_module(cfg)
    ckpt.arrays_to_module(face, blobs["face"])
    return cfg, face


@torch.no_grad()
def infer_pair(nets: Networks, src_image: np.ndarray, src_ann, tgt_ann,
               cfg: TrainConfig, face_module: FaceDetailModule | None = None) -> dict:
    """Run the full pipeline on one preprocessed sample pair.

    Returns numpy arrays: coarse, residual, guidance, final (all [-1, 1]
    except guidance), plus face_patch when the face path ran.
    """
    nets.transfer.eval()
    nets.detail.eval()
    h, w = src_image.shape[-2:]
    src = torch.from_numpy(np.ascontiguousarray(src_image, dtype=np.float32)).unsqueeze(0)
    pose_s = torch.from_numpy(
        encode_pose_heatmaps(src_ann.keypoints, h, w, cfg.heatmap_sigma).astype(np.float32)
    ).unsqueeze(0)
    pose_t = torch.from_numpy(
        encode_pose_heatmaps(tgt_ann.keypoints, h, w, cfg.heatmap_sigma).astype(np.float32)
    ).unsqueeze(0)
    coarse, guidance = nets.transfer(src, pose_s, pose_t)
    residual, _ = nets.detail(src, guidance)

    out = {
        "coarse": coarse[0].numpy(),
        "residual": residual[0].numpy(),
        "guidance": guidance[0].numpy(),
    }
    face_full = None
    mask = None
    can_face = (
        face_module is not None
        and src_ann.face_bbox is not None and src_ann.face_bbox.clamped(w, h).area >= 4
        and tgt_ann.face_bbox is not None and tgt_ann.face_bbox.clamped(w, h).area >= 4
        and tgt_ann.face_landmarks is not None and len(tgt_ann.face_landmarks) > 0
    )
    if can_face:
        face_module.eval()
        size = face_module.config.crop_size
        crop = crop_resize_face(src_image, src_ann.face_bbox, size)
        lm = landmarks_to_crop(tgt_ann.face_landmarks, tgt_ann.face_bbox.clamped(w, h), size)
        sketch = encode_landmark_sketch(lm, size, size)
        patch = face_module(
            torch.from_numpy(crop.astype(np.float32)).unsqueeze(0),
            torch.from_numpy(sketch.astype(np.float32)).unsqueeze(0),
        )[0].numpy()
        out["face_patch"] = patch
        face_full = torch.from_numpy(
            paste_face(patch, tgt_ann.face_bbox, h, w).astype(np.float32)
        ).unsqueeze(0)
        blend = face_blend_mask(tgt_ann.face_bbox, h, w, cfg.blend_sigma)
        mask = torch.from_numpy(blend.data.astype(np.float32))
    final = compose_final(coarse, residual, face_full, mask)
    out["final"] = final[0].numpy()
    return out
