"""Checkpoint persistence.

Weights are stored in a simple self-describing binary container, one file
per module or optimizer, referenced from a JSON manifest:

    magic "DRNP" | u32 array count | per array:
        u16 name length | name (utf-8) | u8 ndim | u32 dims... | float32 data

All integers and floats are little-endian. A manifest.json next to the
blobs records the global step, epoch, config snapshot, feature-extractor
provenance, RNG states and a sha256 per blob.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IngestionError

MAGIC = b"DRNP"
MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


def save_arrays(path, arrays) -> None:
    """Write named float32 arrays; ``arrays`` is a dict or (name, array) list."""
    items = list(arrays.items()) if isinstance(arrays, dict) else list(arrays)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(items)))
        for name, arr in items:
            arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shape
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise IngestionError(f"array name too long: {name[:40]}...")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_arrays(path) -> dict:
    """Read a blob back as an ordered name -> float32 ndarray dict."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise IngestionError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            end = pos + 4 * n
            if end > len(data):
                raise IngestionError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims).copy()
            pos = end
    except struct.error as e:
        raise IngestionError(f"{path}: truncated header ({e})") from e
    if pos != len(data):
        raise IngestionError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def module_to_arrays(module: torch.nn.Module):
    return [(k, v.detach().cpu().numpy()) for k, v in module.state_dict().items()]


def arrays_to_module(module: torch.nn.Module, arrays: dict) -> None:
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def optimizer_to_arrays(opt: torch.optim.Optimizer):
    """Flatten optimizer state tensors as '<param index>.<slot>' arrays."""
    out = []
    for pid, slots in opt.state_dict()["state"].items():
        for key, val in slots.items():
            if isinstance(val, torch.Tensor):
                out.append((f"{pid}.{key}", val.detach().cpu().numpy()))
    return out


def arrays_to_optimizer(opt: torch.optim.Optimizer, arrays: dict) -> None:
    """Restore state produced by optimizer_to_arrays into a fresh optimizer."""
    sd = opt.state_dict()
    state: dict = {}
    for name, arr in arrays.items():
        pid_str, _, key = name.partition(".")
        # copy: load_state_dict adopts same-dtype tensors, and the caller's
        # buffers may alias live optimizer state
        t = torch.from_numpy(np.array(arr, dtype=np.float32))
        state.setdefault(int(pid_str), {})[key] = t if t.ndim else t.reshape(())
    sd["state"] = state
    opt.load_state_dict(sd)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_checkpoint(out_dir, modules: dict, *, global_step: int, epoch: int,
                    config: dict, extractor_provenance: str, rng: dict) -> dict:
    """Write one blob per entry of ``modules`` plus manifest.json; returns the manifest.

    ``modules`` maps name -> nn.Module | Optimizer | array list.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, obj in modules.items():
        if isinstance(obj, torch.optim.Optimizer):
            arrays = optimizer_to_arrays(obj)
        elif isinstance(obj, torch.nn.Module):
            arrays = module_to_arrays(obj)
        else:
            arrays = obj
        blob = f"{name}.drnp"
        save_arrays(out_dir / blob, arrays)
        entries[name] = {"file": blob, "sha256": sha256_file(out_dir / blob)}
    manifest = {
        "format_version": FORMAT_VERSION,
        "global_step": int(global_step),
        "epoch": int(epoch),
        "modules": entries,
        "config": config,
        "extractor_provenance": extractor_provenance,
        "rng": rng,
    }
    with open(out_dir / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_checkpoint(ckpt_dir):
    """Read manifest.json and every referenced blob, verifying checksums."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise IngestionError(f"no {MANIFEST_NAME} in {ckpt_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    blobs = {}
    for name, entry in manifest["modules"].items():
        path = ckpt_dir / entry["file"]
        if not path.exists():
            raise IngestionError(f"checkpoint blob missing: {path}")
        digest = sha256_file(path)
        if digest != entry["sha256"]:
            raise IngestionError(f"checksum mismatch for {path}")
        blobs[name] = load_arrays(path)
    return manifest, blobs
