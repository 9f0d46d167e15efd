"""Binary tensor files and model checkpoints.

Tensor file layout (little endian throughout): magic b"TNOT", version byte
0x01, dtype byte (0 = f32, 1 = f64), ndim byte, ndim u64 extents, then the
row-major payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TNOT"
VERSION = 1
_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensor(path, array: np.ndarray):
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _DTYPE_CODE:
        raise ValueError(f"unsupported dtype {arr.dtype}; expected float32 or float64")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BBB", VERSION, _DTYPE_CODE[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, dcode, ndim = struct.unpack("<BBB", f.read(3))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        if dcode not in _CODE_DTYPE:
            raise ValueError(f"{path}: unknown dtype code {dcode}")
        shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        dt = _CODE_DTYPE[dcode]
        payload = f.read(int(np.prod(shape, dtype=np.int64)) * dt.itemsize)
    arr = np.frombuffer(payload, dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# checkpoints: a directory of tensor files plus a manifest

def save_checkpoint(ckpt_dir, model, epoch: int, norm_info: dict | None = None):
    """Write every parameter and buffer of model plus a manifest.json."""
    ckpt_dir = Path(ckpt_dir)
    params_dir = ckpt_dir / "params"
    params_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = f"params/{name}.tnot"
        save_tensor(ckpt_dir / fname, p.data)
        entries.append({"name": name, "shape": list(p.shape), "dtype": p.dtype, "file": fname})
    buffers = []
    for name, b in model.named_buffers():
        fname = f"params/{name}.buf.tnot"
        save_tensor(ckpt_dir / fname, b)
        buffers.append({"name": name, "shape": list(b.shape), "file": fname})
    manifest = {
        "format": "tno-checkpoint-v1",
        "config": model.config.to_dict(),
        "epoch": epoch,
        "parameters": entries,
        "buffers": buffers,
        "norm": norm_info or {},
    }
    write_json(ckpt_dir / "manifest.json", manifest)


def load_checkpoint(ckpt_dir):
    """Rebuild the model recorded in ckpt_dir; returns (model, manifest)."""
    from .model import TNOConfig, TNOModel

    ckpt_dir = Path(ckpt_dir)
    manifest = read_json(ckpt_dir / "manifest.json")
    config = TNOConfig.from_dict(manifest["config"])
    model = TNOModel(config)
    params = dict(model.named_parameters())
    for entry in manifest["parameters"]:
        if entry["name"] not in params:
            raise ValueError(f"checkpoint has unknown parameter {entry['name']!r}")
        arr = load_tensor(ckpt_dir / entry["file"])
        p = params[entry["name"]]
        if tuple(arr.shape) != p.shape:
            raise ValueError(
                f"checkpoint parameter {entry['name']!r} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=False)
    buffers = dict(model.named_buffers())
    for entry in manifest.get("buffers", []):
        if entry["name"] not in buffers:
            raise ValueError(f"checkpoint has unknown buffer {entry['name']!r}")
        arr = load_tensor(ckpt_dir / entry["file"])
        buf = buffers[entry["name"]]
        if tuple(arr.shape) != buf.shape:
            raise ValueError(f"checkpoint buffer {entry['name']!r} shape mismatch")
        buf[...] = arr.astype(buf.dtype, copy=False)
    return model, manifest
