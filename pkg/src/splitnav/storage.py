"""Binary file formats and dataset generation.

Checkpoints ("NSPT") are a count-prefixed list of named float32 tensors;
datasets ("NSDS") are paired RGB images and depth maps at a fixed
resolution.  Both are little-endian, versioned, and validated on load:
bad magic, unknown version, truncation, or trailing bytes all raise
ConfigurationError.  Writers go through a temp file and rename, so an
interrupted run leaves no partial files behind.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .rng import substream
from .world import CameraSpec, SceneParams, WorldConfig, render_frame, sample_scene

CHECKPOINT_MAGIC = b"NSPT"
DATASET_MAGIC = b"NSDS"
FORMAT_VERSION = 1


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _need(buf: bytes, offset: int, count: int, what: str) -> int:
    if offset + count > len(buf):
        raise ConfigurationError(f"truncated file while reading {what}")
    return offset + count


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, tensors: dict[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float32)  # ascontiguousarray would 1-d-ify scalars
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ConfigurationError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ConfigurationError(f"tensor rank {arr.ndim} exceeds format limit")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = _need(buf, 0, 10, "header")
    magic, version, count = buf[:4], *struct.unpack_from("<HI", buf, 4)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        end = _need(buf, off, 2, "name length")
        (name_len,) = struct.unpack_from("<H", buf, off)
        off = end
        off = _need(buf, off, name_len, "name")
        name = buf[off - name_len:off].decode("utf-8")
        off = _need(buf, off, 1, "rank")
        rank = buf[off - 1]
        off = _need(buf, off, 4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, off - 4 * rank)
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if rank else 4
        off = _need(buf, off, nbytes, f"tensor {name}")
        arr = np.frombuffer(buf[off - nbytes:off], dtype="<f4").reshape(dims)
        tensors[name] = arr.astype(np.float32)
    if off != len(buf):
        raise ConfigurationError(f"{path}: {len(buf) - off} trailing bytes")
    return tensors


def save_model(path: str, module) -> None:
    save_checkpoint(path, {name: t.data for name, t in module.named_parameters()})


def load_model(path: str, module) -> None:
    """Load a checkpoint into an existing module, validating names and shapes."""
    saved = load_checkpoint(path)
    params = dict(module.named_parameters())
    if saved.keys() != params.keys():
        missing = sorted(params.keys() - saved.keys())
        extra = sorted(saved.keys() - params.keys())
        raise ConfigurationError(
            f"{path}: parameter names do not match model (missing {missing[:3]}, extra {extra[:3]})")
    for name, tensor in params.items():
        if saved[name].shape != tensor.data.shape:
            raise ConfigurationError(
                f"{path}: shape mismatch for {name}: "
                f"{saved[name].shape} vs {tensor.data.shape}")
        tensor.data = saved[name].copy()


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32
    depths: np.ndarray  # [N, H, W] float32

    def __post_init__(self):
        if (self.images.ndim != 4 or self.depths.ndim != 3
                or self.images.shape[0] != self.depths.shape[0]
                or self.images.shape[2:] != self.depths.shape[1:]):
            raise ConfigurationError(
                f"inconsistent dataset arrays {self.images.shape} / {self.depths.shape}")

    def __len__(self) -> int:
        return self.images.shape[0]


def save_dataset(path: str, ds: Dataset) -> None:
    n, c, h, w = ds.images.shape
    header = DATASET_MAGIC + struct.pack("<HIIII", FORMAT_VERSION, n, c, h, w)
    parts = [header]
    for i in range(n):
        parts.append(np.ascontiguousarray(ds.images[i], dtype=np.float32).tobytes())
        parts.append(np.ascontiguousarray(ds.depths[i], dtype=np.float32).tobytes())
    _atomic_write(path, b"".join(parts))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    _need(buf, 0, 22, "header")
    magic = buf[:4]
    version, n, c, h, w = struct.unpack_from("<HIIII", buf, 4)
    if magic != DATASET_MAGIC:
        raise ConfigurationError(f"{path}: not a dataset file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported dataset version {version}")
    img_n, dep_n = c * h * w, h * w
    expected = 22 + 4 * n * (img_n + dep_n)
    if len(buf) != expected:
        raise ConfigurationError(f"{path}: size {len(buf)} != expected {expected}")
    images = np.empty((n, c, h, w), dtype=np.float32)
    depths = np.empty((n, h, w), dtype=np.float32)
    off = 22
    for i in range(n):
        images[i] = np.frombuffer(buf, dtype="<f4", count=img_n, offset=off).reshape(c, h, w)
        off += 4 * img_n
        depths[i] = np.frombuffer(buf, dtype="<f4", count=dep_n, offset=off).reshape(h, w)
        off += 4 * dep_n
    return Dataset(images, depths)


def generate_dataset(cfg: WorldConfig, cam: CameraSpec, params: SceneParams,
                     count: int, root_seed: int, stream_name: str) -> Dataset:
    """Render ``count`` scene frames, one independent substream per sample."""
    if count < 1:
        raise ConfigurationError("dataset needs at least one sample")
    images = np.empty((count, 3, cam.height, cam.width), dtype=np.float32)
    depths = np.empty((count, cam.height, cam.width), dtype=np.float32)
    for i in range(count):
        rng = substream(root_seed, stream_name, i)
        scene, state = sample_scene(cfg, params, rng)
        images[i], depths[i] = render_frame(scene, state.position, state.yaw, cam)
    return Dataset(images, depths)
