"""Volume data model, MVOL file I/O, normalization, resampling, and patch geometry.

Grids are indexed ``data[x, y, z]``; the on-disk payload is little-endian with
x varying fastest. All operations are pure given their inputs and an explicit
seeded generator, and grids are immutable after construction.
"""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import AccessFencedError, VolumeFormatError

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
_HEADER = struct.Struct("<4sIB3I")

_CODE_TO_DTYPE = {0: np.float32, 1: np.uint8, 2: np.uint16}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1, np.dtype(np.uint16): 2}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class VolumeGrid:
    """Scalar 3D intensity field; ``normalized`` tags values as lying in [0, 1]."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        data = self.data
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume needs 3 positive dims, got shape {data.shape}")
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        if self.normalized and (data.min() < 0.0 or data.max() > 1.0):
            raise ValueError("normalized volume must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class LabelGrid:
    """Integer class-id field; ids lie in [0, num_classes), 0 is background."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        data = self.data
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label grid needs 3 positive dims, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label grid must be integer typed, got {data.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(
                f"label ids must lie in [0, {self.num_classes}), "
                f"found range [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", _freeze(data))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class NormalizationSpec:
    """How the clip percentile is chosen: drawn from U(train_range) when
    training, fixed at infer_percentile otherwise."""

    mode: str = "train"
    train_range: tuple[float, float] = (99.0, 100.0)
    infer_percentile: float = 99.5

    def __post_init__(self):
        if self.mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {self.mode!r}")
        lo, hi = self.train_range
        for p in (lo, hi, self.infer_percentile):
            if not 0.0 <= p <= 100.0:
                raise ValueError(f"percentile {p} outside [0, 100]")
        if lo > hi:
            raise ValueError("train_range must be (lo, hi) with lo <= hi")


@dataclass(frozen=True)
class PatchSample:
    """A local patch, its global context, and their geometric link.

    ``x`` is a cube cropped at ``offset`` from a (possibly padded) scan of
    ``source_dims``; ``glob`` is the whole scan resampled to the same cube
    size; ``location_mask`` marks where the patch sits inside the global
    volume. Labels travel along when the scan is annotated.
    """

    x: VolumeGrid
    glob: Optional[VolumeGrid] = None
    location_mask: Optional[np.ndarray] = None
    y: Optional[LabelGrid] = None
    glob_y: Optional[LabelGrid] = None
    offset: tuple[int, int, int] = (0, 0, 0)
    source_dims: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.glob is not None and self.glob.dims != self.x.dims:
            raise ValueError("x and glob must share dims")
        if self.location_mask is not None:
            m = np.asarray(self.location_mask)
            if m.shape != self.x.dims:
                raise ValueError("location mask must share dims with x")
            if not np.isin(m, (0, 1)).all():
                raise ValueError("location mask must be binary")
            object.__setattr__(self, "location_mask", _freeze(m.astype(np.uint8)))
        if self.glob is not None and (self.y is None) != (self.glob_y is None):
            raise ValueError("y and glob_y must be both present or both absent")


# --------------------------------------------------------------------------
# read auditing / fencing
#
# Every file read goes through load_volume, so isolation contracts (e.g.
# "training never opens target labels", "no source access in test-time
# phase 2") are enforced and auditable here.

_AUDIT_STACK: list[list[Path]] = []
_FENCE_STACK: list[tuple[frozenset[Path], str]] = []


@contextlib.contextmanager
def audit_reads() -> Iterator[list[Path]]:
    """Collect the resolved path of every volume file loaded inside the block."""
    log: list[Path] = []
    _AUDIT_STACK.append(log)
    try:
        yield log
    finally:
        _AUDIT_STACK.remove(log)


@contextlib.contextmanager
def fence_paths(paths: Sequence[Path | str], reason: str) -> Iterator[None]:
    """Raise AccessFencedError if any of the given files is loaded inside the block."""
    fence = (frozenset(Path(p).resolve() for p in paths), reason)
    _FENCE_STACK.append(fence)
    try:
        yield
    finally:
        _FENCE_STACK.remove(fence)


def _record_read(path: Path) -> None:
    resolved = path.resolve()
    for fenced, reason in _FENCE_STACK:
        if resolved in fenced:
            raise AccessFencedError(f"access to {path} is fenced: {reason}")
    for log in _AUDIT_STACK:
        log.append(resolved)


# --------------------------------------------------------------------------
# MVOL I/O


def save_volume(grid: VolumeGrid | LabelGrid, path: Path | str, meta: dict | None = None) -> Path:
    """Write a grid to a MVOL file; returns the written path.

    A ``<name>.meta.json`` sidecar is written when there is provenance to
    record (user metadata, normalization tag, or label class count).
    """
    path = Path(path)
    if isinstance(grid, VolumeGrid):
        payload_arr = grid.data
    else:
        payload_arr = grid.data
        if payload_arr.dtype not in (np.uint8, np.uint16):
            payload_arr = payload_arr.astype(np.uint16 if grid.num_classes > 256 else np.uint8)
    code = _DTYPE_TO_CODE[np.dtype(payload_arr.dtype)]
    dx, dy, dz = payload_arr.shape
    header = _HEADER.pack(MVOL_MAGIC, MVOL_VERSION, code, dx, dy, dz)
    payload = np.asarray(payload_arr, dtype=payload_arr.dtype.newbyteorder("<")).ravel(order="F").tobytes()
    path.write_bytes(header + payload)

    sidecar = dict(meta or {})
    if isinstance(grid, VolumeGrid):
        if grid.normalized:
            sidecar["normalized"] = True
    else:
        sidecar["num_classes"] = grid.num_classes
    if sidecar:
        sidecar_path = path.with_name(path.name + ".meta.json")
        sidecar_path.write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return path


def load_volume(path: Path | str) -> VolumeGrid | LabelGrid:
    """Read a MVOL file; the dtype code selects VolumeGrid vs LabelGrid."""
    path = Path(path)
    if not path.exists():
        raise VolumeFormatError(f"no such volume file: {path}")
    _record_read(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, code, dx, dy, dz = _HEADER.unpack_from(raw)
    if magic != MVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if version != MVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise VolumeFormatError(f"{path}: unknown dtype code {code}")
    if min(dx, dy, dz) < 1:
        raise VolumeFormatError(f"{path}: non-positive dims ({dx},{dy},{dz})")
    dtype = np.dtype(_CODE_TO_DTYPE[code]).newbyteorder("<")
    expected = dx * dy * dz * dtype.itemsize
    payload = raw[_HEADER.size :]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, dims ({dx},{dy},{dz}) require {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape((dx, dy, dz), order="F")

    meta: dict = {}
    sidecar = path.with_name(path.name + ".meta.json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    if code == 0:
        return VolumeGrid(arr.astype(np.float32), normalized=bool(meta.get("normalized", False)))
    num_classes = int(meta.get("num_classes", int(arr.max()) + 1 if arr.size else 1))
    return LabelGrid(arr.astype(np.int64), num_classes=num_classes)


# --------------------------------------------------------------------------
# intensity normalization


def normalize_intensity(
    v: VolumeGrid, spec: NormalizationSpec, rng: np.random.Generator | None = None
) -> VolumeGrid:
    """Clip at a percentile (random in train mode, fixed in infer mode) and
    rescale linearly to [0, 1]; values above the clip map to exactly 1."""
    if spec.mode == "train":
        if rng is None:
            raise ValueError("train-mode normalization needs an rng")
        p = rng.uniform(*spec.train_range)
    else:
        p = spec.infer_percentile
    data = v.data
    lo = float(data.min())
    clip = float(np.percentile(data, p))
    if clip <= lo:
        # Degenerate (e.g. constant) scan: no signal, map to zeros.
        return VolumeGrid(np.zeros_like(data), normalized=True)
    out = (np.minimum(data, clip) - lo) / (clip - lo)
    return VolumeGrid(np.clip(out, 0.0, 1.0).astype(np.float32), normalized=True)


# --------------------------------------------------------------------------
# resampling


def downsample_global(
    grid: VolumeGrid | LabelGrid, target: tuple[int, int, int] = (96, 96, 96)
) -> VolumeGrid | LabelGrid:
    """Resample a grid to ``target`` dims: trilinear for intensities,
    nearest-neighbor for labels."""
    if tuple(grid.dims) == tuple(target):
        return grid
    if isinstance(grid, VolumeGrid):
        t = torch.from_numpy(grid.data.copy())[None, None]
        out = F.interpolate(t, size=tuple(target), mode="trilinear", align_corners=False)
        arr = out[0, 0].numpy().astype(np.float32)
        if grid.normalized:
            arr = np.clip(arr, 0.0, 1.0)
        return VolumeGrid(arr, normalized=grid.normalized)
    t = torch.from_numpy(grid.data.astype(np.float32))[None, None]
    out = F.interpolate(t, size=tuple(target), mode="nearest-exact")
    return LabelGrid(out[0, 0].numpy().astype(np.int64), num_classes=grid.num_classes)


# --------------------------------------------------------------------------
# patch geometry


def pad_to_size(
    vol: VolumeGrid, labels: Optional[LabelGrid], size: tuple[int, int, int]
) -> tuple[VolumeGrid, Optional[LabelGrid]]:
    """Zero-pad (background-pad for labels) at the high end of each axis so
    every dim is at least ``size``."""
    pads = [max(0, s - d) for d, s in zip(vol.dims, size)]
    if not any(pads):
        return vol, labels
    widths = [(0, p) for p in pads]
    data = np.pad(vol.data, widths, mode="constant", constant_values=0.0)
    out_v = VolumeGrid(data, normalized=vol.normalized)
    out_l = None
    if labels is not None:
        out_l = LabelGrid(
            np.pad(labels.data, widths, mode="constant", constant_values=0),
            num_classes=labels.num_classes,
        )
    return out_v, out_l


def sample_local_patch(
    v: VolumeGrid,
    labels: Optional[LabelGrid],
    size: int,
    rng: np.random.Generator,
) -> PatchSample:
    """Crop a random size^3 patch; scans smaller than the patch are padded first.

    The returned sample has no global volume or location mask yet; see
    build_patch_sample for the fully assembled bundle.
    """
    v, labels = pad_to_size(v, labels, (size, size, size))
    dims = v.dims
    offset = tuple(int(rng.integers(0, d - size + 1)) for d in dims)
    sl = tuple(slice(o, o + size) for o in offset)
    x = VolumeGrid(v.data[sl].copy(), normalized=v.normalized)
    y = None
    if labels is not None:
        y = LabelGrid(labels.data[sl].copy(), num_classes=labels.num_classes)
    return PatchSample(x=x, y=y, offset=offset, source_dims=dims)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def make_location_mask(
    offset: Sequence[int],
    size: int,
    source_dims: Sequence[int],
    global_target: tuple[int, int, int] = (96, 96, 96),
) -> np.ndarray:
    """Binary grid over the global volume marking the patch footprint.

    Box ends are mapped with round-half-up and the box is clamped to at
    least one voxel per axis.
    """
    mask = np.zeros(tuple(global_target), dtype=np.uint8)
    box = []
    for o, d, g in zip(offset, source_dims, global_target):
        if o + size > d:
            raise ValueError(f"patch (offset {o}, size {size}) exceeds source dim {d}")
        start = _round_half_up(o * g / d)
        end = _round_half_up((o + size) * g / d)
        start = min(max(start, 0), g - 1)
        end = min(max(end, start + 1), g)
        box.append((start, end))
    mask[box[0][0] : box[0][1], box[1][0] : box[1][1], box[2][0] : box[2][1]] = 1
    return mask


def mask_box(mask: np.ndarray) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Bounding box (start, end-exclusive per axis) of the ones in a location mask."""
    if not mask.any():
        raise ValueError("location mask has no set voxels")
    box = []
    for axis in range(3):
        proj = mask.any(axis=tuple(a for a in range(3) if a != axis))
        idx = np.flatnonzero(proj)
        box.append((int(idx[0]), int(idx[-1]) + 1))
    return tuple(box)  # type: ignore[return-value]


def build_patch_sample(
    v: VolumeGrid,
    labels: Optional[LabelGrid],
    size: int,
    rng: np.random.Generator,
    global_target: tuple[int, int, int] | None = None,
) -> PatchSample:
    """Sample a patch and assemble the full (x, glob, mask, labels) bundle."""
    if global_target is None:
        global_target = (size, size, size)
    base = sample_local_patch(v, labels, size, rng)
    padded_v, padded_l = pad_to_size(v, labels, (size, size, size))
    glob = downsample_global(padded_v, global_target)
    glob_y = None
    if padded_l is not None:
        glob_y = downsample_global(padded_l, global_target)
    mask = make_location_mask(base.offset, size, base.source_dims, global_target)
    return PatchSample(
        x=base.x,
        glob=glob,
        location_mask=mask,
        y=base.y,
        glob_y=glob_y,
        offset=base.offset,
        source_dims=base.source_dims,
    )


# --------------------------------------------------------------------------
# sliding-window stitching


def window_grid(full_dims: Sequence[int], size: int, stride: int) -> list[tuple[int, int, int]]:
    """Window offsets covering the volume: 0, stride, 2*stride, ... with the
    final window clamped to end flush with each axis."""
    if stride > size:
        raise ValueError(f"stride {stride} > window size {size} would leave gaps")
    axes = []
    for d in full_dims:
        if d < size:
            raise ValueError(f"dim {d} smaller than window size {size}; pad first")
        positions = list(range(0, d - size + 1, stride))
        if positions[-1] != d - size:
            positions.append(d - size)
        axes.append(positions)
    return [(x, y, z) for x in axes[0] for y in axes[1] for z in axes[2]]


def stitch_sliding_window(
    patch_logits: Sequence[tuple[Sequence[int], np.ndarray]],
    full_dims: Sequence[int],
) -> np.ndarray:
    """Average per-voxel logits over overlapping windows.

    ``patch_logits`` holds (offset, logits) pairs with logits shaped
    (C, sx, sy, sz). Averaging is order-independent.
    """
    if not patch_logits:
        raise ValueError("no patches to stitch")
    channels = patch_logits[0][1].shape[0]
    acc = np.zeros((channels, *full_dims), dtype=np.float64)
    count = np.zeros(tuple(full_dims), dtype=np.int32)
    for offset, logits in patch_logits:
        sl = tuple(slice(o, o + s) for o, s in zip(offset, logits.shape[1:]))
        acc[(slice(None), *sl)] += logits
        count[sl] += 1
    if count.min() == 0:
        raise RuntimeError("sliding-window grid left voxels uncovered")
    return (acc / count).astype(np.float32)
