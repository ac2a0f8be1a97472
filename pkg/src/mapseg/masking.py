"""Block-wise random masking shared by autoencoding pretraining and pseudo-label self-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .volume import VolumeGrid


@dataclass(frozen=True)
class MaskConfig:
    """Masking recipe: cubic blocks of ``local_block`` voxels on local patches,
    half-sized blocks on the downsampled global volume, ``ratio`` of blocks hidden."""

    local_block: int = 8
    ratio: float = 0.7
    fill_value: float = 0.0

    def __post_init__(self):
        if self.local_block < 2:
            raise ConfigurationError("local_block must be >= 2 (global block is half-sized)")
        if not 0.0 <= self.ratio <= 1.0:
            raise ConfigurationError(f"ratio must lie in [0, 1], got {self.ratio}")

    @property
    def global_block(self) -> int:
        return self.local_block // 2


@dataclass(frozen=True)
class BlockMask:
    """Binary grid (1 = hidden) that is constant within each cubic block."""

    grid: np.ndarray
    block: int
    num_masked: int

    def __post_init__(self):
        g = np.ascontiguousarray(self.grid.astype(np.uint8))
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)


def generate_block_mask(
    patch_dims: tuple[int, int, int],
    block: int,
    ratio: float,
    rng: np.random.Generator,
) -> BlockMask:
    """Mask exactly floor(ratio * n_blocks) distinct blocks, chosen uniformly."""
    for d in patch_dims:
        if d % block != 0:
            raise ConfigurationError(f"block {block} does not divide patch dim {d}")
    grid_dims = tuple(d // block for d in patch_dims)
    n_blocks = int(np.prod(grid_dims))
    n_masked = int(np.floor(ratio * n_blocks))
    chosen = rng.choice(n_blocks, size=n_masked, replace=False)
    coarse = np.zeros(n_blocks, dtype=np.uint8)
    coarse[chosen] = 1
    grid = coarse.reshape(grid_dims)
    for axis in range(3):
        grid = grid.repeat(block, axis=axis)
    return BlockMask(grid=grid, block=block, num_masked=n_masked)


def apply_mask(v: VolumeGrid, m: BlockMask, fill: float = 0.0) -> VolumeGrid:
    """Replace hidden voxels with ``fill``; visible voxels pass through."""
    if v.dims != m.grid.shape:
        raise ValueError(f"volume dims {v.dims} != mask dims {m.grid.shape}")
    out = np.where(m.grid == 1, np.float32(fill), v.data)
    normalized = v.normalized and 0.0 <= fill <= 1.0
    return VolumeGrid(out.astype(np.float32), normalized=normalized)
