"""Derivation of named, independent random streams from one experiment seed."""

from __future__ import annotations

import numpy as np

# Fixed ids so adding a stream later never shifts the existing ones.
_STREAM_IDS = {
    "data": 0,
    "mask": 1,
    "augment": 2,
    "init": 3,
    "synth": 4,
    "normalize": 5,
}


class SeedBank:
    """Hands out per-purpose RNGs derived from a single master seed.

    Each consumer (patch sampling, masking, augmentation, weight init, ...)
    asks for its own stream, optionally keyed by extra indices such as the
    iteration number, so ablating one knob never perturbs the draws of
    another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, name: str, *indices: int) -> np.random.Generator:
        if name not in _STREAM_IDS:
            raise KeyError(f"unknown rng stream {name!r}")
        key = [self.seed, _STREAM_IDS[name], *(int(i) for i in indices)]
        return np.random.default_rng(key)

    def torch_seed(self, name: str, *indices: int) -> int:
        """A 63-bit integer suitable for torch.manual_seed."""
        return int(self.stream(name, *indices).integers(0, 2**63 - 1))
