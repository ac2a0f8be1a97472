"""Procedural labeled 3D phantoms with parameterized domain shifts.

Each phantom is a large "head" ellipsoid containing a handful of small,
compact foreground ellipsoids at canonical per-class positions, echoing the
small-structure, position-regular anatomy that global-local fusion exploits.
Geometry and intensity draws come from separate sub-streams of the subject
seed, so intensity-only shifts never alter the labels.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import sample_bias_field
from .errors import ConfigurationError
from .volume import LabelGrid, VolumeGrid, save_volume

SHIFT_KINDS = ("none", "contrast_inversion", "bias_field", "scale")

# Canonical structure layout: fractional offsets from the head center in units
# of the head semi-axes, one entry per foreground class, with a base intensity
# clearly separated from the 0.45 head tissue.
_CANON_OFFSETS = np.array(
    [
        (0.0, 0.0, -0.45),
        (0.55, 0.0, 0.15),
        (-0.55, 0.0, 0.15),
        (0.0, 0.55, -0.15),
        (0.0, -0.55, -0.15),
        (0.35, 0.35, 0.45),
        (-0.35, -0.35, 0.45),
    ]
)
_CANON_INTENSITIES = np.array([0.85, 0.70, 0.95, 0.62, 0.78, 0.90, 0.66])
_HEAD_INTENSITY = 0.45
_AIR_INTENSITY = 0.03
_BASE_RADIUS_FRAC = 0.095  # of the mean dim; tuned for ~2% foreground


@dataclass(frozen=True)
class DomainSpec:
    """One synthetic acquisition domain: a shift kind with a magnitude, plus
    noise level and the volume-size range phantoms are drawn from."""

    shift: str = "none"
    magnitude: float = 1.0
    noise: float = 0.02
    dims_range: tuple[int, int] = (96, 160)
    num_structures: tuple[int, int] = (4, 7)
    num_classes: int = 8

    def __post_init__(self):
        if self.shift not in SHIFT_KINDS:
            raise ConfigurationError(f"unknown shift kind {self.shift!r}")
        if self.shift == "contrast_inversion" and not 0.5 < self.magnitude <= 1.0:
            raise ConfigurationError("contrast_inversion magnitude must lie in (0.5, 1]")
        if self.shift == "bias_field" and not 0.0 < self.magnitude <= 2.0:
            raise ConfigurationError("bias_field magnitude must lie in (0, 2]")
        if self.shift == "scale" and not 0.6 <= self.magnitude <= 1.4:
            raise ConfigurationError("scale magnitude must lie in [0.6, 1.4]")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        lo, hi = self.num_structures
        if not 1 <= lo <= hi <= len(_CANON_OFFSETS):
            raise ConfigurationError(f"num_structures must lie within [1, {len(_CANON_OFFSETS)}]")
        if self.num_classes < hi + 1:
            raise ConfigurationError("num_classes must cover background + all structures")


def _ellipsoid_mask(dims: tuple[int, int, int], center: np.ndarray, semi: np.ndarray) -> np.ndarray:
    grids = np.ogrid[: dims[0], : dims[1], : dims[2]]
    acc = np.zeros(dims, dtype=np.float64)
    for g, c, s in zip(grids, center, semi):
        acc = acc + ((g - c) / s) ** 2
    return acc <= 1.0


def generate_phantom(spec: DomainSpec, seed: int | Sequence[int]) -> tuple[VolumeGrid, LabelGrid]:
    """Deterministic phantom for a subject seed under a domain spec.

    The same seed yields bit-identical labels under any intensity-only shift
    (none / contrast_inversion / bias_field); scale shifts transform geometry
    and labels together.
    """
    key = [seed] if isinstance(seed, int) else list(seed)
    geo = np.random.default_rng(key + [0])
    inten = np.random.default_rng(key + [1])

    dims = tuple(int(geo.integers(spec.dims_range[0], spec.dims_range[1] + 1)) for _ in range(3))
    darr = np.asarray(dims, dtype=np.float64)
    scale = spec.magnitude if spec.shift == "scale" else 1.0

    head_center = darr / 2.0 + geo.uniform(-0.03, 0.03, size=3) * darr
    head_semi = darr * geo.uniform(0.38, 0.43, size=3) * scale

    k = int(geo.integers(spec.num_structures[0], spec.num_structures[1] + 1))
    mean_dim = float(darr.mean())
    labels = np.zeros(dims, dtype=np.int64)
    head = _ellipsoid_mask(dims, head_center, head_semi)
    for cls in range(1, k + 1):
        offset = _CANON_OFFSETS[cls - 1] + geo.uniform(-0.04, 0.04, size=3)
        center = head_center + offset * head_semi
        semi = _BASE_RADIUS_FRAC * mean_dim * geo.uniform(0.9, 1.1, size=3) * scale
        labels[_ellipsoid_mask(dims, center, np.maximum(semi, 1.0))] = cls

    vol = np.full(dims, _AIR_INTENSITY, dtype=np.float64)
    vol[head] = _HEAD_INTENSITY + inten.uniform(-0.04, 0.04)
    for cls in range(1, k + 1):
        vol[labels == cls] = _CANON_INTENSITIES[cls - 1] + inten.uniform(-0.03, 0.03)

    if spec.shift == "contrast_inversion":
        m = spec.magnitude
        vol = (1.0 - m) * vol + m * (1.0 - vol)
    elif spec.shift == "bias_field":
        field_ = sample_bias_field(dims, order=3, coeff_range=0.4 * spec.magnitude, rng=inten)
        vol = vol * field_

    if spec.noise > 0:
        vol = vol + inten.normal(0.0, spec.noise, size=dims)
    vol = np.clip(vol, 0.0, 1.0)
    return (
        VolumeGrid(vol.astype(np.float32), normalized=True),
        LabelGrid(labels, num_classes=spec.num_classes),
    )


# --------------------------------------------------------------------------
# dataset manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    labels_path: Path | None
    domain: str
    eval_only: bool
    seed: list[int]


@dataclass(frozen=True)
class DatasetManifest:
    path: Path
    spec: dict
    entries: tuple[ManifestEntry, ...]

    @property
    def num_classes(self) -> int:
        return int(self.spec.get("num_classes", 0))

    def volumes(self) -> list[Path]:
        return [e.path for e in self.entries]


def generate_domain(
    n: int,
    spec: DomainSpec,
    master_seed: int,
    domain_id: int,
    domain_name: str,
    out_dir: Path | str,
    eval_only_labels: bool,
) -> Path:
    """Write n phantoms (volume + label MVOL files) and a manifest JSON.

    Subject geometry seeds are (master_seed, domain_id, index), so different
    domain_ids can never collide.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        seed = [int(master_seed), int(domain_id), i]
        vol, lab = generate_phantom(spec, seed)
        vpath = out_dir / f"{domain_name}_{i:03d}.mvol"
        lpath = out_dir / f"{domain_name}_{i:03d}_labels.mvol"
        save_volume(vol, vpath)
        save_volume(lab, lpath)
        entries.append(
            {
                "path": vpath.name,
                "labels_path": lpath.name,
                "domain": domain_name,
                "eval_only": eval_only_labels,
                "seed": seed,
            }
        )
    manifest = {
        "spec": {**asdict(spec), "name": domain_name},
        "volumes": entries,
    }
    mpath = out_dir / f"{domain_name}_manifest.json"
    mpath.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return mpath


def generate_split(
    n_source: int,
    n_target: int,
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    master_seed: int,
    out_dir: Path | str,
) -> tuple[Path, Path]:
    """Disjoint source / target phantom sets; target labels are written but
    flagged eval-only so training paths must never open them."""
    if n_source < 1 or n_target < 1:
        raise ConfigurationError("need at least one volume per split")
    out_dir = Path(out_dir)
    src = generate_domain(n_source, source_spec, master_seed, 0, "source", out_dir / "source", False)
    tgt = generate_domain(n_target, target_spec, master_seed, 1, "target", out_dir / "target", True)
    return src, tgt


def load_manifest(path: Path | str) -> DatasetManifest:
    path = Path(path)
    data = json.loads(path.read_text())
    base = path.parent
    entries = tuple(
        ManifestEntry(
            path=base / e["path"],
            labels_path=(base / e["labels_path"]) if e.get("labels_path") else None,
            domain=e["domain"],
            eval_only=bool(e["eval_only"]),
            seed=list(e["seed"]),
        )
        for e in data["volumes"]
    )
    return DatasetManifest(path=path, spec=data["spec"], entries=entries)
