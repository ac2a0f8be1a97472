"""Networks: shared 3D residual encoder, lightweight reconstruction decoder,
dilated-pyramid segmentation decoder, global-local feature fusion, and the
EMA teacher-student pair."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError
from .volume import mask_box

DOWNSAMPLE_FACTOR = 4


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture knobs. Defaults reproduce the full-scale configuration;
    tests and desk-scale experiments shrink the channel widths."""

    num_classes: int
    in_channels: int = 1
    encoder_channels: int = 512
    num_res_blocks: int = 7
    mae_channels: tuple[int, int] = (32, 16)
    head_channels: int = 64
    aspp_rates: tuple[int, ...] = (1, 2, 4, 6)
    patch_edge: int = 96
    gn_groups: int = 8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes (background + 1)")
        if self.patch_edge % DOWNSAMPLE_FACTOR != 0:
            raise ConfigurationError(f"patch_edge must be divisible by {DOWNSAMPLE_FACTOR}")

    def spec_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _num_groups(channels: int, preferred: int) -> int:
    g = min(preferred, channels)
    while channels % g != 0:
        g -= 1
    return g


def _norm_act(channels: int, groups: int) -> list[nn.Module]:
    return [nn.GroupNorm(_num_groups(channels, groups), channels), nn.ReLU(inplace=True)]


class ResBlock3d(nn.Module):
    """Pre-activation residual block of three convolutions.

    With matching channels and unit stride the shortcut is the identity, so
    zeroing the branch weights makes the whole block the identity map.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        groups: int = 8,
        first_kernel: int = 3,
        first_stride: int = 1,
        pre_activate_first: bool = True,
    ):
        super().__init__()
        layers: list[nn.Module] = []
        if pre_activate_first:
            layers += _norm_act(in_ch, groups)
        layers.append(
            nn.Conv3d(in_ch, out_ch, first_kernel, stride=first_stride, padding=(first_kernel - 1) // 2)
        )
        for _ in range(2):
            layers += _norm_act(out_ch, groups)
            layers.append(nn.Conv3d(out_ch, out_ch, 3, padding=1))
        self.branch = nn.Sequential(*layers)
        if in_ch == out_ch and first_stride == 1:
            self.shortcut: nn.Module = nn.Identity()
        else:
            self.shortcut = nn.Conv3d(in_ch, out_ch, 1, stride=first_stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.shortcut(x) + self.branch(x)


class Encoder3d(nn.Module):
    """One stride-4 downsampling residual block followed by shape-preserving
    residual blocks; maps (B, 1, E, E, E) to (B, C, E/4, E/4, E/4)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.encoder_channels
        blocks = [
            ResBlock3d(
                spec.in_channels,
                c,
                groups=spec.gn_groups,
                first_kernel=4,
                first_stride=DOWNSAMPLE_FACTOR,
                pre_activate_first=False,
            )
        ]
        blocks += [ResBlock3d(c, c, groups=spec.gn_groups) for _ in range(spec.num_res_blocks)]
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for d in x.shape[-3:]:
            if d % DOWNSAMPLE_FACTOR != 0:
                raise ConfigurationError(f"input edge {d} not divisible by {DOWNSAMPLE_FACTOR}")
        return self.blocks(x)


class MAEDecoder3d(nn.Module):
    """Lightweight reconstruction head: transpose-conv back to full resolution,
    one residual block, then a plain conv to one channel (no output
    nonlinearity; targets live in [0, 1] under an MSE objective)."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c0, c1 = spec.mae_channels
        self.trans_conv = nn.ConvTranspose3d(spec.encoder_channels, c0, 4, stride=DOWNSAMPLE_FACTOR)
        self.res = ResBlock3d(c0, c1, groups=spec.gn_groups)
        self.final = nn.Sequential(*_norm_act(c1, spec.gn_groups), nn.Conv3d(c1, 1, 3, padding=1))

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.final(self.res(self.trans_conv(feat)))


class ASPP3d(nn.Module):
    """Parallel dilated convolutions plus a global-average-pooling branch,
    concatenated and projected back down."""

    def __init__(self, in_ch: int, out_ch: int, rates: tuple[int, ...], groups: int = 8):
        super().__init__()
        branches = []
        for rate in rates:
            if rate == 1:
                conv = nn.Conv3d(in_ch, out_ch, 1)
            else:
                conv = nn.Conv3d(in_ch, out_ch, 3, padding=rate, dilation=rate)
            branches.append(nn.Sequential(conv, *_norm_act(out_ch, groups)))
        self.branches = nn.ModuleList(branches)
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool3d(1), nn.Conv3d(in_ch, out_ch, 1), nn.ReLU(inplace=True)
        )
        self.project = nn.Sequential(
            nn.Conv3d(out_ch * (len(rates) + 1), out_ch, 1), *_norm_act(out_ch, groups)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool(x)
        outs.append(pooled.expand(-1, -1, *x.shape[-3:]))
        return self.project(torch.cat(outs, dim=1))


class SegDecoder3d(nn.Module):
    """Segmentation head over fused (2C-channel) latents: dilated pyramid,
    transpose-conv to full resolution, then the classification convs."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        c = spec.encoder_channels
        h = spec.head_channels
        self.aspp = ASPP3d(2 * c, c, spec.aspp_rates, groups=spec.gn_groups)
        self.trans_conv = nn.ConvTranspose3d(c, h, 4, stride=DOWNSAMPLE_FACTOR)
        self.head = nn.Sequential(
            *_norm_act(h, spec.gn_groups),
            nn.Conv3d(h, h, 3, padding=1),
            *_norm_act(h, spec.gn_groups),
            nn.Conv3d(h, spec.num_classes, 1),
        )

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        return self.head(self.trans_conv(self.aspp(fused)))


@dataclass
class FusedLatent:
    """Local features, cropped-and-resized global features, and their
    channel concatenation."""

    local: torch.Tensor
    global_: torch.Tensor
    fused: torch.Tensor


def feature_box(
    box: tuple[tuple[int, int], tuple[int, int], tuple[int, int]],
    feat_dims: tuple[int, int, int],
    factor: int = DOWNSAMPLE_FACTOR,
) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Map a voxel-space box to feature coordinates: divide both ends by the
    downsampling factor with round-half-up, clamped to at least one cell."""
    out = []
    for (start, end), fd in zip(box, feat_dims):
        fs = int(np.floor(start / factor + 0.5))
        fe = int(np.floor(end / factor + 0.5))
        fs = min(max(fs, 0), fd - 1)
        fe = min(max(fe, fs + 1), fd)
        out.append((fs, fe))
    return tuple(out)  # type: ignore[return-value]


def glc_fuse(
    chi_loc: torch.Tensor,
    g_global: torch.Tensor,
    location_mask: np.ndarray | tuple,
) -> FusedLatent:
    """Crop the global feature grid to the patch's footprint, resize it to the
    local grid, and concatenate along channels."""
    if isinstance(location_mask, np.ndarray):
        box = mask_box(location_mask)
    else:
        box = location_mask
    fbox = feature_box(box, tuple(g_global.shape[-3:]))
    sl = (..., slice(*fbox[0]), slice(*fbox[1]), slice(*fbox[2]))
    crop = g_global[sl]
    target = tuple(chi_loc.shape[-3:])
    if tuple(crop.shape[-3:]) != target:
        crop = F.interpolate(crop, size=target, mode="trilinear", align_corners=False)
    fused = torch.cat([chi_loc, crop], dim=1)
    return FusedLatent(local=chi_loc, global_=crop, fused=fused)


class MapSegModel(nn.Module):
    """Encoder + reconstruction decoder + segmentation decoder with
    global-local fusion. Inputs are (B, 1, E, E, E) tensors."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder3d(spec)
        self.mae_decoder = MAEDecoder3d(spec)
        self.seg_decoder = SegDecoder3d(spec)

    def encode(self, v: torch.Tensor) -> torch.Tensor:
        return self.encoder(v)

    def reconstruct(self, v_masked: torch.Tensor) -> torch.Tensor:
        return self.mae_decoder(self.encoder(v_masked))

    def forward_local(
        self,
        x: torch.Tensor,
        x_global: torch.Tensor,
        location_mask: np.ndarray | tuple,
    ) -> tuple[torch.Tensor, FusedLatent]:
        """Segment a local patch using its own features fused with the
        cropped-and-resized features of the global volume."""
        chi_loc = self.encoder(x)
        g_glob = self.encoder(x_global)
        latent = glc_fuse(chi_loc, g_glob, location_mask)
        return self.seg_decoder(latent.fused), latent

    def forward_global(self, x_global: torch.Tensor) -> tuple[torch.Tensor, FusedLatent]:
        """Segment the global volume itself; its features are duplicated to
        fill both halves of the fused latent."""
        g_glob = self.encoder(x_global)
        fused = torch.cat([g_glob, g_glob], dim=1)
        latent = FusedLatent(local=g_glob, global_=g_glob, fused=fused)
        return self.seg_decoder(latent.fused), latent

    def forward_pair(
        self,
        x: torch.Tensor,
        x_global: torch.Tensor,
        location_mask: np.ndarray | tuple,
    ) -> tuple[torch.Tensor, torch.Tensor, FusedLatent]:
        """forward_local and forward_global on the same global volume with the
        global features encoded once; returns (local logits, global logits,
        fused latent)."""
        chi_loc = self.encoder(x)
        g_glob = self.encoder(x_global)
        latent = glc_fuse(chi_loc, g_glob, location_mask)
        local_logits = self.seg_decoder(latent.fused)
        global_logits = self.seg_decoder(torch.cat([g_glob, g_glob], dim=1))
        return local_logits, global_logits, latent


# --------------------------------------------------------------------------
# EMA teacher-student


def ema_alpha(step: int, schedule: str) -> float:
    """Piecewise EMA weight.

    ``large_pretrain``: 0.999 for the first 1000 steps, then 0.9999.
    ``small_pretrain``: 0.99 / 0.999 / 0.9999 with breaks at 1000 and 3000.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule == "large_pretrain":
        return 0.999 if step < 1000 else 0.9999
    if schedule == "small_pretrain":
        if step < 1000:
            return 0.99
        if step < 3000:
            return 0.999
        return 0.9999
    raise ConfigurationError(f"unknown EMA schedule {schedule!r}")


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> None:
    """theta <- alpha * theta + (1 - alpha) * phi, elementwise; phi untouched.

    Computed as theta + (1 - alpha) * (phi - theta), which is exact (not just
    within an ulp) whenever theta and phi agree.
    """
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        tp.lerp_(sp, 1.0 - alpha)
    for (name, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)


class TeacherStudentPair:
    """Owns the student and its EMA teacher plus the step counter that drives
    the piecewise alpha schedule. The teacher never receives gradients and
    always runs in evaluation mode."""

    def __init__(self, student: nn.Module, schedule: str = "small_pretrain"):
        if schedule not in ("large_pretrain", "small_pretrain"):
            raise ConfigurationError(f"unknown EMA schedule {schedule!r}")
        self.student = student
        self.schedule = schedule
        self.teacher: Optional[nn.Module] = None
        self.step = 0

    def init_teacher(self) -> None:
        """Copy (not alias) the student into the teacher and restart the
        schedule counter."""
        self.teacher = copy.deepcopy(self.student)
        self.teacher.requires_grad_(False)
        self.teacher.eval()
        self.step = 0

    def ema_step(self) -> float:
        if self.teacher is None:
            raise RuntimeError("teacher not initialized")
        alpha = ema_alpha(self.step, self.schedule)
        ema_update(self.teacher, self.student, alpha)
        self.step += 1
        return alpha


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(
    directory: Path | str,
    student: MapSegModel,
    *,
    stage: str,
    step: int,
    seed: int,
    score: float | None = None,
    corpus_size: int | None = None,
    teacher: nn.Module | None = None,
    extra: dict | None = None,
) -> Path:
    """Write one file per parameter set plus a JSON manifest recording the
    producing configuration."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(student.state_dict(), directory / "student.pt")
    if teacher is not None:
        torch.save(teacher.state_dict(), directory / "teacher.pt")
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network": asdict(student.spec),
        "spec_hash": student.spec.spec_hash(),
        "num_classes": student.spec.num_classes,
        "stage": stage,
        "step": step,
        "score": score,
        "seed": seed,
        "corpus_size": corpus_size,
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return directory


def load_checkpoint(directory: Path | str, which: str = "student") -> tuple[MapSegModel, dict]:
    """Rebuild the model recorded in a checkpoint directory's manifest."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    net = dict(manifest["network"])
    net["mae_channels"] = tuple(net["mae_channels"])
    net["aspp_rates"] = tuple(net["aspp_rates"])
    spec = NetworkSpec(**net)
    model = MapSegModel(spec)
    state = torch.load(directory / f"{which}.pt", weights_only=True)
    model.load_state_dict(state)
    return model, manifest
