"""Training loops (autoencoder pretraining, centralized UDA, test-time UDA),
label-free model selection, sliding-window inference, and Dice evaluation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentPolicy, apply_policy, pretrain_policy, source_policy, target_policy
from .errors import ConfigurationError
from .losses import (
    CentralizedParts,
    HyperParams,
    client_loss,
    cosine_loss,
    mae_loss,
    seg_loss_from_logits,
    server_loss,
    total_centralized,
)
from .masking import BlockMask, MaskConfig, apply_mask, generate_block_mask
from .model import MapSegModel, NetworkSpec, TeacherStudentPair, save_checkpoint
from .rng import SeedBank
from .synthdata import ManifestEntry
from .volume import (
    LabelGrid,
    NormalizationSpec,
    VolumeGrid,
    build_patch_sample,
    downsample_global,
    fence_paths,
    load_volume,
    make_location_mask,
    normalize_intensity,
    pad_to_size,
    stitch_sliding_window,
    window_grid,
)

# Encoders pretrained on at least this many scans use the slower EMA schedule.
LARGE_PRETRAIN_THRESHOLD = 100

_SOURCE, _TARGET = 0, 1


@dataclass
class TrainConfig:
    """One training stage. Defaults follow the centralized recipe; use
    mae_defaults() for the pretraining recipe."""

    stage: str = "centralized"
    epochs: int = 100
    warmup_epochs: int = 10
    warmup_steps: int = 1000
    iters_per_epoch: int = 100
    batch_size: int = 1
    patience: int = 50
    val_fraction: float = 0.2
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    schedule: str = "cosine_warm_restarts"
    t0: int = 10
    t_mult: int = 2
    t_max: int = 20
    min_lr: float = 1e-8
    anneal_last: Optional[int] = None
    stride: int = 80
    seed: int = 0
    source_only: bool = False
    ema_schedule: Optional[str] = None
    log_iterations: bool = True

    def __post_init__(self):
        if self.iters_per_epoch <= 0:
            raise ConfigurationError("iters_per_epoch must be > 0")
        if self.stage in ("centralized",) and not self.warmup_epochs < self.epochs:
            raise ConfigurationError("warmup_epochs must be < epochs")
        if self.schedule not in ("cosine", "cosine_warm_restarts"):
            raise ConfigurationError(f"unknown schedule {self.schedule!r}")


def mae_defaults(**overrides) -> TrainConfig:
    """Pretraining recipe: 300 epochs of 500 iterations at batch 4, AdamW
    (2e-4, wd 0.05, betas 0.9/0.95), cosine annealing over the last 100
    epochs down to 1e-6."""
    kw = dict(
        stage="mae",
        epochs=300,
        warmup_epochs=0,
        iters_per_epoch=500,
        batch_size=4,
        lr=2e-4,
        weight_decay=0.05,
        betas=(0.9, 0.95),
        schedule="cosine",
        anneal_last=100,
        min_lr=1e-6,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


def uda_defaults(**overrides) -> TrainConfig:
    """Adaptation recipe: 100 epochs of 100 iterations at batch 1, AdamW
    (1e-4, wd 0.01), warm-restart cosine schedule (T0=10, mult 2, min 1e-8),
    10 warmup epochs, early stop after 50 stale epochs."""
    kw = dict(stage="centralized")
    kw.update(overrides)
    return TrainConfig(**kw)


def learning_rate_for_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Deterministic per-epoch learning rate for either schedule kind."""
    if cfg.schedule == "cosine":
        span = cfg.anneal_last if cfg.anneal_last is not None else cfg.epochs
        start = cfg.epochs - span
        if epoch < start:
            return cfg.lr
        if span <= 1:
            return cfg.min_lr
        t = (epoch - start) / (span - 1)
        return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * t))
    # warm restarts: cycles of length t0, t0*t_mult, ...
    e, cycle = epoch, cfg.t0
    while e >= cycle:
        e -= cycle
        cycle *= cfg.t_mult
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1 + math.cos(math.pi * e / cycle))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# --------------------------------------------------------------------------
# model selection score


@dataclass
class ScoreState:
    """Running epoch statistics feeding the label-free selection score."""

    mpl_sum: float = 0.0
    mpl_count: int = 0
    source_dice: Optional[float] = None
    best_score: float = -math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0

    def add(self, mpl_target_value: float) -> None:
        self.mpl_sum += float(mpl_target_value)
        self.mpl_count += 1

    def epoch_mean(self) -> float:
        if self.mpl_count == 0:
            raise ValueError("no target iterations recorded this epoch")
        return self.mpl_sum / self.mpl_count

    def reset_epoch(self) -> None:
        self.mpl_sum = 0.0
        self.mpl_count = 0


def compute_score(state: ScoreState, mode: str) -> float:
    """Centralized: source-validation Dice minus half the epoch-mean masked
    pseudo-label loss (bounded above by 1.5). Federated / test-time: the
    negative epoch mean alone."""
    mean = state.epoch_mean()
    if mode == "centralized":
        if state.source_dice is None:
            raise ValueError("centralized score needs a source validation Dice")
        return state.source_dice - 0.5 * mean
    if mode in ("federated", "testtime"):
        return -mean
    raise ConfigurationError(f"unknown score mode {mode!r}")


# --------------------------------------------------------------------------
# metrics


def dice_metric(
    pred: LabelGrid, gt: LabelGrid, classes: Optional[Sequence[int]] = None
) -> dict:
    """Per-class and mean Dice overlap. A class absent from both grids scores
    1.0 so synthetic volumes with missing structures stay comparable."""
    if pred.dims != gt.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if classes is None:
        classes = range(1, gt.num_classes)
    per_class = {}
    for c in classes:
        p = pred.data == c
        g = gt.data == c
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            per_class[int(c)] = 1.0
        else:
            per_class[int(c)] = 2.0 * int(np.logical_and(p, g).sum()) / denom
    return {"per_class": per_class, "mean": float(np.mean(list(per_class.values())))}


# --------------------------------------------------------------------------
# data plumbing


class DomainData:
    """Lazy, cached access to one domain's volumes; label loading can be
    disabled entirely, which is how training keeps target labels fenced off."""

    def __init__(self, entries: Sequence[ManifestEntry], with_labels: bool):
        if not entries:
            raise ConfigurationError("dataset has no volumes")
        self.entries = list(entries)
        self.with_labels = with_labels
        self._cache: dict[int, tuple[VolumeGrid, Optional[LabelGrid]]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def volume_paths(self) -> list[Path]:
        return [e.path for e in self.entries]

    def label_paths(self) -> list[Path]:
        return [e.labels_path for e in self.entries if e.labels_path is not None]

    def get(self, idx: int) -> tuple[VolumeGrid, Optional[LabelGrid]]:
        if idx not in self._cache:
            vol = load_volume(self.entries[idx].path)
            labels = None
            if self.with_labels:
                lp = self.entries[idx].labels_path
                if lp is None:
                    raise ConfigurationError(f"{self.entries[idx].path} has no labels")
                labels = load_volume(lp)
            self._cache[idx] = (vol, labels)
        return self._cache[idx]


def split_source_entries(
    entries: Sequence[ManifestEntry], val_fraction: float
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Deterministic train/validation split of the labeled source set: the
    trailing ceil(n * val_fraction) entries (at least one) validate."""
    entries = list(entries)
    if len(entries) < 2:
        raise ConfigurationError("need at least two source volumes to hold out validation")
    n_val = max(1, math.ceil(len(entries) * val_fraction))
    n_val = min(n_val, len(entries) - 1)
    return entries[:-n_val], entries[-n_val:]


@dataclass
class DrawnSample:
    """Everything one stream contributes to a training iteration, as tensors."""

    x: torch.Tensor
    x_masked: torch.Tensor
    glob: torch.Tensor
    glob_masked: torch.Tensor
    location_mask: np.ndarray
    y: Optional[torch.Tensor] = None
    glob_y: Optional[torch.Tensor] = None
    mask_local: Optional[BlockMask] = None
    mask_global: Optional[BlockMask] = None


def _to_tensor(grid: VolumeGrid) -> torch.Tensor:
    return torch.from_numpy(grid.data.copy())[None, None]


def draw_training_sample(
    data: DomainData,
    bank: SeedBank,
    stream_id: int,
    iteration: int,
    policy: Optional[AugmentPolicy],
    mask_cfg: MaskConfig,
    patch_edge: int,
) -> DrawnSample:
    """One (x, X, M, masks, labels) bundle, every random draw coming from a
    named sub-stream keyed by (stream, iteration)."""
    data_rng = bank.stream("data", stream_id, iteration)
    idx = int(data_rng.integers(0, len(data)))
    raw, labels = data.get(idx)
    vol = raw
    if not vol.normalized:
        vol = normalize_intensity(
            vol, NormalizationSpec(mode="train"), bank.stream("normalize", stream_id, iteration)
        )
    if policy is not None:
        vol, labels = apply_policy(vol, labels, policy, bank.stream("augment", stream_id, iteration))
    sample = build_patch_sample(vol, labels, patch_edge, data_rng, (patch_edge,) * 3)
    mask_rng = bank.stream("mask", stream_id, iteration)
    m_local = generate_block_mask(sample.x.dims, mask_cfg.local_block, mask_cfg.ratio, mask_rng)
    m_global = generate_block_mask(
        sample.glob.dims, mask_cfg.global_block, mask_cfg.ratio, mask_rng
    )
    return DrawnSample(
        x=_to_tensor(sample.x),
        x_masked=_to_tensor(apply_mask(sample.x, m_local, mask_cfg.fill_value)),
        glob=_to_tensor(sample.glob),
        glob_masked=_to_tensor(apply_mask(sample.glob, m_global, mask_cfg.fill_value)),
        location_mask=sample.location_mask,
        y=None if sample.y is None else torch.from_numpy(sample.y.data.copy()),
        glob_y=None if sample.glob_y is None else torch.from_numpy(sample.glob_y.data.copy()),
        mask_local=m_local,
        mask_global=m_global,
    )


class JsonlLogger:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# --------------------------------------------------------------------------
# inference and evaluation


@torch.no_grad()
def infer_volume(
    vol: VolumeGrid,
    model: MapSegModel,
    stride: int = 80,
) -> LabelGrid:
    """Sliding-window segmentation of a whole normalized volume: every window
    is segmented with its global context, overlapping logits are averaged,
    and the argmax is taken per voxel."""
    model.eval()
    edge = model.spec.patch_edge
    orig_dims = vol.dims
    padded, _ = pad_to_size(vol, None, (edge,) * 3)
    glob = _to_tensor(downsample_global(padded, (edge,) * 3))
    patches = []
    stride = min(stride, edge)  # the default stride assumes the full-size patch
    for offset in window_grid(padded.dims, edge, stride):
        sl = tuple(slice(o, o + edge) for o in offset)
        x = torch.from_numpy(padded.data[sl].copy())[None, None]
        loc = make_location_mask(offset, edge, padded.dims, (edge,) * 3)
        logits, _ = model.forward_local(x, glob, loc)
        patches.append((offset, logits[0].numpy()))
    stitched = stitch_sliding_window(patches, padded.dims)
    labels = stitched.argmax(axis=0).astype(np.int64)
    crop = tuple(slice(0, d) for d in orig_dims)
    return LabelGrid(labels[crop], num_classes=model.spec.num_classes)


def evaluate_entries(
    model: MapSegModel,
    entries: Sequence[ManifestEntry],
    stride: int = 80,
    classes: Optional[Sequence[int]] = None,
) -> dict:
    """Mean Dice of the model over a list of annotated volumes (labels are
    read here, so this function is only for validation / final evaluation)."""
    spec = NormalizationSpec(mode="infer")
    scores = []
    per_volume = []
    for entry in entries:
        if entry.labels_path is None:
            raise ConfigurationError(f"{entry.path} has no labels to evaluate against")
        vol = load_volume(entry.path)
        if not vol.normalized:
            vol = normalize_intensity(vol, spec)
        gt = load_volume(entry.labels_path)
        pred = infer_volume(vol, model, stride=stride)
        report = dice_metric(pred, gt, classes)
        scores.append(report["mean"])
        per_volume.append({"path": str(entry.path), **report})
    return {"mean": float(np.mean(scores)), "volumes": per_volume}


# --------------------------------------------------------------------------
# MAE pretraining


@dataclass
class PretrainResult:
    checkpoint: Path
    log_path: Path
    final_loss: float
    corpus_size: int


def pretrain_mae(
    corpus: Sequence[ManifestEntry],
    config: TrainConfig,
    network: NetworkSpec,
    out_dir: Path | str,
    mask_cfg: MaskConfig | None = None,
    policy: AugmentPolicy | None = None,
) -> PretrainResult:
    """Self-supervised pretraining: per step, reconstruct a batch of masked
    local patches and their masked (half-block) global volumes, minimizing
    the masked-voxel MSE of both."""
    if not corpus:
        raise ConfigurationError("pretraining corpus is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_cfg = mask_cfg or MaskConfig()
    policy = policy if policy is not None else pretrain_policy()
    bank = SeedBank(config.seed)
    torch.manual_seed(bank.torch_seed("init"))
    model = MapSegModel(network)
    data = DomainData(corpus, with_labels=False)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay, betas=config.betas
    )
    log = JsonlLogger(out_dir / "pretrain_log.jsonl")
    model.train()
    final_loss = math.nan
    step = 0
    for epoch in range(config.epochs):
        lr = learning_rate_for_epoch(config, epoch)
        _set_lr(optimizer, lr)
        epoch_losses = []
        for _ in range(config.iters_per_epoch):
            draws = [
                draw_training_sample(data, bank, _SOURCE, step * config.batch_size + b, policy, mask_cfg, network.patch_edge)
                for b in range(config.batch_size)
            ]
            x = torch.cat([d.x for d in draws])
            x_m = torch.cat([d.x_masked for d in draws])
            g = torch.cat([d.glob for d in draws])
            g_m = torch.cat([d.glob_masked for d in draws])
            local_mask = torch.from_numpy(
                np.stack([d.mask_local.grid for d in draws]).astype(bool)
            )
            global_mask = torch.from_numpy(
                np.stack([d.mask_global.grid for d in draws]).astype(bool)
            )
            recon_x = model.reconstruct(x_m)[:, 0]
            recon_g = model.reconstruct(g_m)[:, 0]
            loss = mae_loss(recon_x, x[:, 0], local_mask) + mae_loss(recon_g, g[:, 0], global_mask)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
            step += 1
        final_loss = float(np.mean(epoch_losses))
        log.write({"epoch": epoch, "loss": final_loss, "lr": lr, "step": step})
    log.close()
    ckpt = save_checkpoint(
        out_dir / "checkpoint",
        model,
        stage="mae",
        step=step,
        seed=config.seed,
        corpus_size=len(corpus),
    )
    return PretrainResult(
        checkpoint=ckpt, log_path=log.path, final_loss=final_loss, corpus_size=len(corpus)
    )


def mae_loss_batched(recon: torch.Tensor, original: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    return mae_loss(recon, original, masks)


# --------------------------------------------------------------------------
# shared forward bookkeeping for the adaptation losses


def _softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits[0], dim=0)


def _seg(logits: torch.Tensor, target: torch.Tensor, eps: float) -> torch.Tensor:
    return seg_loss_from_logits(logits[0], target, eps)


@torch.no_grad()
def _pseudo_labels(model: MapSegModel, sample: DrawnSample) -> tuple[torch.Tensor, torch.Tensor]:
    """Teacher labels for the unmasked local patch and global volume."""
    was_training = model.training
    model.eval()
    local_logits, global_logits, _ = model.forward_pair(
        sample.x, sample.glob, sample.location_mask
    )
    if was_training:
        model.train()
    return local_logits[0].argmax(dim=0), global_logits[0].argmax(dim=0)


@dataclass
class SourceForward:
    seg_local: torch.Tensor
    seg_local_masked: torch.Tensor
    seg_global: torch.Tensor
    seg_global_masked: torch.Tensor
    cos_plain: torch.Tensor
    cos_masked: torch.Tensor


def _forward_source_terms(model: MapSegModel, s: DrawnSample, eps: float) -> SourceForward:
    logits, glob_logits, latent = model.forward_pair(s.x, s.glob, s.location_mask)
    logits_m, glob_logits_m, latent_m = model.forward_pair(
        s.x_masked, s.glob_masked, s.location_mask
    )
    return SourceForward(
        seg_local=_seg(logits, s.y, eps),
        seg_local_masked=_seg(logits_m, s.y, eps),
        seg_global=_seg(glob_logits, s.glob_y, eps),
        seg_global_masked=_seg(glob_logits_m, s.glob_y, eps),
        cos_plain=cosine_loss(latent.local[0], latent.global_[0], eps),
        cos_masked=cosine_loss(latent_m.local[0], latent_m.global_[0], eps),
    )


# --------------------------------------------------------------------------
# centralized UDA (and the source-only baseline)


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_score: float
    best_epoch: int
    epochs_run: int
    source_dice: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)


def _load_encoder(model: MapSegModel, encoder_checkpoint: Path | str | None) -> Optional[dict]:
    if encoder_checkpoint is None:
        return None
    from .model import load_checkpoint

    pretrained, manifest = load_checkpoint(encoder_checkpoint)
    model.encoder.load_state_dict(pretrained.encoder.state_dict())
    return manifest


def _ema_tag(config: TrainConfig, manifest: Optional[dict]) -> str:
    if config.ema_schedule is not None:
        return config.ema_schedule
    corpus = (manifest or {}).get("corpus_size") or 0
    return "large_pretrain" if corpus >= LARGE_PRETRAIN_THRESHOLD else "small_pretrain"


def train_centralized(
    source_entries: Sequence[ManifestEntry],
    target_entries: Sequence[ManifestEntry],
    config: TrainConfig,
    network: NetworkSpec,
    out_dir: Path | str,
    encoder_checkpoint: Path | str | None = None,
    mask_cfg: MaskConfig | None = None,
    hyper: HyperParams | None = None,
    source_aug: AugmentPolicy | None = None,
    target_aug: AugmentPolicy | None = None,
) -> TrainResult:
    """Warm up on labeled source data, then per iteration draw one source and
    one target pair, optimize the full centralized objective, update the EMA
    teacher, and keep the best checkpoint by the label-free score.

    With config.source_only the target stream is never touched: the loop
    minimizes the labeled-data objective for the whole budget and selects by
    source validation Dice (the no-adaptation baseline).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_cfg = mask_cfg or MaskConfig()
    hyper = hyper or HyperParams()
    source_aug = source_aug if source_aug is not None else source_policy()
    target_aug = target_aug if target_aug is not None else target_policy()
    bank = SeedBank(config.seed)

    train_entries, val_entries = split_source_entries(source_entries, config.val_fraction)
    source_data = DomainData(train_entries, with_labels=True)
    target_data = None if config.source_only else DomainData(target_entries, with_labels=False)

    torch.manual_seed(bank.torch_seed("init"))
    student = MapSegModel(network)
    manifest = _load_encoder(student, encoder_checkpoint)
    pair = TeacherStudentPair(student, _ema_tag(config, manifest))
    optimizer = torch.optim.AdamW(
        student.parameters(), lr=config.lr, weight_decay=config.weight_decay, betas=config.betas
    )
    epoch_log = JsonlLogger(out_dir / "train_log.jsonl")
    iter_log = JsonlLogger(out_dir / "losses.jsonl") if config.log_iterations else None

    state = ScoreState()
    best_dir = out_dir / "best"
    last_dir = out_dir / "last"
    dice_history: list[float] = []
    eps = hyper.eps
    warmup = config.epochs if config.source_only else config.warmup_epochs
    it = 0
    epochs_run = 0
    student.train()
    for epoch in range(config.epochs):
        if epoch == warmup and not config.source_only:
            pair.init_teacher()
        _set_lr(optimizer, learning_rate_for_epoch(config, epoch))
        state.reset_epoch()
        epoch_total = 0.0
        for _ in range(config.iters_per_epoch):
            src = draw_training_sample(
                source_data, bank, _SOURCE, it, source_aug, mask_cfg, network.patch_edge
            )
            fwd = _forward_source_terms(student, src, eps)
            if epoch < warmup:
                report = None
                if config.source_only:
                    # the no-adaptation baseline trains on the full
                    # labeled-data objective for its whole budget
                    loss = server_loss(
                        fwd.seg_local,
                        fwd.seg_local_masked,
                        fwd.seg_global,
                        fwd.seg_global_masked,
                        fwd.cos_plain,
                        fwd.cos_masked,
                        hyper,
                    )
                else:
                    # warmup: supervised local term plus global-context terms
                    loss = (
                        hyper.beta * fwd.seg_local
                        + hyper.gamma * (fwd.seg_global + fwd.seg_global_masked)
                        + hyper.delta * (fwd.cos_plain + fwd.cos_masked)
                    )
            else:
                tgt = draw_training_sample(
                    target_data, bank, _TARGET, it, target_aug, mask_cfg, network.patch_edge
                )
                pseudo_local, pseudo_global = _pseudo_labels(pair.teacher, tgt)
                t_logits_m, t_glob_logits_m, t_latent_m = student.forward_pair(
                    tgt.x_masked, tgt.glob_masked, tgt.location_mask
                )
                parts = CentralizedParts(
                    seg_source_local=fwd.seg_local,
                    seg_source_local_masked=fwd.seg_local_masked,
                    seg_target_local_masked=_seg(t_logits_m, pseudo_local, eps),
                    seg_source_global=fwd.seg_global,
                    seg_source_global_masked=fwd.seg_global_masked,
                    seg_target_global_masked=_seg(t_glob_logits_m, pseudo_global, eps),
                    cos_source=fwd.cos_plain,
                    cos_source_masked=fwd.cos_masked,
                    cos_target_masked=cosine_loss(t_latent_m.local[0], t_latent_m.global_[0], eps),
                )
                loss, report = total_centralized(parts, hyper, iteration=it)
                state.add(report.mpl_target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            if epoch >= warmup:
                pair.ema_step()
            if iter_log is not None and report is not None:
                iter_log.write(report.to_dict())
            epoch_total += float(loss.detach())
            it += 1

        dice = evaluate_entries(student, val_entries, stride=config.stride)["mean"]
        dice_history.append(dice)
        state.source_dice = dice
        in_warmup = epoch < warmup and not config.source_only
        if config.source_only:
            score = dice  # no target stream: select on source validation alone
        elif in_warmup:
            score = None  # selection starts with adaptation
        else:
            score = compute_score(state, "centralized")
        record = {
            "epoch": epoch,
            "mean_loss": epoch_total / config.iters_per_epoch,
            "source_dice": dice,
            "score": score,
            "lr": learning_rate_for_epoch(config, epoch),
            "phase": "source_only" if config.source_only else ("warmup" if in_warmup else "adaptation"),
        }
        epoch_log.write(record)
        epochs_run = epoch + 1
        if score is not None:
            if score > state.best_score:
                state.best_score = score
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
                save_checkpoint(
                    best_dir,
                    student,
                    stage=config.stage,
                    step=it,
                    seed=config.seed,
                    score=score,
                    teacher=pair.teacher,
                    extra={"epoch": epoch},
                )
            else:
                state.epochs_since_improvement += 1
                if state.epochs_since_improvement >= config.patience:
                    break
    save_checkpoint(
        last_dir,
        student,
        stage=config.stage,
        step=it,
        seed=config.seed,
        score=None,
        teacher=pair.teacher,
    )
    epoch_log.close()
    if iter_log is not None:
        iter_log.close()
    return TrainResult(
        best_checkpoint=best_dir,
        last_checkpoint=last_dir,
        log_path=epoch_log.path,
        best_score=state.best_score,
        best_epoch=state.best_epoch,
        epochs_run=epochs_run,
        source_dice=dice_history,
    )


# --------------------------------------------------------------------------
# test-time UDA


def train_testtime(
    source_entries: Sequence[ManifestEntry],
    target_entries: Sequence[ManifestEntry],
    config: TrainConfig,
    network: NetworkSpec,
    out_dir: Path | str,
    encoder_checkpoint: Path | str | None = None,
    mask_cfg: MaskConfig | None = None,
    hyper: HyperParams | None = None,
    source_aug: AugmentPolicy | None = None,
    target_aug: AugmentPolicy | None = None,
) -> TrainResult:
    """Two strictly separated phases: warm-up steps on labeled source data
    with the labeled-data objective, then target-only self-training with
    teacher pseudo-labels. Source files are fenced during phase 2, so any
    access raises. Selection uses the negative mean masked pseudo-label loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_cfg = mask_cfg or MaskConfig()
    hyper = hyper or HyperParams()
    source_aug = source_aug if source_aug is not None else source_policy()
    target_aug = target_aug if target_aug is not None else target_policy()
    bank = SeedBank(config.seed)

    train_entries, val_entries = split_source_entries(source_entries, config.val_fraction)
    source_data = DomainData(train_entries, with_labels=True)
    target_data = DomainData(target_entries, with_labels=False)

    torch.manual_seed(bank.torch_seed("init"))
    student = MapSegModel(network)
    manifest = _load_encoder(student, encoder_checkpoint)
    pair = TeacherStudentPair(student, _ema_tag(config, manifest))
    optimizer = torch.optim.AdamW(
        student.parameters(), lr=config.lr, weight_decay=config.weight_decay, betas=config.betas
    )
    epoch_log = JsonlLogger(out_dir / "train_log.jsonl")

    eps = hyper.eps
    student.train()
    # ---- phase 1: source only -------------------------------------------
    for step in range(config.warmup_steps):
        src = draw_training_sample(
            source_data, bank, _SOURCE, step, source_aug, mask_cfg, network.patch_edge
        )
        fwd = _forward_source_terms(student, src, eps)
        loss = server_loss(
            fwd.seg_local,
            fwd.seg_local_masked,
            fwd.seg_global,
            fwd.seg_global_masked,
            fwd.cos_plain,
            fwd.cos_masked,
            hyper,
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    source_dice_phase1 = evaluate_entries(student, val_entries, stride=config.stride)["mean"]
    epoch_log.write({"phase": "source_warmup", "steps": config.warmup_steps, "source_dice": source_dice_phase1})

    # ---- phase 2: target only, source fenced ------------------------------
    pair.init_teacher()
    state = ScoreState()
    best_dir = out_dir / "best"
    last_dir = out_dir / "last"
    fenced = [e.path for e in source_entries] + [
        e.labels_path for e in source_entries if e.labels_path
    ]
    epochs_run = 0
    it = 0
    with fence_paths(fenced, "test-time phase 2 is source-free"):
        for epoch in range(config.epochs):
            _set_lr(optimizer, learning_rate_for_epoch(config, epoch))
            state.reset_epoch()
            epoch_total = 0.0
            for _ in range(config.iters_per_epoch):
                tgt = draw_training_sample(
                    target_data, bank, _TARGET, it, target_aug, mask_cfg, network.patch_edge
                )
                pseudo_local, pseudo_global = _pseudo_labels(pair.teacher, tgt)
                logits_m, glob_logits_m, latent_m = student.forward_pair(
                    tgt.x_masked, tgt.glob_masked, tgt.location_mask
                )
                logits_u, glob_logits_u, latent_u = student.forward_pair(
                    tgt.x, tgt.glob, tgt.location_mask
                )
                seg_local_masked = _seg(logits_m, pseudo_local, eps)
                loss = client_loss(
                    seg_local_masked=seg_local_masked,
                    seg_local=_seg(logits_u, pseudo_local, eps),
                    seg_global_masked=_seg(glob_logits_m, pseudo_global, eps),
                    seg_global=_seg(glob_logits_u, pseudo_global, eps),
                    cos_plain=cosine_loss(latent_u.local[0], latent_u.global_[0], eps),
                    cos_masked=cosine_loss(latent_m.local[0], latent_m.global_[0], eps),
                    hp=hyper,
                )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                pair.ema_step()
                state.add(float(seg_local_masked.detach()))
                epoch_total += float(loss.detach())
                it += 1
            score = compute_score(state, "testtime")
            epoch_log.write(
                {
                    "phase": "target_adaptation",
                    "epoch": epoch,
                    "mean_loss": epoch_total / config.iters_per_epoch,
                    "score": score,
                }
            )
            epochs_run = epoch + 1
            if score > state.best_score:
                state.best_score = score
                state.best_epoch = epoch
                state.epochs_since_improvement = 0
                save_checkpoint(
                    best_dir,
                    student,
                    stage="testtime",
                    step=it,
                    seed=config.seed,
                    score=score,
                    teacher=pair.teacher,
                    extra={"epoch": epoch},
                )
            else:
                state.epochs_since_improvement += 1
                if state.epochs_since_improvement >= config.patience:
                    break
    save_checkpoint(last_dir, student, stage="testtime", step=it, seed=config.seed, teacher=pair.teacher)

    # forgetting report: source Dice of the adapted (best) model
    from .model import load_checkpoint

    best_model, _ = load_checkpoint(best_dir)
    source_dice_phase2 = evaluate_entries(best_model, val_entries, stride=config.stride)["mean"]
    epoch_log.write({"phase": "final", "source_dice_after": source_dice_phase2})
    epoch_log.close()
    (out_dir / "summary.json").write_text(
        json.dumps(
            {
                "source_dice_phase1": source_dice_phase1,
                "source_dice_phase2": source_dice_phase2,
                "best_score": state.best_score,
                "best_epoch": state.best_epoch,
            },
            indent=2,
        )
        + "\n"
    )
    return TrainResult(
        best_checkpoint=best_dir,
        last_checkpoint=last_dir,
        log_path=epoch_log.path,
        best_score=state.best_score,
        best_epoch=state.best_epoch,
        epochs_run=epochs_run,
        source_dice=[source_dice_phase1, source_dice_phase2],
        extras={
            "source_dice_phase1": source_dice_phase1,
            "source_dice_phase2": source_dice_phase2,
        },
    )
