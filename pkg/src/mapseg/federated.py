"""Single-process simulator of the federated adaptation algorithm: labeled
server rounds, label-free client rounds seeded independently per (round,
client), EMA-teacher exchange, and dataset-size-weighted aggregation.

Clients execute sequentially but share no state within a round, and every
random draw is keyed by (round, client, step), so the result is identical to
a logically parallel execution."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import torch

from .augment import AugmentPolicy, source_policy, target_policy
from .errors import ConfigurationError
from .losses import HyperParams, client_loss, cosine_loss, server_loss
from .masking import MaskConfig
from .model import MapSegModel, NetworkSpec, TeacherStudentPair, save_checkpoint
from .rng import SeedBank
from .synthdata import ManifestEntry
from .trainer import (
    DomainData,
    TrainConfig,
    _forward_source_terms,
    _pseudo_labels,
    _seg,
    _set_lr,
    JsonlLogger,
    draw_training_sample,
)

# stream ids: 0/1 are the centralized source/target; federated rounds use
# 10 + client slot so seeds never collide with other stages
_SERVER_STREAM = 10


@dataclass
class FederatedConfig:
    """Round structure and the global learning-rate decay across rounds."""

    rounds: int = 100
    server_steps: Optional[int] = None  # default: one epoch of iterations
    client_steps: Optional[int] = None
    lr_start: float = 1e-4
    lr_end: float = 1e-6

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigurationError("need at least one round")


@dataclass
class RoundRecord:
    round_index: int
    server_losses: list[float]
    client_losses: dict[int, list[float]]
    client_scores: dict[int, float]
    checksum: str

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "server_losses": self.server_losses,
            "client_losses": {str(k): v for k, v in self.client_losses.items()},
            "client_scores": {str(k): v for k, v in self.client_scores.items()},
            "checksum": self.checksum,
        }


def round_learning_rate(cfg: FederatedConfig, round_index: int) -> float:
    """Cosine decay from lr_start to lr_end over the rounds."""
    if cfg.rounds == 1:
        return cfg.lr_start
    t = round_index / (cfg.rounds - 1)
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * t))


def aggregation_weights(sizes: Sequence[int]) -> list[Fraction]:
    """Exact dataset-size weights; they sum to 1 as rationals."""
    if any(s < 1 for s in sizes):
        raise ConfigurationError("client dataset sizes must be >= 1")
    total = sum(sizes)
    if total == 0:
        raise ConfigurationError("zero total dataset size")
    return [Fraction(s, total) for s in sizes]


def aggregate(state_dicts: Sequence[dict], sizes: Sequence[int]) -> dict:
    """Elementwise convex combination of parameter sets, weighted by dataset
    size, accumulated in float64 in a fixed key order."""
    if len(state_dicts) != len(sizes) or not state_dicts:
        raise ConfigurationError("need one size per client parameter set")
    keys = list(state_dicts[0].keys())
    for sd in state_dicts[1:]:
        if list(sd.keys()) != keys:
            raise ValueError("client parameter sets are structurally different")
    weights = [float(w) for w in aggregation_weights(sizes)]
    out = {}
    for key in keys:
        ref = state_dicts[0][key]
        acc = torch.zeros_like(ref, dtype=torch.float64)
        for sd, w in zip(state_dicts, weights):
            if sd[key].shape != ref.shape:
                raise ValueError(f"shape mismatch for {key}")
            acc += sd[key].double() * w
        out[key] = acc.to(ref.dtype)
    return out


def state_checksum(state_dict: dict) -> str:
    sha = hashlib.sha256()
    for key in sorted(state_dict.keys()):
        sha.update(key.encode())
        sha.update(state_dict[key].detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()


def server_round(
    pair: TeacherStudentPair,
    source_data: DomainData,
    steps: int,
    lr: float,
    bank: SeedBank,
    round_index: int,
    *,
    network: NetworkSpec,
    mask_cfg: MaskConfig,
    hyper: HyperParams,
    policy: AugmentPolicy,
    weight_decay: float,
    betas: tuple[float, float],
    alpha_override: Optional[float] = None,
) -> list[float]:
    """Reset the server teacher to the current student, then take the given
    number of labeled-objective steps with an EMA update after each."""
    pair.init_teacher()
    optimizer = torch.optim.AdamW(
        pair.student.parameters(), lr=lr, weight_decay=weight_decay, betas=betas
    )
    losses = []
    pair.student.train()
    for step in range(steps):
        src = draw_training_sample(
            source_data,
            bank,
            _SERVER_STREAM,
            round_index * max(steps, 1) + step,
            policy,
            mask_cfg,
            network.patch_edge,
        )
        fwd = _forward_source_terms(pair.student, src, hyper.eps)
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
        if alpha_override is None:
            pair.ema_step()
        else:
            from .model import ema_update

            ema_update(pair.teacher, pair.student, alpha_override)
            pair.step += 1
        losses.append(float(loss.detach()))
    return losses


def client_round(
    broadcast_state: dict,
    client_data: DomainData,
    steps: int,
    lr: float,
    bank: SeedBank,
    round_index: int,
    client_index: int,
    *,
    network: NetworkSpec,
    mask_cfg: MaskConfig,
    hyper: HyperParams,
    policy: AugmentPolicy,
    weight_decay: float,
    betas: tuple[float, float],
    ema_schedule: str,
) -> tuple[dict, list[float], float]:
    """Initialize both student and teacher from the broadcast parameters,
    self-train on the client's unlabeled data, and return the EMA teacher
    parameters plus the round's losses and label-free score."""
    if len(client_data) < 1:
        raise ConfigurationError("client dataset is empty")
    student = MapSegModel(network)
    student.load_state_dict(broadcast_state)
    pair = TeacherStudentPair(student, ema_schedule)
    pair.init_teacher()
    optimizer = torch.optim.AdamW(
        student.parameters(), lr=lr, weight_decay=weight_decay, betas=betas
    )
    losses = []
    mpl_values = []
    student.train()
    stream = _SERVER_STREAM + 1 + client_index
    for step in range(steps):
        tgt = draw_training_sample(
            client_data,
            bank,
            stream,
            round_index * max(steps, 1) + step,
            policy,
            mask_cfg,
            network.patch_edge,
        )
        pseudo_local, pseudo_global = _pseudo_labels(pair.teacher, tgt)
        logits_m, glob_logits_m, latent_m = student.forward_pair(
            tgt.x_masked, tgt.glob_masked, tgt.location_mask
        )
        logits_u, glob_logits_u, latent_u = student.forward_pair(
            tgt.x, tgt.glob, tgt.location_mask
        )
        seg_local_masked = _seg(logits_m, pseudo_local, hyper.eps)
        loss = client_loss(
            seg_local_masked=seg_local_masked,
            seg_local=_seg(logits_u, pseudo_local, hyper.eps),
            seg_global_masked=_seg(glob_logits_m, pseudo_global, hyper.eps),
            seg_global=_seg(glob_logits_u, pseudo_global, hyper.eps),
            cos_plain=cosine_loss(latent_u.local[0], latent_u.global_[0], hyper.eps),
            cos_masked=cosine_loss(latent_m.local[0], latent_m.global_[0], hyper.eps),
            hp=hyper,
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        pair.ema_step()
        mpl_values.append(float(seg_local_masked.detach()))
        losses.append(float(loss.detach()))
    score = -float(sum(mpl_values) / len(mpl_values)) if mpl_values else math.nan
    theta_k = {k: v.detach().clone() for k, v in pair.teacher.state_dict().items()}
    return theta_k, losses, score


@dataclass
class FederatedResult:
    final_checkpoint: Path
    best_checkpoint: Path
    rounds_log: Path
    records: list[RoundRecord] = field(default_factory=list)
    best_round: int = -1
    best_score: float = -math.inf


def run_federated(
    source_entries: Sequence[ManifestEntry],
    client_entries: Sequence[Sequence[ManifestEntry]],
    fed_cfg: FederatedConfig,
    train_cfg: TrainConfig,
    network: NetworkSpec,
    out_dir: Path | str,
    encoder_checkpoint: Path | str | None = None,
    mask_cfg: MaskConfig | None = None,
    hyper: HyperParams | None = None,
    source_aug: AugmentPolicy | None = None,
    target_aug: AugmentPolicy | None = None,
) -> FederatedResult:
    """Full federated run: every round the server trains on labeled data and
    broadcasts its EMA teacher; each client self-trains from that teacher on
    its own unlabeled volumes; the returned client teachers are averaged by
    dataset size into the next server model."""
    if not client_entries:
        raise ConfigurationError("need at least one client")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mask_cfg = mask_cfg or MaskConfig()
    hyper = hyper or HyperParams()
    source_aug = source_aug if source_aug is not None else source_policy()
    target_aug = target_aug if target_aug is not None else target_policy()
    bank = SeedBank(train_cfg.seed)

    source_data = DomainData(source_entries, with_labels=True)
    client_data = [DomainData(c, with_labels=False) for c in client_entries]
    sizes = [len(c) for c in client_data]
    server_steps = fed_cfg.server_steps if fed_cfg.server_steps is not None else train_cfg.iters_per_epoch
    client_steps = fed_cfg.client_steps if fed_cfg.client_steps is not None else train_cfg.iters_per_epoch

    torch.manual_seed(bank.torch_seed("init"))
    student = MapSegModel(network)
    manifest = None
    if encoder_checkpoint is not None:
        from .model import load_checkpoint

        pretrained, manifest = load_checkpoint(encoder_checkpoint)
        student.encoder.load_state_dict(pretrained.encoder.state_dict())
    ema_schedule = train_cfg.ema_schedule or (
        "large_pretrain"
        if (manifest or {}).get("corpus_size", 0) and manifest["corpus_size"] >= 100
        else "small_pretrain"
    )
    pair = TeacherStudentPair(student, ema_schedule)

    log = JsonlLogger(out_dir / "rounds.jsonl")
    records: list[RoundRecord] = []
    best_score = -math.inf
    best_round = -1
    best_dir = out_dir / "best"
    final_dir = out_dir / "final"
    for r in range(fed_cfg.rounds):
        lr = round_learning_rate(fed_cfg, r)
        server_losses = server_round(
            pair,
            source_data,
            server_steps,
            lr,
            bank,
            r,
            network=network,
            mask_cfg=mask_cfg,
            hyper=hyper,
            policy=source_aug,
            weight_decay=train_cfg.weight_decay,
            betas=train_cfg.betas,
        )
        broadcast = {k: v.detach().clone() for k, v in pair.teacher.state_dict().items()}
        thetas: list[dict] = []
        client_losses: dict[int, list[float]] = {}
        client_scores: dict[int, float] = {}
        for k, data in enumerate(client_data):
            theta_k, losses_k, score_k = client_round(
                broadcast,
                data,
                client_steps,
                lr,
                bank,
                r,
                k,
                network=network,
                mask_cfg=mask_cfg,
                hyper=hyper,
                policy=target_aug,
                weight_decay=train_cfg.weight_decay,
                betas=train_cfg.betas,
                ema_schedule=ema_schedule,
            )
            thetas.append(theta_k)
            client_losses[k] = losses_k
            client_scores[k] = score_k
        aggregated = aggregate(thetas, sizes)
        student.load_state_dict(aggregated)
        record = RoundRecord(
            round_index=r,
            server_losses=server_losses,
            client_losses=client_losses,
            client_scores=client_scores,
            checksum=state_checksum(student.state_dict()),
        )
        records.append(record)
        log.write(record.to_dict())
        round_score = float(sum(client_scores.values()) / len(client_scores)) if client_scores else math.nan
        if round_score > best_score or best_round < 0:
            best_score = round_score
            best_round = r
            save_checkpoint(
                best_dir,
                student,
                stage="federated",
                step=r + 1,
                seed=train_cfg.seed,
                score=round_score,
                extra={"round": r},
            )
    save_checkpoint(
        final_dir, student, stage="federated", step=fed_cfg.rounds, seed=train_cfg.seed
    )
    log.close()
    return FederatedResult(
        final_checkpoint=final_dir,
        best_checkpoint=best_dir,
        rounds_log=log.path,
        records=records,
        best_round=best_round,
        best_score=best_score,
    )
