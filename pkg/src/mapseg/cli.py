"""Command-line entry point: one experiment stage per invocation.

Exit codes: 0 success, 1 validation error (bad config, bad files), 2 runtime
failure. The resolved configuration is echoed into the output directory for
provenance; MAPSEG_OUT provides a default --out."""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, resolve_config
from .errors import ConfigurationError, MapSegError, VolumeFormatError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config value by dotted path",
        )
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument(
            "--out",
            type=Path,
            default=os.environ.get("MAPSEG_OUT"),
            help="output directory (default: $MAPSEG_OUT)",
        )

    common(sub.add_parser("synth", help="generate synthetic phantom datasets"))
    common(sub.add_parser("pretrain", help="masked-autoencoding pretraining"))
    common(sub.add_parser("train-uda", help="centralized domain adaptation"))
    common(sub.add_parser("train-testtime", help="two-phase test-time adaptation"))
    fed = sub.add_parser("train-federated", help="federated adaptation simulation")
    common(fed)
    fed.add_argument(
        "--clients",
        type=Path,
        default=None,
        help="JSON file listing per-client dataset manifests",
    )

    inf = sub.add_parser("infer", help="sliding-window segmentation of one volume")
    inf.add_argument("--volume", type=Path, required=True)
    inf.add_argument("--checkpoint", type=Path, required=True)
    inf.add_argument("--out", type=Path, default=os.environ.get("MAPSEG_OUT"))
    inf.add_argument("--stride", type=int, default=80)

    ev = sub.add_parser("evaluate", help="Dice of a predicted segmentation")
    ev.add_argument("--pred", type=Path, required=True)
    ev.add_argument("--gt", type=Path, required=True)
    ev.add_argument("--classes", type=str, default=None, help="comma-separated class ids")
    return parser


def _require_out(args) -> Path:
    if args.out is None:
        raise ConfigurationError("--out is required (or set MAPSEG_OUT)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_manifest_entries(path_str: Optional[str], what: str):
    from .synthdata import load_manifest

    if path_str is None:
        raise ConfigurationError(f"data.{what} is not set")
    path = Path(path_str)
    if not path.exists():
        raise ConfigurationError(f"data.{what} not found: {path}")
    return load_manifest(path)


def _infer_num_classes(cfg: ExperimentConfig, manifest) -> int:
    if cfg.raw["model"]["num_classes"] is not None:
        return cfg.raw["model"]["num_classes"]
    n = manifest.spec.get("num_classes")
    if n is None:
        raise ConfigurationError("model.num_classes is not set and the manifest has none")
    return int(n)


def _cmd_synth(args) -> int:
    from .synthdata import generate_split

    cfg = resolve_config(args.config, args.overrides, stage="synth", seed=args.seed)
    out = _require_out(args)
    cfg.echo(out)
    src, tgt = generate_split(
        cfg.raw["synth"]["n_source"],
        cfg.raw["synth"]["n_target"],
        cfg.domain_spec("source"),
        cfg.domain_spec("target"),
        cfg.seed,
        out / "data",
    )
    print(json.dumps({"source_manifest": str(src), "target_manifest": str(tgt)}))
    return 0


def _pool_pretrain_entries(cfg: ExperimentConfig):
    from .synthdata import load_manifest

    data = cfg.raw["data"]
    entries = []
    if data["pretrain_manifests"]:
        for m in data["pretrain_manifests"]:
            entries.extend(load_manifest(Path(m)).entries)
    else:
        for key in ("source_manifest", "target_manifest"):
            if data[key]:
                entries.extend(load_manifest(Path(data[key])).entries)
    if not entries:
        raise ConfigurationError(
            "no pretraining volumes: set data.pretrain_manifests or source/target manifests"
        )
    return entries


def _cmd_pretrain(args) -> int:
    from .trainer import pretrain_mae

    cfg = resolve_config(args.config, args.overrides, stage="mae", seed=args.seed)
    out = _require_out(args)
    cfg.echo(out)
    entries = _pool_pretrain_entries(cfg)
    network = cfg.network(num_classes=2)  # the class head is unused during pretraining
    result = pretrain_mae(
        entries,
        cfg.trainer(),
        network,
        out,
        mask_cfg=cfg.masking(),
        policy=cfg.augment_policy("pretrain"),
    )
    print(json.dumps({"checkpoint": str(result.checkpoint), "final_loss": result.final_loss}))
    return 0


def _cmd_train_uda(args) -> int:
    from .trainer import train_centralized

    cfg = resolve_config(args.config, args.overrides, stage="centralized", seed=args.seed)
    out = _require_out(args)
    cfg.echo(out)
    source = _load_manifest_entries(cfg.raw["data"]["source_manifest"], "source_manifest")
    target = _load_manifest_entries(cfg.raw["data"]["target_manifest"], "target_manifest")
    network = cfg.network(_infer_num_classes(cfg, source))
    result = train_centralized(
        source.entries,
        target.entries,
        cfg.trainer(),
        network,
        out,
        encoder_checkpoint=_encoder_arg(cfg),
        mask_cfg=cfg.masking(),
        hyper=cfg.hyperparams(),
        source_aug=cfg.augment_policy("source"),
        target_aug=cfg.augment_policy("target"),
    )
    print(
        json.dumps(
            {
                "best_checkpoint": str(result.best_checkpoint),
                "best_score": result.best_score,
                "best_epoch": result.best_epoch,
                "epochs_run": result.epochs_run,
            }
        )
    )
    return 0


def _cmd_train_testtime(args) -> int:
    from .trainer import train_testtime

    cfg = resolve_config(args.config, args.overrides, stage="testtime", seed=args.seed)
    out = _require_out(args)
    cfg.echo(out)
    source = _load_manifest_entries(cfg.raw["data"]["source_manifest"], "source_manifest")
    target = _load_manifest_entries(cfg.raw["data"]["target_manifest"], "target_manifest")
    network = cfg.network(_infer_num_classes(cfg, source))
    result = train_testtime(
        source.entries,
        target.entries,
        cfg.trainer(),
        network,
        out,
        encoder_checkpoint=_encoder_arg(cfg),
        mask_cfg=cfg.masking(),
        hyper=cfg.hyperparams(),
        source_aug=cfg.augment_policy("source"),
        target_aug=cfg.augment_policy("target"),
    )
    print(
        json.dumps(
            {
                "best_checkpoint": str(result.best_checkpoint),
                "best_score": result.best_score,
                **result.extras,
            }
        )
    )
    return 0


def _cmd_train_federated(args) -> int:
    from .federated import run_federated
    from .synthdata import load_manifest

    cfg = resolve_config(args.config, args.overrides, stage="federated", seed=args.seed)
    out = _require_out(args)
    cfg.echo(out)
    source = _load_manifest_entries(cfg.raw["data"]["source_manifest"], "source_manifest")
    client_manifests = []
    if args.clients is not None:
        if not args.clients.exists():
            raise ConfigurationError(f"--clients file not found: {args.clients}")
        listing = json.loads(args.clients.read_text())
        if not isinstance(listing, list):
            raise ConfigurationError("--clients must hold a JSON list of manifest paths")
        client_manifests = [
            (args.clients.parent / p) if not Path(p).is_absolute() else Path(p) for p in listing
        ]
    elif cfg.raw["data"]["clients"]:
        client_manifests = [Path(p) for p in cfg.raw["data"]["clients"]]
    if not client_manifests:
        raise ConfigurationError("no clients: pass --clients or set data.clients")
    clients = [load_manifest(p).entries for p in client_manifests]
    network = cfg.network(_infer_num_classes(cfg, source))
    result = run_federated(
        source.entries,
        clients,
        cfg.federated(),
        cfg.trainer(),
        network,
        out,
        encoder_checkpoint=_encoder_arg(cfg),
        mask_cfg=cfg.masking(),
        hyper=cfg.hyperparams(),
        source_aug=cfg.augment_policy("source"),
        target_aug=cfg.augment_policy("target"),
    )
    print(
        json.dumps(
            {
                "final_checkpoint": str(result.final_checkpoint),
                "best_checkpoint": str(result.best_checkpoint),
                "best_round": result.best_round,
            }
        )
    )
    return 0


def _encoder_arg(cfg: ExperimentConfig) -> Optional[str]:
    return cfg.raw["data"]["encoder"]


def _cmd_infer(args) -> int:
    from .model import load_checkpoint
    from .trainer import infer_volume
    from .volume import NormalizationSpec, load_volume, normalize_intensity, save_volume

    out = _require_out(args)
    volume = load_volume(args.volume)
    if not volume.normalized:
        volume = normalize_intensity(volume, NormalizationSpec(mode="infer"))
    model, _ = load_checkpoint(args.checkpoint)
    pred = infer_volume(volume, model, stride=args.stride)
    out_path = out / (args.volume.stem + "_seg.mvol")
    save_volume(pred, out_path)
    print(json.dumps({"segmentation": str(out_path)}))
    return 0


def _cmd_evaluate(args) -> int:
    from .trainer import dice_metric
    from .volume import LabelGrid, load_volume

    pred = load_volume(args.pred)
    gt = load_volume(args.gt)
    if not isinstance(pred, LabelGrid) or not isinstance(gt, LabelGrid):
        raise ConfigurationError("evaluate expects label volumes (integer dtype)")
    classes = None
    if args.classes:
        classes = [int(c) for c in args.classes.split(",")]
    if pred.num_classes < gt.num_classes:
        pred = LabelGrid(pred.data, num_classes=gt.num_classes)
    report = dice_metric(pred, gt, classes)
    print(json.dumps(report, sort_keys=True))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "train-uda": _cmd_train_uda,
    "train-testtime": _cmd_train_testtime,
    "train-federated": _cmd_train_federated,
    "infer": _cmd_infer,
    "evaluate": _cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return _COMMANDS[args.command](args)
    except (ConfigurationError, VolumeFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MapSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports everything
        traceback.print_exc()
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
