"""Experiment configuration: JSON files layered over stage-specific defaults,
dotted-path overrides, strict unknown-key rejection, and a resolved echo that
reloads to an identical configuration."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence

from .augment import AugmentPolicy
from .errors import ConfigurationError
from .federated import FederatedConfig
from .losses import HyperParams
from .masking import MaskConfig
from .model import NetworkSpec
from .synthdata import DomainSpec
from .trainer import TrainConfig

STAGES = ("synth", "mae", "centralized", "testtime", "federated")


class _Leaf:
    """Typed leaf of the schema; `types` are the accepted JSON types."""

    def __init__(self, *types: type, nullable: bool = False):
        self.types = types
        self.nullable = nullable

    def check(self, path: str, value: Any) -> Any:
        if value is None:
            if self.nullable:
                return None
            raise ConfigurationError(f"{path}: null is not allowed")
        if bool in self.types and isinstance(value, bool):
            return value
        if isinstance(value, bool) and bool not in self.types:
            raise ConfigurationError(f"{path}: expected {self._names()}, got a bool")
        if float in self.types and isinstance(value, (int, float)):
            return float(value)
        if int in self.types and isinstance(value, int):
            return value
        if str in self.types and isinstance(value, str):
            return value
        if list in self.types and isinstance(value, list):
            return value
        raise ConfigurationError(
            f"{path}: expected {self._names()}, got {type(value).__name__}"
        )

    def _names(self) -> str:
        return "/".join(t.__name__ for t in self.types)


def _augment_schema() -> dict:
    return {
        "probability": _Leaf(float),
        "scale_range": _Leaf(list),
        "rotation_deg": _Leaf(float),
        "bias_field": _Leaf(bool),
        "bias_order": _Leaf(int),
        "bias_coeff_range": _Leaf(float),
        "gamma": _Leaf(bool),
        "gamma_log_range": _Leaf(float),
    }


def _domain_schema() -> dict:
    return {
        "shift": _Leaf(str),
        "magnitude": _Leaf(float),
        "noise": _Leaf(float),
        "dims_range": _Leaf(list),
        "num_structures": _Leaf(list),
        "num_classes": _Leaf(int),
    }


SCHEMA: dict = {
    "stage": _Leaf(str),
    "seed": _Leaf(int),
    "model": {
        "num_classes": _Leaf(int, nullable=True),
        "encoder_channels": _Leaf(int),
        "num_res_blocks": _Leaf(int),
        "mae_channels": _Leaf(list),
        "head_channels": _Leaf(int),
        "aspp_rates": _Leaf(list),
        "patch_edge": _Leaf(int),
        "gn_groups": _Leaf(int),
    },
    "masking": {
        "local_block": _Leaf(int),
        "ratio": _Leaf(float),
        "fill_value": _Leaf(float),
    },
    "hyperparams": {
        "beta": _Leaf(float),
        "gamma": _Leaf(float),
        "delta": _Leaf(float),
        "eps": _Leaf(float),
    },
    "trainer": {
        "epochs": _Leaf(int),
        "warmup_epochs": _Leaf(int),
        "warmup_steps": _Leaf(int),
        "iters_per_epoch": _Leaf(int),
        "batch_size": _Leaf(int),
        "patience": _Leaf(int),
        "val_fraction": _Leaf(float),
        "lr": _Leaf(float),
        "weight_decay": _Leaf(float),
        "betas": _Leaf(list),
        "schedule": _Leaf(str),
        "t0": _Leaf(int),
        "t_mult": _Leaf(int),
        "t_max": _Leaf(int),
        "min_lr": _Leaf(float),
        "anneal_last": _Leaf(int, nullable=True),
        "stride": _Leaf(int),
        "source_only": _Leaf(bool),
        "ema_schedule": _Leaf(str, nullable=True),
        "log_iterations": _Leaf(bool),
    },
    "augment": {
        "source": _augment_schema(),
        "target": _augment_schema(),
        "pretrain": _augment_schema(),
    },
    "federated": {
        "rounds": _Leaf(int),
        "server_steps": _Leaf(int, nullable=True),
        "client_steps": _Leaf(int, nullable=True),
        "lr_start": _Leaf(float),
        "lr_end": _Leaf(float),
    },
    "synth": {
        "n_source": _Leaf(int),
        "n_target": _Leaf(int),
        "source": _domain_schema(),
        "target": _domain_schema(),
    },
    "data": {
        "source_manifest": _Leaf(str, nullable=True),
        "target_manifest": _Leaf(str, nullable=True),
        "clients": _Leaf(list, nullable=True),
        "pretrain_manifests": _Leaf(list, nullable=True),
        "encoder": _Leaf(str, nullable=True),
    },
}


def _base_defaults() -> dict:
    """Full-recipe defaults; the trainer block is overlaid per stage."""
    return {
        "stage": "centralized",
        "seed": 0,
        "model": {
            "num_classes": None,
            "encoder_channels": 512,
            "num_res_blocks": 7,
            "mae_channels": [32, 16],
            "head_channels": 64,
            "aspp_rates": [1, 2, 4, 6],
            "patch_edge": 96,
            "gn_groups": 8,
        },
        "masking": {"local_block": 8, "ratio": 0.7, "fill_value": 0.0},
        "hyperparams": {"beta": 0.5, "gamma": 0.05, "delta": 0.025, "eps": 1e-5},
        "trainer": {
            "epochs": 100,
            "warmup_epochs": 10,
            "warmup_steps": 1000,
            "iters_per_epoch": 100,
            "batch_size": 1,
            "patience": 50,
            "val_fraction": 0.2,
            "lr": 1e-4,
            "weight_decay": 0.01,
            "betas": [0.9, 0.999],
            "schedule": "cosine_warm_restarts",
            "t0": 10,
            "t_mult": 2,
            "t_max": 20,
            "min_lr": 1e-8,
            "anneal_last": None,
            "stride": 80,
            "source_only": False,
            "ema_schedule": None,
            "log_iterations": True,
        },
        "augment": {
            "source": {
                "probability": 0.35,
                "scale_range": [0.7, 1.4],
                "rotation_deg": 30.0,
                "bias_field": True,
                "bias_order": 3,
                "bias_coeff_range": 0.3,
                "gamma": True,
                "gamma_log_range": 0.4,
            },
            "target": {
                "probability": 0.35,
                "scale_range": [0.7, 1.3],
                "rotation_deg": 30.0,
                "bias_field": False,
                "bias_order": 3,
                "bias_coeff_range": 0.3,
                "gamma": False,
                "gamma_log_range": 0.4,
            },
            "pretrain": {
                "probability": 0.35,
                "scale_range": [0.75, 1.5],
                "rotation_deg": 40.0,
                "bias_field": False,
                "bias_order": 3,
                "bias_coeff_range": 0.3,
                "gamma": False,
                "gamma_log_range": 0.4,
            },
        },
        "federated": {
            "rounds": 100,
            "server_steps": None,
            "client_steps": None,
            "lr_start": 1e-4,
            "lr_end": 1e-6,
        },
        "synth": {
            "n_source": 20,
            "n_target": 15,
            "source": {
                "shift": "none",
                "magnitude": 1.0,
                "noise": 0.02,
                "dims_range": [96, 160],
                "num_structures": [4, 7],
                "num_classes": 8,
            },
            "target": {
                "shift": "contrast_inversion",
                "magnitude": 1.0,
                "noise": 0.02,
                "dims_range": [96, 160],
                "num_structures": [4, 7],
                "num_classes": 8,
            },
        },
        "data": {
            "source_manifest": None,
            "target_manifest": None,
            "clients": None,
            "pretrain_manifests": None,
            "encoder": None,
        },
    }


_MAE_TRAINER = {
    "epochs": 300,
    "warmup_epochs": 0,
    "iters_per_epoch": 500,
    "batch_size": 4,
    "lr": 2e-4,
    "weight_decay": 0.05,
    "betas": [0.9, 0.95],
    "schedule": "cosine",
    "anneal_last": 100,
    "min_lr": 1e-6,
}


def stage_defaults(stage: str) -> dict:
    if stage not in STAGES:
        raise ConfigurationError(f"unknown stage {stage!r}")
    base = _base_defaults()
    base["stage"] = stage
    if stage == "mae":
        base["trainer"].update(copy.deepcopy(_MAE_TRAINER))
    return base


def _merge(schema: dict, base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        full = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigurationError(f"unknown config key {full!r}")
        node = schema[key]
        if isinstance(node, dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{full}: expected an object")
            _merge(node, base[key], value, full)
        else:
            base[key] = node.check(full, value)


def parse_override(item: str) -> tuple[list[str], Any]:
    """Parse one --set KEY=VALUE item; values are JSON, falling back to a
    bare string."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def _apply_override(schema: dict, base: dict, keys: list[str], value: Any) -> None:
    full = ".".join(keys)
    node, target = schema, base
    for i, key in enumerate(keys):
        if not isinstance(node, dict) or key not in node:
            raise ConfigurationError(f"unknown config key {full!r}")
        if i == len(keys) - 1:
            leaf = node[key]
            if isinstance(leaf, dict):
                raise ConfigurationError(f"{full}: is a section, not a value")
            target[key] = leaf.check(full, value)
        else:
            node = node[key]
            target = target[key]


@dataclass
class ExperimentConfig:
    """A fully resolved experiment: the raw echoable dict plus typed views."""

    raw: dict

    @property
    def stage(self) -> str:
        return self.raw["stage"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    def network(self, num_classes: Optional[int] = None) -> NetworkSpec:
        m = self.raw["model"]
        classes = m["num_classes"] if m["num_classes"] is not None else num_classes
        if classes is None:
            raise ConfigurationError("model.num_classes is not set and cannot be inferred")
        return NetworkSpec(
            num_classes=int(classes),
            encoder_channels=m["encoder_channels"],
            num_res_blocks=m["num_res_blocks"],
            mae_channels=tuple(m["mae_channels"]),
            head_channels=m["head_channels"],
            aspp_rates=tuple(m["aspp_rates"]),
            patch_edge=m["patch_edge"],
            gn_groups=m["gn_groups"],
        )

    def masking(self) -> MaskConfig:
        return MaskConfig(**self.raw["masking"])

    def hyperparams(self) -> HyperParams:
        return HyperParams(**self.raw["hyperparams"])

    def trainer(self) -> TrainConfig:
        t = dict(self.raw["trainer"])
        t["betas"] = tuple(t["betas"])
        return TrainConfig(stage=self.stage, seed=self.seed, **t)

    def augment_policy(self, stream: str) -> AugmentPolicy:
        a = dict(self.raw["augment"][stream])
        a["scale_range"] = tuple(a["scale_range"])
        return AugmentPolicy(stream=stream, **a)

    def federated(self) -> FederatedConfig:
        return FederatedConfig(**self.raw["federated"])

    def domain_spec(self, which: str) -> DomainSpec:
        d = dict(self.raw["synth"][which])
        d["dims_range"] = tuple(d["dims_range"])
        d["num_structures"] = tuple(d["num_structures"])
        return DomainSpec(**d)

    def echo(self, out_dir: Path) -> Path:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "resolved_config.json"
        path.write_text(json.dumps(self.raw, sort_keys=True, indent=2) + "\n")
        return path


def resolve_config(
    config_file: Optional[Path | str],
    overrides: Sequence[str] = (),
    stage: str = "centralized",
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """Layer a JSON config file and --set overrides over the stage defaults,
    validating every key path and type."""
    resolved = stage_defaults(stage)
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError(f"config file {path} must hold a JSON object")
        user.pop("stage", None)  # the subcommand owns the stage
        _merge(SCHEMA, resolved, user)
    for item in overrides:
        keys, value = parse_override(item)
        _apply_override(SCHEMA, resolved, keys, value)
    if seed is not None:
        resolved["seed"] = int(seed)
    cfg = ExperimentConfig(raw=resolved)
    # construct the typed views once so invalid values fail at resolve time
    cfg.masking()
    cfg.hyperparams()
    if cfg.stage != "synth":
        cfg.trainer()
    for stream in ("source", "target", "pretrain"):
        cfg.augment_policy(stream)
    cfg.federated()
    cfg.domain_spec("source")
    cfg.domain_spec("target")
    return cfg
