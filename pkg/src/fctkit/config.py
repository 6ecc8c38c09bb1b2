"""Experiment configuration: a YAML document with explicit keys.

Unknown keys anywhere are rejected so that a typo in an ablation cannot be
silently ignored.  Every stochastic stage carries its own seed; a run-level
``seed`` shifts all of them at once (stage seed + 1000 * run seed).
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .errors import ConfigError
from .models import ALLOWED_WIDTHS
from .training import LossKind, SideInfoKind, SideKind, TrainConfig

SEED_STRIDE = 1000


@dataclass(frozen=True)
class DomainSpec:
    colors: int = 4
    shapes: int = 4
    dim: int = 32
    sigma: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class DataSpec:
    old_shapes: Tuple[int, ...] = (0, 1)
    train_per_cell: int = 512
    eval_per_cell: int = 32
    old_seed: int = 1
    new_seed: int = 2
    eval_seed: int = 3


@dataclass(frozen=True)
class EmbedderSpec:
    hidden: int = 64
    depth: int = 2
    d_old: int = 16
    d_new: int = 16
    old_seed: int = 11
    new_seed: int = 12


@dataclass(frozen=True)
class SideInfoSpec:
    kind: str = "autoencoder"
    d_side: int = 16
    hidden: int = 64
    depth: int = 1
    mixup_alpha: float = 0.2
    temperature: float = 0.1
    aug_std: float = 0.25

    def to_kind(self) -> SideInfoKind:
        return SideInfoKind(SideKind(self.kind), hidden=self.hidden, depth=self.depth,
                            mixup_alpha=self.mixup_alpha, temperature=self.temperature,
                            aug_std=self.aug_std)


@dataclass(frozen=True)
class TransformSpec:
    width_multiplier: str = "1"
    proj_width: int = 256
    mixer_width: int = 2048
    seed: int = 50

    @property
    def width(self) -> Fraction:
        return Fraction(self.width_multiplier)


@dataclass(frozen=True)
class StageTrain:
    epochs: int = 80
    batch_size: int = 256
    lr: float = 5e-4
    weight_decay: float = 3.0517578125e-5
    warmup_epochs: int = 5
    bn_freeze_epoch: Optional[int] = 40
    loss: str = "mse"
    normalize_output: bool = False
    seed: int = 0

    def to_train_config(self, run_seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs,
                           bn_freeze_epoch=self.bn_freeze_epoch, loss_kind=LossKind(self.loss),
                           normalize_output=self.normalize_output,
                           seed=self.seed + SEED_STRIDE * run_seed)


@dataclass(frozen=True)
class TrainSpec:
    old_embedder: StageTrain = StageTrain()
    new_embedder: StageTrain = StageTrain()
    side_info: StageTrain = StageTrain()
    transformation: StageTrain = StageTrain()


@dataclass(frozen=True)
class EvalSpec:
    ks: Tuple[int, ...] = (1, 5)
    zero_side_baseline: bool = True
    cka: bool = True


@dataclass(frozen=True)
class SequenceSpec:
    """Shape subsets seen by each model version, oldest first."""
    version_shapes: Tuple[Tuple[int, ...], ...] = ((0,), (0, 1), (0, 1, 2, 3))


@dataclass(frozen=True)
class CostSpec:
    device_count: int = 1000
    records_per_device: int = 10000
    image_bytes: int = 3 * 224 * 224
    backbone_macs: int = 4_100_000_000
    transform_dims: Tuple[int, int, int] = (128, 128, 128)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    experiment: str = "fct"
    seed: int = 0
    output_dir: str = "runs/experiment"
    domain: DomainSpec = DomainSpec()
    data: DataSpec = DataSpec()
    embedder: EmbedderSpec = EmbedderSpec()
    side_info: SideInfoSpec = SideInfoSpec()
    transformation: TransformSpec = TransformSpec()
    train: TrainSpec = TrainSpec()
    eval: EvalSpec = EvalSpec()
    sequence: SequenceSpec = SequenceSpec()
    costs: CostSpec = CostSpec()

    def stage_seed(self, base: int) -> int:
        return base + SEED_STRIDE * self.seed

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = int(seed)
        if output_dir is not None:
            changes["output_dir"] = str(output_dir)
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def validate(self):
        dom, data = self.domain, self.data
        if self.experiment not in ("fct", "sequence"):
            raise ConfigError(f"experiment must be 'fct' or 'sequence', got {self.experiment!r}")
        if dom.dim < dom.colors + dom.shapes or dom.colors * dom.shapes < 2 or dom.sigma < 0:
            raise ConfigError("domain needs dim >= colors + shapes, colors * shapes >= 2, sigma >= 0")
        if not data.old_shapes or any(not 0 <= s < dom.shapes for s in data.old_shapes):
            raise ConfigError(f"data.old_shapes must be a non-empty subset of 0..{dom.shapes - 1}")
        if data.train_per_cell < 1 or data.eval_per_cell < 2:
            raise ConfigError("need train_per_cell >= 1 and eval_per_cell >= 2")
        for name in ("hidden", "depth", "d_old", "d_new"):
            if getattr(self.embedder, name) < 1:
                raise ConfigError(f"embedder.{name} must be >= 1")
        if self.side_info.d_side < 1:
            raise ConfigError("side_info.d_side must be >= 1")
        try:
            self.side_info.to_kind()
        except ValueError as exc:
            raise ConfigError(f"side_info: {exc}") from exc
        try:
            w = self.transformation.width
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad width_multiplier {self.transformation.width_multiplier!r}") from exc
        if w not in ALLOWED_WIDTHS:
            raise ConfigError(f"width_multiplier must be one of {sorted(str(a) for a in ALLOWED_WIDTHS)}")
        for f in fields(TrainSpec):
            stage = getattr(self.train, f.name)
            try:
                stage.to_train_config(self.seed)
            except ValueError as exc:
                raise ConfigError(f"train.{f.name}: {exc}") from exc
        if not self.eval.ks or any(k < 1 for k in self.eval.ks):
            raise ConfigError("eval.ks must be positive integers")
        shapes = self.sequence.version_shapes
        if len(shapes) < 2 or any(not v or any(not 0 <= s < dom.shapes for s in v) for v in shapes):
            raise ConfigError("sequence.version_shapes needs >= 2 non-empty shape subsets")
        c = self.costs
        if min(c.device_count, c.records_per_device, c.image_bytes, c.backbone_macs) < 0:
            raise ConfigError("cost counts must be >= 0")
        if len(c.transform_dims) != 3 or min(c.transform_dims) < 1:
            raise ConfigError("costs.transform_dims is (d_old, d_side, d_new), each >= 1")

    def to_dict(self) -> Dict[str, Any]:
        return _to_plain(dataclasses.asdict(self))


def _to_plain(value):
    if isinstance(value, dict):
        return {k: _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    return value


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    origin = getattr(tp, "__origin__", None)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        args = tp.__args__
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} entries")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp == Optional[int]:
        return None if value is None else _coerce(int, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return str(value)
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, raw, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(raw) - set(hints))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(map(str, unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in raw.items()}
    return cls(**kwargs)


def config_from_dict(raw: Dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


SHIPPED = ("toy_imagenet_analog", "toy_sequence")


def shipped_config_path(name: str) -> Path:
    path = Path(__file__).with_name("configs") / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"no shipped config named {name!r}; choose from {', '.join(SHIPPED)}")
    return path
