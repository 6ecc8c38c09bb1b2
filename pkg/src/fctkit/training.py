"""Training loops for embedders, side-information models, the transformation
and the (h, g) pair used in chained updates."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .models import (
    DenseAutoencoder,
    EmbedderNet,
    Network,
    TransformationNet,
    build_autoencoder,
    build_embedder,
)
from .numerics import (
    Affine,
    AdamState,
    BNMode,
    LrSchedule,
    adam_update,
    kl_distillation_loss,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    lr_at_epoch,
    mse_loss,
    softmax_cross_entropy,
)
from .synthdata import LabeledSet

log = logging.getLogger(__name__)

DEFAULT_WEIGHT_DECAY = 3.0517578125e-5


class LossKind(str, enum.Enum):
    MSE = "mse"
    KL = "kl"
    KL_REVERSED = "kl_reversed"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, schedule and loop settings.  Defaults are the
    transformation recipe: 80 epochs of Adam at 5e-4 with 5 warmup epochs,
    cosine decay and BN statistics frozen from epoch 40."""

    epochs: int = 80
    batch_size: int = 256
    lr: float = 5e-4
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    warmup_epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bn_freeze_epoch: Optional[int] = 40
    loss_kind: LossKind = LossKind.MSE
    normalize_output: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if self.bn_freeze_epoch is not None and self.epochs and not 0 <= self.bn_freeze_epoch < self.epochs:
            raise ConfigError("bn_freeze_epoch must be < epochs")

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.warmup_epochs, self.epochs)

    def optimizer(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         weight_decay=self.weight_decay)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def _batches(rng: np.random.Generator, n: int, batch_size: int) -> List[np.ndarray]:
    """Seeded shuffle, incomplete trailing batch dropped."""
    if n < 2:
        raise ConfigError("need at least 2 training samples")
    bs = min(batch_size, n)
    perm = rng.permutation(n)
    return [perm[i * bs:(i + 1) * bs] for i in range(n // bs)]


def _fit(net, n: int, cfg: TrainConfig, step: Callable[[np.ndarray, np.random.Generator], float],
         on_epoch_end: Optional[Callable[[int], None]] = None) -> List[float]:
    """Shared epoch loop: schedule, BN mode switching, Adam updates."""
    history: List[float] = []
    if cfg.epochs == 0:
        net.set_mode(BNMode.EVAL)
        return history
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.optimizer()
    sched = cfg.schedule()
    pairs = net.parameters()
    params = [p for p, _ in pairs]
    grads = [g for _, g in pairs]
    for epoch in range(cfg.epochs):
        frozen = cfg.bn_freeze_epoch is not None and epoch >= cfg.bn_freeze_epoch
        net.set_mode(BNMode.FROZEN if frozen else BNMode.TRAIN)
        opt.lr = lr_at_epoch(sched, epoch)
        losses = []
        for idx in _batches(rng, n, cfg.batch_size):
            net.zero_grad()
            losses.append(step(idx, rng))
            adam_update(opt, params, grads)
        history.append(float(np.mean(losses)))
        log.debug("epoch %d lr %.3g loss %.6g", epoch, opt.lr, history[-1])
        if on_epoch_end is not None:
            on_epoch_end(epoch)
    net.set_mode(BNMode.EVAL)
    return history


# ---------------------------------------------------------------------------
# embedders
# ---------------------------------------------------------------------------

def train_embedder(net: EmbedderNet, data: LabeledSet, cfg: TrainConfig,
                   mixup_alpha: Optional[float] = None) -> Tuple[EmbedderNet, List[float]]:
    """Softmax cross-entropy training of body + classifier head.

    With ``mixup_alpha`` the inputs are mixed as ``lam*x_i + (1-lam)*x_j``
    (``lam ~ Beta(alpha, alpha)`` per sample) while the labels stay the
    one-hot labels of ``x_i``.
    """
    labels = data.labels
    if data.num_classes != net.num_classes:
        raise ConfigError(f"data has {data.num_classes} classes, head has {net.num_classes}")
    if len(labels) and (labels.min() < 0 or labels.max() >= net.num_classes):
        raise ValueError("label out of range for classifier head")
    if mixup_alpha is not None and mixup_alpha <= 0:
        raise ConfigError("mixup alpha must be positive")
    x_all = data.inputs

    def step(idx, rng):
        x = x_all[idx]
        if mixup_alpha is not None:
            lam = rng.beta(mixup_alpha, mixup_alpha, size=(len(idx), 1))
            x = lam * x + (1.0 - lam) * x[rng.permutation(len(idx))]
        emb = net.body.forward(x)
        loss, g = softmax_cross_entropy(net.head.forward(emb), labels[idx])
        net.body.backward(net.head.backward(g))
        return loss

    history = _fit(net, len(data), cfg, step)
    return net, history


def classifier_accuracy(net: EmbedderNet, data: LabeledSet) -> float:
    net.set_mode(BNMode.EVAL)
    logits = net.head.forward(net.forward(data.inputs))
    return float(np.mean(logits.argmax(axis=1) == data.labels))


# ---------------------------------------------------------------------------
# side-information
# ---------------------------------------------------------------------------

class SideKind(str, enum.Enum):
    ZERO = "zero"
    AUTOENCODER = "autoencoder"
    ALTERNATE = "alternate"
    MIXUP = "mixup"
    CONTRASTIVE = "contrastive"


@dataclass(frozen=True)
class SideInfoKind:
    kind: SideKind = SideKind.AUTOENCODER
    hidden: int = 64
    depth: int = 1
    mixup_alpha: float = 0.2
    temperature: float = 0.1
    aug_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "kind", SideKind(self.kind))
        if self.hidden < 1 or self.depth < 0:
            raise ConfigError("side-info network needs hidden >= 1 and depth >= 0")
        if self.mixup_alpha <= 0 or self.temperature <= 0 or self.aug_std < 0:
            raise ConfigError("mixup_alpha and temperature must be > 0, aug_std >= 0")


class SideInfoModel:
    """psi: maps raw inputs to side-information vectors of size ``d_side``.

    ``net`` is None for the zero model.
    """

    def __init__(self, kind: SideKind, d_side: int, net: Optional[Network] = None):
        self.kind = SideKind(kind)
        self.d_side = d_side
        self.net = net

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.net is None:
            return np.zeros((x.shape[0], self.d_side))
        self.net.set_mode(BNMode.EVAL)
        if isinstance(self.net, DenseAutoencoder):
            return self.net.encode(x)
        return self.net.forward(x)

    def set_mode(self, mode):
        if self.net is not None:
            self.net.set_mode(mode)


def train_side_info(kind: SideInfoKind, data: LabeledSet, d_side: int, cfg: TrainConfig,
                    ) -> Tuple[SideInfoModel, List[float]]:
    D = data.inputs.shape[1]
    k = kind.kind
    if d_side < 1:
        raise ConfigError("d_side must be >= 1")
    if k is SideKind.ZERO:
        return SideInfoModel(k, d_side), []
    if k is SideKind.AUTOENCODER:
        ae = build_autoencoder(D, kind.hidden, d_side, seed=cfg.seed, depth=kind.depth)
        _, history = train_autoencoder(ae, data.inputs, cfg)
        return SideInfoModel(k, d_side, ae), history
    if k in (SideKind.ALTERNATE, SideKind.MIXUP):
        net = build_embedder(D, kind.hidden, kind.depth, d_side, data.num_classes, seed=cfg.seed)
        alpha = kind.mixup_alpha if k is SideKind.MIXUP else None
        _, history = train_embedder(net, data, cfg, mixup_alpha=alpha)
        return SideInfoModel(k, d_side, net), history
    net = build_embedder(D, kind.hidden, kind.depth, d_side, 1, seed=cfg.seed)
    _, history = train_contrastive(net, data.inputs, cfg, kind.temperature, kind.aug_std)
    return SideInfoModel(k, d_side, net), history


def train_autoencoder(ae: DenseAutoencoder, inputs: np.ndarray, cfg: TrainConfig,
                      ) -> Tuple[DenseAutoencoder, List[float]]:
    """L2 reconstruction training."""

    def step(idx, rng):
        x = inputs[idx]
        loss, g = mse_loss(ae.reconstruct(x), x)
        ae.encoder.backward(ae.decoder.backward(g))
        return loss

    return ae, _fit(ae, inputs.shape[0], cfg, step)


def info_nce(z1: np.ndarray, z2: np.ndarray, temperature: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Symmetric InfoNCE over unit-norm views; row i of z1 and z2 are a
    positive pair, every other row is a negative.  Returns loss and grads."""
    n = z1.shape[0]
    logits = z1 @ z2.T / temperature
    targets = np.arange(n)
    loss_a, g_a = softmax_cross_entropy(logits, targets)
    loss_b, g_b = softmax_cross_entropy(logits.T, targets)
    g_logits = 0.5 * (g_a + g_b.T) / temperature
    return 0.5 * (loss_a + loss_b), g_logits @ z2, g_logits.T @ z1


def train_contrastive(net: EmbedderNet, inputs: np.ndarray, cfg: TrainConfig,
                      temperature: float = 0.1, aug_std: float = 0.25,
                      ) -> Tuple[EmbedderNet, List[float]]:
    """Two Gaussian-noise views per sample, InfoNCE on normalized encodings."""

    def step(idx, rng):
        x = inputs[idx]
        n = len(idx)
        views = np.concatenate([x + aug_std * rng.standard_normal(x.shape),
                                x + aug_std * rng.standard_normal(x.shape)])
        z, norms = l2_normalize_rows(net.body.forward(views))
        loss, g1, g2 = info_nce(z[:n], z[n:], temperature)
        net.body.backward(l2_normalize_rows_backward(z, norms, np.concatenate([g1, g2])))
        return loss

    return net, _fit(net, inputs.shape[0], cfg, step)


def linear_probe_accuracy(train_x, train_y, test_x, test_y, epochs: int = 300,
                          lr: float = 0.05, seed: int = 0) -> float:
    """Fit a softmax-regression probe full-batch on standardized features and
    report test accuracy."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd[sd == 0] = 1.0
    a, b = (train_x - mu) / sd, (test_x - mu) / sd
    k = int(max(np.max(train_y), np.max(test_y))) + 1
    probe = Affine(a.shape[1], k, np.random.default_rng(seed))
    opt = AdamState(lr=lr)
    for _ in range(epochs):
        probe.zero_grad()
        _, g = softmax_cross_entropy(probe.forward(a), train_y)
        probe.backward(g)
        adam_update(opt, [probe.weight, probe.bias], [probe.grad_weight, probe.grad_bias])
    return float(np.mean(probe.forward(b).argmax(axis=1) == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# transformation
# ---------------------------------------------------------------------------

def features(model, x) -> np.ndarray:
    """Evaluate a frozen model (network or plain callable) on ``x``."""
    if hasattr(model, "set_mode"):
        model.set_mode(BNMode.EVAL)
    return np.asarray(model(x), dtype=np.float64)


def fit_transformation(h: TransformationNet, old_feats, side_feats, target, cfg: TrainConfig,
                       head: Optional[Affine] = None,
                       on_epoch_end: Optional[Callable[[int], None]] = None) -> List[float]:
    """Train ``h`` to map (old_feats, side_feats) rows onto ``target`` rows."""
    old_feats = np.asarray(old_feats, dtype=np.float64)
    side_feats = np.asarray(side_feats, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = old_feats.shape[0]
    if side_feats.shape[0] != n or target.shape[0] != n:
        raise ShapeError("feature and target row counts differ")
    if old_feats.shape[1] != h.d_old or side_feats.shape[1] != h.d_side or target.shape[1] != h.d_new:
        raise ShapeError(f"transformation expects ({h.d_old}, {h.d_side}) -> {h.d_new}, got "
                         f"({old_feats.shape[1]}, {side_feats.shape[1]}) -> {target.shape[1]}")
    if cfg.normalize_output != h.normalize_output:
        raise ConfigError("cfg.normalize_output must match the transformation's normalize_output")
    if cfg.normalize_output:
        target, _ = l2_normalize_rows(target)
    kind = cfg.loss_kind
    if kind is not LossKind.MSE:
        if head is None:
            raise ConfigError("KL losses need the new model's frozen classifier head")
        if head.n_in != h.d_new:
            raise ShapeError("classifier head input dim != transformation output dim")

    def step(idx, rng):
        out = h.forward(old_feats[idx], side_feats[idx])
        if kind is LossKind.MSE:
            loss, g = mse_loss(out, target[idx])
        else:
            loss, g = kl_distillation_loss(out, target[idx], head, reversed=kind is LossKind.KL_REVERSED)
        h.backward(g)
        return loss

    return _fit(h, n, cfg, step, on_epoch_end)


def train_transformation(h: TransformationNet, old_model, side_model, new_model, data: LabeledSet,
                         cfg: TrainConfig, head: Optional[Affine] = None,
                         on_epoch_end: Optional[Callable[[int], None]] = None,
                         ) -> Tuple[TransformationNet, List[float]]:
    """Fit h(phi_old(x), psi(x)) ~ phi_new(x) over ``data``.

    The three base models are only evaluated (eval mode) and never updated.
    For KL losses the new model's classifier head is used unless ``head`` is
    given explicitly.
    """
    x = data.inputs
    old_feats = features(old_model, x)
    side_feats = features(side_model, x)
    target = features(new_model, x)
    if head is None and cfg.loss_kind is not LossKind.MSE:
        head = getattr(new_model, "head", None)
    history = fit_transformation(h, old_feats, side_feats, target, cfg, head, on_epoch_end)
    return h, history


def transformation_mse(h: TransformationNet, old_feats, side_feats, target) -> float:
    h.set_mode(BNMode.EVAL)
    target = np.asarray(target, dtype=np.float64)
    if h.normalize_output:
        target, _ = l2_normalize_rows(target)
    return mse_loss(h.forward(old_feats, side_feats), target)[0]


def train_sequence_step(h: TransformationNet, g: TransformationNet, models_prev: Sequence,
                        models_next: Sequence, data: LabeledSet, cfg: TrainConfig,
                        ) -> Tuple[TransformationNet, TransformationNet, List[float], List[float]]:
    """Train the hop v_i -> v_{i+1}: ``h`` regresses phi_{i+1} and ``g``
    regresses psi_{i+1}, both from (phi_i, psi_i) with MSE.  ``g`` is trained
    independently of ``h`` and never output-normalized."""
    phi_prev, psi_prev = models_prev
    phi_next, psi_next = models_next
    x = data.inputs
    f_prev, s_prev = features(phi_prev, x), features(psi_prev, x)
    f_next, s_next = features(phi_next, x), features(psi_next, x)
    for net, name in ((h, "h"), (g, "g")):
        if (net.d_old, net.d_side) != (f_prev.shape[1], s_prev.shape[1]):
            raise ShapeError(f"{name} input dims ({net.d_old}, {net.d_side}) do not match "
                             f"v_i dims ({f_prev.shape[1]}, {s_prev.shape[1]})")
    if h.d_new != f_next.shape[1] or g.d_new != s_next.shape[1]:
        raise ShapeError("h/g output dims do not match v_{i+1} embedding/side dims")
    mse_cfg = replace(cfg, loss_kind=LossKind.MSE)
    hist_h = fit_transformation(h, f_prev, s_prev, f_next, mse_cfg)
    hist_g = fit_transformation(g, f_prev, s_prev, s_next, replace(mse_cfg, normalize_output=False))
    return h, g, hist_h, hist_g
