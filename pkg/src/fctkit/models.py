"""Network architectures: transformation, embedders, autoencoder, plus
parameter and MAC accounting."""

from __future__ import annotations

from fractions import Fraction
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    Affine,
    BatchNorm,
    BNMode,
    Layer,
    ReLU,
    Sequential,
    as_matrix,
    l2_normalize_rows,
    l2_normalize_rows_backward,
)

ALLOWED_WIDTHS = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1), Fraction(2))


def _dense_bn_relu(n_in: int, n_out: int, rng) -> List[Layer]:
    return [Affine(n_in, n_out, rng), BatchNorm(n_out), ReLU()]


class Network:
    """Common plumbing for composite networks built from Sequentials."""

    kind = "network"

    def __init__(self, config: Dict):
        self.config = dict(config)

    def modules(self) -> List[Sequential]:
        raise NotImplementedError

    def parameters(self):
        return [pg for m in self.modules() for pg in m.parameters()]

    def zero_grad(self):
        for m in self.modules():
            m.zero_grad()

    def set_mode(self, mode):
        for m in self.modules():
            m.set_mode(mode)

    def state_arrays(self) -> List[np.ndarray]:
        """Every learnable array and BN running statistic, in a fixed order."""
        out = []
        for module in self.modules():
            for layer in module:
                if isinstance(layer, Affine):
                    out += [layer.weight, layer.bias]
                elif isinstance(layer, BatchNorm):
                    out += [layer.gamma, layer.beta, layer.running_mean, layer.running_var]
        return out

    def load_state_arrays(self, arrays):
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ShapeError(f"expected {len(targets)} arrays, got {len(arrays)}")
        for dst, src in zip(targets, arrays):
            src = np.asarray(src, dtype=np.float64)
            if dst.shape != src.shape:
                raise ShapeError(f"state array shape {src.shape} != {dst.shape}")
            dst[...] = src


class TransformationNet(Network):
    """Maps (old embedding, side-information) to the new embedding space.

    Two projection branches feed a mixer that regresses the new embedding.
    """

    kind = "transformation"

    def __init__(self, d_old, d_side, d_new, width_multiplier=1, normalize_output=False,
                 seed=0, proj_width=256, mixer_width=2048):
        super().__init__(dict(d_old=d_old, d_side=d_side, d_new=d_new,
                              width_multiplier=str(Fraction(width_multiplier)),
                              normalize_output=bool(normalize_output), seed=seed,
                              proj_width=proj_width, mixer_width=mixer_width))
        self.d_old, self.d_side, self.d_new = d_old, d_side, d_new
        self.normalize_output = bool(normalize_output)
        hidden = scaled_width(mixer_width, width_multiplier)
        rng = np.random.default_rng(seed)
        self.proj_old = Sequential(_dense_bn_relu(d_old, proj_width, rng)
                                   + _dense_bn_relu(proj_width, proj_width, rng))
        self.proj_side = Sequential(_dense_bn_relu(d_side, proj_width, rng)
                                    + _dense_bn_relu(proj_width, proj_width, rng))
        self.mixer = Sequential(_dense_bn_relu(2 * proj_width, hidden, rng)
                                + _dense_bn_relu(hidden, hidden, rng)
                                + [Affine(hidden, d_new, rng)])
        self._norm_cache = None

    def modules(self):
        return [self.proj_old, self.proj_side, self.mixer]

    def forward(self, old_emb, side):
        old_emb = as_matrix(old_emb, self.d_old, "old_emb")
        side = as_matrix(side, self.d_side, "side")
        if old_emb.shape[0] != side.shape[0]:
            raise ShapeError("old_emb and side must have the same number of rows")
        mixed = np.concatenate([self.proj_old.forward(old_emb), self.proj_side.forward(side)], axis=1)
        out = self.mixer.forward(mixed)
        if self.normalize_output:
            out, norms = l2_normalize_rows(out)
            self._norm_cache = (out, norms)
        return out

    __call__ = forward

    def backward(self, grad_out) -> Tuple[np.ndarray, np.ndarray]:
        if self.normalize_output:
            y, norms = self._norm_cache
            grad_out = l2_normalize_rows_backward(y, norms, grad_out)
        grad_mixed = self.mixer.backward(grad_out)
        w = self.mixer.layers[0].n_in // 2
        return (self.proj_old.backward(grad_mixed[:, :w]),
                self.proj_side.backward(grad_mixed[:, w:]))


def scaled_width(base: int, width_multiplier) -> int:
    w = Fraction(width_multiplier).limit_denominator(1000)
    if w <= 0:
        raise ConfigError("width_multiplier must be positive")
    scaled = base * w
    if scaled.denominator != 1:
        raise ConfigError(f"width {base} * {w} is not an integer")
    return int(scaled)


def build_transformation(d_old: int, d_side: int, d_new: int, width_multiplier=1,
                         normalize_output: bool = False, seed: int = 0,
                         proj_width: int = 256, mixer_width: int = 2048) -> TransformationNet:
    """Build the old-to-new transformation.

    ``width_multiplier`` scales the mixer's hidden width (2048 by default);
    the projection branches keep ``proj_width`` units.  With the defaults the
    multipliers 1/4, 1/2, 1 and 2 give 0.79M, 1.9M, 5.7M and 19.6M parameters
    for 128-dimensional inputs and output.
    """
    if min(d_old, d_side, d_new, proj_width, mixer_width) < 1:
        raise ConfigError("all dimensions must be >= 1")
    w = Fraction(width_multiplier).limit_denominator(1000)
    if w not in ALLOWED_WIDTHS:
        raise ConfigError(f"width_multiplier must be one of {[str(a) for a in ALLOWED_WIDTHS]}")
    return TransformationNet(d_old, d_side, d_new, w, normalize_output, seed,
                             proj_width, mixer_width)


def transform_forward(net: TransformationNet, old_emb, side, mode=BNMode.EVAL) -> np.ndarray:
    net.set_mode(mode)
    return net.forward(old_emb, side)


class EmbedderNet(Network):
    """[Affine, BN, ReLU] x depth, then a linear embedding layer.  The
    classifier head is only used by training code."""

    kind = "embedder"

    def __init__(self, D, hidden, depth, d, num_classes, seed=0):
        super().__init__(dict(D=D, hidden=hidden, depth=depth, d=d,
                              num_classes=num_classes, seed=seed))
        if min(D, d, num_classes) < 1 or depth < 0 or (depth and hidden < 1):
            raise ConfigError("invalid embedder dimensions")
        self.D, self.d, self.num_classes = D, d, num_classes
        rng = np.random.default_rng(seed)
        layers: List[Layer] = []
        width = D
        for _ in range(depth):
            layers += _dense_bn_relu(width, hidden, rng)
            width = hidden
        layers.append(Affine(width, d, rng))
        self.body = Sequential(layers)
        self.head = Affine(d, num_classes, rng)

    def modules(self):
        return [self.body, Sequential([self.head])]

    def embedding_modules(self):
        return [self.body]

    def forward(self, x):
        return self.body.forward(as_matrix(x, self.D))

    __call__ = forward


def build_embedder(D: int, hidden: int, depth: int, d: int, num_classes: int,
                   seed: int = 0) -> EmbedderNet:
    return EmbedderNet(D, hidden, depth, d, num_classes, seed)


def embed(net: EmbedderNet, inputs, mode=BNMode.EVAL) -> np.ndarray:
    net.set_mode(mode)
    return net.forward(inputs)


class DenseAutoencoder(Network):
    kind = "autoencoder"

    def __init__(self, D, hidden, d_side, seed=0, depth=1):
        super().__init__(dict(D=D, hidden=hidden, d_side=d_side, seed=seed, depth=depth))
        if min(D, d_side) < 1 or depth < 0 or (depth and hidden < 1):
            raise ConfigError("invalid autoencoder dimensions")
        self.D, self.d_side = D, d_side
        rng = np.random.default_rng(seed)
        enc: List[Layer] = []
        width = D
        for _ in range(depth):
            enc += [Affine(width, hidden, rng), ReLU()]
            width = hidden
        enc.append(Affine(width, d_side, rng))
        dec: List[Layer] = []
        width = d_side
        for _ in range(depth):
            dec += [Affine(width, hidden, rng), ReLU()]
            width = hidden
        dec.append(Affine(width, D, rng))
        self.encoder = Sequential(enc)
        self.decoder = Sequential(dec)

    def modules(self):
        return [self.encoder, self.decoder]

    def embedding_modules(self):
        return [self.encoder]

    def encode(self, x):
        return self.encoder.forward(as_matrix(x, self.D))

    def reconstruct(self, x):
        return self.decoder.forward(self.encode(x))

    __call__ = encode


def build_autoencoder(D: int, hidden: int, d_side: int, seed: int = 0, depth: int = 1) -> DenseAutoencoder:
    return DenseAutoencoder(D, hidden, d_side, seed, depth)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def _inference_layers(net) -> Iterator[Layer]:
    if isinstance(net, Layer) and not isinstance(net, Sequential):
        yield net
        return
    if isinstance(net, Sequential):
        for layer in net:
            yield from _inference_layers(layer)
        return
    modules = net.embedding_modules() if hasattr(net, "embedding_modules") else net.modules()
    for module in modules:
        yield from _inference_layers(module)


def count_params(net) -> int:
    """Affine (in*out + out) plus BN (gamma and beta) over the inference path.

    For embedders this excludes the training-only classifier head; for the
    autoencoder it counts the encoder only (what a device stores and runs).
    """
    total = 0
    for layer in _inference_layers(net):
        if isinstance(layer, Affine):
            total += layer.n_in * layer.n_out + layer.n_out
        elif isinstance(layer, BatchNorm):
            total += 2 * layer.n_features
    return total


def count_macs(net) -> int:
    """Per-sample multiply-accumulates of the affine layers (BN/ReLU free)."""
    return sum(layer.n_in * layer.n_out for layer in _inference_layers(net)
               if isinstance(layer, Affine))


BUILDERS = {
    "transformation": TransformationNet,
    "embedder": EmbedderNet,
    "autoencoder": DenseAutoencoder,
}


def rebuild(kind: str, config: Dict) -> Network:
    """Re-create an (untrained) network from its stored config."""
    try:
        cls = BUILDERS[kind]
    except KeyError:
        raise ConfigError(f"unknown network kind {kind!r}") from None
    cfg = dict(config)
    if kind == "transformation":
        cfg["width_multiplier"] = Fraction(cfg["width_multiplier"])
    return cls(**cfg)


def clone(net: Network) -> Network:
    copy = rebuild(net.kind, net.config)
    copy.load_state_arrays(net.state_arrays())
    return copy
