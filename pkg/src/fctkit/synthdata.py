"""ColorShape synthetic domain.

Each sample has a color ``c`` and a shape ``s``; its input is
``W_color[:, c] + W_shape[:, s] + sigma * noise`` in R^D, where the columns of
``[W_color | W_shape]`` are orthonormal.  A model trained only to tell colors
apart is free to throw the shape directions away, which is exactly the
situation side-information is meant to cover.

All randomness comes from numpy's ``PCG64`` bit generator
(``numpy.random.default_rng(seed)``), so datasets are reproducible from
``(seed, arguments)`` alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


class LabelMode(str, enum.Enum):
    COLOR = "color"
    JOINT = "joint"


@dataclass(frozen=True)
class SyntheticDomain:
    C: int
    S: int
    D: int
    W_color: np.ndarray
    W_shape: np.ndarray
    sigma: float
    seed: int

    @property
    def factors(self) -> np.ndarray:
        return np.concatenate([self.W_color, self.W_shape], axis=1)

    @property
    def num_joint(self) -> int:
        return self.C * self.S

    def joint_label(self, color, shape):
        return np.asarray(color) * self.S + np.asarray(shape)

    def class_means(self) -> np.ndarray:
        """Lattice point of every joint class, row ``c * S + s``."""
        c, s = np.divmod(np.arange(self.num_joint), self.S)
        return self.W_color[:, c].T + self.W_shape[:, s].T


@dataclass
class LabeledSet:
    inputs: np.ndarray
    color: np.ndarray
    shape: np.ndarray
    joint: np.ndarray
    label_mode: LabelMode = LabelMode.JOINT
    num_colors: int = 0
    num_shapes: int = 0

    def __post_init__(self):
        n = self.inputs.shape[0]
        for name in ("color", "shape", "joint"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} labels must have one entry per input row")
        if n and not np.array_equal(self.joint, self.color * self.num_shapes + self.shape):
            raise ValueError("joint labels inconsistent with (color, shape)")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return self.color if self.label_mode is LabelMode.COLOR else self.joint

    @property
    def num_classes(self) -> int:
        if self.label_mode is LabelMode.COLOR:
            return self.num_colors
        return self.num_colors * self.num_shapes

    def with_mode(self, mode) -> "LabeledSet":
        return LabeledSet(self.inputs, self.color, self.shape, self.joint, LabelMode(mode),
                          self.num_colors, self.num_shapes)


def make_domain(seed: int, C: int = 4, S: int = 4, D: int = 32, sigma: float = 0.5) -> SyntheticDomain:
    if C < 1 or S < 1 or C * S < 2:
        raise ConfigError("need C, S >= 1 and C*S >= 2")
    if D < C + S:
        raise ConfigError(f"ambient dim D={D} must be >= C+S={C + S}")
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((D, C + S))
    q, r = np.linalg.qr(gauss)
    # fix column signs so the factorization is unique
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return SyntheticDomain(C, S, D, q[:, :C].copy(), q[:, C:].copy(), float(sigma), seed)


def sample_set(domain: SyntheticDomain, n: int, color_subset: Optional[Sequence[int]] = None,
               shape_subset: Optional[Sequence[int]] = None, label_mode=LabelMode.JOINT,
               seed: int = 0) -> LabeledSet:
    """Draw ``n`` samples with (color, shape) uniform over the given subsets."""
    colors = np.arange(domain.C) if color_subset is None else np.asarray(color_subset, dtype=np.int64)
    shapes = np.arange(domain.S) if shape_subset is None else np.asarray(shape_subset, dtype=np.int64)
    if colors.size == 0 or shapes.size == 0:
        raise ConfigError("color and shape subsets must be non-empty")
    if colors.min() < 0 or colors.max() >= domain.C or shapes.min() < 0 or shapes.max() >= domain.S:
        raise ConfigError("subset entries out of range")
    rng = np.random.default_rng(seed)
    c = colors[rng.integers(0, colors.size, size=n)]
    s = shapes[rng.integers(0, shapes.size, size=n)]
    return _realize(domain, c, s, rng, label_mode)


def sample_grid(domain: SyntheticDomain, per_cell: int, color_subset=None, shape_subset=None,
                label_mode=LabelMode.JOINT, seed: int = 0) -> LabeledSet:
    """Exactly ``per_cell`` samples of every (color, shape) cell, shuffled."""
    colors = np.arange(domain.C) if color_subset is None else np.asarray(color_subset, dtype=np.int64)
    shapes = np.arange(domain.S) if shape_subset is None else np.asarray(shape_subset, dtype=np.int64)
    if colors.size == 0 or shapes.size == 0:
        raise ConfigError("color and shape subsets must be non-empty")
    rng = np.random.default_rng(seed)
    cc, ss = np.meshgrid(colors, shapes, indexing="ij")
    c = np.repeat(cc.ravel(), per_cell)
    s = np.repeat(ss.ravel(), per_cell)
    order = rng.permutation(c.size)
    return _realize(domain, c[order], s[order], rng, label_mode)


def _realize(domain, c, s, rng, label_mode) -> LabeledSet:
    x = domain.W_color[:, c].T + domain.W_shape[:, s].T
    if domain.sigma > 0:
        x = x + domain.sigma * rng.standard_normal(x.shape)
    x = np.ascontiguousarray(x.reshape(len(c), domain.D))
    return LabeledSet(x, c.astype(np.int64), s.astype(np.int64),
                      (c * domain.S + s).astype(np.int64), LabelMode(label_mode),
                      domain.C, domain.S)


def class_posteriors(domain: SyntheticDomain, x, classes: Optional[Sequence[int]] = None) -> np.ndarray:
    """Posterior over joint classes under the true generative model.

    Uniform prior over ``classes`` (all joint classes by default).  With
    ``sigma == 0`` the posterior is the indicator of the nearest lattice point.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    means = domain.class_means()
    classes = np.arange(domain.num_joint) if classes is None else np.asarray(classes)
    d2 = ((x[:, None, :] - means[None, classes, :]) ** 2).sum(axis=2)
    post = np.zeros((x.shape[0], domain.num_joint))
    if domain.sigma == 0:
        post[np.arange(x.shape[0]), classes[d2.argmin(axis=1)]] = 1.0
        return post
    logits = -d2 / (2.0 * domain.sigma ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    post[:, classes] = w / w.sum(axis=1, keepdims=True)
    return post


def bayes_retrieval_oracle(domain: SyntheticDomain, query, gallery, classes=None,
                           exclude_id: Optional[int] = None) -> np.ndarray:
    """Rank a gallery of raw inputs for one raw query input.

    ``gallery`` is anything with ``ids`` and ``embeddings`` holding raw inputs
    (a :class:`~fctkit.retrieval.GalleryStore`).  Records are ordered by the
    posterior probability that they share the query's joint class, highest
    first, ties by ascending id.
    """
    pq = class_posteriors(domain, query, classes)[0]
    pg = class_posteriors(domain, gallery.embeddings, classes)
    agreement = pg @ pq
    ids = gallery.ids
    if exclude_id is not None:
        keep = ids != exclude_id
        ids, agreement = ids[keep], agreement[keep]
    return ids[np.lexsort((ids, -agreement))]
