"""Applying transformations to stored galleries and pricing model updates."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ShapeError, VersionError
from .models import TransformationNet, count_macs, count_params
from .numerics import BNMode, batchnorm_layers
from .retrieval import GalleryStore

IMAGE_BYTES = 3 * 224 * 224
F32_BYTES = 4


class Strategy(str, enum.Enum):
    FULL_BACKFILL_CENTRAL = "FullBackfillCentral"
    FULL_BACKFILL_DOWNLOAD = "FullBackfillDownload"
    FCT_TRANSFORM = "FctTransform"
    NO_UPDATE = "NoUpdate"


@dataclass
class UpdatePlan:
    strategy: Strategy
    from_version: int
    to_version: int
    h: Optional[TransformationNet] = None
    g: Optional[TransformationNet] = None

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.strategy is Strategy.NO_UPDATE:
            if self.to_version != self.from_version:
                raise VersionError("a NoUpdate plan keeps the version")
        elif self.to_version <= self.from_version:
            raise VersionError(f"version must increase: {self.from_version} -> {self.to_version}")
        if self.strategy is Strategy.FCT_TRANSFORM:
            if self.h is None:
                raise ShapeError("FctTransform needs a transformation h")
            if self.g is not None and (self.g.d_old, self.g.d_side) != (self.h.d_old, self.h.d_side):
                raise ShapeError("h and g must read the same (embedding, side) record layout")

    def check_store(self, store: GalleryStore):
        if store.model_version != self.from_version:
            raise VersionError(f"plan expects version {self.from_version}, store is at {store.model_version}")
        if self.strategy is Strategy.FCT_TRANSFORM:
            _check_dims(store, self.h, self.g)


def _check_dims(store: GalleryStore, h, g):
    if (h.d_old, h.d_side) != (store.d_emb, store.d_side):
        raise ShapeError(f"h expects ({h.d_old}, {h.d_side}) but records hold "
                         f"({store.d_emb}, {store.d_side})")
    if g is not None and (g.d_old, g.d_side) != (store.d_emb, store.d_side):
        raise ShapeError(f"g expects ({g.d_old}, {g.d_side}) but records hold "
                         f"({store.d_emb}, {store.d_side})")


def _eval_in_batches(net: TransformationNet, emb, side, batch_size: int) -> np.ndarray:
    net.set_mode(BNMode.EVAL)
    out = np.empty((emb.shape[0], net.d_new))
    for start in range(0, emb.shape[0], batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = net.forward(emb[sl], side[sl])
    return out


def apply_fct_update(gallery: GalleryStore, h: TransformationNet, g: Optional[TransformationNet] = None,
                     batch_size: int = 1024, to_version: Optional[int] = None) -> GalleryStore:
    """Replace every embedding with ``h(emb, side)`` and every side vector
    with ``g(emb, side)``.  Without ``g`` the side-info column is dropped."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    _check_dims(gallery, h, g)
    target = gallery.model_version + 1 if to_version is None else int(to_version)
    if target <= gallery.model_version:
        raise VersionError(f"version regression {gallery.model_version} -> {target}")
    emb, side = gallery.embeddings, gallery.side_info
    new_emb = _eval_in_batches(h, emb, side, batch_size)
    new_side = (_eval_in_batches(g, emb, side, batch_size) if g is not None
                else np.zeros((len(gallery), 0)))
    return gallery.replace(embeddings=new_emb, side_info=new_side, model_version=target,
                           normalized=bool(h.normalize_output))


def apply_plan(gallery: GalleryStore, plan: UpdatePlan, batch_size: int = 1024) -> GalleryStore:
    plan.check_store(gallery)
    if plan.strategy is Strategy.NO_UPDATE:
        return gallery
    if plan.strategy is not Strategy.FCT_TRANSFORM:
        raise ValueError(f"{plan.strategy.value} recomputes embeddings from raw data; "
                         "it cannot be applied to a stored gallery")
    return apply_fct_update(gallery, plan.h, plan.g, batch_size, plan.to_version)


def apply_sequence(gallery: GalleryStore,
                   chain: Sequence[Tuple[TransformationNet, Optional[TransformationNet]]],
                   batch_size: int = 1024) -> GalleryStore:
    if not chain:
        raise ShapeError("empty update chain")
    for i, (h, g) in enumerate(chain[:-1]):
        nh, ng = chain[i + 1]
        if g is None:
            raise ShapeError(f"hop {i} drops side-info but hop {i + 1} follows it")
        if (nh.d_old, nh.d_side) != (h.d_new, g.d_new):
            raise ShapeError(f"hop {i} outputs ({h.d_new}, {g.d_new}) but hop {i + 1} "
                             f"expects ({nh.d_old}, {nh.d_side})")
    for h, g in chain:
        gallery = apply_fct_update(gallery, h, g, batch_size)
    return gallery


def apply_direct(gallery: GalleryStore, h: TransformationNet, hops: int = 1,
                 batch_size: int = 1024) -> GalleryStore:
    """A single long-hop transformation spanning ``hops`` versions."""
    if hops < 1:
        raise VersionError("a direct update spans at least one version")
    return apply_fct_update(gallery, h, None, batch_size, gallery.model_version + hops)


# ---------------------------------------------------------------------------
# cost simulation
# ---------------------------------------------------------------------------

def weight_bytes(net) -> int:
    """Bytes to ship a network for inference: parameters plus BN running
    statistics, all f32."""
    if net is None:
        return 0
    stats = sum(2 * bn.gamma.size for bn in batchnorm_layers(net)) if isinstance(net, TransformationNet) else 0
    return F32_BYTES * (count_params(net) + stats)


@dataclass(frozen=True)
class DeploymentModel:
    device_count: int
    records_per_device: int
    d_emb: int
    new_model_macs: int
    image_bytes: int = IMAGE_BYTES
    bytes_per_dim: int = F32_BYTES

    def __post_init__(self):
        for name in ("device_count", "records_per_device", "d_emb", "new_model_macs",
                     "image_bytes", "bytes_per_dim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total_records(self) -> int:
        return self.device_count * self.records_per_device


@dataclass(frozen=True)
class UpdateCostReport:
    strategy: str
    server_macs: int
    device_macs: int
    bytes_transferred_server_to_device: int
    bytes_stored_per_record: int

    def to_dict(self) -> Dict:
        return asdict(self)


COST_COLUMNS = ("strategy", "server_macs", "device_macs",
                "bytes_transferred_server_to_device", "bytes_stored_per_record")


def cost_report(deployment: DeploymentModel, plan: UpdatePlan) -> UpdateCostReport:
    dep, s = deployment, plan.strategy
    records = dep.total_records
    emb_bytes = dep.d_emb * dep.bytes_per_dim
    if s is Strategy.NO_UPDATE:
        return UpdateCostReport(s.value, 0, 0, 0, 0)
    if s is Strategy.FULL_BACKFILL_CENTRAL:
        return UpdateCostReport(s.value, dep.new_model_macs * records, 0, emb_bytes * records, emb_bytes)
    if s is Strategy.FULL_BACKFILL_DOWNLOAD:
        return UpdateCostReport(s.value, 0, dep.new_model_macs * records,
                                dep.image_bytes * records, emb_bytes)
    h, g = plan.h, plan.g
    per_record = count_macs(h) + (count_macs(g) if g is not None else 0)
    side_bytes = (g.d_new if g is not None else 0) * dep.bytes_per_dim
    return UpdateCostReport(s.value, 0, per_record * records,
                            (weight_bytes(h) + weight_bytes(g)) * dep.device_count,
                            h.d_new * dep.bytes_per_dim + side_bytes)


def compare_strategies(deployment: DeploymentModel, h: TransformationNet,
                       g: Optional[TransformationNet] = None, from_version: int = 1) -> List[UpdateCostReport]:
    plans = [UpdatePlan(Strategy.NO_UPDATE, from_version, from_version),
             UpdatePlan(Strategy.FULL_BACKFILL_CENTRAL, from_version, from_version + 1),
             UpdatePlan(Strategy.FULL_BACKFILL_DOWNLOAD, from_version, from_version + 1),
             UpdatePlan(Strategy.FCT_TRANSFORM, from_version, from_version + 1, h, g)]
    return [cost_report(deployment, p) for p in plans]
