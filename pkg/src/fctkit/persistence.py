"""On-disk formats: the ``FCTG`` gallery file and network checkpoints.

Gallery file layout (all little-endian)::

    magic      4 bytes  b"FCTG"
    version    u32      FORMAT_VERSION
    flags      u8       bit 0: embeddings are L2-normalized
    d_emb      u32
    d_side     u32
    count      u64
    records    count x (id u64, class u32, d_emb x f32, d_side x f32)
    crc32      u32      zlib CRC-32 of every preceding byte

The gallery's model version and free-form provenance live in a JSON sidecar
``<path>.meta.json`` so the binary layout stays fixed.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import CorruptionError, ShapeError
from .models import Network, rebuild
from .retrieval import GalleryStore
from .training import SideInfoModel

MAGIC = b"FCTG"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIQ")
_CRC = struct.Struct("<I")
FLAG_NORMALIZED = 0x01


def _record_dtype(d_emb: int, d_side: int) -> np.dtype:
    fields = [("id", "<u8"), ("cls", "<u4")]
    if d_emb:
        fields.append(("emb", "<f4", (d_emb,)))
    if d_side:
        fields.append(("side", "<f4", (d_side,)))
    return np.dtype(fields)


def encode_gallery(store: GalleryStore) -> bytes:
    if len(store) and (store.ids.min() < 0 or store.labels.min() < 0):
        raise ValueError("ids and class labels must be non-negative to be stored")
    if len(store) and store.labels.max() > 0xFFFFFFFF:
        raise ValueError("class label does not fit in u32")
    flags = FLAG_NORMALIZED if store.normalized else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, flags, store.d_emb, store.d_side, len(store))
    rec = np.zeros(len(store), dtype=_record_dtype(store.d_emb, store.d_side))
    rec["id"] = store.ids
    rec["cls"] = store.labels
    if store.d_emb:
        rec["emb"] = store.embeddings.astype("<f4")
    if store.d_side:
        rec["side"] = store.side_info.astype("<f4")
    body = header + rec.tobytes()
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_gallery(blob: bytes, model_version: int = 1) -> GalleryStore:
    if len(blob) < _HEADER.size + _CRC.size:
        raise CorruptionError("file too short for an FCTG header")
    magic, version, flags, d_emb, d_side, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptionError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CorruptionError(f"unsupported format version {version}")
    dtype = _record_dtype(d_emb, d_side)
    expected = _HEADER.size + count * dtype.itemsize + _CRC.size
    if len(blob) != expected:
        raise CorruptionError(f"declared {count} records need {expected} bytes, file has {len(blob)}")
    body = blob[:-_CRC.size]
    (crc,) = _CRC.unpack_from(blob, len(body))
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("CRC mismatch")
    rec = np.frombuffer(body, dtype=dtype, count=count, offset=_HEADER.size)
    emb = rec["emb"].astype(np.float64) if d_emb else np.zeros((count, 0))
    side = rec["side"].astype(np.float64) if d_side else np.zeros((count, 0))
    return GalleryStore(rec["id"].astype(np.int64), rec["cls"].astype(np.int64),
                        emb.reshape(count, d_emb), side.reshape(count, d_side),
                        model_version=model_version, normalized=bool(flags & FLAG_NORMALIZED))


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def save_gallery(store: GalleryStore, path, provenance: Optional[Dict] = None) -> None:
    path = Path(path)
    path.write_bytes(encode_gallery(store))
    meta = {"model_version": int(store.model_version), "provenance": provenance or {}}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_gallery(path) -> GalleryStore:
    path = Path(path)
    version = 1
    meta = _meta_path(path)
    if meta.exists():
        try:
            version = int(json.loads(meta.read_text())["model_version"])
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptionError(f"unreadable gallery metadata {meta}") from exc
    return decode_gallery(path.read_bytes(), model_version=version)


def quantize_f32(store: GalleryStore) -> GalleryStore:
    """The store exactly as it reads back from disk."""
    return decode_gallery(encode_gallery(store), store.model_version)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def save_network(net: Network, path, extra: Optional[Dict] = None) -> None:
    meta = {"kind": net.kind, "config": net.config, "extra": extra or {}}
    arrays = {f"a{i:03d}": a for i, a in enumerate(net.state_arrays())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_network(path) -> Tuple[Network, Dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        net = rebuild(meta["kind"], meta["config"])
        names = sorted(k for k in data.files if k != "meta")
        net.load_state_arrays([data[k] for k in names])
    return net, meta.get("extra", {})


def save_side_info(model: SideInfoModel, path) -> None:
    if model.net is None:
        meta = {"kind": None, "side_kind": model.kind.value, "d_side": model.d_side}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)))
        return
    save_network(model.net, path, extra={"side_kind": model.kind.value, "d_side": model.d_side})


def load_side_info(path) -> SideInfoModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
    if meta.get("kind") is None:
        return SideInfoModel(meta["side_kind"], meta["d_side"])
    net, extra = load_network(path)
    if "side_kind" not in extra:
        raise ShapeError(f"{path} is not a side-information checkpoint")
    return SideInfoModel(extra["side_kind"], extra["d_side"], net)
