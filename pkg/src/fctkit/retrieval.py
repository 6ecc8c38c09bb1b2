"""Gallery store, exact L2 retrieval and the evaluation metrics.

Distances are squared Euclidean, computed row by row from differences so that
a query's ranking never depends on which other queries share its batch.  Ties
are broken by ascending record id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, ShapeError

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5)
_QUERY_CHUNK = 64


@dataclass
class GalleryStore:
    """Columnar gallery: one row per record."""

    ids: np.ndarray
    labels: np.ndarray
    embeddings: np.ndarray
    side_info: np.ndarray
    model_version: int = 1
    normalized: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.ids.size
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.side_info = np.asarray(self.side_info, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.side_info.ndim != 2:
            raise ShapeError("embeddings and side_info must be 2-D (use shape (n, 0) for none)")
        if self.labels.size != n or self.embeddings.shape[0] != n or self.side_info.shape[0] != n:
            raise ShapeError("ids, labels, embeddings and side_info disagree on record count")
        if np.unique(self.ids).size != n:
            raise ValueError("record ids must be unique")
        if self.normalized and n:
            norms = np.linalg.norm(self.embeddings, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("store flagged normalized but embeddings are not unit norm")

    def __len__(self):
        return self.ids.size

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d_side(self) -> int:
        return self.side_info.shape[1]

    def replace(self, **changes) -> "GalleryStore":
        fields_ = dict(ids=self.ids, labels=self.labels, embeddings=self.embeddings,
                       side_info=self.side_info, model_version=self.model_version,
                       normalized=self.normalized)
        fields_.update(changes)
        return GalleryStore(**fields_)

    def equals(self, other: "GalleryStore") -> bool:
        return (self.model_version == other.model_version and self.normalized == other.normalized
                and np.array_equal(self.ids, other.ids) and np.array_equal(self.labels, other.labels)
                and self.embeddings.shape == other.embeddings.shape
                and np.array_equal(self.embeddings, other.embeddings)
                and self.side_info.shape == other.side_info.shape
                and np.array_equal(self.side_info, other.side_info))


@dataclass
class Queries:
    """Query embeddings with labels; ``exclude_ids`` removes each query's own
    record from the gallery before ranking (leave-one-out)."""

    embeddings: np.ndarray
    labels: np.ndarray
    exclude_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != self.embeddings.shape[0]:
            raise ShapeError("one label per query required")
        if self.exclude_ids is not None:
            self.exclude_ids = np.asarray(self.exclude_ids, dtype=np.int64).reshape(-1)
            if self.exclude_ids.size != self.labels.size:
                raise ShapeError("one exclude id per query required")

    def __len__(self):
        return self.labels.size

    def subset(self, mask) -> "Queries":
        ex = None if self.exclude_ids is None else self.exclude_ids[mask]
        return Queries(self.embeddings[mask], self.labels[mask], ex)


def leave_one_out(query_embeddings, gallery: GalleryStore) -> Queries:
    """Queries are the gallery's own records, each removed from its search."""
    return Queries(query_embeddings, gallery.labels, gallery.ids)


def _sq_dists(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    diff = q[:, None, :] - g[None, :, :]
    return (diff * diff).sum(axis=2)


def knn_rank(query_emb, gallery: GalleryStore, exclude_id: Optional[int] = None) -> np.ndarray:
    """Gallery record ids ordered by ascending L2 distance to ``query_emb``."""
    q = np.asarray(query_emb, dtype=np.float64).reshape(1, -1)
    if len(gallery) == 0:
        raise DegenerateInputError("cannot rank against an empty gallery")
    if q.shape[1] != gallery.d_emb:
        raise ShapeError(f"query dim {q.shape[1]} != gallery dim {gallery.d_emb}")
    return _rank_rows(q, gallery, None if exclude_id is None else np.array([exclude_id]))[0]


def _rank_rows(q: np.ndarray, gallery: GalleryStore, exclude: Optional[np.ndarray]) -> List[np.ndarray]:
    ids = gallery.ids
    out = []
    for start in range(0, q.shape[0], _QUERY_CHUNK):
        block = _sq_dists(q[start:start + _QUERY_CHUNK], gallery.embeddings)
        for j, dist in enumerate(block):
            order = np.lexsort((ids, dist))
            ranked = ids[order]
            if exclude is not None:
                ranked = ranked[ranked != exclude[start + j]]
            out.append(ranked)
    return out


def _ranked_relevance(queries: Queries, gallery: GalleryStore) -> Tuple[List[np.ndarray], np.ndarray]:
    """Per valid query, a boolean vector marking same-class records in rank
    order; plus the mask of queries that had at least one relevant record."""
    if len(gallery) == 0:
        raise DegenerateInputError("cannot evaluate against an empty gallery")
    if queries.embeddings.shape[1] != gallery.d_emb:
        raise ShapeError(f"query dim {queries.embeddings.shape[1]} != gallery dim {gallery.d_emb}")
    label_of = dict(zip(gallery.ids.tolist(), gallery.labels.tolist()))
    lookup = np.vectorize(label_of.__getitem__, otypes=[np.int64])
    rankings = _rank_rows(queries.embeddings, gallery, queries.exclude_ids)
    rels, valid = [], np.zeros(len(queries), dtype=bool)
    for i, ranked in enumerate(rankings):
        rel = lookup(ranked) == queries.labels[i] if ranked.size else np.zeros(0, dtype=bool)
        if rel.any():
            valid[i] = True
            rels.append(rel)
    skipped = int((~valid).sum())
    if skipped:
        log.warning("%d queries have no same-class gallery record and were excluded", skipped)
    return rels, valid


def _cmc_from_relevance(rels: Sequence[np.ndarray], ks: Sequence[int]) -> Dict[int, float]:
    if not rels:
        return {int(k): 0.0 for k in ks}
    first_hit = np.array([int(np.argmax(r)) for r in rels])  # 0-based rank of first relevant
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def average_precision(rel: np.ndarray) -> float:
    """Non-interpolated AP over the full ranking (recall range [0, 1])."""
    rel = np.asarray(rel, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def cmc(queries: Queries, gallery: GalleryStore, ks: Sequence[int] = DEFAULT_KS) -> Dict[int, float]:
    rels, _ = _ranked_relevance(queries, gallery)
    return _cmc_from_relevance(rels, ks)


def map_at_1(queries: Queries, gallery: GalleryStore) -> float:
    """Mean average precision over recall [0, 1]."""
    rels, _ = _ranked_relevance(queries, gallery)
    if not rels:
        return 0.0
    return float(np.mean([average_precision(r) for r in rels]))


def cka_linear(X, Y) -> float:
    """Linear centered kernel alignment between two representations of the
    same ``n`` items.  Zero-variance input gives 0 by convention."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError("CKA needs two 2-D arrays with equal row counts")
    if X.shape[0] < 2:
        raise DegenerateInputError("CKA needs at least 2 rows")
    X = X - X.mean(axis=0)
    Y = Y - Y.mean(axis=0)
    denom = np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(Y.T @ X) ** 2 / denom)


@dataclass
class RetrievalReport:
    case: str
    cmc: Dict[int, float]
    map_at_1: float
    per_group_cmc: Dict[str, Dict[int, float]] = field(default_factory=dict)
    cka: Optional[float] = None
    query_count: int = 0
    excluded_queries: int = 0
    config: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "case": self.case,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "map_at_1": self.map_at_1,
            "per_group_cmc": {g: {str(k): v for k, v in sorted(c.items())}
                              for g, c in self.per_group_cmc.items()},
            "cka": self.cka,
            "query_count": self.query_count,
            "excluded_queries": self.excluded_queries,
            "config": self.config,
        }


def evaluate_pairing(queries: Queries, gallery: GalleryStore,
                     groups: Optional[Mapping[str, Sequence[int]]] = None,
                     ks: Sequence[int] = DEFAULT_KS, case: str = "",
                     with_cka: bool = False, config: Optional[Dict] = None) -> RetrievalReport:
    """CMC@ks, mAP@1.0, per-group CMC and (optionally) CKA between the
    gallery embeddings and its side-information."""
    rels, valid = _ranked_relevance(queries, gallery)
    cmc_all = _cmc_from_relevance(rels, ks)
    aps = [average_precision(r) for r in rels]
    per_group = {}
    if groups:
        valid_labels = queries.labels[valid]
        for name, labels in groups.items():
            members = np.isin(valid_labels, np.asarray(list(labels), dtype=np.int64))
            per_group[name] = _cmc_from_relevance([r for r, m in zip(rels, members) if m], ks)
    cka = None
    if with_cka and gallery.d_side > 0:
        cka = cka_linear(gallery.embeddings, gallery.side_info)
    return RetrievalReport(case=case, cmc=cmc_all, map_at_1=float(np.mean(aps)) if aps else 0.0,
                           per_group_cmc=per_group, cka=cka, query_count=int(valid.sum()),
                           excluded_queries=int((~valid).sum()), config=dict(config or {}))
