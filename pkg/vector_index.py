"""
Stage-1 coarse retrieval: exact cosine top-k over an EmbeddingMatrix.

Rows are unit vectors, so cosine is a dot product. Equal scores break by
ascending item id.
"""

from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from dataclasses import dataclass
import logging

import numpy as np

from core_model import (
    EmbeddingMatrix,
    InputFormatError,
    PreconditionError,
    RankedList,
    STAGE_RETRIEVAL,
    read_embeddings,
    write_embeddings,
)

logger = logging.getLogger(__name__)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of two unit vectors (their dot product)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise InputFormatError(f"Dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


@dataclass(frozen=True, eq=False)
class Index:
    embeddings: EmbeddingMatrix
    id_to_row: Dict[str, int]
    # position of each row in ascending-id order, used as the tie key
    tie_rank: np.ndarray

    @property
    def size(self) -> int:
        return len(self.embeddings)

    @property
    def dim(self) -> int:
        return self.embeddings.dim

    def contains(self, item_id: str) -> bool:
        return item_id in self.id_to_row

    def vector(self, item_id: str) -> np.ndarray:
        return self.embeddings.vectors[self.id_to_row[item_id]]


def build_index(embeddings: EmbeddingMatrix) -> Index:
    dupes = embeddings.duplicate_ids()
    if dupes:
        raise InputFormatError(f"Duplicate ids in embeddings: {', '.join(dupes[:5])}")
    id_to_row = {item_id: row for row, item_id in enumerate(embeddings.ids)}
    order = sorted(range(len(embeddings.ids)), key=lambda row: embeddings.ids[row])
    tie_rank = np.empty(len(order), dtype=np.int64)
    tie_rank[order] = np.arange(len(order))
    tie_rank.flags.writeable = False
    logger.debug(f"Built index over {len(id_to_row)} rows (dim {embeddings.dim if len(embeddings) else 0})")
    return Index(embeddings=embeddings, id_to_row=id_to_row, tie_rank=tie_rank)


def _scores(index: Index, query_vec: np.ndarray) -> np.ndarray:
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if index.size and query_vec.shape != (index.dim,):
        raise InputFormatError(f"Query dimension {query_vec.shape} does not match index dim {index.dim}")
    return index.embeddings.vectors @ query_vec if index.size else np.zeros(0)


def top_k(index: Index, query_vec: np.ndarray, k: int,
          exclude: Optional[Iterable[str]] = None, query_id: str = "") -> RankedList:
    """
    Exact top-k by cosine.

    Args:
        index: Index built by build_index
        query_vec: Unit query vector of the index dimension
        k: Number of entries wanted (>= 1)
        exclude: Item ids that must not appear
        query_id: Copied onto the returned list

    Returns:
        RankedList(stage=retrieval) with min(k, n - |excluded|) entries
    """
    if k < 1:
        raise PreconditionError(f"k must be >= 1, got {k}")
    scores = _scores(index, query_vec)
    keep = np.ones(index.size, dtype=bool)
    for item_id in exclude or ():
        row = index.id_to_row.get(item_id)
        if row is not None:
            keep[row] = False
    rows = np.flatnonzero(keep)
    # lexsort: last key is primary
    order = rows[np.lexsort((index.tie_rank[rows], -scores[rows]))][:k]
    entries = tuple((index.embeddings.ids[row], float(scores[row])) for row in order)
    return RankedList(query_id=query_id, entries=entries, stage=STAGE_RETRIEVAL, truncated_at=k)


def full_scan_top_k(index: Index, query_vec: np.ndarray, k: int,
                    exclude: Optional[Iterable[str]] = None) -> List[Tuple[str, float]]:
    """Reference ranking: score every row, sort with Python's sort, cut at k."""
    excluded = set(exclude or ())
    scores = _scores(index, query_vec)
    scored = [
        (item_id, float(scores[row]))
        for row, item_id in enumerate(index.embeddings.ids)
        if item_id not in excluded
    ]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[:k]


def save_index(index: Index, path: str) -> None:
    write_embeddings(path, index.embeddings)


def load_index(path: str) -> Index:
    return build_index(read_embeddings(path))
