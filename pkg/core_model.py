"""
Domain types shared by the cascade engine, plus corpus I/O and validation.

Items are queries or candidates; candidates carry an ECR trace
(``<think>...</think> summary``) that stage 2 reranks on. Embeddings are kept
as row-per-item unit vectors in an ``EmbeddingMatrix`` and stored on disk in
the ``CRV1`` binary layout.
"""

from typing import Dict, Iterable, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field
import hashlib
import json
import logging
import os
import struct

import numpy as np

logger = logging.getLogger(__name__)

ROLE_QUERY = "query"
ROLE_CANDIDATE = "candidate"
ROLES = (ROLE_QUERY, ROLE_CANDIDATE)

KIND_ORIGINAL = "original"
KIND_QAR = "qar_rewritten"
GENERATION_KINDS = (KIND_ORIGINAL, KIND_QAR)

STAGE_RETRIEVAL = "retrieval"
STAGE_PAIRWISE = "ecrr_pairwise"
STAGE_LISTWISE = "ecrr_listwise"
STAGES = (STAGE_RETRIEVAL, STAGE_PAIRWISE, STAGE_LISTWISE)

RERANK_NONE = "none"
RERANK_PAIRWISE = "pairwise"
RERANK_LISTWISE = "listwise"
RERANK_MODES = (RERANK_NONE, RERANK_PAIRWISE, RERANK_LISTWISE)

FAIL_FAST = "fail_fast"
FALL_BACK = "fall_back_to_original"
QAR_FAILURE_POLICIES = (FAIL_FAST, FALL_BACK)

EMBEDDINGS_MAGIC = b"CRV1"
NORM_TOLERANCE = 1e-6


class CascadeError(Exception):
    """Base error; ``exit_code`` is what the command line returns for it."""
    exit_code = 1


class InputFormatError(CascadeError):
    exit_code = 2


class ConfigError(CascadeError):
    exit_code = 3


class PreconditionError(CascadeError):
    exit_code = 1


def derive_seed(seed: int, purpose: str) -> int:
    """Stable child seed for ``purpose`` (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(f"{seed}:{purpose}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


@dataclass(frozen=True)
class EcrTrace:
    """An embedding-centric reasoning trace attached to one item."""
    item_id: str
    think: str
    summary: str
    source_model: str
    generation_kind: str = KIND_ORIGINAL
    derived_for_query: Optional[str] = None

    def __post_init__(self):
        if not self.summary or not self.summary.strip():
            raise InputFormatError(f"ECR trace for '{self.item_id}' has an empty summary")
        if self.generation_kind not in GENERATION_KINDS:
            raise InputFormatError(f"Unknown generation kind: {self.generation_kind}")
        if (self.generation_kind == KIND_QAR) != (self.derived_for_query is not None):
            raise InputFormatError(
                f"ECR trace for '{self.item_id}': derived_for_query must be set iff the trace is qar_rewritten"
            )

    @property
    def text(self) -> str:
        return f"<think>{self.think}</think> {self.summary}"

    def to_dict(self) -> Dict:
        return {
            "item_id": self.item_id,
            "think": self.think,
            "summary": self.summary,
            "source_model": self.source_model,
            "generation_kind": self.generation_kind,
            "derived_for_query": self.derived_for_query,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "EcrTrace":
        try:
            return cls(
                item_id=data["item_id"],
                think=data.get("think", ""),
                summary=data["summary"],
                source_model=data["source_model"],
                generation_kind=data.get("generation_kind", KIND_ORIGINAL),
                derived_for_query=data.get("derived_for_query"),
            )
        except KeyError as e:
            raise InputFormatError(f"ECR record missing field {e}") from e


@dataclass(frozen=True)
class Item:
    """A query or a candidate: instruction, text and/or media, plus an optional trace."""
    id: str
    role: str
    instruction: str = ""
    content_text: Optional[str] = None
    media_ref: Optional[str] = None
    ecr: Optional[EcrTrace] = None
    task: str = "default"

    def __post_init__(self):
        if not self.id:
            raise InputFormatError("Item id must be non-empty")
        if self.role not in ROLES:
            raise InputFormatError(f"Item '{self.id}' has unknown role '{self.role}'")
        if self.content_text is None and self.media_ref is None:
            raise InputFormatError(f"Item '{self.id}' needs content_text or media_ref")

    @property
    def text_or_ecr(self) -> str:
        """What a text-only reranker sees for this item."""
        if self.ecr is not None:
            return self.ecr.text
        return self.content_text if self.content_text is not None else self.media_ref

    def to_dict(self) -> Dict:
        return {
            "id": self.id,
            "role": self.role,
            "instruction": self.instruction,
            "content_text": self.content_text,
            "media_ref": self.media_ref,
            "ecr": self.ecr.to_dict() if self.ecr else None,
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Item":
        try:
            ecr = data.get("ecr")
            return cls(
                id=data["id"],
                role=data["role"],
                instruction=data.get("instruction", ""),
                content_text=data.get("content_text"),
                media_ref=data.get("media_ref"),
                ecr=EcrTrace.from_dict(ecr) if ecr else None,
                task=data.get("task", "default"),
            )
        except KeyError as e:
            raise InputFormatError(f"Item record missing field {e}") from e


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-per-item unit vectors. The array is made read-only on construction."""
    ids: Tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            if vectors.size == 0:
                vectors = vectors.reshape(0, 0)
            else:
                raise InputFormatError(f"Embedding matrix must be 2-D, got shape {vectors.shape}")
        ids = tuple(self.ids)
        if len(ids) != vectors.shape[0]:
            raise InputFormatError(f"{len(ids)} ids for {vectors.shape[0]} rows")
        vectors = vectors.copy()
        vectors.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def row_norm_errors(self) -> np.ndarray:
        if len(self) == 0:
            return np.zeros(0)
        return np.abs(np.linalg.norm(self.vectors, axis=1) - 1.0)

    def duplicate_ids(self) -> List[str]:
        seen, dupes = set(), []
        for item_id in self.ids:
            if item_id in seen and item_id not in dupes:
                dupes.append(item_id)
            seen.add(item_id)
        return dupes

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self.ids.index(item_id)]
        except ValueError:
            raise KeyError(item_id) from None

    @classmethod
    def from_rows(cls, ids: Sequence[str], rows: np.ndarray) -> "EmbeddingMatrix":
        """Build a matrix, unit-normalizing every row (the single normalization point)."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.size == 0:
            return cls(tuple(ids), rows.reshape(len(ids), rows.shape[-1] if rows.ndim == 2 else 0))
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise InputFormatError("Cannot normalize a zero vector")
        return cls(tuple(ids), rows / norms)


@dataclass(frozen=True)
class RankedList:
    """Ordered (item_id, score) pairs for one query, with stage provenance."""
    query_id: str
    entries: Tuple[Tuple[str, float], ...]
    stage: str
    truncated_at: int

    def __post_init__(self):
        entries = tuple((str(i), float(s)) for i, s in self.entries)
        if self.stage not in STAGES:
            raise InputFormatError(f"Unknown stage '{self.stage}'")
        ids = [i for i, _ in entries]
        if len(set(ids)) != len(ids):
            raise InputFormatError(f"Ranked list for '{self.query_id}' has duplicate ids")
        for (_, a), (_, b) in zip(entries, entries[1:]):
            if b > a:
                raise InputFormatError(f"Ranked list for '{self.query_id}' is not sorted by score")
        object.__setattr__(self, "entries", entries)

    @property
    def ids(self) -> List[str]:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> Dict:
        return {
            "query_id": self.query_id,
            "entries": [[i, s] for i, s in self.entries],
            "stage": self.stage,
            "truncated_at": self.truncated_at,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "RankedList":
        try:
            return cls(
                query_id=data["query_id"],
                entries=tuple((i, s) for i, s in data["entries"]),
                stage=data["stage"],
                truncated_at=int(data["truncated_at"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise InputFormatError(f"Bad ranked list record: {e}") from e


@dataclass(frozen=True)
class PipelineConfig:
    """Cascade parameters."""
    top_k: int = 10
    rerank_mode: str = RERANK_NONE
    qar_enabled: bool = False
    tau: float = 0.02
    alpha: float = 0.95
    mined_k: int = 7
    pool_size_m: int = 50
    reasoner_backend: str = "sim-reasoner"
    reranker_backend: str = "sim-reranker"
    judge_backend: str = "sim-judge"
    rng_seed: int = 0
    qar_failure_policy: str = FAIL_FAST
    listwise_max: int = 50
    exclude_diagonal: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.mined_k < 1 or self.pool_size_m < 1:
            raise ConfigError("mined_k and pool_size_m must be positive")
        if self.rerank_mode not in RERANK_MODES:
            raise ConfigError(f"Unknown rerank mode '{self.rerank_mode}'")
        if self.qar_failure_policy not in QAR_FAILURE_POLICIES:
            raise ConfigError(f"Unknown QAR failure policy '{self.qar_failure_policy}'")
        if self.listwise_max < 1:
            raise ConfigError("listwise_max must be >= 1")

    def to_dict(self) -> Dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Optional[Dict]) -> "PipelineConfig":
        data = dict(data or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown pipeline settings: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: Tuple[Tuple[str, str, str], ...] = field(default_factory=tuple)


def validate_corpus(items: Sequence[Item], embeddings: EmbeddingMatrix,
                    ecr_store: Optional[Dict[str, "EcrTrace"]] = None) -> ValidationReport:
    """
    Check a corpus against its embedding matrix without raising.

    Per-record invariants (non-empty id, content present, trace provenance)
    are enforced when records are constructed; this pass reports the
    cross-record ones.

    Args:
        items: Items of one role (the rows of ``embeddings``)
        embeddings: The matrix that should hold one unit row per item
        ecr_store: Optional trace store; candidates without a trace are reported

    Returns:
        ValidationReport listing (kind, item_id, detail) for every violation
    """
    violations = []
    counts: Dict[str, int] = {}
    for item in items:
        counts[item.id] = counts.get(item.id, 0) + 1
    for item_id, n in counts.items():
        if n > 1:
            violations.append(("duplicate_id", item_id, f"{n} items share this id"))

    for item_id in embeddings.duplicate_ids():
        violations.append(("duplicate_id", item_id, "id appears twice in the embedding matrix"))

    row_ids = set(embeddings.ids)
    for item in items:
        if item.id not in row_ids:
            violations.append(("missing_embedding", item.id, "no embedding row"))
        if ecr_store is not None and item.role == ROLE_CANDIDATE:
            trace = ecr_store.get(item.id)
            if trace is None:
                violations.append(("missing_ecr", item.id, "no stored ECR trace"))
            elif not trace.summary.strip():
                violations.append(("empty_summary", item.id, "ECR summary is empty"))

    item_ids = set(counts)
    for row_id in embeddings.ids:
        if row_id not in item_ids:
            violations.append(("orphan_embedding", row_id, "embedding row without an item"))

    for row_id, err in zip(embeddings.ids, embeddings.row_norm_errors()):
        if err > NORM_TOLERANCE:
            violations.append(("bad_norm", row_id, f"row norm off by {err:.3g}"))

    return ValidationReport(ok=not violations, violations=tuple(violations))


def write_jsonl(path: str, records: Iterable[Dict]) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp_path, path)


def read_jsonl(path: str) -> List[Dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise InputFormatError(f"{path}:{lineno}: {e}") from e
    return records


def write_items_jsonl(path: str, items: Iterable[Item]) -> None:
    write_jsonl(path, (item.to_dict() for item in items))


def read_items_jsonl(path: str) -> List[Item]:
    return [Item.from_dict(record) for record in read_jsonl(path)]


def write_traces_jsonl(path: str, traces: Iterable[EcrTrace]) -> None:
    write_jsonl(path, (trace.to_dict() for trace in traces))


def read_traces_jsonl(path: str) -> Dict[str, EcrTrace]:
    store: Dict[str, EcrTrace] = {}
    for record in read_jsonl(path):
        trace = EcrTrace.from_dict(record)
        store[trace.item_id] = trace
    return store


def write_embeddings(path: str, embeddings: EmbeddingMatrix) -> None:
    """Write the CRV1 layout: magic, <I dim, <Q count, length-prefixed ids, <f4 rows."""
    n = len(embeddings)
    dim = embeddings.dim if n else (embeddings.vectors.shape[1] if embeddings.vectors.ndim == 2 else 0)
    chunks = [EMBEDDINGS_MAGIC, struct.pack("<IQ", dim, n)]
    for item_id in embeddings.ids:
        raw = item_id.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    chunks.append(np.ascontiguousarray(embeddings.vectors, dtype="<f4").tobytes())
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_embeddings(path: str) -> EmbeddingMatrix:
    """Read a CRV1 file. Rows are re-normalized after float32 storage."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != EMBEDDINGS_MAGIC:
        raise InputFormatError(f"{path}: bad magic {blob[:4]!r}, expected {EMBEDDINGS_MAGIC!r}")
    try:
        dim, count = struct.unpack_from("<IQ", blob, 4)
        offset = 4 + struct.calcsize("<IQ")
        ids = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            ids.append(blob[offset:offset + length].decode("utf-8"))
            offset += length
        expected = count * dim * 4
        if len(blob) - offset != expected:
            raise InputFormatError(
                f"{path}: vector block holds {len(blob) - offset} bytes, expected {expected}"
            )
        rows = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=offset)
    except (struct.error, UnicodeDecodeError) as e:
        raise InputFormatError(f"{path}: truncated or corrupt embeddings file ({e})") from e
    rows = rows.astype(np.float64).reshape(count, dim)
    if count == 0:
        return EmbeddingMatrix(tuple(ids), rows)
    return EmbeddingMatrix.from_rows(ids, rows)
