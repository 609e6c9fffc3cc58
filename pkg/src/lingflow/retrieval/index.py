"""Multi-vector page index with late-interaction scoring."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from lingflow.errors import DataError, DimensionMismatch, EmptyIndex, FormatError, SchemaError
from lingflow.retrieval import kernels
from lingflow.trace import iter_jsonl

MAGIC = b"LFIDX1"
SIMILARITIES = ("dot", "cosine")
DEFAULT_K = 3


def as_embedding(data, rows: int | None = None, dim: int | None = None) -> np.ndarray:
    """Validate and convert to a C-contiguous float32 (rows, dim) matrix."""
    arr = np.asarray(data, dtype=np.float32)
    if rows is not None and dim is not None:
        if arr.size != rows * dim:
            raise DimensionMismatch(f"{arr.size} values for a {rows}x{dim} matrix")
        arr = arr.reshape(rows, dim)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"embedding must be a non-empty 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError("embedding contains non-finite values")
    return np.ascontiguousarray(arr)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m.astype(np.float64), axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return np.ascontiguousarray((m / norms).astype(np.float32))


def maxsim_score(q: np.ndarray, p: np.ndarray, similarity: str = "dot") -> float:
    """Sum over query rows of the best dot product against any page row."""
    q, p = as_embedding(q), as_embedding(p)
    if q.shape[1] != p.shape[1]:
        raise DimensionMismatch(f"query dim {q.shape[1]} != page dim {p.shape[1]}")
    if similarity == "cosine":
        q, p = _unit_rows(q), _unit_rows(p)
    return float(kernels.maxsim(q, p))


@dataclass
class RetrievalResult:
    query_id: str
    ranked: list[tuple[str, float]]
    k: int

    @property
    def page_ids(self) -> list[str]:
        return [pid for pid, _ in self.ranked]


class PageIndex:
    """Immutable-after-build collection of page embedding matrices sharing one dim."""

    def __init__(self, dim: int = 0, metadata: str = ""):
        self.dim = dim
        self.metadata = metadata
        self._ids: list[str] = []
        self._mats: list[np.ndarray] = []
        self._packed: tuple[np.ndarray, np.ndarray] | None = None
        self._packed_unit: np.ndarray | None = None

    def add(self, page_id: str, matrix) -> None:
        m = as_embedding(matrix)
        if page_id in self._ids:
            raise DataError(f"duplicate page id {page_id!r}")
        if self.dim == 0:
            self.dim = m.shape[1]
        elif m.shape[1] != self.dim:
            raise DimensionMismatch(f"page {page_id!r} has dim {m.shape[1]}, index dim is {self.dim}")
        self._ids.append(page_id)
        self._mats.append(m)
        self._packed = None
        self._packed_unit = None

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def page_ids(self) -> list[str]:
        return list(self._ids)

    @property
    def entries(self) -> dict[str, np.ndarray]:
        return dict(zip(self._ids, self._mats))

    def packed(self, similarity: str = "dot") -> tuple[np.ndarray, np.ndarray]:
        if self._packed is None:
            offsets = np.zeros(len(self._mats) + 1, dtype=np.int64)
            np.cumsum([m.shape[0] for m in self._mats], out=offsets[1:])
            data = np.ascontiguousarray(np.concatenate(self._mats)) if self._mats else np.zeros((0, self.dim), np.float32)
            self._packed = (data, offsets)
        if similarity == "cosine":
            if self._packed_unit is None:
                self._packed_unit = _unit_rows(self._packed[0])
            return self._packed_unit, self._packed[1]
        return self._packed

    def score_all(self, q, similarity: str = "dot") -> np.ndarray:
        if not self._ids:
            raise EmptyIndex("index has no pages")
        q = as_embedding(q)
        if q.shape[1] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[1]} != index dim {self.dim}")
        if similarity == "cosine":
            q = _unit_rows(q)
        data, offsets = self.packed(similarity)
        return kernels.maxsim_packed(q, data, offsets)


def retrieve_topk(
    index: PageIndex, q, k: int = DEFAULT_K, query_id: str = "", similarity: str = "dot"
) -> RetrievalResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.score_all(q, similarity)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], index._ids[i]))
    ranked = [(index._ids[i], float(scores[i])) for i in order[:k]]
    return RetrievalResult(query_id, ranked, k)


def save_index(index: PageIndex, path: str | Path) -> None:
    chunks = [MAGIC, struct.pack("<II", index.dim, len(index))]
    for pid, m in zip(index._ids, index._mats):
        raw_id = pid.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise FormatError(f"page id too long: {pid[:40]!r}...")
        chunks.append(struct.pack("<H", len(raw_id)))
        chunks.append(raw_id)
        chunks.append(struct.pack("<I", m.shape[0]))
        chunks.append(m.astype("<f4", copy=False).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_index(path: str | Path) -> PageIndex:
    buf = Path(path).read_bytes()
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    dim, count = struct.unpack("<II", take(8))
    if count and dim == 0:
        raise FormatError(f"{path}: dim 0 with {count} pages")
    index = PageIndex(dim, metadata=str(path))
    for _ in range(count):
        (id_len,) = struct.unpack("<H", take(2))
        try:
            pid = take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: page id is not UTF-8") from exc
        (rows,) = struct.unpack("<I", take(4))
        if rows == 0:
            raise FormatError(f"{path}: page {pid!r} has zero rows")
        data = np.frombuffer(take(rows * dim * 4), dtype="<f4").astype(np.float32).reshape(rows, dim)
        try:
            index.add(pid, data)
        except DataError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return index


def embedding_from_json(obj: dict, line_no: int = 0) -> np.ndarray:
    try:
        return as_embedding(obj["values"], int(obj["rows"]), int(obj["dim"]))
    except KeyError as exc:
        raise SchemaError(f"line {line_no}: missing key {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"line {line_no}: {exc}") from exc


def build_index(path: str | Path, metadata: str = "") -> PageIndex:
    """Compile a JSONL ingestion file of {page_id, rows, dim, values} lines."""
    index = PageIndex(metadata=metadata or str(path))
    for line_no, obj in iter_jsonl(path):
        if "page_id" not in obj:
            raise SchemaError(f"line {line_no}: missing key 'page_id'")
        index.add(str(obj["page_id"]), embedding_from_json(obj, line_no))
    return index


@dataclass
class QueryEmbedding:
    query_id: str
    matrix: np.ndarray
    golden_pages: frozenset[str] = field(default_factory=frozenset)


def load_query_embeddings(path: str | Path) -> list[QueryEmbedding]:
    out = []
    for line_no, obj in iter_jsonl(path):
        if "query_id" not in obj:
            raise SchemaError(f"line {line_no}: missing key 'query_id'")
        out.append(
            QueryEmbedding(
                str(obj["query_id"]),
                embedding_from_json(obj, line_no),
                frozenset(obj.get("golden_pages") or ()),
            )
        )
    return out


def retrieve_many(
    index: PageIndex, queries: Iterable[QueryEmbedding], k: int = DEFAULT_K, similarity: str = "dot"
) -> list[RetrievalResult]:
    return [retrieve_topk(index, q.matrix, k, q.query_id, similarity) for q in queries]


def pages_for(results: Sequence[RetrievalResult]) -> dict[str, list[str]]:
    return {r.query_id: r.page_ids for r in results}
