"""Exact cosine-similarity store over an image corpus, with manifest I/O.

The index is a flat scan: every query is scored against every record and
sorted, so results are exact. Ties are broken by ascending record id to keep
retrieval deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyIndex, ManifestError, ZeroVector


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two nonzero vectors, clipped into [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector dimensions differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for the zero vector")
    return float(np.clip(float(np.dot(a, b)) / (na * nb), -1.0, 1.0))


@dataclass(eq=False)
class ImageRecord:
    """One environment image: identity, embedding, domain label, locator."""

    id: str
    embedding: np.ndarray
    category: str
    uri: str = ""
    source: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)


@dataclass
class IndexManifest:
    dimension: int
    records: list[ImageRecord]
    checksum: str = ""


def dedup(retrieved: list[ImageRecord]) -> list[ImageRecord]:
    """Keep the first occurrence of each record id, preserving input order."""
    seen: set[str] = set()
    out = []
    for rec in retrieved:
        if rec.id not in seen:
            seen.add(rec.id)
            out.append(rec)
    return out


def _record_line(rec: ImageRecord) -> str:
    row = {
        "id": rec.id,
        "category": rec.category,
        "uri": rec.uri,
        "source": rec.source,
        "embedding": [float(x) for x in rec.embedding],
    }
    if rec.meta:
        row["meta"] = rec.meta
    return json.dumps(row, sort_keys=True, separators=(",", ":"))


def manifest_checksum(records: list[ImageRecord]) -> str:
    digest = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.id):
        digest.update(_record_line(rec).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()


def save_manifest(manifest: IndexManifest, path: str | Path) -> None:
    """Write header line {dimension, count, checksum} plus one JSON record per line."""
    path = Path(path)
    records = sorted(manifest.records, key=lambda r: r.id)
    header = {
        "dimension": manifest.dimension,
        "count": len(records),
        "checksum": manifest_checksum(records),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in records:
            fh.write(_record_line(rec) + "\n")
    tmp.replace(path)


def load_manifest(path: str | Path) -> IndexManifest:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if "dimension" not in header or "count" not in header:
        raise ManifestError(f"{path}: header must carry dimension and count")
    dimension = int(header["dimension"])
    records = []
    for line in lines[1:]:
        row = json.loads(line)
        records.append(
            ImageRecord(
                id=row["id"],
                embedding=np.asarray(row["embedding"], dtype=np.float64),
                category=row.get("category", ""),
                uri=row.get("uri", ""),
                source=row.get("source", ""),
                meta=row.get("meta", {}),
            )
        )
    if len(records) != int(header["count"]):
        raise ManifestError(
            f"{path}: header count {header['count']} != {len(records)} records"
        )
    expected = header.get("checksum")
    checksum = manifest_checksum(records)
    if expected and expected != checksum:
        raise ManifestError(f"{path}: checksum mismatch")
    return IndexManifest(dimension=dimension, records=records, checksum=checksum)


class EmbeddingIndex:
    """Immutable flat index over an IndexManifest; safe for concurrent reads."""

    def __init__(self, manifest: IndexManifest):
        records = sorted(manifest.records, key=lambda r: r.id)
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate record ids in manifest")
        for rec in records:
            if rec.embedding.shape != (manifest.dimension,):
                raise DimensionMismatch(
                    f"record {rec.id}: embedding has dimension "
                    f"{rec.embedding.shape[0]}, index expects {manifest.dimension}"
                )
            if not np.any(rec.embedding):
                raise ZeroVector(f"record {rec.id}: all-zero embedding")
        self.manifest = manifest
        self.dimension = manifest.dimension
        self._records = records
        self._by_id = {r.id: r for r in records}
        matrix = np.stack([r.embedding for r in records]) if records else np.zeros((0, manifest.dimension))
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        self._matrix = matrix / norms

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> list[ImageRecord]:
        return list(self._records)

    def get(self, record_id: str) -> ImageRecord:
        return self._by_id[record_id]

    def _normalize_query(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dimension,):
            raise DimensionMismatch(
                f"query has dimension {q.shape}, index expects ({self.dimension},)"
            )
        norm = float(np.linalg.norm(q))
        if norm == 0.0:
            raise ZeroVector("query embedding is the zero vector")
        return q / norm

    def retrieve(self, query, k: int) -> list[tuple[ImageRecord, float]]:
        """Top-k records by descending cosine similarity, ties by ascending id."""
        if not self._records:
            raise EmptyIndex("cannot retrieve from an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        scores = self._matrix @ self._normalize_query(query)
        # Records are stored in ascending-id order, so a stable sort on the
        # negated scores yields the id tie-break for free.
        order = np.argsort(-scores, kind="stable")[: min(k, len(self._records))]
        return [(self._records[i], float(scores[i])) for i in order]

    def retrieve_batch(
        self, queries, k: int, chunk: int = 512
    ) -> list[list[tuple[ImageRecord, float]]]:
        """retrieve() for many queries at once; results align with input order."""
        if not self._records:
            raise EmptyIndex("cannot retrieve from an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        out: list[list[tuple[ImageRecord, float]]] = []
        queries = list(queries)
        top = min(k, len(self._records))
        for start in range(0, len(queries), chunk):
            block = np.stack(
                [self._normalize_query(q) for q in queries[start : start + chunk]]
            )
            scores = block @ self._matrix.T
            order = np.argsort(-scores, axis=1, kind="stable")[:, :top]
            for row, picks in enumerate(order):
                out.append(
                    [(self._records[i], float(scores[row, i])) for i in picks]
                )
        return out


def retrieve(index: EmbeddingIndex, query, k: int) -> list[tuple[ImageRecord, float]]:
    return index.retrieve(query, k)
