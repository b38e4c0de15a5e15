"""Binary embedding store and top-k lookup.

Layout (all integers little-endian)::

    offset  size        field
    0       8           magic  b"MVCLEMB\\0"
    8       4   uint32  schema version (currently 1)
    12      4   uint32  dim
    16      8   uint64  count
    24      8   uint64  byte length of the id table
    32      8*dim*count float64 records, row-major, little-endian
    ...                 id table: per record, uint32 byte length + UTF-8 id

Nothing follows the id table; readers reject trailing bytes.
"""
from __future__ import annotations

import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParameterError, SchemaError

MAGIC = b"MVCLEMB\0"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sIIQQ")


@dataclass
class EmbeddingStore:
    ids: list
    vectors: np.ndarray  # count x dim float64

    def __post_init__(self):
        self.ids = [str(i) for i in self.ids]
        vecs = np.asarray(self.vectors, dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[0] != len(self.ids):
            raise DataError(f"{len(self.ids)} ids but vectors of shape {vecs.shape}")
        self.vectors = vecs
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding store ids must be unique")
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[self._index[str(item_id)]]
        except KeyError:
            raise DataError(f"unknown query id {item_id!r}") from None

    def to_bytes(self) -> bytes:
        table = b"".join(struct.pack("<I", len(b)) + b
                         for b in (i.encode("utf-8") for i in self.ids))
        head = _HEADER.pack(MAGIC, SCHEMA_VERSION, self.dim, len(self), len(table))
        return head + self.vectors.astype("<f8").tobytes() + table

    @classmethod
    def from_bytes(cls, buf: bytes) -> EmbeddingStore:
        if len(buf) < _HEADER.size:
            raise SchemaError("embedding store truncated before end of header")
        magic, version, dim, count, table_len = _HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise SchemaError("not an embedding store (bad magic)")
        if version != SCHEMA_VERSION:
            raise SchemaError(f"embedding store schema version {version}, expected {SCHEMA_VERSION}")
        body = _HEADER.size + 8 * dim * count
        if len(buf) != body + table_len:
            raise SchemaError(f"embedding store size {len(buf)} does not match header "
                              f"({body + table_len} bytes)")
        vecs = np.frombuffer(buf, dtype="<f8", count=dim * count, offset=_HEADER.size)
        ids, pos = [], body
        for _ in range(count):
            if pos + 4 > len(buf):
                raise SchemaError("id table truncated")
            (n,) = struct.unpack_from("<I", buf, pos)
            ids.append(buf[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        if pos != len(buf):
            raise SchemaError("id table length does not match header")
        return cls(ids, vecs.astype(np.float64).reshape(count, dim))


def save_store(store: EmbeddingStore, path) -> Path:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(store.to_bytes())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def load_store(path) -> EmbeddingStore:
    return EmbeddingStore.from_bytes(Path(path).read_bytes())


def retrieve(gallery: EmbeddingStore, query: np.ndarray, k: int,
             exclude: str | None = None) -> list[tuple[str, float]]:
    """Top-``k`` (id, cosine similarity) pairs by descending similarity,
    ties broken by ascending id. ``exclude`` drops one id (leave-self-out).
    ``k`` above the number of candidates is clamped with a warning."""
    if k < 1:
        raise ParameterError("k must be >= 1")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (gallery.dim,):
        raise DataError(f"query has shape {query.shape}, store dim is {gallery.dim}")
    sims = gallery.vectors @ query
    keep = np.array([i != exclude for i in gallery.ids], dtype=bool)
    cand = np.flatnonzero(keep)
    if k > cand.size:
        warnings.warn(f"k={k} exceeds the {cand.size} stored candidates; clamped", stacklevel=2)
        k = cand.size
    ids = [gallery.ids[i] for i in cand]
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
    order = np.lexsort((id_rank, -sims[cand]))[:k]
    return [(ids[j], float(sims[cand[j]])) for j in order]
