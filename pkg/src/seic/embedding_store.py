"""Embedding matrices: normalization, persistence and extraction.

Every downstream module assumes unit-norm rows, so normalization happens
once, here, at the store boundary. Data is always held as float32, which
is also the on-disk precision.

File layout (all integers little-endian)::

    b"SEICEMB1" | u32 N | u32 D | N*D float32 row-major | u32 L | L bytes of JSON {"ids": [...]}
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DimMismatchError, EncoderError, FormatError, ZeroRowError

MAGIC = b"SEICEMB1"
_ZERO_NORM = 1e-12


@dataclass
class EmbeddingMatrix:
    data: np.ndarray
    ids: list[str]
    normalized: bool = False

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimMismatchError(f"embedding data must be 2-D, got shape {self.data.shape}")
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != self.data.shape[0]:
            raise DimMismatchError(f"{len(self.ids)} ids for {self.data.shape[0]} rows")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("embedding data contains non-finite entries")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.n

    def take(self, index) -> "EmbeddingMatrix":
        index = np.asarray(index)
        return EmbeddingMatrix(self.data[index], [self.ids[i] for i in index], self.normalized)

    @classmethod
    def from_array(cls, data, ids=None, normalized=False) -> "EmbeddingMatrix":
        data = np.asarray(data)
        if ids is None:
            ids = [str(i) for i in range(data.shape[0])]
        return cls(data, list(ids), normalized)


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide each row by its Euclidean norm.

    Rows already at unit norm (to within a few float32 ulps) are left
    bit-identical, which makes the operation exactly idempotent.
    """
    x = m.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= _ZERO_NORM)
    if bad.size:
        raise ZeroRowError(m.ids[bad[0]], float(norms[bad[0]]))
    out = (x / norms[:, None]).astype(np.float32)
    keep = np.abs(norms - 1.0) <= 8 * np.finfo(np.float32).eps
    out[keep] = m.data[keep]
    return EmbeddingMatrix(out, list(m.ids), normalized=True)


def write_embeddings(m: EmbeddingMatrix, path) -> None:
    payload = json.dumps({"ids": m.ids, "normalized": m.normalized}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", m.n, m.dim))
        fh.write(m.data.astype("<f4", copy=False).tobytes(order="C"))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)


def read_embeddings(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", raw, 8)
    body_end = 16 + 4 * n * d
    if len(raw) < body_end + 4:
        raise FormatError(f"{path}: truncated payload (expected {n}x{d} floats)")
    data = np.frombuffer(raw, dtype="<f4", count=n * d, offset=16).reshape(n, d)
    (trailer_len,) = struct.unpack_from("<I", raw, body_end)
    trailer = raw[body_end + 4 : body_end + 4 + trailer_len]
    if len(trailer) != trailer_len:
        raise FormatError(f"{path}: truncated id trailer")
    try:
        meta = json.loads(trailer.decode("utf-8"))
        ids = meta["ids"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: unreadable id trailer: {exc}") from exc
    if len(ids) != n:
        raise DimMismatchError(f"{path}: manifest lists {len(ids)} ids but header says N={n}")
    return EmbeddingMatrix(data.astype(np.float32), ids, bool(meta.get("normalized", False)))


@dataclass
class EncoderGateway:
    """Pair of encoder callables plus a descriptor.

    ``encode_images`` and ``encode_texts`` take a batch (sequence or array)
    and return an array of shape ``(len(batch), dim)``.
    """

    encode_images: Callable[[Any], Any] | None
    encode_texts: Callable[[Sequence[str]], Any] | None
    name: str
    dim: int
    extra: dict = field(default_factory=dict)

    @property
    def descriptor(self) -> dict:
        return {"name": self.name, "dim": self.dim, **self.extra}


def extract_embeddings(
    gateway: EncoderGateway,
    items,
    batch_size: int = 256,
    modality: str = "image",
    ids: Sequence[str] | None = None,
) -> EmbeddingMatrix:
    """Encode ``items`` batch by batch and return a row-normalized matrix.

    Rows follow input order. For strings the ids default to the strings
    themselves, otherwise to running indices.
    """
    if items is None or len(items) == 0:
        raise EncoderError("no items to encode")
    if batch_size < 1:
        raise EncoderError(f"batch_size must be positive, got {batch_size}")
    fn = gateway.encode_images if modality == "image" else gateway.encode_texts
    if fn is None:
        raise EncoderError(f"gateway {gateway.name!r} has no {modality} encoder")

    chunks = []
    for start in range(0, len(items), batch_size):
        stop = min(start + batch_size, len(items))
        try:
            out = fn(items[start:stop])
            if hasattr(out, "detach"):
                out = out.detach().cpu().numpy()
            out = np.asarray(out, dtype=np.float64)
        except Exception as exc:
            raise EncoderError(f"{gateway.name} failed: {exc}", start, stop) from exc
        if out.shape != (stop - start, gateway.dim):
            raise EncoderError(
                f"{gateway.name} returned shape {out.shape}, expected {(stop - start, gateway.dim)}",
                start,
                stop,
            )
        chunks.append(out)

    if ids is None:
        if modality == "text":
            ids = [str(s) for s in items]
        else:
            ids = [str(i) for i in range(len(items))]
    return normalize_rows(EmbeddingMatrix(np.concatenate(chunks), list(ids)))
