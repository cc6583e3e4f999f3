"""Knowledge embeddings: deterministic pseudo-encoder and the LDAE container format.

Container layout (little-endian): magic "LDAE", u32 version=1, u64 count M,
u32 dim d, u8 flags (bit0 labels present, bit1 rows L2-normalized), then M
label bytes if bit0 is set, then M*d float32 row-major.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import Category, Corpus, Description, GrammarValidator

MAGIC = b"LDAE"
VERSION = 1
FLAG_LABELS = 0x01
FLAG_NORMALIZED = 0x02

MAX_COUNT = 1 << 40
MAX_DIM = 1 << 20

ATTRIBUTE_WEIGHT = 0.5
NOISE_WEIGHT = 0.1


class ContainerError(Exception):
    """Base class for embedding container failures."""


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class SizeOverflowError(ContainerError):
    pass


class EmbeddingSource(str, Enum):
    BRIDGE = "Bridge"
    PSEUDO = "Pseudo"


@dataclass
class AppearanceKnowledgeSet:
    """M x d embedding matrix with per-row pedestrian/background labels."""

    data: np.ndarray  # float32, (M, d)
    labels: np.ndarray  # uint8, (M,)
    normalized: bool = True
    source: EmbeddingSource = EmbeddingSource.PSEUDO

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ValueError("data must be 2-D")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("labels length must equal row count")

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def digest(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        h.update(self.data.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _unit_vector(token: str, dim: int, master_seed: int) -> np.ndarray:
    seed = int.from_bytes(
        hashlib.blake2b(f"{master_seed}|{token}".encode(), digest_size=8).digest(), "little"
    )
    rng = np.random.Generator(np.random.Philox(key=seed))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def encode_pseudo(
    description: Description,
    dim: int,
    master_seed: int,
    validator: GrammarValidator | None = None,
) -> np.ndarray:
    """Deterministic stand-in for a sentence encoder.

    Class token dominates, attributes add structure, and a text-keyed noise
    term keeps distinct sentences distinct:
        v = normalize(u_class + 0.5 * sum_attr u_attr + 0.1 * n_text)
    """
    if dim < 8:
        raise ValueError(f"dim must be >= 8, got {dim}")
    validator = validator or GrammarValidator()
    report = validator.validate(description.text)
    if report.conforms and report.class_word is not None:
        class_token = f"class={report.class_word}"
    else:
        class_token = f"class={description.category.value}"
    v = _unit_vector(class_token, dim, master_seed).copy()
    for attr_type, value in sorted(description.attributes.items()):
        v += ATTRIBUTE_WEIGHT * _unit_vector(f"{attr_type}={value}", dim, master_seed)
    v += NOISE_WEIGHT * _unit_vector(f"text={description.text}", dim, master_seed)
    return v / np.linalg.norm(v)


def encode_corpus(
    corpus: Corpus, dim: int, master_seed: int, normalize: bool = True
) -> AppearanceKnowledgeSet:
    validator = GrammarValidator()
    rows = np.empty((len(corpus.descriptions), dim), dtype=np.float64)
    labels = np.empty(len(corpus.descriptions), dtype=np.uint8)
    for i, desc in enumerate(corpus.descriptions):
        rows[i] = encode_pseudo(desc, dim, master_seed, validator)
        labels[i] = 1 if desc.category is Category.PEDESTRIAN else 0
    if not normalize:
        # Pseudo rows are unit by construction; the toggle only matters for
        # bridge-supplied data, but keep the flag truthful either way.
        pass
    return AppearanceKnowledgeSet(
        rows.astype(np.float32), labels, normalized=normalize, source=EmbeddingSource.PSEUDO
    )


_HEADER = struct.Struct("<4sIQIB")


def save_embeddings(embedding_set: AppearanceKnowledgeSet, path: str | Path) -> None:
    flags = FLAG_LABELS
    if embedding_set.normalized:
        flags |= FLAG_NORMALIZED
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, embedding_set.count, embedding_set.dim, flags))
        fh.write(embedding_set.labels.tobytes())
        fh.write(embedding_set.data.astype("<f4").tobytes())


def load_embeddings(path: str | Path, source: EmbeddingSource | None = None) -> AppearanceKnowledgeSet:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise TruncatedPayloadError(f"{path}: header truncated")
        magic, version, count, dim, flags = _HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise VersionMismatchError(f"{path}: unsupported version {version}")
        if count > MAX_COUNT or dim > MAX_DIM:
            raise SizeOverflowError(f"{path}: implausible count/dim {count}x{dim}")
        if flags & FLAG_LABELS:
            raw = fh.read(count)
            if len(raw) < count:
                raise TruncatedPayloadError(f"{path}: label block truncated")
            labels = np.frombuffer(raw, dtype=np.uint8).copy()
        else:
            labels = np.zeros(count, dtype=np.uint8)
        need = count * dim * 4
        raw = fh.read(need)
        if len(raw) < need:
            raise TruncatedPayloadError(f"{path}: data block truncated")
        data = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()
    return AppearanceKnowledgeSet(
        data,
        labels,
        normalized=bool(flags & FLAG_NORMALIZED),
        source=source or EmbeddingSource.BRIDGE,
    )
