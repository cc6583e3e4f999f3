"""Encode a description corpus (JSONL) with a sentence encoder and write the
LDAE embedding container.

Container layout (little-endian): magic "LDAE", u32 version=1, u64 count M,
u32 dim d, u8 flags (bit0 labels present, bit1 rows L2-normalized), then M
label bytes, then M*d float32 row-major. Matches the consumer's loader exactly.

The corpus format is one JSON object per line with at least "text" and
"category" ("Pedestrian" or "Background"); row order follows line order.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"LDAE"
VERSION = 1
FLAG_LABELS = 0x01
FLAG_NORMALIZED = 0x02
_HEADER = struct.Struct("<4sIQIB")

DEFAULT_MODEL = "sentence-transformers/sentence-t5-base"
HASH_MODEL = "hash"
HASH_DIM = 768


class BridgeError(Exception):
    pass


@dataclass(frozen=True)
class BridgeConfig:
    corpus_path: str
    output_path: str
    model: str = DEFAULT_MODEL
    batch_size: int = 64
    normalize: bool = True
    device: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise BridgeError("batch_size must be >= 1")


class HashEncoder:
    """Deterministic offline stand-in: one seeded gaussian vector per text.

    Mirrors a real encoder's interface and dimensionality (768) so the full
    pipeline can run where model weights cannot be downloaded.
    """

    dim = HASH_DIM

    def encode(self, texts: list[str], batch_size: int) -> np.ndarray:
        rows = np.empty((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            seed = int.from_bytes(
                hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
            )
            gen = np.random.Generator(np.random.Philox(key=seed))
            rows[i] = gen.standard_normal(self.dim, dtype=np.float32)
        return rows


class SentenceTransformerEncoder:
    def __init__(self, model_name: str, device: str | None):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise BridgeError(
                "sentence-transformers is not installed; install the 'model' extra "
                "or use --model hash"
            ) from exc
        try:
            self.model = SentenceTransformer(model_name, device=device)
        except Exception as exc:
            raise BridgeError(f"failed to load model {model_name!r}: {exc}") from exc
        self.dim = int(self.model.get_sentence_embedding_dimension())

    def encode(self, texts: list[str], batch_size: int) -> np.ndarray:
        out = self.model.encode(
            texts,
            batch_size=batch_size,
            convert_to_numpy=True,
            show_progress_bar=False,
            normalize_embeddings=False,
        )
        return np.asarray(out, dtype=np.float32)


def make_encoder(config: BridgeConfig):
    if config.model == HASH_MODEL:
        return HashEncoder()
    return SentenceTransformerEncoder(config.model, config.device)


def read_corpus(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Returns (texts, labels) in line order; aborts with the offending line
    number on malformed input."""
    texts: list[str] = []
    labels: list[int] = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise BridgeError(f"cannot read corpus: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                text = obj["text"]
                category = obj["category"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise BridgeError(f"{path}: malformed JSONL at line {lineno}: {exc}") from exc
            if category not in ("Pedestrian", "Background"):
                raise BridgeError(
                    f"{path}: line {lineno}: unknown category {category!r}"
                )
            texts.append(text)
            labels.append(1 if category == "Pedestrian" else 0)
    if not texts:
        raise BridgeError(f"{path}: corpus is empty")
    return texts, np.asarray(labels, dtype=np.uint8)


def _write_container(
    path: str | Path, data: np.ndarray, labels: np.ndarray, normalized: bool
) -> None:
    flags = FLAG_LABELS | (FLAG_NORMALIZED if normalized else 0)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1], flags))
        fh.write(labels.tobytes())
        fh.write(data.astype("<f4").tobytes())
    os.replace(tmp, path)  # atomic: no partial file on failure


def bridge_encode(config: BridgeConfig) -> dict:
    """Encode the corpus and write the container; returns a summary dict."""
    texts, labels = read_corpus(config.corpus_path)
    encoder = make_encoder(config)
    chunks = []
    for start in range(0, len(texts), config.batch_size):
        chunks.append(encoder.encode(texts[start : start + config.batch_size], config.batch_size))
    data = np.concatenate(chunks, axis=0).astype(np.float32)
    if data.shape != (len(texts), encoder.dim):
        raise BridgeError(
            f"encoder returned shape {data.shape}, expected {(len(texts), encoder.dim)}"
        )
    if config.normalize:
        norms = np.linalg.norm(data, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise BridgeError("zero-norm embedding row; cannot normalize")
        data = data / norms
    _write_container(config.output_path, data, labels, config.normalize)
    digest = hashlib.blake2b(digest_size=16)
    digest.update(data.astype("<f4").tobytes())
    digest.update(labels.tobytes())
    return {
        "count": len(texts),
        "dim": int(encoder.dim),
        "pedestrian": int(labels.sum()),
        "background": int(len(labels) - labels.sum()),
        "digest": digest.hexdigest(),
        "output": str(config.output_path),
    }


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ldae-bridge",
        description="Encode a description corpus into the LDAE embedding container.",
    )
    parser.add_argument("--corpus", required=True, help="input corpus JSONL")
    parser.add_argument("--out", required=True, help="output container path")
    parser.add_argument(
        "--model",
        default=DEFAULT_MODEL,
        help=f"sentence-transformers model id, or '{HASH_MODEL}' for the offline stand-in",
    )
    parser.add_argument("--batch", type=int, default=64, help="encoder batch size")
    parser.add_argument(
        "--normalize",
        default=True,
        action=argparse.BooleanOptionalAction,
        help="L2-normalize rows (default on)",
    )
    parser.add_argument("--device", default=None, help="device hint, e.g. cpu or cuda")
    args = parser.parse_args(argv)
    try:
        summary = bridge_encode(
            BridgeConfig(
                corpus_path=args.corpus,
                output_path=args.out,
                model=args.model,
                batch_size=args.batch,
                normalize=args.normalize,
                device=args.device,
            )
        )
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"wrote {summary['output']}: {summary['count']} x {summary['dim']} "
        f"({summary['pedestrian']} pedestrian / {summary['background']} background), "
        f"digest {summary['digest']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
