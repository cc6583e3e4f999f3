"""Cross-attention fusion of visual query features with appearance elements,
plus the attention-routing reference loss."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import ElementPartition


class DegeneratePartitionError(ValueError):
    """Reference loss needs a non-empty penalized partition for the active branch."""


@dataclass(frozen=True)
class IntegrationConfig:
    d_visual: int = 64
    d_model: int = 64
    heads: int = 8
    ref_weight: float = 1.0
    strict_single_softmax: bool = False
    biases: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.ref_weight < 0:
            raise ValueError("ref_weight must be >= 0")


@dataclass
class IntegrationModule:
    w_q: np.ndarray  # (d_v, d_m)
    w_k: np.ndarray  # (d, d_m)
    w_v: np.ndarray  # (d, d_m)
    w_o: np.ndarray  # (d_m, d_v)
    b_q: np.ndarray
    b_v: np.ndarray
    b_o: np.ndarray
    ln_gamma: np.ndarray  # (d_v,)
    ln_beta: np.ndarray
    config: IntegrationConfig

    # No key-projection bias: a shared key offset shifts every score in a row
    # by the same amount, which the softmax cancels, leaving a dead parameter.
    PARAM_NAMES = ("w_q", "w_k", "w_v", "w_o", "b_q", "b_v", "b_o", "ln_gamma", "ln_beta")

    @staticmethod
    def init(element_dim: int, config: IntegrationConfig, seed: int = 0) -> "IntegrationModule":
        rng = ad.RngStream(seed)
        d_v, d_m = config.d_visual, config.d_model
        return IntegrationModule(
            w_q=rng.normal(d_v, d_m, scale=1.0 / np.sqrt(d_v)),
            # Element rows are near unit norm, so unit-scale key entries keep
            # initial attention scores O(1) instead of collapsing to uniform.
            w_k=rng.normal(element_dim, d_m, scale=1.0),
            w_v=rng.normal(element_dim, d_m, scale=1.0 / np.sqrt(element_dim)),
            w_o=rng.normal(d_m, d_v, scale=1.0 / np.sqrt(d_m)),
            b_q=np.zeros(d_m),
            b_v=np.zeros(d_m),
            b_o=np.zeros(d_v),
            ln_gamma=np.ones(d_v),
            ln_beta=np.zeros(d_v),
            config=config,
        )

    def params(self) -> list[np.ndarray]:
        out = [self.w_q, self.w_k, self.w_v, self.w_o]
        if self.config.biases:
            out += [self.b_q, self.b_v, self.b_o]
        out += [self.ln_gamma, self.ln_beta]
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params())


def analytic_param_count(element_dim: int, config: IntegrationConfig) -> int:
    d_v, d_m = config.d_visual, config.d_model
    count = d_v * d_m + 2 * element_dim * d_m + d_m * d_v + 2 * d_v
    if config.biases:
        count += 2 * d_m + d_v
    return count


def integrate_graph(
    q_visual: np.ndarray,
    elements: np.ndarray,
    param_leaves: list[ad.Tensor],
    config: IntegrationConfig,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Differentiable forward pass; returns (fused N x d_v, attn N x K).

    attn is the head-mean distribution over elements, or the single softmax over
    full-width projected scores in strict mode (identical for heads=1).
    """
    if q_visual.shape[1] != config.d_visual:
        raise ValueError(f"query dim {q_visual.shape[1]} != d_visual {config.d_visual}")
    if config.biases:
        w_q, w_k, w_v, w_o, b_q, b_v, b_o, gamma, beta = param_leaves
    else:
        w_q, w_k, w_v, w_o, gamma, beta = param_leaves
        b_q = b_v = b_o = None
    if elements.shape[1] != w_k.data.shape[0]:
        raise ValueError(f"element dim {elements.shape[1]} != key dim {w_k.data.shape[0]}")

    qv = ad.Tensor(q_visual)
    e = ad.Tensor(elements)

    def project(x, w, b):
        y = ad.matmul(x, w)
        return ad.add(y, b) if b is not None else y

    q = project(qv, w_q, b_q)
    k = ad.matmul(e, w_k)
    v = project(e, w_v, b_v)

    heads = config.heads
    dh = config.d_model // heads
    head_scale = 1.0 / np.sqrt(dh)
    contexts = []
    attn_sum = None
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), head_scale)
        a = ad.softmax_rows(scores)
        contexts.append(ad.matmul(a, vh))
        attn_sum = a if attn_sum is None else ad.add(attn_sum, a)

    context = contexts[0] if heads == 1 else ad.concat_cols(contexts)
    out = project(context, w_o, b_o)
    fused = ad.layer_norm(ad.add(qv, out), gamma, beta)

    if config.strict_single_softmax:
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(config.d_model))
        attn = ad.softmax_rows(scores)
    else:
        attn = ad.scale(attn_sum, 1.0 / heads)
    return fused, attn


def integrate_forward(
    q_visual: np.ndarray,
    elements: np.ndarray,
    module: IntegrationModule,
    config: IntegrationConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    config = config or module.config
    leaves = [ad.Tensor(p) for p in module.params()]
    fused, attn = integrate_graph(
        np.asarray(q_visual, dtype=np.float64),
        np.asarray(elements, dtype=np.float64),
        leaves,
        config,
    )
    return fused.data, attn.data


def _ref_mask(partition: ElementPartition, is_ped: np.ndarray) -> np.ndarray:
    """Per-query weight rows: mass on the penalized partition, averaged within it."""
    is_ped = np.asarray(is_ped, dtype=np.float64).reshape(-1)
    k = len(partition.labels)
    ped_idx = partition.pedestrian_indices
    bg_idx = partition.background_indices
    if is_ped.max(initial=0.0) > 0 and bg_idx.size == 0:
        raise DegeneratePartitionError("pedestrian queries present but no background elements")
    if is_ped.min(initial=1.0) < 1 and ped_idx.size == 0:
        raise DegeneratePartitionError("background queries present but no pedestrian elements")
    mask = np.zeros((is_ped.size, k))
    if bg_idx.size:
        mask[np.ix_(is_ped == 1, bg_idx)] = 1.0 / bg_idx.size
    if ped_idx.size:
        mask[np.ix_(is_ped == 0, ped_idx)] = 1.0 / ped_idx.size
    return mask


def reference_loss(
    attn: np.ndarray, partition: ElementPartition, is_ped: np.ndarray
) -> float:
    """Mean attention mass placed on the wrong partition, averaged over queries."""
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    mask = _ref_mask(partition, is_ped)
    return float((attn * mask).sum(axis=1).mean())


def reference_loss_graph(
    attn: ad.Tensor, partition: ElementPartition, is_ped: np.ndarray
) -> ad.Tensor:
    mask = _ref_mask(partition, is_ped)
    return ad.scale(ad.total(ad.mul(attn, mask)), 1.0 / mask.shape[0])


def total_loss(task_loss: float, ref_loss: float, ref_weight: float) -> float:
    if ref_weight < 0:
        raise ValueError("ref_weight must be >= 0")
    return task_loss + ref_weight * ref_loss


def correct_partition_mass(
    attn: np.ndarray, partition: ElementPartition, is_ped: np.ndarray
) -> float:
    """Mean total attention mass each query places on its own partition."""
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    is_ped = np.asarray(is_ped).reshape(-1).astype(bool)
    ped_mass = attn[:, partition.pedestrian_indices].sum(axis=1)
    bg_mass = attn[:, partition.background_indices].sum(axis=1)
    return float(np.where(is_ped, ped_mass, bg_mass).mean())


# ---------------------------------------------------------------------------
# Weight serialization: named sections, one per matrix.

_SECTION_MAGIC = b"LDAW"


def save_module(module: IntegrationModule, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_SECTION_MAGIC)
        cfg = module.config
        fh.write(
            struct.pack(
                "<IIIdBB",
                cfg.d_visual,
                cfg.d_model,
                cfg.heads,
                cfg.ref_weight,
                int(cfg.strict_single_softmax),
                int(cfg.biases),
            )
        )
        fh.write(struct.pack("<I", len(module.PARAM_NAMES)))
        for name in module.PARAM_NAMES:
            arr = np.atleast_2d(np.asarray(getattr(module, name), dtype="<f8"))
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<QI", arr.shape[0], arr.shape[1]))
            fh.write(arr.tobytes())


def load_module(path: str | Path) -> IntegrationModule:
    with open(path, "rb") as fh:
        if fh.read(4) != _SECTION_MAGIC:
            raise ValueError(f"{path}: not a module weights file")
        d_v, d_m, heads, ref_weight, strict, biases = struct.unpack("<IIIdBB", fh.read(22))
        config = IntegrationConfig(d_v, d_m, heads, ref_weight, bool(strict), bool(biases))
        (n_sections,) = struct.unpack("<I", fh.read(4))
        fields = {}
        for _ in range(n_sections):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            rows, cols = struct.unpack("<QI", fh.read(12))
            arr = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            fields[name] = arr.copy()
    for name in ("b_q", "b_v", "b_o", "ln_gamma", "ln_beta"):
        fields[name] = fields[name].ravel()
    return IntegrationModule(config=config, **fields)
