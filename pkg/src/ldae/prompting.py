"""Element composition (centroid + learnable prompt) and BCE prompt tuning."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .clustering import CentroidSet, ElementPartition
from .embeddings import AppearanceKnowledgeSet


@dataclass
class PromptSet:
    prompts: np.ndarray  # (K, d) float64
    init_scheme: str = "zeros"
    steps_trained: int = 0

    def digest(self) -> str:
        return hashlib.blake2b(
            np.ascontiguousarray(self.prompts).tobytes(), digest_size=16
        ).hexdigest()


@dataclass
class ClassifierHead:
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, 1)
    b2: np.ndarray  # (1,)

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @staticmethod
    def init(dim: int, hidden: int, seed: int) -> "ClassifierHead":
        if hidden < 1:
            raise ValueError("hidden width must be >= 1")
        rng = ad.RngStream(seed)
        return ClassifierHead(
            w1=rng.normal(dim, hidden, scale=1.0 / np.sqrt(dim)),
            b1=np.zeros(hidden),
            w2=rng.normal(hidden, 1, scale=1.0 / np.sqrt(hidden)),
            b2=np.zeros(1),
        )

    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class ElementSet:
    elements: np.ndarray  # (K, d)
    partition: ElementPartition
    centroid_digest: str
    prompt_digest: str

    @property
    def k(self) -> int:
        return self.elements.shape[0]

    @property
    def dim(self) -> int:
        return self.elements.shape[1]


def compose_elements(
    centroid_set: CentroidSet, prompt_set: PromptSet, partition: ElementPartition
) -> ElementSet:
    """Elementwise sum per row: element_i = centroid_i + prompt_i."""
    if centroid_set.centroids.shape != prompt_set.prompts.shape:
        raise ValueError(
            f"shape mismatch: centroids {centroid_set.centroids.shape} "
            f"vs prompts {prompt_set.prompts.shape}"
        )
    return ElementSet(
        elements=centroid_set.centroids + prompt_set.prompts,
        partition=partition,
        centroid_digest=centroid_set.digest(),
        prompt_digest=prompt_set.digest(),
    )


def head_logits(e: ad.Tensor, head_params: list[ad.Tensor]) -> ad.Tensor:
    w1, b1, w2, b2 = head_params
    hidden = ad.relu(ad.add(ad.matmul(e, w1), b1))
    return ad.add(ad.matmul(hidden, w2), b2)


def classify_element(element: np.ndarray, head: ClassifierHead) -> float:
    """sigmoid(W2 . relu(W1 . e + b1) + b2)"""
    e = np.atleast_2d(np.asarray(element, dtype=np.float64))
    hidden = np.maximum(e @ head.w1 + head.b1, 0.0)
    logit = hidden @ head.w2 + head.b2
    return float(1.0 / (1.0 + np.exp(-logit[0, 0])))


@dataclass(frozen=True)
class TuneConfig:
    lr: float = 0.1
    epochs: int = 20
    batch: int = 256
    seed: int = 0
    hidden: int = 256
    strict_prompts_only: bool = False


def prompt_tune(
    knowledge: AppearanceKnowledgeSet,
    centroid_set: CentroidSet,
    assignments: np.ndarray,
    config: TuneConfig = TuneConfig(),
) -> tuple[PromptSet, ClassifierHead, list[float]]:
    """Tune prompts (and, unless strict, the classifier head) with plain SGD.

    Each sample routes through the element of its assigned centroid; centroids
    stay frozen throughout. Returns (prompts, head, per-epoch mean BCE).
    """
    if config.lr <= 0:
        raise ValueError("learning rate must be positive")
    if knowledge.count == 0:
        raise ValueError("empty knowledge set")
    data = np.asarray(knowledge.data, dtype=np.float64)
    labels = np.asarray(knowledge.labels, dtype=np.float64).reshape(-1, 1)
    assignments = np.asarray(assignments, dtype=np.intp)
    if assignments.shape != (knowledge.count,):
        raise ValueError("assignments must cover every sample")

    k, d = centroid_set.centroids.shape
    prompts = np.zeros((k, d))
    head = ClassifierHead.init(d, config.hidden, config.seed)
    rng = ad.RngStream(config.seed + 1)
    centroids = centroid_set.centroids

    curve: list[float] = []
    steps = 0
    for _ in range(config.epochs):
        order = rng.permutation(knowledge.count)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, knowledge.count, config.batch):
            idx = order[start : start + config.batch]
            p_leaf = ad.Tensor(prompts, requires_grad=True)
            head_leaves = [ad.Tensor(p, requires_grad=True) for p in head.params()]
            elements = ad.add(ad.Tensor(centroids), p_leaf)
            batch_elements = ad.gather_rows(elements, assignments[idx])
            logits = head_logits(batch_elements, head_leaves)
            loss = ad.bce_with_logits(logits, labels[idx])
            loss.backward()

            prompts -= config.lr * p_leaf.grad
            if not config.strict_prompts_only:
                for param, leaf in zip(head.params(), head_leaves):
                    param -= config.lr * leaf.grad
            epoch_loss += loss.item()
            n_batches += 1
            steps += 1
        curve.append(epoch_loss / n_batches)

    return PromptSet(prompts, steps_trained=steps), head, curve


def tuning_loss(
    labels_batch: np.ndarray,
    centroids: np.ndarray,
    assignments_batch: np.ndarray,
    leaves: list[ad.Tensor],
) -> ad.Tensor:
    """The prompt-tuning objective as a function of [prompts, w1, b1, w2, b2];
    used by the finite-difference suite."""
    p_leaf, *head_leaves = leaves
    elements = ad.add(ad.Tensor(centroids), p_leaf)
    batch_elements = ad.gather_rows(elements, assignments_batch)
    logits = head_logits(batch_elements, head_leaves)
    return ad.bce_with_logits(logits, labels_batch.reshape(-1, 1))
