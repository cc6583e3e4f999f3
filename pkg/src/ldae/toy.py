"""Synthetic detection-like harness: per-query pedestrian/background
classification with optional element fusion, plus the K-sweep and parameter
overhead ablations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .clustering import assign_all, kmeans, label_elements
from .corpus import Category, GenerationConfig, derive_seed, generate_corpus, make_rng
from .embeddings import encode_corpus, encode_pseudo
from .integration import (
    IntegrationConfig,
    IntegrationModule,
    correct_partition_mass,
    integrate_graph,
    reference_loss_graph,
)
from .lexicon import AttributeLexicon, build_lexicon
from .corpus import GrammarValidator, render_background, render_pedestrian, Description
from .prompting import ElementSet, TuneConfig, compose_elements, prompt_tune


@dataclass(frozen=True)
class ToyDataConfig:
    n: int = 5000
    d_visual: int = 64
    sigma_v: float = 0.3
    seed: int = 0
    embed_dim: int = 128


@dataclass
class ToyDataset:
    queries: np.ndarray  # (N, d_v)
    labels: np.ndarray  # (N,) 1 pedestrian / 0 background
    config: ToyDataConfig


def synth_dataset(config: ToyDataConfig, lexicon: AttributeLexicon | None = None) -> ToyDataset:
    """Queries are a fixed random projection of pseudo-encoded rendered
    descriptions plus isotropic noise; labels follow the rendered category."""
    if config.n < 2:
        raise ValueError("need at least 2 queries")
    if config.d_visual < 8:
        raise ValueError("d_visual must be >= 8")
    if config.sigma_v < 0:
        raise ValueError("sigma_v must be >= 0")
    lexicon = lexicon or build_lexicon()
    validator = GrammarValidator(lexicon)
    proj_rng = make_rng(derive_seed(config.seed, "toy-projection"))
    # Unit-variance projection coordinates for unit embeddings, so sigma_v is
    # directly the noise-to-signal knob.
    w_vis = proj_rng.standard_normal((config.embed_dim, config.d_visual))
    queries = np.empty((config.n, config.d_visual))
    labels = np.empty(config.n, dtype=np.uint8)
    for i in range(config.n):
        rng = make_rng(derive_seed(config.seed, "toy-item", i))
        is_ped = rng.random() < 0.5
        if is_ped:
            text, attrs, tid = render_pedestrian(rng, lexicon)
            category = Category.PEDESTRIAN
        else:
            text, attrs, tid = render_background(rng, lexicon)
            category = Category.BACKGROUND
        desc = Description(i, text, category, attrs, tid, config.seed)
        emb = encode_pseudo(desc, config.embed_dim, config.seed, validator)
        noise = rng.standard_normal(config.d_visual)
        queries[i] = emb @ w_vis + config.sigma_v * noise
        labels[i] = int(is_ped)
    return ToyDataset(queries, labels, config)


@dataclass(frozen=True)
class ToyTrainConfig:
    epochs: int = 35
    lr: float = 0.3
    batch: int = 256
    seed: int = 0
    eval_fraction: float = 0.2
    # At uniform attention the reference loss sits at 1/K, so it needs a large
    # weight to reach gradient parity with the BCE term.
    integration: IntegrationConfig = IntegrationConfig(ref_weight=1000.0)


@dataclass
class EpochMetrics:
    task_loss: float
    ref_loss: float
    accuracy: float
    average_precision: float
    correct_mass: float


@dataclass
class ToyRun:
    config: ToyTrainConfig
    data_config: ToyDataConfig
    k: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    param_count: int = 0

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]

    def to_record(self) -> dict:
        return {
            "k": self.k,
            "seed": self.config.seed,
            "param_count": self.param_count,
            "epochs": [vars(m) for m in self.epochs],
        }


def binary_average_precision(labels: np.ndarray, scores: np.ndarray) -> float:
    """AP as the precision-weighted mean over positives, scanned by score."""
    order = np.argsort(-scores, kind="stable")
    sorted_labels = np.asarray(labels)[order].astype(float)
    tp = np.cumsum(sorted_labels)
    precision = tp / np.arange(1, len(sorted_labels) + 1)
    n_pos = sorted_labels.sum()
    if n_pos == 0:
        return 0.0
    return float((precision * sorted_labels).sum() / n_pos)


def train_toy(
    dataset: ToyDataset,
    elements: ElementSet | None,
    config: ToyTrainConfig = ToyTrainConfig(),
) -> ToyRun:
    """Train the per-query classifier, with or without element fusion.

    With elements, the model is integration module -> linear classifier and the
    loss is BCE + ref_weight * reference loss; without, it is the bare linear
    classifier (the K=0 baseline).
    """
    if dataset.queries.shape[0] == 0:
        raise ValueError("empty dataset")
    n = dataset.queries.shape[0]
    n_eval = max(1, int(round(n * config.eval_fraction)))
    train_q, eval_q = dataset.queries[: n - n_eval], dataset.queries[n - n_eval :]
    train_y, eval_y = dataset.labels[: n - n_eval], dataset.labels[n - n_eval :]

    d_v = dataset.queries.shape[1]
    icfg = config.integration
    if icfg.d_visual != d_v:
        icfg = replace(icfg, d_visual=d_v)

    rng = ad.RngStream(derive_seed(config.seed, "toy-train"))
    w_cls = rng.normal(d_v, 1, scale=1.0 / np.sqrt(d_v))
    b_cls = np.zeros(1)

    module: IntegrationModule | None = None
    element_matrix = None
    partition = None
    if elements is not None:
        if elements.partition is None or len(elements.partition.labels) != elements.k:
            raise ValueError("elements/partition mismatch")
        module = IntegrationModule.init(
            elements.dim, icfg, seed=derive_seed(config.seed, "toy-module")
        )
        element_matrix = elements.elements
        partition = elements.partition

    run = ToyRun(config=config, data_config=dataset.config, k=0 if elements is None else elements.k)
    run.param_count = w_cls.size + b_cls.size + (module.param_count() if module else 0)

    def forward_eval(q: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if module is None:
            return (q @ w_cls + b_cls).ravel(), None
        leaves = [ad.Tensor(p) for p in module.params()]
        fused, attn = integrate_graph(q, element_matrix, leaves, icfg)
        return (fused.data @ w_cls + b_cls).ravel(), attn.data

    for _ in range(config.epochs):
        order = rng.permutation(len(train_q))
        task_sum = ref_sum = 0.0
        batches = 0
        for start in range(0, len(train_q), config.batch):
            idx = order[start : start + config.batch]
            qb, yb = train_q[idx], train_y[idx].astype(float)
            cls_leaves = [ad.Tensor(w_cls, requires_grad=True), ad.Tensor(b_cls, requires_grad=True)]
            if module is None:
                logits = ad.add(ad.matmul(ad.Tensor(qb), cls_leaves[0]), cls_leaves[1])
                loss = ad.bce_with_logits(logits, yb.reshape(-1, 1))
                ref_val = 0.0
                mod_leaves = []
            else:
                mod_leaves = [ad.Tensor(p, requires_grad=True) for p in module.params()]
                fused, attn = integrate_graph(qb, element_matrix, mod_leaves, icfg)
                logits = ad.add(ad.matmul(fused, cls_leaves[0]), cls_leaves[1])
                task = ad.bce_with_logits(logits, yb.reshape(-1, 1))
                ref = reference_loss_graph(attn, partition, yb)
                ref_val = ref.item()
                loss = ad.add(task, ad.scale(ref, icfg.ref_weight))
            loss.backward()
            for param, leaf in zip([w_cls, b_cls], cls_leaves):
                param -= config.lr * leaf.grad
            if module is not None:
                for param, leaf in zip(module.params(), mod_leaves):
                    param -= config.lr * leaf.grad
            task_sum += loss.item() - icfg.ref_weight * ref_val
            ref_sum += ref_val
            batches += 1

        scores, attn = forward_eval(eval_q)
        acc = float(((scores > 0).astype(int) == eval_y).mean())
        ap = binary_average_precision(eval_y, scores)
        mass = (
            correct_partition_mass(attn, partition, eval_y) if attn is not None else 0.0
        )
        run.epochs.append(
            EpochMetrics(task_sum / batches, ref_sum / batches, acc, ap, mass)
        )
    return run


@dataclass(frozen=True)
class SweepConfig:
    ks: tuple[int, ...] = (0, 100, 200, 300)
    seeds: tuple[int, ...] = (0, 1, 2)
    n_ped: int = 5000
    n_bg: int = 5000
    embed_dim: int = 128
    data: ToyDataConfig = ToyDataConfig()
    train: ToyTrainConfig = ToyTrainConfig()
    tune: TuneConfig = TuneConfig(epochs=20)


@dataclass
class SweepRow:
    k: int
    seed: int
    accuracy: float
    average_precision: float
    correct_mass: float


def build_elements(
    knowledge, k: int, seed: int, tune_config: TuneConfig
) -> ElementSet:
    """Cluster -> assign -> label -> prompt-tune -> compose, in one shot."""
    centroid_set = kmeans(knowledge, k, seed=seed)
    assignments = assign_all(knowledge.data, centroid_set)
    partition = label_elements(assignments, knowledge.labels, k)
    prompts, head, curve = prompt_tune(
        knowledge, centroid_set, assignments, replace(tune_config, seed=seed)
    )
    return compose_elements(centroid_set, prompts, partition)


def ablation_k_sweep(config: SweepConfig = SweepConfig()) -> list[SweepRow]:
    """Rerun cluster -> tune -> train per (K, seed); K=0 is the baseline."""
    if not config.ks:
        raise ValueError("ks must be non-empty")
    rows: list[SweepRow] = []
    for seed in config.seeds:
        corpus = generate_corpus(
            GenerationConfig(n_ped=config.n_ped, n_bg=config.n_bg, seed=seed)
        )
        knowledge = encode_corpus(corpus, config.embed_dim, master_seed=seed)
        dataset = synth_dataset(
            replace(config.data, seed=seed, embed_dim=config.embed_dim)
        )
        for k in config.ks:
            elements = (
                build_elements(knowledge, k, seed, config.tune) if k > 0 else None
            )
            run = train_toy(dataset, elements, replace(config.train, seed=seed))
            rows.append(
                SweepRow(
                    k=k,
                    seed=seed,
                    accuracy=run.final.accuracy,
                    average_precision=run.final.average_precision,
                    correct_mass=run.final.correct_mass,
                )
            )
    return rows


def sweep_means(rows: list[SweepRow]) -> dict[int, dict[str, float]]:
    out: dict[int, dict[str, float]] = {}
    for k in sorted({r.k for r in rows}):
        accs = [r.accuracy for r in rows if r.k == k]
        aps = [r.average_precision for r in rows if r.k == k]
        masses = [r.correct_mass for r in rows if r.k == k]
        out[k] = {
            "accuracy_mean": float(np.mean(accs)),
            "accuracy_sd": float(np.std(accs)),
            "ap_mean": float(np.mean(aps)),
            "ap_sd": float(np.std(aps)),
            "correct_mass_mean": float(np.mean(masses)),
        }
    return out


def overhead_report(params_with: int, params_without: int) -> dict:
    added = params_with - params_without
    return {
        "module_params": added,
        "total_params": params_with,
        "baseline_params": params_without,
        "ratio": added / params_without if params_without else 0.0,
    }
