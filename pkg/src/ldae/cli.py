"""Pipeline driver: every stage as a subcommand over a shared JSON config.

Artifacts live under a single output directory; each completed stage appends a
manifest line (stage, input digests, output digest, wall time) to manifest.jsonl.
Re-running a stage whose inputs are unchanged is a no-op unless --force.

Exit codes: 0 success, 2 config error, 3 missing stage dependency, 4 check failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .clustering import (
    CentroidSet,
    ElementPartition,
    assign_all,
    attribute_report,
    kmeans,
    label_elements,
)
from .corpus import Corpus, GenerationConfig, derive_seed, generate_corpus
from .embeddings import (
    AppearanceKnowledgeSet,
    EmbeddingSource,
    encode_corpus,
    load_embeddings,
    save_embeddings,
)
from .integration import IntegrationConfig, IntegrationModule, integrate_graph, reference_loss_graph
from .prompting import PromptSet, TuneConfig, compose_elements, prompt_tune, tuning_loss
from .toy import (
    SweepConfig,
    ToyDataConfig,
    ToyTrainConfig,
    ablation_k_sweep,
    build_elements,
    overhead_report,
    sweep_means,
    synth_dataset,
    train_toy,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_CHECK = 4

GRADCHECK_TOLERANCE = 1e-4

DEFAULT_CONFIG: dict = {
    "corpus": {"n_ped": 5000, "n_bg": 5000, "seed": 0, "external_bg_file": None},
    "embedding": {"provider": "pseudo", "dim": 128, "normalize": True, "file": None},
    "cluster": {"k": 200, "seed": 0, "max_iters": 100, "rel_tol": 1e-6},
    "tune": {"lr": 0.1, "epochs": 20, "batch": 256, "hidden": 256, "strict_prompts_only": False},
    "integrate": {
        "d_visual": 64,
        "d_model": 64,
        "heads": 8,
        "ref_weight": 1000.0,
        "strict_single_softmax": False,
    },
    "toy": {
        "n": 5000,
        "sigma_v": 0.3,
        "seed": 0,
        "epochs": 35,
        "lr": 0.3,
        "batch": 256,
        "eval_fraction": 0.2,
        "seeds": [0, 1, 2],
        "ks": [0, 100, 200, 300],
    },
}


class ConfigError(Exception):
    pass


class DependencyError(Exception):
    pass


class CheckError(Exception):
    pass


# --------------------------------------------------------------------------
# Config handling


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"{where}: unknown config field")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def _check_range(cfg: dict, block: str, field: str, kind, low=None, high=None, optional=False):
    value = cfg[block][field]
    where = f"{block}.{field}"
    if value is None:
        if optional:
            return
        raise ConfigError(f"{where}: required")
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
        cfg[block][field] = value
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__}")
    if low is not None and value < low:
        raise ConfigError(f"{where}: must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ConfigError(f"{where}: must be <= {high}, got {value}")


def validate_config(cfg: dict) -> dict:
    """Range-check every block; raises ConfigError with the offending field path."""
    _check_range(cfg, "corpus", "n_ped", int, 1)
    _check_range(cfg, "corpus", "n_bg", int, 1)
    _check_range(cfg, "corpus", "seed", int, 0)
    _check_range(cfg, "embedding", "dim", int, 8)
    if cfg["embedding"]["provider"] not in ("pseudo", "file"):
        raise ConfigError("embedding.provider: must be 'pseudo' or 'file'")
    if cfg["embedding"]["provider"] == "file" and not cfg["embedding"]["file"]:
        raise ConfigError("embedding.file: required when embedding.provider='file'")
    _check_range(cfg, "cluster", "k", int, 1)
    _check_range(cfg, "cluster", "max_iters", int, 1)
    _check_range(cfg, "cluster", "rel_tol", float, 0.0)
    _check_range(cfg, "tune", "lr", float, 1e-12)
    _check_range(cfg, "tune", "epochs", int, 0)
    _check_range(cfg, "tune", "batch", int, 1)
    _check_range(cfg, "tune", "hidden", int, 1)
    _check_range(cfg, "integrate", "d_visual", int, 8)
    _check_range(cfg, "integrate", "d_model", int, 1)
    _check_range(cfg, "integrate", "heads", int, 1)
    _check_range(cfg, "integrate", "ref_weight", float, 0.0)
    if cfg["integrate"]["d_model"] % cfg["integrate"]["heads"] != 0:
        raise ConfigError("integrate.heads: must divide integrate.d_model")
    _check_range(cfg, "toy", "n", int, 2)
    _check_range(cfg, "toy", "sigma_v", float, 0.0)
    _check_range(cfg, "toy", "epochs", int, 1)
    _check_range(cfg, "toy", "lr", float, 1e-12)
    _check_range(cfg, "toy", "eval_fraction", float, 0.0, 0.5)
    for name in ("seeds", "ks"):
        values = cfg["toy"][name]
        if not isinstance(values, list) or not values or not all(
            isinstance(v, int) and v >= 0 for v in values
        ):
            raise ConfigError(f"toy.{name}: must be a non-empty list of non-negative ints")
    return cfg


def _apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        dotted, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node: dict = {}
        leaf = node
        keys = dotted.split(".")
        for key in keys[:-1]:
            leaf[key] = {}
            leaf = leaf[key]
        leaf[keys[-1]] = value
        cfg = _merge(cfg, node)
    return cfg


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = DEFAULT_CONFIG
    if path:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(file_path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _apply_overrides(cfg, overrides)
    return validate_config(json.loads(json.dumps(cfg)))


# --------------------------------------------------------------------------
# Manifest / artifact plumbing


def file_digest(path: Path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Output directory plus the manifest log."""

    def __init__(self, out_dir: Path, force: bool = False):
        self.out = out_dir
        self.force = force
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "manifest.jsonl"

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str, producer: str) -> Path:
        """Return an input artifact path or raise naming the stage that makes it."""
        p = self.path(name)
        if not p.exists():
            raise DependencyError(f"missing {name}; run `ldae {producer}` first")
        return p

    def _last_entry(self, stage: str) -> dict | None:
        if not self.manifest_path.exists():
            return None
        entry = None
        for line in self.manifest_path.read_text().splitlines():
            record = json.loads(line)
            if record["stage"] == stage:
                entry = record
        return entry

    def up_to_date(self, stage: str, inputs: dict[str, str], outputs: list[str]) -> bool:
        if self.force:
            return False
        last = self._last_entry(stage)
        if last is None or last["inputs"] != inputs:
            return False
        return all(self.path(name).exists() for name in outputs)

    def record(self, stage: str, inputs: dict[str, str], outputs: list[str], wall: float) -> None:
        entry = {
            "stage": stage,
            "inputs": inputs,
            "outputs": {name: file_digest(self.path(name)) for name in outputs},
            "wall_time_s": round(wall, 3),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        with open(self.manifest_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        print(f"[{stage}] wrote {', '.join(outputs)} in {wall:.1f}s")


def _config_digest(block: dict) -> str:
    return hashlib.blake2b(
        json.dumps(block, sort_keys=True).encode(), digest_size=16
    ).hexdigest()


# --------------------------------------------------------------------------
# Stages

CORPUS_FILE = "corpus.jsonl"
EMBED_FILE = "embeddings.ldae"
CENTROID_FILE = "centroids.ldae"
ELEMENT_FILE = "elements.ldae"
TUNE_CURVE_FILE = "tune_curve.csv"
REPORT_JSON = "attribute_report.json"
TOY_RUN_FILE = "toy_run.json"
SWEEP_CSV = "sweep.csv"
GRADCHECK_FILE = "gradcheck.json"
REPORT_CSV = "report.csv"
SWEEP_FIGURE = "k_sweep.svg"
CURVE_FIGURE = "tune_curve.svg"


def stage_gen_corpus(ws: Workspace, cfg: dict) -> None:
    block = cfg["corpus"]
    inputs = {"config": _config_digest(block)}
    if block["external_bg_file"]:
        inputs["external_bg_file"] = file_digest(Path(block["external_bg_file"]))
    if ws.up_to_date("gen-corpus", inputs, [CORPUS_FILE]):
        print("[gen-corpus] up to date")
        return
    start = time.perf_counter()
    corpus = generate_corpus(
        GenerationConfig(
            n_ped=block["n_ped"],
            n_bg=block["n_bg"],
            seed=block["seed"],
            external_bg_file=block["external_bg_file"],
        )
    )
    corpus.save_jsonl(ws.path(CORPUS_FILE))
    ws.record("gen-corpus", inputs, [CORPUS_FILE], time.perf_counter() - start)


def stage_encode(ws: Workspace, cfg: dict) -> None:
    block = cfg["embedding"]
    corpus_path = ws.require(CORPUS_FILE, "gen-corpus")
    inputs = {"config": _config_digest(block), CORPUS_FILE: file_digest(corpus_path)}
    if block["provider"] == "file":
        source = Path(block["file"])
        if not source.exists():
            raise DependencyError(f"embedding.file not found: {source} (produce it with the bridge)")
        inputs["file"] = file_digest(source)
    if ws.up_to_date("encode", inputs, [EMBED_FILE]):
        print("[encode] up to date")
        return
    start = time.perf_counter()
    corpus = Corpus.load_jsonl(corpus_path)
    if block["provider"] == "pseudo":
        knowledge = encode_corpus(
            corpus, block["dim"], master_seed=cfg["corpus"]["seed"], normalize=block["normalize"]
        )
    else:
        knowledge = load_embeddings(Path(block["file"]), source=EmbeddingSource.BRIDGE)
        if knowledge.count != len(corpus.descriptions):
            raise CheckError(
                f"embedding.file has {knowledge.count} rows, corpus has {len(corpus.descriptions)}"
            )
    save_embeddings(knowledge, ws.path(EMBED_FILE))
    ws.record("encode", inputs, [EMBED_FILE], time.perf_counter() - start)


def _load_knowledge(ws: Workspace) -> AppearanceKnowledgeSet:
    return load_embeddings(ws.require(EMBED_FILE, "encode"), source=EmbeddingSource.PSEUDO)


def _load_centroids_partition(
    ws: Workspace, knowledge: AppearanceKnowledgeSet
) -> tuple[CentroidSet, np.ndarray, ElementPartition]:
    loaded = load_embeddings(ws.require(CENTROID_FILE, "cluster"))
    centroid_set = CentroidSet(
        centroids=np.asarray(loaded.data, dtype=np.float64),
        source_digest=knowledge.digest(),
        iterations=0,
        objective=0.0,
    )
    assignments = assign_all(np.asarray(knowledge.data, dtype=np.float64), centroid_set)
    partition = label_elements(assignments, knowledge.labels, centroid_set.k)
    return centroid_set, assignments, partition


def stage_cluster(ws: Workspace, cfg: dict) -> None:
    block = cfg["cluster"]
    embed_path = ws.require(EMBED_FILE, "encode")
    inputs = {"config": _config_digest(block), EMBED_FILE: file_digest(embed_path)}
    if ws.up_to_date("cluster", inputs, [CENTROID_FILE]):
        print("[cluster] up to date")
        return
    start = time.perf_counter()
    knowledge = _load_knowledge(ws)
    centroid_set = kmeans(
        knowledge,
        block["k"],
        seed=block["seed"],
        max_iters=block["max_iters"],
        rel_tol=block["rel_tol"],
    )
    assignments = assign_all(np.asarray(knowledge.data, dtype=np.float64), centroid_set)
    partition = label_elements(assignments, knowledge.labels, block["k"])
    save_embeddings(
        AppearanceKnowledgeSet(
            centroid_set.centroids.astype(np.float32), partition.labels, normalized=False
        ),
        ws.path(CENTROID_FILE),
    )
    print(
        f"[cluster] K={block['k']} iterations={centroid_set.iterations} "
        f"objective={centroid_set.objective:.2f} "
        f"pedestrian elements={int(partition.labels.sum())}"
    )
    ws.record("cluster", inputs, [CENTROID_FILE], time.perf_counter() - start)


def stage_tune(ws: Workspace, cfg: dict) -> None:
    block = cfg["tune"]
    embed_path = ws.require(EMBED_FILE, "encode")
    centroid_path = ws.require(CENTROID_FILE, "cluster")
    inputs = {
        "config": _config_digest(block),
        EMBED_FILE: file_digest(embed_path),
        CENTROID_FILE: file_digest(centroid_path),
    }
    if ws.up_to_date("tune", inputs, [ELEMENT_FILE, TUNE_CURVE_FILE]):
        print("[tune] up to date")
        return
    start = time.perf_counter()
    knowledge = _load_knowledge(ws)
    centroid_set, assignments, partition = _load_centroids_partition(ws, knowledge)
    prompts, head, curve = prompt_tune(
        knowledge,
        centroid_set,
        assignments,
        TuneConfig(
            lr=block["lr"],
            epochs=block["epochs"],
            batch=block["batch"],
            seed=cfg["cluster"]["seed"],
            hidden=block["hidden"],
            strict_prompts_only=block["strict_prompts_only"],
        ),
    )
    elements = compose_elements(centroid_set, prompts, partition)
    save_embeddings(
        AppearanceKnowledgeSet(
            elements.elements.astype(np.float32), partition.labels, normalized=False
        ),
        ws.path(ELEMENT_FILE),
    )
    with open(ws.path(TUNE_CURVE_FILE), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_bce"])
        for epoch, value in enumerate(curve):
            writer.writerow([epoch, f"{value:.6f}"])
    if curve:
        print(f"[tune] final epoch-mean BCE {curve[-1]:.4f}")
    ws.record("tune", inputs, [ELEMENT_FILE, TUNE_CURVE_FILE], time.perf_counter() - start)


def stage_analyze(ws: Workspace, cfg: dict) -> None:
    corpus_path = ws.require(CORPUS_FILE, "gen-corpus")
    embed_path = ws.require(EMBED_FILE, "encode")
    centroid_path = ws.require(CENTROID_FILE, "cluster")
    inputs = {
        CORPUS_FILE: file_digest(corpus_path),
        EMBED_FILE: file_digest(embed_path),
        CENTROID_FILE: file_digest(centroid_path),
    }
    if ws.up_to_date("analyze", inputs, [REPORT_JSON]):
        print("[analyze] up to date")
        return
    start = time.perf_counter()
    corpus = Corpus.load_jsonl(corpus_path)
    knowledge = _load_knowledge(ws)
    _, assignments, partition = _load_centroids_partition(ws, knowledge)
    report = attribute_report(partition, corpus, assignments)
    with open(ws.path(REPORT_JSON), "w") as fh:
        json.dump(report, fh, indent=1)
    ws.record("analyze", inputs, [REPORT_JSON], time.perf_counter() - start)


def _toy_configs(cfg: dict) -> tuple[ToyDataConfig, ToyTrainConfig]:
    toy = cfg["toy"]
    integ = cfg["integrate"]
    data_config = ToyDataConfig(
        n=toy["n"],
        d_visual=integ["d_visual"],
        sigma_v=toy["sigma_v"],
        seed=toy["seed"],
        embed_dim=cfg["embedding"]["dim"],
    )
    train_config = ToyTrainConfig(
        epochs=toy["epochs"],
        lr=toy["lr"],
        batch=toy["batch"],
        seed=toy["seed"],
        eval_fraction=toy["eval_fraction"],
        integration=IntegrationConfig(
            d_visual=integ["d_visual"],
            d_model=integ["d_model"],
            heads=integ["heads"],
            ref_weight=integ["ref_weight"],
            strict_single_softmax=integ["strict_single_softmax"],
        ),
    )
    return data_config, train_config


def stage_train_toy(ws: Workspace, cfg: dict) -> None:
    element_path = ws.require(ELEMENT_FILE, "tune")
    inputs = {
        "config": _config_digest({"toy": cfg["toy"], "integrate": cfg["integrate"]}),
        ELEMENT_FILE: file_digest(element_path),
    }
    if ws.up_to_date("train-toy", inputs, [TOY_RUN_FILE]):
        print("[train-toy] up to date")
        return
    start = time.perf_counter()
    loaded = load_embeddings(element_path)
    partition_labels = loaded.labels
    partition = ElementPartition(labels=partition_labels, members=[[] for _ in partition_labels])
    from .prompting import ElementSet

    elements = ElementSet(
        elements=np.asarray(loaded.data, dtype=np.float64),
        partition=partition,
        centroid_digest="",
        prompt_digest="",
    )
    data_config, train_config = _toy_configs(cfg)
    dataset = synth_dataset(data_config)
    baseline = train_toy(dataset, None, train_config)
    run = train_toy(dataset, elements, train_config)
    record = {
        "baseline": baseline.to_record(),
        "with_elements": run.to_record(),
        "overhead": overhead_report(run.param_count, baseline.param_count),
    }
    with open(ws.path(TOY_RUN_FILE), "w") as fh:
        json.dump(record, fh, indent=1)
    print(
        f"[train-toy] baseline acc {baseline.final.accuracy:.4f} | "
        f"with elements acc {run.final.accuracy:.4f} "
        f"mass {run.final.correct_mass:.3f}"
    )
    ws.record("train-toy", inputs, [TOY_RUN_FILE], time.perf_counter() - start)


def _sweep_config(cfg: dict) -> SweepConfig:
    data_config, train_config = _toy_configs(cfg)
    toy = cfg["toy"]
    return SweepConfig(
        ks=tuple(toy["ks"]),
        seeds=tuple(toy["seeds"]),
        n_ped=cfg["corpus"]["n_ped"],
        n_bg=cfg["corpus"]["n_bg"],
        embed_dim=cfg["embedding"]["dim"],
        data=data_config,
        train=train_config,
        tune=TuneConfig(
            lr=cfg["tune"]["lr"],
            epochs=cfg["tune"]["epochs"],
            batch=cfg["tune"]["batch"],
            hidden=cfg["tune"]["hidden"],
        ),
    )


def _sweep_one_seed(args: tuple[dict, int]) -> list[tuple[int, int, float, float, float]]:
    cfg, seed = args
    sweep_cfg = replace(_sweep_config(cfg), seeds=(seed,))
    rows = ablation_k_sweep(sweep_cfg)
    return [(r.k, r.seed, r.accuracy, r.average_precision, r.correct_mass) for r in rows]


def stage_sweep(ws: Workspace, cfg: dict, jobs: int = 1) -> None:
    inputs = {
        "config": _config_digest(
            {key: cfg[key] for key in ("corpus", "embedding", "tune", "integrate", "toy")}
        )
    }
    if ws.up_to_date("sweep", inputs, [SWEEP_CSV]):
        print("[sweep] up to date")
        return
    start = time.perf_counter()
    seeds = cfg["toy"]["seeds"]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            chunks = list(pool.map(_sweep_one_seed, [(cfg, s) for s in seeds]))
        rows = [row for chunk in chunks for row in chunk]
    else:
        rows = [
            (r.k, r.seed, r.accuracy, r.average_precision, r.correct_mass)
            for r in ablation_k_sweep(_sweep_config(cfg))
        ]
    rows.sort(key=lambda row: (row[1], row[0]))  # deterministic order: seed, then K
    with open(ws.path(SWEEP_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "seed", "acc", "ap", "ref_mass"])
        for k, seed, acc, ap, mass in rows:
            writer.writerow([k, seed, f"{acc:.6f}", f"{ap:.6f}", f"{mass:.6f}"])
    ws.record("sweep", inputs, [SWEEP_CSV], time.perf_counter() - start)


# --------------------------------------------------------------------------
# Gradient checking


def gradcheck_suite(n_seeds: int = 20, tolerance: float = GRADCHECK_TOLERANCE) -> dict:
    """Finite-difference checks over every trainable path; returns a result dict."""
    results: dict[str, float] = {}

    for seed in range(n_seeds):
        rng = ad.RngStream(derive_seed(seed, "gradcheck"))

        # Prompt-tuning objective wrt prompts + head parameters.
        # Batch large enough that no ReLU unit is dead across the whole batch
        # (a dead unit's weights would have exactly-zero gradients).
        k, d, h, n = 5, 8, 6, 32
        centroids = rng.normal(k, d)
        # Every centroid gets at least one sample; an unassigned prompt row has
        # an exactly-zero gradient, which the relative-error floor misreads.
        assignments = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
        labels = (rng.normal(n, 1) > 0).astype(float).ravel()
        params = [rng.normal(k, d), rng.normal(d, h), rng.normal(1, h), rng.normal(h, 1), rng.normal(1, 1)]
        err = ad.finite_diff_check(
            lambda leaves: tuning_loss(labels, centroids, assignments, leaves), params
        )
        results[f"tuning_seed{seed}"] = err

        # Integration forward + combined loss wrt all module parameters.
        icfg = IntegrationConfig(d_visual=8, d_model=8, heads=2, ref_weight=2.0)
        module = IntegrationModule.init(d, icfg, seed=derive_seed(seed, "gradcheck-module"))
        queries = rng.normal(4, 8)
        elements = rng.normal(k, d)
        is_ped = (rng.normal(4, 1) > 0).astype(float).ravel()
        part = ElementPartition(
            labels=np.array([1, 1, 0, 0, 1], dtype=np.uint8), members=[[] for _ in range(k)]
        )
        targets = is_ped.reshape(-1, 1)
        w_cls = rng.normal(8, 1)

        def integration_loss(leaves):
            fused, attn = integrate_graph(queries, elements, leaves[:-1], icfg)
            logits = ad.matmul(fused, leaves[-1])
            task = ad.bce_with_logits(logits, targets)
            ref = reference_loss_graph(attn, part, is_ped)
            return ad.add(task, ad.scale(ref, icfg.ref_weight))

        err = ad.finite_diff_check(integration_loss, module.params() + [w_cls])
        results[f"integration_seed{seed}"] = err

    worst = max(results, key=results.get)
    return {
        "checks": len(results),
        "tolerance": tolerance,
        "max_error": float(results[worst]),
        "worst_case": worst,
        "passed": bool(results[worst] <= tolerance),
    }


def stage_gradcheck(ws: Workspace, cfg: dict) -> None:
    start = time.perf_counter()
    summary = gradcheck_suite()
    with open(ws.path(GRADCHECK_FILE), "w") as fh:
        json.dump(summary, fh, indent=1)
    ws.record("gradcheck", {"config": "fixed-battery"}, [GRADCHECK_FILE], time.perf_counter() - start)
    print(
        f"[gradcheck] {summary['checks']} checks, max relative error "
        f"{summary['max_error']:.2e} ({summary['worst_case']})"
    )
    if not summary["passed"]:
        raise CheckError(
            f"gradient check failed: {summary['worst_case']} error "
            f"{summary['max_error']:.2e} > {summary['tolerance']:.0e}"
        )


# --------------------------------------------------------------------------
# Reporting


def _render_sweep_figure(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted({int(r["K"]) for r in rows})
    seeds = sorted({int(r["seed"]) for r in rows})
    fig, (ax_acc, ax_mass) = plt.subplots(1, 2, figsize=(9, 3.5))
    for seed in seeds:
        per_seed = {int(r["K"]): r for r in rows if int(r["seed"]) == seed}
        ax_acc.plot(ks, [float(per_seed[k]["acc"]) for k in ks], marker="o", alpha=0.4, label=f"seed {seed}")
        ax_mass.plot(ks, [float(per_seed[k]["ref_mass"]) for k in ks], marker="o", alpha=0.4)
    mean_acc = [float(np.mean([float(r["acc"]) for r in rows if int(r["K"]) == k])) for k in ks]
    mean_mass = [float(np.mean([float(r["ref_mass"]) for r in rows if int(r["K"]) == k])) for k in ks]
    ax_acc.plot(ks, mean_acc, marker="s", color="black", linewidth=2, label="mean")
    ax_mass.plot(ks, mean_mass, marker="s", color="black", linewidth=2)
    ax_acc.set_xlabel("K (elements)")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_title("Accuracy vs element count")
    ax_acc.legend(fontsize=8)
    ax_mass.set_xlabel("K (elements)")
    ax_mass.set_ylabel("correct-partition attention mass")
    ax_mass.set_title("Attention routing")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _render_curve_figure(curve_path: Path, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(curve_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([int(r["epoch"]) for r in rows], [float(r["mean_bce"]) for r in rows], marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean BCE")
    ax.set_title("Prompt tuning loss")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def stage_report(ws: Workspace, cfg: dict) -> None:
    sweep_path = ws.require(SWEEP_CSV, "sweep")
    inputs = {SWEEP_CSV: file_digest(sweep_path)}
    curve_path = ws.path(TUNE_CURVE_FILE)
    outputs = [REPORT_CSV, SWEEP_FIGURE]
    if curve_path.exists():
        inputs[TUNE_CURVE_FILE] = file_digest(curve_path)
        outputs.append(CURVE_FIGURE)
    if ws.up_to_date("report", inputs, outputs):
        print("[report] up to date")
        return
    start = time.perf_counter()
    with open(sweep_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CheckError(f"{SWEEP_CSV} is empty")
    by_k: dict[int, list[dict]] = {}
    for row in rows:
        by_k.setdefault(int(row["K"]), []).append(row)
    with open(ws.path(REPORT_CSV), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "acc_mean", "acc_sd", "ap_mean", "ref_mass_mean"])
        for k in sorted(by_k):
            accs = [float(r["acc"]) for r in by_k[k]]
            aps = [float(r["ap"]) for r in by_k[k]]
            masses = [float(r["ref_mass"]) for r in by_k[k]]
            writer.writerow(
                [
                    k,
                    f"{np.mean(accs):.6f}",
                    f"{np.std(accs):.6f}",
                    f"{np.mean(aps):.6f}",
                    f"{np.mean(masses):.6f}",
                ]
            )
    _render_sweep_figure(rows, ws.path(SWEEP_FIGURE))
    if curve_path.exists():
        _render_curve_figure(curve_path, ws.path(CURVE_FIGURE))
    ws.record("report", inputs, outputs, time.perf_counter() - start)


# --------------------------------------------------------------------------

STAGES = {
    "gen-corpus": stage_gen_corpus,
    "encode": stage_encode,
    "cluster": stage_cluster,
    "tune": stage_tune,
    "analyze": stage_analyze,
    "train-toy": stage_train_toy,
    "sweep": stage_sweep,
    "gradcheck": stage_gradcheck,
    "report": stage_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ldae", description="Language-derived appearance element pipeline."
    )
    parser.add_argument("--config", help="JSON config file (defaults applied underneath)")
    parser.add_argument("--out", default="runs", help="output directory for all artifacts")
    parser.add_argument("--force", action="store_true", help="re-run even if inputs are unchanged")
    parser.add_argument("--jobs", type=int, default=1, help="sweep parallelism (per seed)")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        dest="overrides",
        help="config override, dotted path (e.g. cluster.k=100)",
    )
    parser.add_argument("stage", choices=sorted(STAGES), help="pipeline stage to run")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ws = Workspace(Path(args.out), force=args.force)
    try:
        if args.stage == "sweep":
            stage_sweep(ws, cfg, jobs=max(1, args.jobs))
        else:
            STAGES[args.stage](ws, cfg)
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except CheckError as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
