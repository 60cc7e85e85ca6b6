"""
Desk-scale benchmark and ablation runners.

Every variant is a full run directory. Variants that share upstream stages
get copies of those stage checkpoints from a shared run, so only the
stages a variant actually changes are recomputed.
"""

import json
import logging
import math
import shutil

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from labelfactory.configuration import ConfigurationError, FactoryConfig
from labelfactory.detector import finetune_detector, load_detector
from labelfactory.main import (
    ADAPT_STAGE,
    EVALUATE_STAGE,
    FINETUNE_PSEUDO_STAGE,
    FINETUNE_STAGE,
    LABEL_STAGE,
    PIPELINE_STAGES,
    PRETRAIN_STAGE,
    PSEUDO_LABEL_STAGE,
    STAGE_OUTPUTS,
    SYNTHESIZE_STAGE,
    RunPaths,
    evaluate_detector,
    run_all,
    target_test_split,
)
from labelfactory.manifest import stage_seed
from labelfactory.output.render import render_summary
from labelfactory.shapes import make_split

LOG = logging.getLogger(__name__)

BENCHMARK_STAGES = (
    PRETRAIN_STAGE, ADAPT_STAGE, LABEL_STAGE, SYNTHESIZE_STAGE, PSEUDO_LABEL_STAGE,
    FINETUNE_STAGE, FINETUNE_PSEUDO_STAGE, EVALUATE_STAGE,
)

ABLATION_MODES = (
    "no-text", "no-fewshot", "no-freeze", "samples-sweep", "shots-sweep", "layers-sweep", "no-adapt",
)

# Minimum absolute AP gain of the full pipeline over the source-only detector
MIN_ADAPTATION_GAIN = 0.05


@dataclass
class Variant:
    """ One arm of an ablation: config overrides plus the first stage it recomputes """
    name: str
    overrides: list[str] = field(default_factory=list)
    start: str = ADAPT_STAGE
    prepare: Optional[Callable[[RunPaths, RunPaths], None]] = None


def _mean(values: Sequence[float]) -> float:
    finite = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(finite)) if finite else math.nan


def _gt(a: float, b: float) -> bool:
    return not (math.isnan(a) or math.isnan(b)) and a > b


def _ge(a: float, b: float) -> bool:
    return not (math.isnan(a) or math.isnan(b)) and a >= b


def seed_config(config: FactoryConfig, seed: int, overrides: Sequence[str] = ()) -> FactoryConfig:
    return config.with_overrides([f"seed={seed}", *overrides])


def summarize(mode: str, seeds: Sequence[int], per_seed: dict[str, dict[str, list[float]]]) -> dict:
    """ variant -> metric -> per-seed values, plus the mean over seeds """
    return {
        "mode": mode,
        "seeds": list(seeds),
        "variants": {
            variant: {metric: {"per_seed": values, "mean": _mean(values)} for metric, values in metrics.items()}
            for variant, metrics in per_seed.items()
        },
        "checks": {},
    }


def write_summary(summary: dict, out_dir: Path, name: str, title: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    render_summary(title, summary, out_dir / f"{name}.html")
    LOG.info("%s summary written to %s", title, path)
    return path


# Benchmark --------------------------------------------------------------

def fewshot_finetune_ap(config: FactoryConfig, paths: RunPaths) -> float:
    """
    Baseline: fine-tune the source detector directly on the few-shot target
    images with their labels revealed.
    """
    shots = make_split(config.data.target_style, config.data.n_fewshot, stage_seed(config.seed, "fewshot"),
                       config.generator.resolution, config.class_names)
    source = load_detector(paths.checkpoint("detector_source"))
    result = finetune_detector(source, shots.pixels, shots.label_sets(), config,
                               seed=stage_seed(config.seed, "fewshot_ft"))
    ap, _ = evaluate_detector(result.detector, target_test_split(config), config)
    return ap


def run_benchmark(config: FactoryConfig, out_dir: Path, seeds: Optional[Sequence[int]] = None) -> dict:
    """
    Source-only, few-shot fine-tuning, pseudo-label and full-pipeline target
    AP on the shapes benchmark, per seed and averaged.
    """
    if config.data.fewshot_dir or config.label.annotations_path:
        raise ConfigurationError("The benchmark renders its own few-shot images and annotations",
                                 "data.fewshot_dir")
    seeds = list(config.eval.seeds if seeds is None else seeds)
    out_dir = Path(out_dir)
    values = {name: {"target_ap": []} for name in ("full", "source_only", "fewshot_ft", "pseudo_label")}
    values["full"]["diversity"] = []

    for seed in seeds:
        LOG.info("Benchmark seed %d", seed)
        run_config = seed_config(config, seed)
        paths = RunPaths(out_dir / f"seed_{seed}")
        manifest = run_all(run_config, paths.root, stages=BENCHMARK_STAGES)
        metrics = manifest.metrics
        values["full"]["target_ap"].append(metrics.get("target_ap_after", math.nan))
        values["full"]["diversity"].append(metrics.get("diversity", math.nan))
        values["source_only"]["target_ap"].append(metrics.get("target_ap_before", math.nan))
        values["pseudo_label"]["target_ap"].append(metrics.get("target_ap_pseudo", math.nan))
        values["fewshot_ft"]["target_ap"].append(fewshot_finetune_ap(run_config, paths))

    summary = summarize("benchmark", seeds, values)
    means = {name: summary["variants"][name]["target_ap"]["mean"] for name in values}
    summary["checks"] = {
        "full > fewshot_ft": _gt(means["full"], means["fewshot_ft"]),
        "fewshot_ft > source_only": _gt(means["fewshot_ft"], means["source_only"]),
        f"full - source_only >= {MIN_ADAPTATION_GAIN}": _ge(means["full"] - means["source_only"],
                                                             MIN_ADAPTATION_GAIN),
        "full >= pseudo_label": _ge(means["full"], means["pseudo_label"]),
    }
    for name, passed in summary["checks"].items():
        LOG.info("Check %s: %s", name, "passed" if passed else "FAILED")
    write_summary(summary, out_dir, "benchmark", "Shapes benchmark")
    return summary


# Ablations --------------------------------------------------------------

def _use_source_generator(shared: RunPaths, variant: RunPaths) -> None:
    shutil.copy2(shared.checkpoint("generator_source"), variant.checkpoint("generator_adapted"))
    shutil.copy2(shared.checkpoint("discriminator_source"), variant.checkpoint("discriminator_adapted"))


def ablation_variants(mode: str, config: FactoryConfig) -> list[Variant]:
    """ The variants compared by one ablation mode, reference arm first """
    if mode == "no-text":
        return [Variant("full"), Variant("no-text", ["adapt.use_text=false"])]
    if mode == "no-fewshot":
        return [Variant("full"), Variant("no-fewshot", ["adapt.use_fewshot=false"])]
    if mode == "no-freeze":
        return [Variant("freeze"), Variant("no-freeze", ["adapt.freeze=false"])]
    if mode == "samples-sweep":
        return [Variant(f"n_synth={n}", [f"n_synth={n}"], start=SYNTHESIZE_STAGE)
                for n in config.eval.sweep_samples]
    if mode == "shots-sweep":
        return [Variant(f"shots={k}", [f"data.n_fewshot={k}"]) for k in config.eval.sweep_shots]
    if mode == "layers-sweep":
        last = config.generator.num_layers
        return [Variant(f"layers {k}-{last}", [f"adapt.trainable_from={k}", "adapt.freeze=true"])
                for k in range(1, last + 1)]
    if mode == "no-adapt":
        return [Variant("adapted"), Variant("no-adapt", start=LABEL_STAGE, prepare=_use_source_generator)]
    raise ConfigurationError(f"Unknown ablation mode '{mode}', expected one of {ABLATION_MODES}")


def _copy_upstream(shared: RunPaths, variant: RunPaths, start: str) -> None:
    variant.checkpoints.mkdir(parents=True, exist_ok=True)
    for stage in PIPELINE_STAGES[:PIPELINE_STAGES.index(start)]:
        for source in STAGE_OUTPUTS[stage](shared):
            if source.exists():
                shutil.copy2(source, variant.root / source.relative_to(shared.root))


def ablation_checks(mode: str, summary: dict) -> dict[str, bool]:
    variants = summary["variants"]

    def mean(name: str, metric: str = "target_ap") -> float:
        return variants[name][metric]["mean"]

    names = list(variants)
    if mode == "no-freeze":
        return {"diversity freeze >= no-freeze": _ge(mean("freeze", "diversity"), mean("no-freeze", "diversity"))}
    if mode in ("no-text", "no-fewshot", "no-adapt"):
        return {f"{names[0]} >= {names[1]}": _ge(mean(names[0]), mean(names[1]))}
    if mode in ("samples-sweep", "shots-sweep") and len(names) > 1:
        return {f"{names[-1]} > {names[0]}": _gt(mean(names[-1]), mean(names[0]))}
    return {}


def run_ablation(config: FactoryConfig, out_dir: Path, mode: str, seeds: Optional[Sequence[int]] = None) -> dict:
    """
    Run one ablation mode over the evaluation seeds.

    Upstream stages shared by every variant run once per seed; each variant
    then recomputes from its start stage with its overrides applied.
    """
    variants = ablation_variants(mode, config)
    seeds = list(config.eval.seeds if seeds is None else seeds)
    out_dir = Path(out_dir) / mode
    first = min(PIPELINE_STAGES.index(variant.start) for variant in variants)
    shared_stages = PIPELINE_STAGES[:first]

    values = {variant.name: {"target_ap": [], "diversity": []} for variant in variants}
    for seed in seeds:
        shared = RunPaths(out_dir / f"seed_{seed}" / "shared")
        run_all(seed_config(config, seed), shared.root, stages=shared_stages)

        for variant in variants:
            LOG.info("Ablation %s, seed %d, variant %s", mode, seed, variant.name)
            run_config = seed_config(config, seed, variant.overrides)
            paths = RunPaths(out_dir / f"seed_{seed}" / variant.name.replace(" ", "_").replace("=", "_"))
            _copy_upstream(shared, paths, variant.start)
            if variant.prepare is not None:
                variant.prepare(shared, paths)
            stages = PIPELINE_STAGES[PIPELINE_STAGES.index(variant.start):]
            metrics = run_all(run_config, paths.root, stages=stages).metrics
            values[variant.name]["target_ap"].append(metrics.get("target_ap_after", math.nan))
            values[variant.name]["diversity"].append(metrics.get("diversity", math.nan))

    summary = summarize(mode, seeds, values)
    summary["checks"] = ablation_checks(mode, summary)
    write_summary(summary, out_dir, "ablation", f"Ablation {mode}")
    return summary
