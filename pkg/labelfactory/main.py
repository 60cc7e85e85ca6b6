"""
Pipeline stages of the labelled data factory.

Stages exchange artifacts only through the run directory::

    <out>/checkpoints/   generator, discriminator, label head and detector checkpoints
    <out>/fewshot/       rendered few-shot target images (when no data.fewshot_dir is set)
    <out>/annotations.json
    <out>/dataset/       synthesized dataset (label-head annotations)
    <out>/pseudo_dataset/
    <out>/manifest.json

so a resumed run reads exactly what an uninterrupted run would have kept in memory.
"""

import logging
import shutil

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from torch import Tensor

from labelfactory.adaptation import adapt_generator, pretrain_source_generator
from labelfactory.configuration import ConfigurationError, FactoryConfig
from labelfactory.datasets import (
    Dataset,
    load_dataset,
    load_fewshot_images,
    load_manual_annotations,
    save_dataset,
    save_fewshot_images,
    save_manual_annotations,
)
from labelfactory.detector import (
    KeypointDetector,
    detect,
    finetune_detector,
    load_detector,
    pretrain_source_detector,
    save_detector,
)
from labelfactory.embedding import load_embedder
from labelfactory.evaluation import MatchResult, average_precision, mean_average_precision, pairwise_diversity
from labelfactory.labels.decode import decode
from labelfactory.labels.losses import PredictionTriplet
from labelfactory.labels.head import (
    LabelHead,
    load_label_head,
    save_label_head,
    synthesize_with_features,
    train_label_head,
)
from labelfactory.manifest import (
    MANIFEST_FILE,
    STATUS_COMPLETED,
    STATUS_RESUMED,
    STATUS_STALE,
    RunManifest,
    StageRecord,
    dataset_checksum,
    seed_everything,
    stage_seed,
    track_stage,
)
from labelfactory.networks.checkpoint import (
    load_discriminator,
    load_generator,
    save_discriminator,
    save_generator,
)
from labelfactory.networks.discriminator import DualDiscriminator
from labelfactory.networks.generator import LatentCode, StyleGenerator, stack_latents
from labelfactory.output.render import render_report
from labelfactory.shapes import SHAPE_CLASSES, annotate_by_inspection, make_split

LOG = logging.getLogger(__name__)

PRETRAIN_STAGE = "pretrain_source"
ADAPT_STAGE = "adapt"
LABEL_STAGE = "label_train"
SYNTHESIZE_STAGE = "synthesize"
PSEUDO_LABEL_STAGE = "pseudo_label"
FINETUNE_STAGE = "finetune"
FINETUNE_PSEUDO_STAGE = "finetune_pseudo"
EVALUATE_STAGE = "evaluate"

PIPELINE_STAGES = (PRETRAIN_STAGE, ADAPT_STAGE, LABEL_STAGE, SYNTHESIZE_STAGE, FINETUNE_STAGE, EVALUATE_STAGE)

SYNTH_BATCH = 32


class StageError(Exception):
    """ Exception raised when a pipeline stage fails.

    Attributes:
        stage: name of the failed stage
        message: explanation of the error
        original_exception: the original exception that caused this error, if any
    """

    def __init__(self, stage: str, message: str, original_exception: Optional[Exception] = None) -> None:
        self.stage = stage
        self.message = message
        self.original_exception = original_exception
        super().__init__(f"[{stage}] {message}")


@dataclass
class RunPaths:
    """ Fixed layout of one run directory """
    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints / f"{name}.lfck"

    @property
    def fewshot(self) -> Path:
        return self.root / "fewshot"

    @property
    def annotations(self) -> Path:
        return self.root / "annotations.json"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def pseudo_dataset(self) -> Path:
        return self.root / "pseudo_dataset"

    @property
    def manifest(self) -> Path:
        return self.root / MANIFEST_FILE

    @property
    def plots(self) -> Path:
        return self.root / "plots"

    @property
    def report(self) -> Path:
        return self.root / "report.html"


# Outputs a stage must leave behind for a resume to skip it
STAGE_OUTPUTS: dict[str, Callable[[RunPaths], list[Path]]] = {
    PRETRAIN_STAGE: lambda p: [p.checkpoint("generator_source"), p.checkpoint("discriminator_source"),
                               p.checkpoint("detector_source")],
    ADAPT_STAGE: lambda p: [p.checkpoint("generator_adapted"), p.checkpoint("discriminator_adapted")],
    LABEL_STAGE: lambda p: [p.checkpoint("label_head")],
    SYNTHESIZE_STAGE: lambda p: [p.dataset / "annotations.json"],
    PSEUDO_LABEL_STAGE: lambda p: [p.pseudo_dataset / "annotations.json"],
    FINETUNE_STAGE: lambda p: [p.checkpoint("detector_adapted")],
    FINETUNE_PSEUDO_STAGE: lambda p: [p.checkpoint("detector_pseudo")],
    EVALUATE_STAGE: lambda p: [],
}


def _require_shapes(config: FactoryConfig, key: str) -> None:
    unknown = [name for name in config.class_names if name not in SHAPE_CLASSES]
    if unknown:
        raise ConfigurationError(
            f"Classes {unknown} cannot be rendered procedurally; provide {key}", key
        )


def _check_resolution(generator: StyleGenerator, config: FactoryConfig, path: Path) -> None:
    if generator.resolution != config.generator.resolution:
        raise ConfigurationError(
            f"Checkpoint {path} is {generator.resolution}px, config expects {config.generator.resolution}px",
            "generator.num_layers"
        )


def sample_seeds(seed: int, n: int) -> list[int]:
    """ ``n`` per-sample latent seeds; the first k are the same for every n >= k """
    rng = np.random.default_rng(seed)
    return [int(s) for s in rng.integers(0, 2 ** 31 - 1, size=n)]


def render_latents(generator: StyleGenerator, seeds: Sequence[int], psi: float,
                   head: Optional[LabelHead] = None) -> tuple[Tensor, Optional[list[PredictionTriplet]]]:
    """
    Images for the given latent seeds, in seed order and fixed batches.
    With a head, also returns its raw predictions per image.
    """
    images, predictions = [], []
    with torch.no_grad():
        for start in range(0, len(seeds), SYNTH_BATCH):
            codes = [LatentCode.from_seed(s, generator.z_dim) for s in seeds[start:start + SYNTH_BATCH]]
            if head is None:
                images.append(generator(stack_latents(codes), psi=psi))
                continue
            batch_images, features = synthesize_with_features(generator, codes, head.capture_layers,
                                                              head.stride, psi)
            images.append(batch_images)
            pred = head(features)
            predictions.extend(pred[i] for i in range(pred.heatmap.shape[0]))
    pixels = torch.cat(images) if images else torch.zeros(0, 3, generator.resolution, generator.resolution)
    return pixels, (predictions if head is not None else None)


def synthesize_dataset(generator: StyleGenerator, head: LabelHead, n_samples: int, psi: float,
                       config: FactoryConfig, seed: int = 0) -> Dataset:
    """ ``n_samples`` truncated-latent images with label-head annotations """
    seeds = sample_seeds(seed, n_samples)
    pixels, predictions = render_latents(generator, seeds, psi, head=head)
    side = generator.resolution
    label_sets = [
        [box for box, _ in decode(pred, head.stride, config.label.max_dets, config.label.score_thresh,
                                  image_size=(side, side))]
        for pred in predictions
    ]
    LOG.info("Synthesized %d images with %d labels", len(seeds), sum(len(ls) for ls in label_sets))
    return Dataset.from_labels(pixels, label_sets, config.class_names, seeds)


def pseudo_label_dataset(generator: StyleGenerator, source_detector: KeypointDetector, n_samples: int,
                         psi: float, config: FactoryConfig, seed: int = 0) -> Dataset:
    """ Same images as ``synthesize_dataset`` for the same seed, labelled by the source detector """
    seeds = sample_seeds(seed, n_samples)
    pixels, _ = render_latents(generator, seeds, psi)
    detections = detect(source_detector, pixels, config.label.score_thresh, config.label.max_dets)
    label_sets = [[box for box, _ in dets] for dets in detections]
    LOG.info("Pseudo-labelled %d images with %d labels", len(seeds), sum(len(ls) for ls in label_sets))
    return Dataset.from_labels(pixels, label_sets, config.class_names, seeds)


def evaluate_detector(detector: KeypointDetector, dataset: Dataset,
                      config: FactoryConfig) -> tuple[float, dict[int, MatchResult]]:
    """ mAP@iou_thresh of ``detector`` on a labelled dataset """
    detections = detect(detector, dataset.pixels, config.eval.score_thresh, config.label.max_dets)
    results = average_precision(detections, dataset.label_sets(), config.eval.iou_thresh)
    return mean_average_precision(results), results


def per_class_ap(results: dict[int, MatchResult], class_names: Sequence[str]) -> dict[str, float]:
    return {class_names[class_id]: result.ap for class_id, result in results.items()}


def target_test_split(config: FactoryConfig) -> Dataset:
    _require_shapes(config, "data.target_style")
    return make_split(config.data.target_style, config.data.n_target_test,
                      stage_seed(config.seed, "target_test"), config.generator.resolution, config.class_names)


# Stages -----------------------------------------------------------------

def stage_pretrain_source(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    """ Source generator (or a chained checkpoint) and source detector """
    seed = record.seed
    side = config.generator.resolution
    source = None

    def source_split() -> Dataset:
        _require_shapes(config, "generator.pretrained_path")
        return make_split(config.data.source_style, config.detector.n_source,
                          stage_seed(config.seed, "source_train"), side, config.class_names)

    if config.generator.pretrained_path:
        generator = load_generator(Path(config.generator.pretrained_path))
        _check_resolution(generator, config, Path(config.generator.pretrained_path))
        if config.discriminator.pretrained_path:
            discriminator = load_discriminator(Path(config.discriminator.pretrained_path))
        else:
            discriminator = DualDiscriminator.from_config(config.discriminator, config.generator, seed=seed)
        LOG.info("Using pretrained generator %s", config.generator.pretrained_path)
    else:
        source = source_split()
        result = pretrain_source_generator(source.pixels, config, seed=seed)
        generator, discriminator = result.generator, result.discriminator
        record.record_traces({"generator": result.traces["generator"],
                              "discriminator": result.traces["discriminator"]})
    save_generator(generator, paths.checkpoint("generator_source"))
    save_discriminator(discriminator, paths.checkpoint("discriminator_source"))

    if config.detector.pretrained_path:
        detector = load_detector(Path(config.detector.pretrained_path))
        LOG.info("Using pretrained detector %s", config.detector.pretrained_path)
    else:
        source = source or source_split()
        result = pretrain_source_detector(source.pixels, source.label_sets(), config, seed=seed)
        detector = result.detector
        record.record_traces({"detector": result.trace}, final_key="detector")
    save_detector(detector, paths.checkpoint("detector_source"))


def load_fewshot(config: FactoryConfig, paths: RunPaths) -> Tensor:
    if config.data.fewshot_dir:
        return load_fewshot_images(Path(config.data.fewshot_dir), config.generator.resolution)
    _require_shapes(config, "data.fewshot_dir")
    shots = make_split(config.data.target_style, config.data.n_fewshot, stage_seed(config.seed, "fewshot"),
                       config.generator.resolution, config.class_names)
    if paths.fewshot.exists():
        shutil.rmtree(paths.fewshot)
    save_fewshot_images(shots.pixels, paths.fewshot)
    return load_fewshot_images(paths.fewshot, config.generator.resolution)


def stage_adapt(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    """ Adapt the source generator to the few-shot target images """
    generator = load_generator(paths.checkpoint("generator_source"))
    discriminator = load_discriminator(paths.checkpoint("discriminator_source"))
    side = config.generator.resolution
    fewshot = load_fewshot(config, paths) if config.adapt.use_fewshot else torch.zeros(0, 3, side, side)
    embedder = load_embedder(config.embedder) if config.adapt.use_text and config.adapt.lambda_2 > 0 else None

    result = adapt_generator(generator, fewshot, config, embedder=embedder, discriminator=discriminator,
                             seed=record.seed)
    save_generator(result.generator, paths.checkpoint("generator_adapted"))
    save_discriminator(result.discriminator, paths.checkpoint("discriminator_adapted"))
    record.record_traces(result.traces, final_key="total")
    record.metrics["n_fewshot"] = int(fewshot.shape[0])


def stage_label_train(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    """ Fit the label head on annotated synthesized samples """
    generator = load_generator(paths.checkpoint("generator_adapted"))
    side = generator.resolution

    if config.label.annotations_path:
        pairs = load_manual_annotations(Path(config.label.annotations_path), side, config.num_classes)
    else:
        _require_shapes(config, "label.annotations_path")
        seeds = sample_seeds(stage_seed(config.seed, "annotate"), config.label.n_annotated)
        images, _ = render_latents(generator, seeds, config.psi)
        pairs = [(s, annotate_by_inspection(image, config.class_names)) for s, image in zip(seeds, images)]
        save_manual_annotations(pairs, paths.annotations)
        LOG.info("Annotated %d synthesized samples by inspection", len(pairs))

    annotated = [(LatentCode.from_seed(s, generator.z_dim), labels) for s, labels in pairs]
    result = train_label_head(generator, annotated, config, seed=record.seed)
    save_label_head(result.head, paths.checkpoint("label_head"))
    record.record_traces({"label": result.trace})


def stage_synthesize(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    generator = load_generator(paths.checkpoint("generator_adapted"))
    head = load_label_head(paths.checkpoint("label_head"))
    dataset = synthesize_dataset(generator, head, config.n_synth, config.psi, config, seed=record.seed)
    if paths.dataset.exists():
        shutil.rmtree(paths.dataset)
    save_dataset(dataset, paths.dataset)
    record.metrics["n_images"] = len(dataset)
    record.metrics["n_annotations"] = len(dataset.annotations)


def stage_pseudo_label(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    """ Baseline: label the synthesized images with the source detector instead of the label head """
    generator = load_generator(paths.checkpoint("generator_adapted"))
    detector = load_detector(paths.checkpoint("detector_source"))
    # same latents as the synthesize stage
    dataset = pseudo_label_dataset(generator, detector, config.n_synth, config.psi, config,
                                   seed=stage_seed(config.seed, SYNTHESIZE_STAGE))
    if paths.pseudo_dataset.exists():
        shutil.rmtree(paths.pseudo_dataset)
    save_dataset(dataset, paths.pseudo_dataset)
    record.metrics["n_annotations"] = len(dataset.annotations)


def stage_finetune(config: FactoryConfig, paths: RunPaths, record: StageRecord, dataset_dir: Optional[Path] = None,
                   output: str = "detector_adapted") -> None:
    """ Fine-tune the source detector on synthesized data only """
    detector = load_detector(paths.checkpoint("detector_source"))
    dataset = load_dataset(dataset_dir or paths.dataset)
    if len(dataset) == 0:
        raise ValueError("Synthesized dataset is empty")
    result = finetune_detector(detector, dataset.pixels, dataset.label_sets(), config, seed=record.seed)
    save_detector(result.detector, paths.checkpoint(output))
    record.record_traces({"detector": result.trace})


def stage_finetune_pseudo(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    stage_finetune(config, paths, record, dataset_dir=paths.pseudo_dataset, output="detector_pseudo")


def stage_evaluate(config: FactoryConfig, paths: RunPaths, record: StageRecord) -> None:
    test_split = target_test_split(config)
    metrics = {}

    source_detector = load_detector(paths.checkpoint("detector_source"))
    metrics["target_ap_before"], before = evaluate_detector(source_detector, test_split, config)
    curves = {"source": before}

    for name, checkpoint in (("after", "detector_adapted"), ("pseudo", "detector_pseudo")):
        path = paths.checkpoint(checkpoint)
        if path.exists():
            metrics[f"target_ap_{name}"], results = evaluate_detector(load_detector(path), test_split, config)
            metrics[f"target_ap_{name}_per_class"] = per_class_ap(results, config.class_names)
            curves[name] = results

    if paths.dataset.exists():
        dataset = load_dataset(paths.dataset)
        n_diversity = min(config.eval.n_diversity, len(dataset))
        if n_diversity >= 2:
            metrics["diversity"] = pairwise_diversity(dataset.pixels[:n_diversity], load_embedder(config.embedder))

    record.metrics.update(metrics)
    record.metrics["pr_curves"] = {
        name: {str(class_id): {"recall": r.recall.tolist(), "precision": r.precision.tolist()}
               for class_id, r in results.items()}
        for name, results in curves.items()
    }
    LOG.info("Target AP before %.4f, after %s", metrics["target_ap_before"],
             f"{metrics['target_ap_after']:.4f}" if "target_ap_after" in metrics else "n/a")


STAGE_FUNCTIONS: dict[str, Callable] = {
    PRETRAIN_STAGE: stage_pretrain_source,
    ADAPT_STAGE: stage_adapt,
    LABEL_STAGE: stage_label_train,
    SYNTHESIZE_STAGE: stage_synthesize,
    PSEUDO_LABEL_STAGE: stage_pseudo_label,
    FINETUNE_STAGE: stage_finetune,
    FINETUNE_PSEUDO_STAGE: stage_finetune_pseudo,
    EVALUATE_STAGE: stage_evaluate,
}


# Drivers ----------------------------------------------------------------

def open_manifest(config: FactoryConfig, paths: RunPaths) -> RunManifest:
    """
    Load the run's manifest, or start a new one.

    Stages finished under a different config are marked stale, so a
    resumed run repeats them instead of building on their outputs.
    """
    if paths.manifest.exists():
        manifest = RunManifest.load(paths.manifest)
        if manifest.config and manifest.config != config.to_dict():
            stale = [name for name, record in manifest.stages.items()
                     if record.status in (STATUS_COMPLETED, STATUS_RESUMED)]
            LOG.warning("Config differs from the one recorded in %s; stages %s will rerun", paths.manifest, stale)
            for name in stale:
                manifest.stages[name].status = STATUS_STALE
            manifest.checksums.clear()
            manifest.metrics.clear()
    else:
        manifest = RunManifest()
    manifest.config = config.to_dict()
    return manifest


def _finalize(manifest: RunManifest, paths: RunPaths) -> None:
    for name, directory in (("dataset", paths.dataset), ("pseudo_dataset", paths.pseudo_dataset)):
        if (directory / "annotations.json").exists():
            manifest.checksums[name] = dataset_checksum(directory)
    evaluate = manifest.stages.get(EVALUATE_STAGE)
    if evaluate is not None and evaluate.status in (STATUS_COMPLETED, STATUS_RESUMED):
        manifest.metrics.update({k: v for k, v in evaluate.metrics.items() if k != "pr_curves"})


def run_stage(name: str, config: FactoryConfig, out_dir: Path,
              manifest: Optional[RunManifest] = None) -> RunManifest:
    """
    Run one stage against the run directory, recording it in the manifest.

    Raises:
        ConfigurationError: For configuration problems found by the stage
        StageError: For any other failure, after the manifest marks the stage failed
    """
    if name not in STAGE_FUNCTIONS:
        raise ConfigurationError(f"Unknown stage '{name}'")
    paths = RunPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = manifest or open_manifest(config, paths)

    seed = stage_seed(config.seed, name)
    seed_everything(seed)
    try:
        with track_stage(manifest, name, paths.manifest, seed=seed) as record:
            record.traces.clear()
            record.metrics.clear()
            STAGE_FUNCTIONS[name](config, paths, record)
    except (ConfigurationError, StageError):
        raise
    except Exception as e:
        raise StageError(name, str(e), e) from e

    _finalize(manifest, paths)
    manifest.save(paths.manifest)
    return manifest


def stage_is_done(manifest: RunManifest, name: str, paths: RunPaths, seed: Optional[int] = None) -> bool:
    """ Complete, run with ``seed`` when one is given, and every output still on disk """
    record = manifest.stages.get(name)
    if record is None or record.status not in (STATUS_COMPLETED, STATUS_RESUMED):
        return False
    if seed is not None and record.seed != seed:
        return False
    return all(path.exists() for path in STAGE_OUTPUTS[name](paths))


def run_all(config: FactoryConfig, out_dir: Path, resume: bool = True,
            stages: Sequence[str] = PIPELINE_STAGES) -> RunManifest:
    """
    Run the pipeline stages in order.

    With ``resume``, stages whose manifest entry is complete under the
    current config and whose outputs exist are skipped, up to the first
    stage that has to run. Every stage is seeded from (seed, stage name)
    so a resumed run ends in the same state as an uninterrupted one.
    """
    paths = RunPaths(Path(out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    manifest = open_manifest(config, paths)
    LOG.info("Running stages %s into %s (seed %d)", list(stages), paths.root, config.seed)

    # once one stage reruns, everything downstream of it reruns too
    reran = False
    for name in stages:
        if resume and not reran and stage_is_done(manifest, name, paths, stage_seed(config.seed, name)):
            manifest.stages[name].status = STATUS_RESUMED
            LOG.info("Stage %s already complete, resuming after it", name)
            continue
        reran = True
        manifest = run_stage(name, config, paths.root, manifest)

    _finalize(manifest, paths)
    manifest.save(paths.manifest)

    render_report(manifest, paths.root)
    return manifest
