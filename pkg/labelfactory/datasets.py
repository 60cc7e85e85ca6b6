""" Reading and writing datasets, few-shot images and manual annotations """

import json
import logging
import numbers
import os

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

from PIL import Image, UnidentifiedImageError
from torch import Tensor

from labelfactory.labels.targets import BOUNDS_TOLERANCE, BoxLabel, LabelSet

LOG = logging.getLogger(__name__)

ANNOTATIONS_FILE = "annotations.json"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
PNG_COMPRESS_LEVEL = 6

IMAGE_KEYS = ("id", "file_name", "width", "height", "seed")
ANNOTATION_KEYS = ("id", "image_id", "category_id", "bbox")
CATEGORY_KEYS = ("id", "name")
ROOT_KEYS = ("images", "annotations", "categories")


class DatasetValidationError(Exception):
    """ Exception raised when a dataset or annotation file fails validation.

    Attributes:
        message: explanation of the error
        record: identifier of the offending record, if known
    """

    def __init__(self, message: str, record: Optional[str] = None) -> None:
        self.message = message
        self.record = record
        if record is not None:
            super().__init__(f"{record}: {message}")
        else:
            super().__init__(message)


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    seed: Optional[int] = None


@dataclass
class Annotation:
    id: int
    image_id: int
    category_id: int
    bbox: list[float]


@dataclass
class Category:
    id: int
    name: str


@dataclass
class Dataset:
    """
    COCO-compatible detection dataset. ``pixels`` holds the images as a
    [n, 3, H, W] tensor in [-1, 1] when they are in memory; it is not part
    of equality.
    """
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    categories: list[Category] = field(default_factory=list)
    pixels: Optional[Tensor] = field(default=None, compare=False, repr=False)

    @classmethod
    def from_labels(cls, pixels: Tensor, label_sets: Sequence[LabelSet], class_names: Sequence[str],
                    seeds: Optional[Sequence[int]] = None) -> "Dataset":
        """ Build a dataset from in-memory images and one LabelSet per image """
        if pixels.shape[0] != len(label_sets):
            raise ValueError(f"{pixels.shape[0]} images but {len(label_sets)} label sets")
        if seeds is not None and len(seeds) != len(label_sets):
            raise ValueError(f"{len(seeds)} seeds for {len(label_sets)} images")

        height, width = int(pixels.shape[-2]), int(pixels.shape[-1])
        images, annotations = [], []
        for index, labels in enumerate(label_sets):
            seed = None if seeds is None else int(seeds[index])
            file_name = f"img_{(index if seed is None else seed):016d}.png"
            images.append(ImageRecord(index, file_name, width, height, seed))
            for box in labels:
                annotations.append(Annotation(len(annotations), index, box.class_id, box.to_xywh()))

        categories = [Category(i, name) for i, name in enumerate(class_names)]
        return cls(images, annotations, categories, pixels.detach().cpu())

    def __len__(self) -> int:
        return len(self.images)

    @property
    def seeds(self) -> list[Optional[int]]:
        return [record.seed for record in self.images]

    def label_sets(self) -> list[LabelSet]:
        """ LabelSet per image, in image order """
        by_image = {record.id: [] for record in self.images}
        for ann in self.annotations:
            by_image[ann.image_id].append(BoxLabel.from_xywh(ann.category_id, ann.bbox))
        return [by_image[record.id] for record in self.images]

    def validate(self) -> None:
        """ Raise DatasetValidationError naming the first bad record """
        image_ids = {}
        for record in self.images:
            if record.id in image_ids:
                raise DatasetValidationError("Duplicate image id", f"image {record.id}")
            if not (_is_number(record.width) and _is_number(record.height)):
                raise DatasetValidationError(
                    f"Image size must be numeric, got {record.width!r}x{record.height!r}", f"image {record.id}"
                )
            if record.width < 1 or record.height < 1:
                raise DatasetValidationError("Image size must be positive", f"image {record.id}")
            image_ids[record.id] = record

        category_ids = {category.id for category in self.categories}
        for ann in self.annotations:
            name = f"annotation {ann.id}"
            if ann.image_id not in image_ids:
                raise DatasetValidationError(f"References missing image {ann.image_id}", name)
            if ann.category_id not in category_ids:
                raise DatasetValidationError(f"References missing category {ann.category_id}", name)
            if not isinstance(ann.bbox, (list, tuple)) or len(ann.bbox) != 4:
                raise DatasetValidationError("bbox must be [x, y, w, h]", name)
            if not all(_is_number(v) for v in ann.bbox):
                raise DatasetValidationError(f"bbox {ann.bbox} has non-numeric values", name)
            x, y, w, h = ann.bbox
            if w <= 0 or h <= 0:
                raise DatasetValidationError(f"bbox has non-positive size {w}x{h}", name)
            image = image_ids[ann.image_id]
            if (x < 0 or y < 0 or x + w > image.width + BOUNDS_TOLERANCE
                    or y + h > image.height + BOUNDS_TOLERANCE):
                raise DatasetValidationError(
                    f"bbox {ann.bbox} outside {image.width}x{image.height} image", name
                )

    def to_dict(self) -> dict:
        return {
            "images": [
                {"id": r.id, "file_name": r.file_name, "width": r.width, "height": r.height, "seed": r.seed}
                for r in self.images
            ],
            "annotations": [
                {"id": a.id, "image_id": a.image_id, "category_id": a.category_id, "bbox": list(a.bbox)}
                for a in self.annotations
            ],
            "categories": [{"id": c.id, "name": c.name} for c in self.categories],
        }


def to_uint8(image: Tensor) -> np.ndarray:
    """ [3, H, W] in [-1, 1] -> [H, W, 3] uint8 """
    scaled = ((image.detach().cpu().to(torch.float64).clamp(-1, 1) + 1) * 127.5).round()
    return scaled.permute(1, 2, 0).numpy().astype(np.uint8)


def from_uint8(array: np.ndarray) -> Tensor:
    """ [H, W, 3] uint8 -> [3, H, W] float32 in [-1, 1] """
    return torch.from_numpy(array.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    tmp_path.write_text(text, encoding="utf8")
    os.replace(tmp_path, path)


def save_dataset(dataset: Dataset, directory: Path) -> None:
    """
    Write images as 8-bit RGB PNG plus ``annotations.json``.
    Identical datasets produce identical bytes.
    """
    if dataset.pixels is None:
        raise ValueError("Dataset has no pixels to save")
    dataset.validate()

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for record, image in zip(dataset.images, dataset.pixels):
        Image.fromarray(to_uint8(image)).save(
            directory / record.file_name, format="PNG", compress_level=PNG_COMPRESS_LEVEL
        )

    _atomic_write_text(directory / ANNOTATIONS_FILE, json.dumps(dataset.to_dict(), sort_keys=True, indent=2))
    LOG.info("Saved dataset with %d images and %d annotations to %s",
             len(dataset.images), len(dataset.annotations), directory)


def _warn_unknown(record: dict, known: Sequence[str], where: str, warned: set) -> None:
    if not isinstance(record, dict):
        raise DatasetValidationError("Record must be a JSON object", where)
    for key in record:
        if key not in known and (where, key) not in warned:
            LOG.warning("Ignoring unknown key '%s' in %s", key, where)
            warned.add((where, key))


def _field(record: dict, key: str, where: str) -> Any:
    try:
        return record[key]
    except (KeyError, TypeError) as e:
        raise DatasetValidationError(f"Missing field '{key}'", where) from e


def load_dataset(directory: Path, load_pixels: bool = True) -> Dataset:
    """
    Read a dataset written by ``save_dataset``.

    Raises:
        FileNotFoundError: If ``annotations.json`` is missing
        DatasetValidationError: On malformed JSON or an invalid record
    """
    directory = Path(directory)
    annotations_path = directory / ANNOTATIONS_FILE
    if not annotations_path.exists():
        LOG.error("Annotation file %s does not exist", annotations_path)
        raise FileNotFoundError(f"Annotation file {annotations_path} does not exist")

    try:
        raw = json.loads(annotations_path.read_text(encoding="utf8"))
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"Malformed JSON: {e}", str(annotations_path)) from e
    if not isinstance(raw, dict):
        raise DatasetValidationError("Root must be an object", str(annotations_path))

    warned = set()
    _warn_unknown(raw, ROOT_KEYS, "root", warned)

    images = []
    for index, record in enumerate(raw.get("images", [])):
        where = f"image {record.get('id', index) if isinstance(record, dict) else index}"
        _warn_unknown(record, IMAGE_KEYS, "images", warned)
        images.append(ImageRecord(
            id=_field(record, "id", where),
            file_name=_field(record, "file_name", where),
            width=_field(record, "width", where),
            height=_field(record, "height", where),
            seed=record.get("seed"),
        ))

    annotations = []
    for index, record in enumerate(raw.get("annotations", [])):
        where = f"annotation {record.get('id', index) if isinstance(record, dict) else index}"
        _warn_unknown(record, ANNOTATION_KEYS, "annotations", warned)
        annotations.append(Annotation(
            id=_field(record, "id", where),
            image_id=_field(record, "image_id", where),
            category_id=_field(record, "category_id", where),
            bbox=list(_field(record, "bbox", where)),
        ))

    categories = []
    for index, record in enumerate(raw.get("categories", [])):
        where = f"category {index}"
        _warn_unknown(record, CATEGORY_KEYS, "categories", warned)
        categories.append(Category(id=_field(record, "id", where), name=_field(record, "name", where)))

    dataset = Dataset(images, annotations, categories)
    dataset.validate()

    if load_pixels and images:
        pixels = []
        for record in images:
            path = directory / record.file_name
            if not path.exists():
                raise DatasetValidationError(f"Image file {path} is missing", f"image {record.id}")
            with Image.open(path) as image:
                pixels.append(from_uint8(np.asarray(image.convert("RGB"))))
        dataset.pixels = torch.stack(pixels)

    LOG.info("Loaded dataset with %d images from %s", len(images), directory)
    return dataset


def load_fewshot_images(directory: Path, resolution: int) -> Tensor:
    """
    Load every PNG/JPEG in ``directory`` in alphabetical order, resized to
    ``resolution`` and scaled to [-1, 1].

    Returns:
        [K, 3, resolution, resolution] tensor

    Raises:
        FileNotFoundError: If ``directory`` does not exist
        DatasetValidationError: If no usable image is found
    """
    directory = Path(directory)
    if not directory.is_dir():
        LOG.error("Few-shot directory %s does not exist", directory)
        raise FileNotFoundError(f"Few-shot directory {directory} does not exist")

    images = []
    for path in sorted(directory.iterdir(), key=lambda p: p.name):
        if not path.is_file():
            continue
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            LOG.warning("Skipping non-image file %s", path.name)
            continue
        try:
            with Image.open(path) as image:
                rgb = image.convert("RGB").resize((resolution, resolution), Image.Resampling.BICUBIC)
                images.append(from_uint8(np.asarray(rgb)))
        except (UnidentifiedImageError, OSError) as e:
            LOG.warning("Skipping unreadable image %s: %s", path.name, e)

    if not images:
        raise DatasetValidationError("Few-shot set must contain at least one image", str(directory))
    LOG.info("Loaded %d few-shot images from %s", len(images), directory)
    return torch.stack(images)


def save_fewshot_images(images: Tensor, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, image in enumerate(images):
        Image.fromarray(to_uint8(image)).save(
            directory / f"shot_{index:03d}.png", format="PNG", compress_level=PNG_COMPRESS_LEVEL
        )


def _is_number(value: Any) -> bool:
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


class _PairedDict(dict):
    """ JSON object that also keeps every (key, value) pair in file order, repeats included """
    pairs: list[tuple[str, Any]]


def _keep_pairs(pairs: list[tuple[str, Any]]) -> _PairedDict:
    result = _PairedDict(pairs)
    result.pairs = pairs
    return result


def load_manual_annotations(path: Path, resolution: int,
                            num_classes: Optional[int] = None) -> list[tuple[int, LabelSet]]:
    """
    Read ``{"<seed>": [{"category_id": c, "bbox": [x, y, w, h]}, ...], ...}``.

    Returns:
        (seed, LabelSet) pairs in file order; empty label lists are kept

    Raises:
        DatasetValidationError: On duplicate seeds or a box outside the image, naming the seed
    """
    path = Path(path)
    if not path.exists():
        LOG.error("Annotation file %s does not exist", path)
        raise FileNotFoundError(f"Annotation file {path} does not exist")
    try:
        raw = json.loads(path.read_text(encoding="utf8"), object_pairs_hook=_keep_pairs)
    except json.JSONDecodeError as e:
        raise DatasetValidationError(f"Malformed JSON: {e}", str(path)) from e

    if not isinstance(raw, dict):
        raise DatasetValidationError("Annotations must be an object keyed by seed", str(path))

    pairs = []
    seen = set()
    for key, entries in raw.pairs:
        where = f"seed {key}"
        try:
            seed = int(key)
        except ValueError as e:
            raise DatasetValidationError("Seed must be an integer", where) from e
        if seed in seen:
            raise DatasetValidationError("Duplicate seed", f"seed {seed}")
        seen.add(seed)
        if not isinstance(entries, list):
            raise DatasetValidationError("Boxes must be a list", where)
        labels = []
        for entry in entries:
            category_id = _field(entry, "category_id", where)
            bbox = _field(entry, "bbox", where)
            if not isinstance(bbox, list) or len(bbox) != 4:
                raise DatasetValidationError("bbox must be [x, y, w, h]", where)
            if not _is_number(category_id) or not all(_is_number(v) for v in bbox):
                raise DatasetValidationError(f"Non-numeric category_id {category_id!r} or bbox {bbox}", where)
            box = BoxLabel.from_xywh(int(category_id), [float(v) for v in bbox])
            try:
                box.check(resolution, resolution, num_classes)
            except ValueError as e:
                raise DatasetValidationError(str(e), where) from e
            labels.append(box)
        pairs.append((seed, labels))

    LOG.info("Loaded manual annotations for %d seeds from %s", len(pairs), path)
    return pairs


def save_manual_annotations(pairs: Sequence[tuple[int, LabelSet]], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = {
        str(seed): [{"category_id": box.class_id, "bbox": box.to_xywh()} for box in labels]
        for seed, labels in pairs
    }
    _atomic_write_text(path, json.dumps(raw, indent=2))
