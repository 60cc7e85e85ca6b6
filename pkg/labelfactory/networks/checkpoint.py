"""
Single-file checkpoint container.

Layout (all integers little-endian)::

    b"LFCK"                     magic
    uint16                      format version
    uint32                      header length in bytes
    header                      UTF-8 JSON: {"kind", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    tensor bytes                raw little-endian arrays, in header order

``meta`` carries the architecture hyperparameters (L, d_z, d_w, channel widths, ...)
needed to rebuild the module; buffers such as ``w_avg`` are stored like parameters.
"""

import json
import logging
import os
import struct

from pathlib import Path
from typing import Optional

import numpy as np
import torch

from torch import nn

from labelfactory.configuration import ConfigurationError
from labelfactory.networks.discriminator import DualDiscriminator
from labelfactory.networks.generator import StyleGenerator

LOG = logging.getLogger(__name__)

MAGIC = b"LFCK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}
_TORCH_DTYPES = {code: dtype for dtype, code in _DTYPES.items()}


def save_checkpoint(path: Path, state: dict[str, torch.Tensor], kind: str, meta: Optional[dict] = None) -> None:
    """ Atomically write ``state`` (name -> tensor) and ``meta`` to ``path`` """

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    index = []
    blobs = []
    offset = 0
    for name, tensor in state.items():
        if tensor.dtype not in _DTYPES:
            raise ValueError(f"Unsupported dtype {tensor.dtype} for tensor {name}")
        code = _DTYPES[tensor.dtype]
        blob = tensor.detach().cpu().contiguous().numpy().astype(code, copy=False).tobytes()
        index.append({
            "name": name,
            "dtype": code,
            "shape": list(tensor.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"kind": kind, "meta": meta or {}, "tensors": index}, sort_keys=True).encode("utf-8")

    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp_path, path)
    LOG.debug("Saved %s checkpoint with %d tensors to %s", kind, len(index), path)


def load_checkpoint(path: Path, kind: Optional[str] = None) -> tuple[dict, dict[str, torch.Tensor]]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Args:
        path: Checkpoint file
        kind: If given, the stored kind must match

    Returns:
        (meta, state) tuple

    Raises:
        FileNotFoundError: If ``path`` does not exist
        ConfigurationError: On bad magic, unknown version or kind mismatch
    """
    path = Path(path)
    if not path.exists():
        LOG.error("Checkpoint %s does not exist", path)
        raise FileNotFoundError(f"Checkpoint {path} does not exist")

    data = path.read_bytes()
    if data[:4] != MAGIC:
        raise ConfigurationError(f"{path} is not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"{path} has checkpoint format version {version}, expected {FORMAT_VERSION}")

    header = json.loads(data[10:10 + header_len].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise ConfigurationError(f"{path} holds a '{header['kind']}' checkpoint, expected '{kind}'")

    body = data[10 + header_len:]
    state = {}
    for entry in header["tensors"]:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(array).to(_TORCH_DTYPES[entry["dtype"]])
    return header["meta"], state


def save_module(module: nn.Module, path: Path, kind: str, meta: dict) -> None:
    save_checkpoint(path, dict(module.state_dict()), kind, meta)


def save_generator(generator: StyleGenerator, path: Path) -> None:
    save_module(generator, path, "generator", generator.architecture())


def load_generator(path: Path) -> StyleGenerator:
    meta, state = load_checkpoint(path, kind="generator")
    generator = StyleGenerator(
        z_dim=meta["z_dim"],
        w_dim=meta["w_dim"],
        channels=meta["channels"],
        mapping_layers=meta["mapping_layers"],
        w_avg_decay=meta["w_avg_decay"],
    )
    generator.load_state_dict(state)
    return generator


def save_discriminator(discriminator: DualDiscriminator, path: Path) -> None:
    save_module(discriminator, path, "discriminator", discriminator.architecture())


def load_discriminator(path: Path) -> DualDiscriminator:
    meta, state = load_checkpoint(path, kind="discriminator")
    discriminator = DualDiscriminator(meta["resolution"], meta["channels"], meta["patch_tap_layer"])
    discriminator.load_state_dict(state)
    return discriminator
