""" Deterministic, dependency-free joint embedder for tests and desk-scale runs """

import hashlib
import logging

import torch
import torch.nn.functional as F

from torch import Tensor

from labelfactory.embedding.embedder import Embedder, check_images, check_text

LOG = logging.getLogger(__name__)

POOLED_SIDE = 16


def stable_hash64(text: str, salt: int = 0) -> int:
    """ 64-bit hash of ``text`` that is stable across processes (unlike ``hash``) """
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8, salt=salt.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little")


class ToyEmbedder(Embedder):
    """
    Text: unit vector drawn from a normal seeded by the text's stable hash.
    Image: fixed seeded affine projection of the 16x16 average-pooled image, normalized.
    """

    def __init__(self, dim: int = 128, seed: int = 0):
        self._dim = dim
        self._seed = seed
        rng = torch.Generator().manual_seed(seed)
        in_features = 3 * POOLED_SIDE * POOLED_SIDE
        self._projection = torch.randn(dim, in_features, generator=rng, dtype=torch.float64) / in_features ** 0.5
        self._offset = torch.randn(dim, generator=rng, dtype=torch.float64)

    @property
    def name(self) -> str:
        return "toy"

    @property
    def dim(self) -> int:
        return self._dim

    def embed_text(self, text: str) -> Tensor:
        check_text(text)
        rng = torch.Generator().manual_seed(stable_hash64(text, self._seed))
        vector = torch.randn(self._dim, generator=rng, dtype=torch.float64)
        return (vector / vector.norm()).float()

    def embed_image(self, images: Tensor) -> Tensor:
        images = check_images(images)
        pooled = F.adaptive_avg_pool2d(images, POOLED_SIDE).flatten(1)
        projection = self._projection.to(device=images.device, dtype=images.dtype)
        offset = self._offset.to(device=images.device, dtype=images.dtype)
        embedded = pooled @ projection.T + offset
        return embedded / embedded.norm(dim=1, keepdim=True).clamp_min(1e-12)
