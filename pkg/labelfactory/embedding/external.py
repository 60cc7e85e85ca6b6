"""
Adapter for an external pretrained vision-language model.

The weights path must point to a TorchScript archive exposing::

    encode_text(texts: List[str]) -> Tensor      # [n, dim]
    encode_image(images: Tensor) -> Tensor       # images in [-1, 1], [n, 3, r, r] -> [n, dim]
    input_resolution: int                        # side r the image encoder expects

Tokenization and pixel normalization live inside the archive, so the variant
and its input resolution come from the model's own metadata.
"""

import logging

from pathlib import Path

import torch
import torch.nn.functional as F

from torch import Tensor

from labelfactory.embedding.embedder import Embedder, EmbedderError, check_images, check_text

LOG = logging.getLogger(__name__)


class ExternalEmbedder(Embedder):
    """ Embedder backed by a TorchScript vision-language model """

    def __init__(self, weights_path: str):
        path = Path(weights_path)
        if not path.exists():
            LOG.error("Embedder weights %s do not exist", path)
            raise FileNotFoundError(f"Embedder weights {path} do not exist")

        try:
            self._model = torch.jit.load(str(path), map_location="cpu")
            self._model.eval()
            self._resolution = int(self._model.input_resolution)
            sample = self._model.encode_text(["a photo"])
        except Exception as e:
            LOG.error("Failed to load embedder from %s: %s", path, e)
            raise EmbedderError(
                message=f"Failed to load model: {e}",
                embedder_name="external",
                original_exception=e
            ) from e

        self._dim = int(sample.shape[-1])
        LOG.info("Loaded external embedder from %s (dim %d, input %dpx)", path, self._dim, self._resolution)

    @property
    def name(self) -> str:
        return "external"

    @property
    def dim(self) -> int:
        return self._dim

    def embed_text(self, text: str) -> Tensor:
        check_text(text)
        with torch.no_grad():
            try:
                vector = self._model.encode_text([text])[0].float()
            except Exception as e:
                raise EmbedderError(f"Text encoding failed: {e}", self.name, e) from e
        return vector / vector.norm().clamp_min(1e-12)

    def embed_image(self, images: Tensor) -> Tensor:
        images = check_images(images)
        if images.shape[-1] != self._resolution or images.shape[-2] != self._resolution:
            images = F.interpolate(images, size=(self._resolution, self._resolution),
                                   mode="bilinear", align_corners=False)
        try:
            embedded = self._model.encode_image(images)
        except Exception as e:
            raise EmbedderError(f"Image encoding failed: {e}", self.name, e) from e
        return embedded / embedded.norm(dim=1, keepdim=True).clamp_min(1e-12)
