""" Module containing the Embedder abstract class and associated errors """

from abc import ABC, abstractmethod
from typing import Optional

import torch

from torch import Tensor


class EmbedderError(Exception):
    """ Exception raised for unrecoverable errors in embedding models.

    Attributes:
        message: explanation of the error
        embedder_name: name of the embedder raising the error
        original_exception: the original exception that caused this error, if any
    """

    def __init__(
            self,
            message: str,
            embedder_name: str,
            original_exception: Optional[Exception] = None,
    ) -> None:
        self.message = message
        self.embedder_name = embedder_name
        self.original_exception = original_exception
        super().__init__(f"[{embedder_name}] {message}")


def check_text(text: str) -> None:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("Text to embed must be a non-empty string")


def check_images(images: Tensor) -> Tensor:
    """ Validate pixel input, returning a batched [batch, 3, H, W] view """
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"Expected images of shape [batch, 3, H, W], got {list(images.shape)}")
    if not torch.isfinite(images).all():
        raise ValueError("Images to embed contain non-finite pixels")
    return images


class Embedder(ABC):
    """ Joint image-text embedding used by the directional loss and the diversity metric.

    Implementations are immutable after construction and return unit-norm vectors.
    """

    @property
    @abstractmethod
    def name(self) -> str:
        """ Returns the name of the embedder, used in logs and errors """

    @property
    @abstractmethod
    def dim(self) -> int:
        """ Returns the embedding dimension """

    @abstractmethod
    def embed_text(self, text: str) -> Tensor:
        """ Returns the unit-norm embedding of ``text`` as a [dim] tensor.

        Raises:
            ValueError: If ``text`` is empty
        """

    @abstractmethod
    def embed_image(self, images: Tensor) -> Tensor:
        """ Returns unit-norm embeddings of images in [-1, 1].

        Arguments:
            images: [3, H, W] or [batch, 3, H, W]; resized internally if needed

        Returns:
            [batch, dim] tensor, differentiable with respect to the pixels

        Raises:
            ValueError: If any pixel is non-finite
        """
