import logging

from labelfactory.configuration import ConfigurationError, EmbedderConfig

from .embedder import Embedder, EmbedderError
from .external import ExternalEmbedder
from .toy import ToyEmbedder

LOG = logging.getLogger(__name__)


def load_embedder(config: EmbedderConfig) -> Embedder:
    """ Build the embedder selected by ``embedder.kind`` """
    if config.kind == "toy":
        return ToyEmbedder(dim=config.dim, seed=config.seed)
    if config.kind == "external":
        if not config.weights_path:
            raise ConfigurationError(
                "External embedder needs embedder.weights_path or FACTORY_EMBEDDER_WEIGHTS",
                "embedder.weights_path"
            )
        return ExternalEmbedder(config.weights_path)
    raise ConfigurationError(f"Unknown embedder kind '{config.kind}'", "embedder.kind")
