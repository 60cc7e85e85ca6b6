""" Generator adaptation objectives and their schedule """

import logging

from dataclasses import dataclass, field
from typing import Iterable, Optional, Union

import torch
import torch.nn.functional as F

from torch import Tensor

from labelfactory.configuration import FactoryConfig
from labelfactory.embedding import Embedder
from labelfactory.networks.discriminator import DualDiscriminator, Mode
from labelfactory.networks.generator import StyleGenerator

LOG = logging.getLogger(__name__)

# Squared norms at or below this count as zero vectors
ZERO_NORM_SQ = 1e-20


class TrainingDivergedError(Exception):
    """ Exception raised when a loss component stops being finite.

    Attributes:
        component: name of the offending loss term
        iteration: training iteration, if known
        value: the non-finite value
    """

    def __init__(self, component: str, iteration: Optional[int] = None, value: float = float("nan")) -> None:
        self.component = component
        self.iteration = iteration
        self.value = value
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"Loss component '{component}' is {value}{where}")


@dataclass
class SimilarityDistribution:
    """ N-way softmax over cosine similarities of one batch member to the others """
    probs: Tensor
    layer: int
    anchor: int


@dataclass
class AdaptationSchedule:
    """ Loss weights, alternation period and two-phase layer schedule """
    lambda_1: float = 1.0
    lambda_2: float = 1.0
    lambda_f: int = 2
    phase_switch_iter: int = 500
    deep_layers: list[int] = field(default_factory=list)
    shallow_layers: list[int] = field(default_factory=list)
    total_iters: int = 1000

    def __post_init__(self):
        if self.lambda_f < 1:
            raise ValueError(f"lambda_f must be >= 1, got {self.lambda_f}")
        if not 0 <= self.phase_switch_iter <= self.total_iters:
            raise ValueError(f"phase_switch_iter must lie in [0, {self.total_iters}], got {self.phase_switch_iter}")

    @classmethod
    def from_config(cls, config: FactoryConfig) -> "AdaptationSchedule":
        adapt = config.adapt
        return cls(
            lambda_1=adapt.lambda_1,
            lambda_2=adapt.lambda_2 if adapt.use_text else 0.0,
            lambda_f=adapt.lambda_f,
            phase_switch_iter=adapt.phase_switch_iter,
            deep_layers=config.deep_layers(),
            shallow_layers=config.shallow_layers(),
            total_iters=adapt.total_iters,
        )


@dataclass
class AnchorSet:
    """ One base latent per few-shot image; anchor samples are base + sigma * noise """
    bases: Tensor
    sigma: float = 0.05
    warned: bool = field(default=False, repr=False, compare=False)

    @classmethod
    def sample(cls, count: int, z_dim: int, seed: int, sigma: float = 0.05) -> "AnchorSet":
        rng = torch.Generator().manual_seed(seed)
        return cls(bases=torch.randn(count, z_dim, generator=rng), sigma=sigma)

    def __len__(self) -> int:
        return int(self.bases.shape[0])


@dataclass
class LossParts:
    """ Components of the combined adaptation objective """
    adversarial: Tensor
    distance: Tensor
    direction: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "adversarial": float(self.adversarial),
            "distance": float(self.distance),
            "direction": float(self.direction),
        }


# Distance consistency -----------------------------------------------------

def pairwise_cosine(features: Tensor) -> Tensor:
    """ [B, ...] -> [B, B] cosine matrix; pairs involving a zero vector get 0 """
    flat = features.flatten(1)
    norms_sq = (flat * flat).sum(dim=1)
    safe = torch.where(norms_sq > ZERO_NORM_SQ, norms_sq, torch.ones_like(norms_sq)).sqrt()
    unit = flat / safe[:, None]
    unit = torch.where((norms_sq > ZERO_NORM_SQ)[:, None], unit, torch.zeros_like(unit))
    return unit @ unit.T


def _off_diagonal(matrix: Tensor) -> Tensor:
    """ Drop the diagonal of a [B, B] matrix, giving [B, B-1] in index order """
    size = matrix.shape[0]
    mask = ~torch.eye(size, dtype=torch.bool, device=matrix.device)
    return matrix[mask].reshape(size, size - 1)


def similarity_logits(features: Tensor) -> Tensor:
    if features.shape[0] < 2:
        raise ValueError(f"Need at least 2 feature tensors, got {features.shape[0]}")
    return _off_diagonal(pairwise_cosine(features))


def similarity_distribution(features: Union[Tensor, list[Tensor]], i: int, layer: int = 0) -> SimilarityDistribution:
    """
    Softmax over cosine similarities between member ``i`` and every other member.

    Args:
        features: N+1 feature tensors of identical shape (list or stacked tensor)
        i: Anchor sample index
        layer: Layer index the features came from (recorded only)
    """
    if isinstance(features, list):
        shapes = {tuple(f.shape) for f in features}
        if len(shapes) != 1:
            raise ValueError(f"Feature tensors must share one shape, got {sorted(shapes)}")
        features = torch.stack(features)
    if not 0 <= i < features.shape[0]:
        raise ValueError(f"Anchor index {i} outside batch of {features.shape[0]}")
    probs = F.softmax(similarity_logits(features)[i], dim=0)
    return SimilarityDistribution(probs=probs, layer=layer, anchor=i)


def kl_divergence(q: Tensor, p: Tensor) -> Tensor:
    """ KL(q || p) along the last dimension, with 0 * log 0 = 0 """
    return (torch.xlogy(q, q) - torch.xlogy(q, p)).sum(dim=-1)


def distance_consistency_from_features(frozen: dict[int, Tensor], adapted: dict[int, Tensor]) -> Tensor:
    """
    Mean over layers and samples of KL(adapted || frozen) between the
    per-sample similarity distributions.
    """
    if not adapted:
        raise ValueError("Distance consistency needs at least one layer")
    per_layer = []
    for m in sorted(adapted):
        log_q = F.log_softmax(similarity_logits(adapted[m]), dim=1)
        log_p = F.log_softmax(similarity_logits(frozen[m]), dim=1)
        per_layer.append((log_q.exp() * (log_q - log_p)).sum(dim=1).mean())
    return torch.stack(per_layer).mean()


def distance_consistency_loss(frozen_generator: StyleGenerator, adapted_generator: StyleGenerator,
                              z_batch: Tensor, layers: Iterable[int]) -> Tensor:
    """ Distance-consistency term; differentiable with respect to ``adapted_generator`` only """
    layers = sorted(set(layers))
    if not layers:
        raise ValueError("Distance consistency needs a non-empty layer set")
    if z_batch.shape[0] < 2:
        raise ValueError(f"Distance consistency needs a batch of at least 2, got {z_batch.shape[0]}")

    with torch.no_grad():
        frozen = frozen_generator.synthesize(frozen_generator.map_latent(z_batch), capture=layers).features
    adapted = adapted_generator.synthesize(adapted_generator.map_latent(z_batch), capture=layers).features
    return distance_consistency_from_features(frozen, adapted)


# Directional text loss ----------------------------------------------------

def text_direction(embedder: Embedder, source_text: str, target_text: str) -> Tensor:
    if source_text == target_text:
        raise ValueError("Source and target text must differ")
    return embedder.embed_text(target_text) - embedder.embed_text(source_text)


def directional_loss_from_embeddings(frozen_embeddings: Tensor, adapted_embeddings: Tensor,
                                     direction: Tensor) -> Tensor:
    """
    Mean of 1 - cos(dI, dT) with dI = adapted - frozen image embeddings.
    Samples where either direction has zero norm contribute exactly 1.
    """
    delta_image = adapted_embeddings - frozen_embeddings
    delta_text = direction.to(delta_image)

    image_sq = (delta_image * delta_image).sum(dim=1)
    text_sq = (delta_text * delta_text).sum()
    degenerate = (image_sq <= ZERO_NORM_SQ) | (text_sq <= ZERO_NORM_SQ)

    safe_image = torch.where(degenerate, torch.ones_like(image_sq), image_sq).sqrt()
    safe_text = torch.where(text_sq > ZERO_NORM_SQ, text_sq, torch.ones_like(text_sq)).sqrt()
    cosine = (delta_image @ delta_text) / (safe_image * safe_text)
    per_sample = torch.where(degenerate, torch.ones_like(cosine), 1.0 - cosine.clamp(-1.0, 1.0))

    n_degenerate = int(degenerate.sum())
    if n_degenerate:
        LOG.warning("Directional loss degenerate (zero-norm direction) for %d of %d samples",
                    n_degenerate, degenerate.numel())
    return per_sample.mean()


def directional_loss(embedder: Embedder, frozen_generator: StyleGenerator, adapted_generator: StyleGenerator,
                     z_batch: Tensor, source_text: str, target_text: str) -> Tensor:
    """ Directional loss between the frozen->adapted image change and the text change """
    if z_batch.shape[0] < 1:
        raise ValueError("Directional loss needs at least one latent")
    direction = text_direction(embedder, source_text, target_text)
    with torch.no_grad():
        frozen_images = frozen_generator(z_batch)
        frozen_embeddings = embedder.embed_image(frozen_images)
    adapted_embeddings = embedder.embed_image(adapted_generator(z_batch))
    return directional_loss_from_embeddings(frozen_embeddings, adapted_embeddings, direction)


# Adversarial terms --------------------------------------------------------

def adversarial_losses_from_logits(real_logits: Tensor, fake_logits: Tensor) -> tuple[Tensor, Tensor]:
    """ Non-saturating logistic losses, averaged over batch and (for patches) grid cells """
    g_loss = F.softplus(-fake_logits).mean()
    d_loss = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    return g_loss, d_loss


def adversarial_losses(discriminator: DualDiscriminator, real_images: Tensor, fake_images: Tensor,
                       mode: Mode) -> tuple[Tensor, Tensor]:
    """
    Returns (g_loss, d_loss) for the selected discriminator view.

    Pass ``fake_images.detach()`` when stepping the discriminator so no
    gradient reaches the generator.
    """
    if real_images.shape[0] == 0 or fake_images.shape[0] == 0:
        raise ValueError("Adversarial losses need non-empty real and fake batches")
    real_logits = discriminator.score(real_images, mode)
    fake_logits = discriminator.score(fake_images, mode)
    return adversarial_losses_from_logits(real_logits, fake_logits)


def generator_adversarial_loss(discriminator: DualDiscriminator, fake_images: Tensor, mode: Mode) -> Tensor:
    """ The g_loss half of ``adversarial_losses`` without scoring a real batch """
    if fake_images.shape[0] == 0:
        raise ValueError("Adversarial loss needs a non-empty fake batch")
    return F.softplus(-discriminator.score(fake_images, mode)).mean()


def r1_penalty(discriminator: DualDiscriminator, real_images: Tensor, mode: Mode) -> Tensor:
    """ Squared gradient norm of the real logits with respect to the real pixels """
    real_images = real_images.detach().requires_grad_(True)
    logits = discriminator.score(real_images, mode)
    (grad,) = torch.autograd.grad(logits.sum(), real_images, create_graph=True)
    return grad.pow(2).sum(dim=[1, 2, 3]).mean()


# Schedule -----------------------------------------------------------------

def select_mode_and_latent(iteration: int, schedule: AdaptationSchedule, anchors: Optional[AnchorSet],
                           rng: torch.Generator, batch_size: int, z_dim: int) -> tuple[Mode, Tensor]:
    """
    Pick the discriminator view and the latent batch for one iteration.

    Every ``lambda_f``-th iteration samples around a random anchor base and
    faces the image-level discriminator; all others sample the standard
    normal and face the patch-level one. ``anchors=None`` disables the
    anchor region, giving plain image-level adversarial training.
    """
    if anchors is None:
        return Mode.IMAGE_LEVEL, torch.randn(batch_size, z_dim, generator=rng)

    if iteration % schedule.lambda_f == 0:
        if len(anchors) == 0:
            if not anchors.warned:
                LOG.warning("Anchor set is empty, falling back to patch-level discrimination")
                anchors.warned = True
            return Mode.PATCH_LEVEL, torch.randn(batch_size, z_dim, generator=rng)
        picks = torch.randint(len(anchors), (batch_size,), generator=rng)
        noise = torch.randn(batch_size, z_dim, generator=rng, dtype=anchors.bases.dtype)
        return Mode.IMAGE_LEVEL, anchors.bases[picks] + anchors.sigma * noise

    return Mode.PATCH_LEVEL, torch.randn(batch_size, z_dim, generator=rng)


def active_distance_layers(iteration: int, schedule: AdaptationSchedule) -> list[int]:
    """ Deep layers before the phase switch, shallow layers from the switch on """
    if iteration < schedule.phase_switch_iter:
        return list(schedule.deep_layers)
    return list(schedule.shallow_layers)


def combined_objective(parts: LossParts, schedule: AdaptationSchedule, iteration: Optional[int] = None) -> Tensor:
    """ L_adv + lambda_1 * L_dist + lambda_2 * L_direction, refusing non-finite components """
    for name, value in parts.__dict__.items():
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise TrainingDivergedError(name, iteration, float(torch.as_tensor(value).detach().reshape(-1)[0]))
    return parts.adversarial + schedule.lambda_1 * parts.distance + schedule.lambda_2 * parts.direction
