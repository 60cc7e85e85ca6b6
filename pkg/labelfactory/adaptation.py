""" Generator training loops: source pretraining and few-shot + text adaptation """

import copy
import logging

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from torch import Tensor

from labelfactory.configuration import FactoryConfig
from labelfactory.embedding import Embedder
from labelfactory.losses import (
    AdaptationSchedule,
    AnchorSet,
    LossParts,
    TrainingDivergedError,
    active_distance_layers,
    adversarial_losses,
    combined_objective,
    directional_loss_from_embeddings,
    distance_consistency_from_features,
    generator_adversarial_loss,
    r1_penalty,
    select_mode_and_latent,
    text_direction,
)
from labelfactory.networks.discriminator import DualDiscriminator, Mode, augment_images
from labelfactory.networks.generator import StyleGenerator, snapshot_frozen

LOG = logging.getLogger(__name__)

ADAM_BETAS = (0.0, 0.99)


@dataclass
class AdaptationResult:
    """ Adapted generator, the discriminator it was trained against and per-iteration traces """
    generator: StyleGenerator
    discriminator: DualDiscriminator
    traces: dict[str, list[float]] = field(default_factory=dict)
    modes: list[str] = field(default_factory=list)


def _optimizer(params: list, lr: float) -> Optional[torch.optim.Optimizer]:
    # torch refuses an empty parameter list; a fully frozen network simply never steps
    if not params:
        return None
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS)


def _check_finite(value: Tensor, component: str, iteration: int) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(component, iteration, float(value.detach()))


def _discriminator_step(discriminator: DualDiscriminator, optimizer: Optional[torch.optim.Optimizer],
                        real: Tensor, fake: Tensor, mode: Mode, r1_gamma: float, iteration: int) -> float:
    _, d_loss = adversarial_losses(discriminator, real, fake.detach(), mode)
    if r1_gamma > 0:
        d_loss = d_loss + 0.5 * r1_gamma * r1_penalty(discriminator, real, mode)
    _check_finite(d_loss, "discriminator", iteration)
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        d_loss.backward()
        optimizer.step()
    return float(d_loss.detach())


def adapt_generator(generator: StyleGenerator, fewshot_images: Tensor, config: FactoryConfig,
                    embedder: Optional[Embedder] = None, discriminator: Optional[DualDiscriminator] = None,
                    seed: int = 0) -> AdaptationResult:
    """
    Adapt a pretrained generator to the target style.

    Each iteration picks the discriminator view and latents from the anchor
    schedule, steps the discriminator, then steps the generator on
    L_adv + lambda_1 * L_dist + lambda_2 * L_direction. ``generator`` itself
    is left untouched; the adapted copy is returned.

    Args:
        generator: Source-pretrained generator
        fewshot_images: Target images, [K, 3, side, side] in [-1, 1]
        config: Factory configuration (adapt.* drives the schedule)
        embedder: Joint embedder for the text direction, required when lambda_2 > 0
        discriminator: Pretrained discriminator; a fresh one is built if omitted
        seed: Seed for anchors, latent sampling and augmentation

    Returns:
        AdaptationResult with the adapted generator and loss traces

    Raises:
        ValueError: If few-shot guidance is enabled but no images are given
        TrainingDivergedError: If any loss component becomes non-finite
    """
    adapt = config.adapt
    schedule = AdaptationSchedule.from_config(config)

    if adapt.use_fewshot and fewshot_images.shape[0] < 1:
        raise ValueError("Few-shot guidance needs at least one target image")
    use_text = schedule.lambda_2 > 0
    if use_text and embedder is None:
        raise ValueError("Text guidance needs an embedder")

    frozen = snapshot_frozen(generator)
    adapted = copy.deepcopy(generator)
    adapted.train()
    adapted.set_trainable_layers(config.trainable_layers(), mapping=False)

    if discriminator is None:
        discriminator = DualDiscriminator.from_config(config.discriminator, config.generator, seed=seed)
    else:
        discriminator = copy.deepcopy(discriminator)
    if adapt.freeze:
        discriminator.freeze_all_but_final()
    else:
        discriminator.unfreeze_all()

    anchors = None
    if adapt.use_fewshot and adapt.use_anchors:
        anchors = AnchorSet.sample(fewshot_images.shape[0], adapted.z_dim, seed=seed, sigma=adapt.anchor_sigma)

    direction = text_direction(embedder, config.source_text, config.target_text) if use_text else None

    opt_g = _optimizer(adapted.trainable_parameters(), adapt.lr)
    opt_d = _optimizer(discriminator.trainable_parameters(), adapt.lr) if adapt.use_fewshot else None
    rng = torch.Generator().manual_seed(seed)
    zero = torch.zeros(())

    LOG.info("Adapting generator for %d iterations (trainable layers %s, lambda_1=%s, lambda_2=%s, "
             "lambda_f=%d, switch at %d)", schedule.total_iters, sorted(adapted.trainable),
             schedule.lambda_1, schedule.lambda_2, schedule.lambda_f, schedule.phase_switch_iter)

    traces = {"adversarial": [], "distance": [], "direction": [], "total": [], "discriminator": []}
    modes = []
    for iteration in range(schedule.total_iters):
        mode, z = select_mode_and_latent(iteration, schedule, anchors, rng, adapt.batch_size, adapted.z_dim)
        layers = active_distance_layers(iteration, schedule)
        modes.append(mode.value)

        d_value = 0.0
        real = None
        if adapt.use_fewshot:
            picks = torch.randint(fewshot_images.shape[0], (adapt.batch_size,), generator=rng)
            real = fewshot_images[picks]
            with torch.no_grad():
                fake = adapted(z)
            if adapt.augment:
                real = augment_images(real, rng)
                fake = augment_images(fake, rng)
            d_value = _discriminator_step(discriminator, opt_d, real, fake, mode, adapt.r1_gamma, iteration)

        w = adapted.map_latent(z)
        capture = layers if schedule.lambda_1 > 0 else []
        result = adapted.synthesize(w, capture=capture)

        adversarial = zero
        if adapt.use_fewshot:
            fake = augment_images(result.image, rng) if adapt.augment else result.image
            adversarial = generator_adversarial_loss(discriminator, fake, mode)

        distance = zero
        if schedule.lambda_1 > 0:
            with torch.no_grad():
                frozen_features = frozen.synthesize(frozen.map_latent(z), capture=capture).features
            distance = distance_consistency_from_features(frozen_features, result.features)

        text = zero
        if use_text:
            with torch.no_grad():
                frozen_embeddings = embedder.embed_image(frozen(z))
            text = directional_loss_from_embeddings(frozen_embeddings, embedder.embed_image(result.image), direction)

        parts = LossParts(adversarial=adversarial, distance=distance, direction=text)
        total = combined_objective(parts, schedule, iteration)
        if opt_g is not None and total.requires_grad:
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
        adapted.update_w_avg(w)

        for name, value in parts.as_floats().items():
            traces[name].append(value)
        traces["total"].append(float(total.detach()))
        traces["discriminator"].append(d_value)

        if adapt.log_every and iteration % adapt.log_every == 0:
            LOG.debug("adapt %d/%d [%s] adv=%.4f dist=%.4f dir=%.4f d=%.4f", iteration, schedule.total_iters,
                      mode.value, traces["adversarial"][-1], traces["distance"][-1],
                      traces["direction"][-1], d_value)

    adapted.eval()
    LOG.info("Adaptation finished, final total loss %.4f",
             traces["total"][-1] if traces["total"] else float("nan"))
    return AdaptationResult(generator=adapted, discriminator=discriminator, traces=traces, modes=modes)


def pretrain_source_generator(source_images: Tensor, config: FactoryConfig,
                              seed: int = 0) -> AdaptationResult:
    """
    Train a generator from scratch on source-style images with the
    image-level discriminator. Stands in for a publicly pretrained backbone.

    Args:
        source_images: Pool of real source images, [n, 3, side, side] in [-1, 1]
        config: Factory configuration (generator.pretrain_* keys)
        seed: Seed for weight init, sampling and augmentation

    Returns:
        AdaptationResult holding the generator, its discriminator and the traces
    """
    gen_config = config.generator
    if source_images.shape[0] < 1:
        raise ValueError("Source pretraining needs at least one image")
    if tuple(source_images.shape[-2:]) != (gen_config.resolution,) * 2:
        raise ValueError(f"Source images must be {gen_config.resolution}px, got {list(source_images.shape)}")

    generator = StyleGenerator.from_config(gen_config, seed=seed)
    generator.set_trainable_layers(range(1, generator.num_layers + 1), mapping=True)
    discriminator = DualDiscriminator.from_config(config.discriminator, gen_config, seed=seed + 1)

    opt_g = _optimizer(generator.trainable_parameters(), gen_config.pretrain_lr)
    opt_d = _optimizer(discriminator.trainable_parameters(), gen_config.pretrain_lr)
    rng = torch.Generator().manual_seed(seed)
    batch = gen_config.pretrain_batch

    LOG.info("Pretraining source generator for %d iterations on %d images",
             gen_config.pretrain_iters, source_images.shape[0])

    traces = {"generator": [], "discriminator": []}
    for iteration in range(gen_config.pretrain_iters):
        z = torch.randn(batch, generator.z_dim, generator=rng)
        real = source_images[torch.randint(source_images.shape[0], (batch,), generator=rng)]
        with torch.no_grad():
            fake = generator(z)
        if config.adapt.augment:
            real = augment_images(real, rng)
            fake = augment_images(fake, rng)
        d_value = _discriminator_step(discriminator, opt_d, real, fake, Mode.IMAGE_LEVEL,
                                      config.adapt.r1_gamma, iteration)

        w = generator.map_latent(torch.randn(batch, generator.z_dim, generator=rng))
        fake = generator.synthesize(w).image
        if config.adapt.augment:
            fake = augment_images(fake, rng)
        g_loss = F.softplus(-discriminator.score_full(fake)).mean()
        _check_finite(g_loss, "generator", iteration)
        opt_g.zero_grad(set_to_none=True)
        g_loss.backward()
        opt_g.step()
        generator.update_w_avg(w)

        traces["generator"].append(float(g_loss.detach()))
        traces["discriminator"].append(d_value)
        if config.adapt.log_every and iteration % config.adapt.log_every == 0:
            LOG.debug("pretrain %d/%d g=%.4f d=%.4f", iteration, gen_config.pretrain_iters,
                      traces["generator"][-1], d_value)

    generator.eval()
    return AdaptationResult(generator=generator, discriminator=discriminator, traces=traces)
