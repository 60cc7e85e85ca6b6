from .generator import (
    LatentCode,
    StyleCode,
    StyleGenerator,
    SynthesisResult,
    snapshot_frozen,
    set_trainable_layers,
    stack_latents,
    truncate,
)
from .discriminator import (
    DualDiscriminator,
    Mode,
    augment_images,
    freeze_all_but_final,
)
