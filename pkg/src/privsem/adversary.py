"""Simulated eavesdropper: intercept, decode, regenerate without the database.

The profile deliberately has no fields that could carry database content; it
holds only a block decoder, a base (non-fine-tuned) denoiser, and channel
assumptions. The decoded entity-id header is an opaque integer to the
eavesdropper, so generation always runs under its own null (or random)
condition token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from privsem.channel import (BlockDecoder, BlockQuantizer, ChannelConfig, SymbolFrame, decode)
from privsem.diffusion import ConditionalUNet, DiffusionSchedule, denoise_inpaint
from privsem.errors import ConfigurationError
from privsem.guard import FeatureEncoder, cell_embeddings
from privsem.imaging import Image, recover_mask
from privsem.seeding import np_rng


@dataclass
class EavesdropperProfile:
    """Everything the eavesdropper owns. No prototypes, no embeddings, no samples."""

    decoder: BlockDecoder
    generator: ConditionalUNet  # base model, never fine-tuned on the database
    schedule: DiffusionSchedule
    quantizer: BlockQuantizer
    snr_db_e: float
    strength: str = "strong"  # "strong": authorized decoder copy; "weak": own training
    condition_mode: str = "null"  # or "random": condition on a random token

    def __post_init__(self):
        if self.strength not in ("strong", "weak"):
            raise ConfigurationError(f"unknown eavesdropper strength {self.strength!r}")
        if self.condition_mode not in ("null", "random"):
            raise ConfigurationError(f"unknown condition mode {self.condition_mode!r}")


def eavesdrop(y_e: SymbolFrame, profile: EavesdropperProfile,
              image_shape: tuple[int, int, int], seed: int) -> Image:
    """Decode the intercepted frame and regenerate the hole with the base model."""
    cfg = ChannelConfig(snr_db=profile.snr_db_e)
    result = decode(y_e, cfg, profile.decoder, profile.quantizer, image_shape)
    mask = recover_mask(result.image, profile.quantizer.sentinel)
    condition = None
    if profile.condition_mode == "random":
        rng = np_rng(seed, "eve-random-cond")
        v = rng.standard_normal(profile.generator.cond_dim).astype(np.float32)
        condition = v / np.linalg.norm(v)
    return denoise_inpaint(result.image, mask, condition, profile.generator,
                           profile.schedule, seed)


def soft_leakage(candidate: Image | torch.Tensor, encoder: FeatureEncoder,
                 prototype: np.ndarray, threshold: float, margin: float = 0.05
                 ) -> torch.Tensor:
    """Differentiable hinge on the best patch similarity to the true prototype.

    Zero exactly when every pooled patch scores at most threshold - margin,
    which in turn guarantees the hard indicator is zero for that entity.
    """
    if isinstance(candidate, Image):
        x = torch.from_numpy(candidate.pixels)[None]
    else:
        x = candidate if candidate.dim() == 4 else candidate[None]
    cells = cell_embeddings(encoder(x))
    proto = torch.from_numpy(np.asarray(prototype, dtype=np.float32))
    scores = torch.einsum("d,bdhw->bhw", proto, cells)
    best = scores.reshape(scores.shape[0], -1).max(dim=1).values
    return torch.relu(best - threshold + margin).mean()
