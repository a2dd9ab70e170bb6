"""Conditional diffusion inpainting of the masked region at the receiver.

Forward diffusion draws a single noise field per trajectory and produces
latents B_t = sqrt(abar_t) * image + sqrt(1 - abar_t) * eps. The denoiser is
trained to map B_t to B_{t-1} (same trajectory, one step less noise). At
recovery time the loop starts from B_T, keeps the background from the latent
sequence of the received masked image, and lets the network regenerate only
the masked region:

    D_{t-1} = U(D_t | cond) * M + B_{t-1} * (1 - M)

Because B_0 equals the received image exactly, every pixel outside the mask
survives bit-exact. Conditioning enters through cross-attention over a
single embedding token (the entity index at authorized receivers, a learned
null token otherwise).

Internally the network predicts a clean image and the one-step output is
formed as a_t * clean + b_t * input with schedule-derived coefficients; this
is algebraically the optimal shape for the B_t -> B_{t-1} regression under a
shared noise field and keeps training stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from privsem.errors import ConfigurationError, DimensionError
from privsem.imaging import BinaryMask, Image
from privsem.seeding import derive_seed, torch_gen


@dataclass(frozen=True)
class DiffusionSchedule:
    """Timestep count T and cumulative retention coefficients abar_0..abar_T."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64).reshape(-1)
        if ab.size < 2:
            raise ConfigurationError("schedule needs at least one step")
        if ab[0] != 1.0:
            raise ConfigurationError("alpha_bar[0] must equal 1")
        if not ((ab > 0.0).all() and (ab <= 1.0).all()):
            raise ConfigurationError("alpha_bar values must lie in (0, 1]")
        if not (np.diff(ab) < 0.0).all():
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def timesteps(self) -> int:
        return self.alpha_bar.size - 1

    @classmethod
    def linear_beta(cls, timesteps: int = 100, beta_start: float = 1e-4,
                    beta_end: float = 0.12) -> "DiffusionSchedule":
        """Linear beta ramp. The default end value is chosen so that at the
        desk-scale T=100 the terminal retention abar_T is ~2e-3: the final
        latent must be near pure noise or the denoiser never learns to
        generate masked content from the condition alone."""
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(ab)

    def to_meta(self) -> dict:
        return {"timesteps": self.timesteps, "alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_meta(cls, meta: dict) -> "DiffusionSchedule":
        return cls(np.asarray(meta["alpha_bar"], dtype=np.float64))


def forward_diffuse(image: Image, schedule: DiffusionSchedule, seed: int) -> list[np.ndarray]:
    """Latents B_0..B_T with one shared noise field; B_0 is the image itself."""
    gen = torch_gen(seed)
    x = torch.from_numpy(image.pixels)
    eps = torch.randn(x.shape, generator=gen)
    out = [image.pixels.copy()]
    for t in range(1, schedule.timesteps + 1):
        ab = schedule.alpha_bar[t]
        bt = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps
        out.append(bt.numpy().astype(np.float32))
    return out


# ---------------------------------------------------------------------------
# cross-attention


def cross_attention(features: torch.Tensor, condition: torch.Tensor,
                    w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor) -> torch.Tensor:
    """Attend feature tokens over condition tokens; residual added to features.

    features: (..., n, C); condition: (..., m, D);
    w_q: (d_attn, C); w_k: (d_attn, D); w_v: (C, D).
    """
    if features.shape[-1] != w_q.shape[1]:
        raise DimensionError("feature channel count does not match W_Q")
    if condition.shape[-1] != w_k.shape[1] or condition.shape[-1] != w_v.shape[1]:
        raise DimensionError("condition dimension does not match W_K / W_V")
    if w_q.shape[0] != w_k.shape[0]:
        raise DimensionError("W_Q and W_K must share the attention dimension")
    d_attn = w_q.shape[0]
    q = features @ w_q.T
    k = condition @ w_k.T
    v = condition @ w_v.T
    attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_attn), dim=-1)
    return features + attn @ v


class CrossAttentionBlock(nn.Module):
    """Spatial feature map attending over condition tokens."""

    def __init__(self, channels: int, cond_dim: int, attn_dim: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.randn(attn_dim, channels) / math.sqrt(channels))
        self.w_k = nn.Parameter(torch.randn(attn_dim, cond_dim) / math.sqrt(cond_dim))
        self.w_v = nn.Parameter(torch.randn(channels, cond_dim) / math.sqrt(cond_dim))

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        if cond.dim() == 2:
            cond = cond.unsqueeze(1)  # single condition token
        out = cross_attention(tokens, cond, self.w_q, self.w_k, self.w_v)
        return out.transpose(1, 2).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# denoiser network


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class ConditionalUNet(nn.Module):
    """Small three-resolution U-Net with cross-attention conditioning.

    forward(x, t, cond) returns the one-step denoised latent (the estimate of
    B_{t-1} given B_t or a composite at noise level t).
    """

    def __init__(self, schedule: DiffusionSchedule, in_channels: int = 3,
                 base_channels: int = 16, channel_mults: tuple[int, ...] = (1, 2, 3),
                 cond_dim: int = 64, attn_dim: int = 48, time_dim: int = 64):
        super().__init__()
        if len(channel_mults) != 3:
            raise ConfigurationError("the network is built for exactly 3 resolutions")
        self.cond_dim = cond_dim
        chans = [base_channels * m for m in channel_mults]
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.time_dim = time_dim

        self.stem = nn.Conv2d(in_channels, chans[0], 3, padding=1)
        self.down0 = ResBlock(chans[0], chans[0], time_dim)
        self.pool0 = nn.Conv2d(chans[0], chans[1], 3, stride=2, padding=1)
        self.down1 = ResBlock(chans[1], chans[1], time_dim)
        self.pool1 = nn.Conv2d(chans[1], chans[2], 3, stride=2, padding=1)
        self.mid1 = ResBlock(chans[2], chans[2], time_dim)
        self.attn = CrossAttentionBlock(chans[2], cond_dim, attn_dim)
        self.mid2 = ResBlock(chans[2], chans[2], time_dim)
        self.up1_conv = nn.Conv2d(chans[2], chans[1], 3, padding=1)
        self.up1 = ResBlock(chans[1] * 2, chans[1], time_dim)
        self.up0_conv = nn.Conv2d(chans[1], chans[0], 3, padding=1)
        self.up0 = ResBlock(chans[0] * 2, chans[0], time_dim)
        self.head_norm = nn.GroupNorm(min(8, chans[0]), chans[0])
        self.head = nn.Conv2d(chans[0], in_channels, 3, padding=1)

        self.null_embedding = nn.Parameter(torch.randn(cond_dim) / math.sqrt(cond_dim))

        ab = schedule.alpha_bar
        sqrt_ab = np.sqrt(ab)
        b_coef = np.zeros(ab.size)
        a_coef = np.zeros(ab.size)
        # output = a[t] * clean_estimate + b[t] * input reproduces B_{t-1}
        # exactly when clean_estimate is the true image (shared noise field)
        for t in range(1, ab.size):
            b_coef[t] = math.sqrt((1.0 - ab[t - 1]) / (1.0 - ab[t]))
            a_coef[t] = sqrt_ab[t - 1] - b_coef[t] * sqrt_ab[t]
        self.register_buffer("a_coef", torch.from_numpy(a_coef.astype(np.float32)))
        self.register_buffer("b_coef", torch.from_numpy(b_coef.astype(np.float32)))
        self.schedule_meta = schedule.to_meta()

    def clean_estimate(self, x: torch.Tensor, t: torch.Tensor,
                       cond: torch.Tensor | None) -> torch.Tensor:
        if cond is None:
            cond = self.null_embedding[None, :].expand(x.shape[0], -1)
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        h0 = self.down0(self.stem(x), temb)
        h1 = self.down1(self.pool0(h0), temb)
        h2 = self.mid1(self.pool1(h1), temb)
        h2 = self.attn(h2, cond)
        h2 = self.mid2(h2, temb)
        u1 = self.up1_conv(nn.functional.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.up1(torch.cat([u1, h1], dim=1), temb)
        u0 = self.up0_conv(nn.functional.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.up0(torch.cat([u0, h0], dim=1), temb)
        return self.head(nn.functional.silu(self.head_norm(u0)))

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor | None = None) -> torch.Tensor:
        clean = self.clean_estimate(x, t, cond)
        a = self.a_coef[t][:, None, None, None]
        b = self.b_coef[t][:, None, None, None]
        return a * clean + b * x


def build_unet(schedule: DiffusionSchedule, cond_dim: int = 64, seed: int = 0,
               base_channels: int = 16) -> ConditionalUNet:
    torch.manual_seed(derive_seed(seed, "unet-init"))
    return ConditionalUNet(schedule, cond_dim=cond_dim, base_channels=base_channels)


# ---------------------------------------------------------------------------
# recovery


def denoise_inpaint(a_hat: Image, mask: BinaryMask, condition: np.ndarray | None,
                    unet: ConditionalUNet, schedule: DiffusionSchedule, seed: int,
                    collect_steps: bool = False):
    """Regenerate the masked region, keeping the background bit-exact.

    Returns the recovered Image, or (Image, [D_t trajectory]) when
    collect_steps is set.
    """
    if mask.shape != (a_hat.height, a_hat.width):
        raise DimensionError(f"mask shape {mask.shape} does not match image {a_hat.shape}")
    conds = None if condition is None else np.asarray(condition, dtype=np.float32)[None]
    images, trajectories = _recover_batch(
        np.stack([a_hat.pixels]), np.stack([mask.bits]), conds,
        unet, schedule, [seed], collect_steps=collect_steps)
    if collect_steps:
        return images[0], trajectories[0]
    return images[0]


def recover_images(a_hats: list[Image], masks: list[BinaryMask],
                   conditions: list[np.ndarray | None], unet: ConditionalUNet,
                   schedule: DiffusionSchedule, seeds: list[int],
                   batch: int = 40) -> list[Image]:
    """Batched recovery; per-image noise comes from per-image seeds."""
    cond_dim = unet.cond_dim
    null = unet.null_embedding.detach().numpy()
    out: list[Image] = []
    for lo in range(0, len(a_hats), batch):
        hi = min(lo + batch, len(a_hats))
        px = np.stack([im.pixels for im in a_hats[lo:hi]])
        mb = np.stack([m.bits for m in masks[lo:hi]])
        cond = np.stack([
            null if c is None else np.asarray(c, dtype=np.float32).reshape(cond_dim)
            for c in conditions[lo:hi]])
        images, _ = _recover_batch(px, mb, cond, unet, schedule, seeds[lo:hi])
        out.extend(images)
    return out


def _recover_batch(pixels: np.ndarray, mask_bits: np.ndarray, conditions: np.ndarray | None,
                   unet: ConditionalUNet, schedule: DiffusionSchedule, seeds: list[int],
                   collect_steps: bool = False):
    n = pixels.shape[0]
    x = torch.from_numpy(pixels)
    eps = torch.stack([torch.randn(x.shape[1:], generator=torch_gen(s)) for s in seeds])
    m = torch.from_numpy(mask_bits.astype(bool))[:, None, :, :]
    cond = None if conditions is None else torch.from_numpy(conditions)
    T = schedule.timesteps
    ab = schedule.alpha_bar

    def latent(t: int) -> torch.Tensor:
        if t == 0:
            return x
        return math.sqrt(ab[t]) * x + math.sqrt(1.0 - ab[t]) * eps

    unet.eval()
    trajectories: list[list[np.ndarray]] = [[] for _ in range(n)]
    with torch.inference_mode():
        d = latent(T)
        for t in range(T, 0, -1):
            tt = torch.full((n,), t, dtype=torch.long)
            c = unet(d, tt, cond)
            if t == 1:
                c = c.clamp(0.0, 1.0)
            d = torch.where(m, c, latent(t - 1))
            if collect_steps:
                for i in range(n):
                    trajectories[i].append(d[i].numpy().copy())
    images = [Image(d[i].numpy().copy()) for i in range(n)]
    return images, trajectories


# ---------------------------------------------------------------------------
# training


def _batched_step_loss(unet: ConditionalUNet, x: torch.Tensor, eps: torch.Tensor,
                       t: torch.Tensor, cond: torch.Tensor | None, ab: np.ndarray,
                       hole: torch.Tensor | None = None) -> torch.Tensor:
    """MSE between the one-step output on B_t and the true B_{t-1}.

    When a hole mask is given, the input latent carries no signal inside the
    hole (as the recovery loop's masked region does) while the target stays
    the full-image B_{t-1}; this is what teaches the network to synthesize
    masked content from the condition and the surrounding context instead of
    just passing visible signal through.
    """
    abt = torch.from_numpy(ab.astype(np.float32))
    a_t = abt[t][:, None, None, None]
    a_prev = abt[t - 1][:, None, None, None]
    x_in = x if hole is None else x * (~hole)
    b_t = torch.sqrt(a_t) * x_in + torch.sqrt(1.0 - a_t) * eps
    b_prev = torch.sqrt(a_prev) * x + torch.sqrt(1.0 - a_prev) * eps
    pred = unet(b_t, t, cond)
    return nn.functional.mse_loss(pred, b_prev)


def _random_holes(gen: torch.Generator, n: int, h: int, w: int,
                  r_lo: int, r_hi: int, masked_fraction: float) -> torch.Tensor | None:
    """Random sprite-like footprints for a fraction of the batch, (n, 1, h, w)."""
    if masked_fraction <= 0.0:
        return None
    from privsem.dataset import SHAPES, shape_footprint

    keep = torch.rand(n, generator=gen) < masked_fraction
    holes = np.zeros((n, 1, h, w), dtype=bool)
    for i in range(n):
        if not bool(keep[i]):
            continue
        r = int(torch.randint(r_lo, r_hi + 1, (1,), generator=gen))
        cy = int(torch.randint(4, h - 4, (1,), generator=gen))
        cx = int(torch.randint(4, w - 4, (1,), generator=gen))
        shape = SHAPES[int(torch.randint(0, len(SHAPES), (1,), generator=gen))]
        holes[i, 0] = shape_footprint(shape, h, w, float(cy), float(cx), float(r))
    return torch.from_numpy(holes)


def pretrain_unet(unet: ConditionalUNet, images: list[np.ndarray],
                  schedule: DiffusionSchedule, epochs: int = 4, batch: int = 24,
                  lr: float = 2e-3, seed: int = 0, pairs_per_image: int = 8,
                  masked_fraction: float = 0.5, hole_radius: tuple[int, int] = (8, 24),
                  start_epoch: int = 0, opt_state: dict | None = None,
                  epoch_callback=None) -> dict:
    """Train the denoiser on a general corpus under the null condition.

    Half the steps run with a random signal-free hole in the input so the
    model acquires generic inpainting behavior.
    """
    opt = torch.optim.Adam(unet.parameters(), lr=lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)
    ab = schedule.alpha_bar
    T = schedule.timesteps
    losses = []
    data = torch.from_numpy(np.stack(images))
    h, w = data.shape[-2:]
    for epoch in range(start_epoch, epochs):
        gen = torch_gen(seed, "pretrain", epoch)
        idx = torch.arange(len(images)).repeat_interleave(pairs_per_image)
        idx = idx[torch.randperm(len(idx), generator=gen)]
        tvals = torch.randint(1, T + 1, (len(idx),), generator=gen)
        epoch_loss = 0.0
        nb = 0
        for lo in range(0, len(idx), batch):
            sel = idx[lo:lo + batch]
            x = data[sel]
            eps = torch.randn(x.shape, generator=gen)
            holes = _random_holes(gen, len(sel), h, w, *hole_radius, masked_fraction)
            loss = _batched_step_loss(unet, x, eps, tvals[lo:lo + batch], None, ab, holes)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(loss.item())
            nb += 1
        losses.append(epoch_loss / max(nb, 1))
        if epoch_callback:
            epoch_callback(epoch, opt)
    return {"epoch_losses": losses, "epochs": epochs, "failed": _not_descending(losses)}


def finetune_on_db(unet: ConditionalUNet, sample_images: list[list[np.ndarray]],
                   embedding_table: np.ndarray, schedule: DiffusionSchedule,
                   epochs: int = 4, batch: int = 16, lr: float = 5e-4, seed: int = 0,
                   train_embeddings: bool = True, masked_fraction: float = 0.5,
                   hole_radius: tuple[int, int] = (10, 44), start_epoch: int = 0,
                   opt_state: dict | None = None, embeddings_state: np.ndarray | None = None,
                   epoch_callback=None) -> tuple[np.ndarray, dict]:
    """Transfer-learn the denoiser on the database samples, conditioned per entity.

    sample_images[k] holds the sample set of entity k+1. Every sample
    trajectory shares one noise field per epoch, and each timestep of each
    trajectory contributes a regression step toward its B_{t-1}; half the
    steps hide a random hole in the input (up to nearly the whole sprite) so
    the entity embedding, not the visible signal, must supply the identity.
    Returns the (possibly fine-tuned) embedding table and a report.
    """
    flat: list[np.ndarray] = []
    entity_of: list[int] = []
    for k, samples in enumerate(sample_images):
        for img in samples:
            flat.append(img)
            entity_of.append(k)
    if not flat:
        raise ConfigurationError("database has no sample images")
    data = torch.from_numpy(np.stack(flat))
    entity_idx = torch.tensor(entity_of, dtype=torch.long)

    table_init = embeddings_state if embeddings_state is not None else embedding_table
    table = torch.from_numpy(np.asarray(table_init, dtype=np.float32).copy())
    params = list(unet.parameters())
    if train_embeddings:
        table = nn.Parameter(table)
        params = params + [table]
    opt = torch.optim.Adam(params, lr=lr)
    if opt_state is not None:
        opt.load_state_dict(opt_state)

    ab = schedule.alpha_bar
    T = schedule.timesteps
    h, w = data.shape[-2:]
    losses = []
    for epoch in range(start_epoch, epochs):
        gen = torch_gen(seed, "finetune", epoch)
        eps_all = torch.randn(data.shape, generator=gen)  # one field per trajectory
        order = torch.randperm(len(flat), generator=gen)
        epoch_loss = 0.0
        nb = 0
        for t in range(T, 0, -1):
            tt = torch.full((len(order),), t, dtype=torch.long)
            for lo in range(0, len(order), batch):
                sel = order[lo:lo + batch]
                cond = table[entity_idx[sel]]
                holes = _random_holes(gen, len(sel), h, w, *hole_radius, masked_fraction)
                loss = _batched_step_loss(unet, data[sel], eps_all[sel],
                                          tt[lo:lo + batch], cond, ab, holes)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += float(loss.item())
                nb += 1
        losses.append(epoch_loss / max(nb, 1))
        if epoch_callback:
            epoch_callback(epoch, opt, table.detach().numpy().copy())
    report = {"epoch_losses": losses, "epochs": epochs, "failed": _not_descending(losses)}
    return table.detach().numpy().copy(), report


def _not_descending(losses: list[float]) -> bool:
    return len(losses) >= 2 and not (losses[-1] < losses[0])
