"""Text-conditioned latent denoiser and its pretraining loop.

The network is deliberately small (order 1e5 parameters): residual conv
blocks over the latent grid, a sinusoidal timestep embedding, and a
single cross-attention block whose queries are latent positions and
whose keys/values come from the conditioning sequence.  Conditioning
tokens carry no positional encoding, so the sequence acts as a set; this
is what lets a learned pseudo-word vector steer generation from any
template slot.

The final convolution is zero-initialized, so an untrained model
predicts zero noise and the training loss starts at E[||eps||^2]/n = 1.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .codec import CodecParams, encode, make_codec
from .conditioning import (ConditioningSequence, ImagePatchEncoder, Vocabulary,
                           build_vocabulary, image_encode, tokenize)
from .config import RunConfig
from .diffusion import NoiseSchedule, make_schedule
from .errors import InputError, RunFailure
from .persist import load_checkpoint, save_checkpoint
from .seeding import (DTYPE, count_parameters, derive_seed, generator, rand,
                      randint, randn, seeded_param_init)

logger = logging.getLogger(__name__)


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sinusoidal features of integer timesteps, shape (B, dim)."""
    if dim % 2 != 0:
        raise InputError("time embedding dim must be even")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    angles = t.to(DTYPE).unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, time_dim: int):
        super().__init__()
        groups = _norm_groups(channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, h: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        r = self.conv1(torch.nn.functional.silu(self.norm1(h)))
        # The embedding shift must land after the norm; GroupNorm's mean
        # subtraction would erase a per-channel bias added before it.
        r = torch.nn.functional.silu(
            self.norm2(r) + self.time_proj(temb)[:, :, None, None])
        return h + self.conv2(r)


class CrossAttentionBlock(nn.Module):
    """Latent positions attend to the conditioning set."""

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(cond_dim, channels)
        self.to_v = nn.Linear(cond_dim, channels)
        self.to_out = nn.Linear(channels, channels)
        self.channels = channels

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = h.shape
        q = self.to_q(self.norm(h).flatten(2).transpose(1, 2))  # (B, HW, C)
        k = self.to_k(cond)
        v = self.to_v(cond)
        scores = q @ k.transpose(1, 2) / math.sqrt(c)
        attn = torch.softmax(scores, dim=-1)
        out = self.to_out(attn @ v)
        return h + out.transpose(1, 2).reshape(b, c, hh, ww)


class LatentDenoiser(nn.Module):
    """Predicts the noise component of a latent at timestep t.

    forward(z, t, cond) takes a batch: z (B, C, H, W), t (B,) integer
    timesteps, cond (B, L, cond_dim).
    """

    def __init__(self, latent_channels: int, channels: int, cond_dim: int,
                 time_dim: int, seed: int, zero_final: bool = True):
        super().__init__()
        self.latent_channels = latent_channels
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.conv_in = nn.Conv2d(latent_channels, channels, 3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(),
                                      nn.Linear(time_dim, time_dim))
        # Pooled conditioning joins the timestep embedding so global
        # attributes steer every block; cross-attention handles the rest.
        self.cond_pool = nn.Linear(cond_dim, time_dim)
        self.block1 = ResidualBlock(channels, time_dim)
        self.attn = CrossAttentionBlock(channels, cond_dim)
        self.block2 = ResidualBlock(channels, time_dim)
        self.norm_out = nn.GroupNorm(_norm_groups(channels), channels)
        self.conv_out = nn.Conv2d(channels, latent_channels, 3, padding=1)
        self.to(DTYPE)
        zero = ("conv_out",) if zero_final else ()
        seeded_param_init(self, generator(seed), zero_prefixes=zero)

    def forward(self, z: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise InputError(f"latent batch must be (B, {self.latent_channels}, H, W)")
        if cond.ndim != 3 or cond.shape[2] != self.cond_dim:
            raise InputError(f"conditioning batch must be (B, L, {self.cond_dim})")
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        temb = temb + self.cond_pool(cond.mean(dim=1))
        h = self.conv_in(z)
        h = self.block1(h, temb)
        h = self.attn(h, cond)
        h = self.block2(h, temb)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()


def denoise(z_t: torch.Tensor, t: int, cond: ConditioningSequence,
            model: LatentDenoiser) -> torch.Tensor:
    """Single-latent prediction; gradients flow through to the conditioning."""
    if not isinstance(t, int) or isinstance(t, bool) or t < 1:
        raise InputError(f"timestep t={t!r} must be a positive integer")
    if z_t.ndim != 3:
        raise InputError("latent must be (C, H, W)")
    t_batch = torch.tensor([t], dtype=torch.long)
    out = model(z_t.unsqueeze(0), t_batch, cond.vectors.unsqueeze(0))
    return out[0]


def build_denoiser(config: RunConfig, zero_final: bool = True) -> LatentDenoiser:
    latent_channels = 3 * config.codec.patch_size**2
    return LatentDenoiser(
        latent_channels=latent_channels,
        channels=config.backbone.channels,
        cond_dim=config.conditioning.embed_dim,
        time_dim=config.backbone.time_dim,
        seed=config.backbone.seed,
        zero_final=zero_final,
    )


def build_image_encoder(config: RunConfig) -> ImagePatchEncoder:
    return ImagePatchEncoder(
        image_size=config.image.size,
        embed_dim=config.conditioning.embed_dim,
        tokens=config.conditioning.image_tokens,
        seed=config.conditioning.encoder_seed,
        gain=config.conditioning.encoder_gain,
    )


@dataclass
class PretrainResult:
    model: LatentDenoiser
    losses: list[float]
    param_count: int


def batched_forward_diffuse(z0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                            sched: NoiseSchedule) -> torch.Tensor:
    """Vectorized forward marginal for a batch of (z0, t, eps)."""
    ab = sched.alpha_bar[t - 1].reshape(-1, 1, 1, 1)
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


IMAGE_COND_TEMPLATE = "a painting of [C]"


def pretrain_backbone(corpus, sched: NoiseSchedule, vocab: Vocabulary,
                      config: RunConfig) -> PretrainResult:
    """Train the denoiser (and the token embedding table) on the corpus.

    Uniform timesteps, fresh Gaussian noise, MSE in eps.  Conditioning
    alternates between the example's caption and the placeholder template
    filled with the example's own pooled image-encoder token (probability
    backbone.image_cond_prob per step).  The second form is what teaches
    the denoiser to read vectors from the frozen encoder's output space,
    so that a pseudo-word spliced in later lands in known territory.
    Diverging loss raises RunFailure.  On return the model and the
    embedding table are frozen; they are never trained again downstream.
    """
    if len(corpus) < 1:
        raise InputError("corpus is empty")
    codec = make_codec(config.codec.patch_size, config.image.size, config.codec.seed)
    latents = torch.stack([encode(ex.image, codec) for ex in corpus])
    ids = [tokenize(ex.caption, vocab) for ex in corpus]
    width = len(ids[0])
    if any(len(row) != width for row in ids):
        raise InputError("corpus captions must tokenize to equal lengths")
    ids = torch.tensor(ids, dtype=torch.long)

    encoder = build_image_encoder(config)
    with torch.no_grad():
        img_token = torch.stack([image_encode(ex.image, encoder).mean(dim=0)
                                 for ex in corpus])
    tem_ids = torch.tensor(tokenize(IMAGE_COND_TEMPLATE, vocab), dtype=torch.long)
    pos = int((tem_ids == vocab.placeholder_id).nonzero()[0])

    model = build_denoiser(config)
    n_params = count_parameters(model)
    logger.info("denoiser parameters: %d", n_params)
    if not math.isfinite(float(n_params)) or n_params <= 0:
        raise RunFailure("parameter count must be positive and finite")

    opt = torch.optim.Adam(list(model.parameters()) + [vocab.embeddings],
                           lr=config.backbone.lr)
    g = generator(derive_seed(config.backbone.seed, "pretrain"))
    batch = config.backbone.batch_size
    lr0, lr1 = config.backbone.lr, config.backbone.lr_min
    total = config.backbone.steps
    losses: list[float] = []
    for step in range(1, config.backbone.steps + 1):
        if lr1 < lr0 and total > 1:
            # The conditional component of the gradient is tiny next to
            # minibatch noise; without a decaying rate it never survives
            # Adam's stationary wander, and samples ignore the caption.
            frac = (step - 1) / (total - 1)
            lr_now = lr1 + 0.5 * (lr0 - lr1) * (1.0 + math.cos(math.pi * frac))
            for group in opt.param_groups:
                group["lr"] = lr_now
        idx = randint(0, latents.shape[0], (batch,), g)
        t = randint(1, sched.T + 1, (batch,), g)
        eps = randn((batch,) + tuple(latents.shape[1:]), g)
        z_t = batched_forward_diffuse(latents[idx], t, eps, sched)
        use_image = (config.backbone.image_cond_prob > 0.0
                     and bool(rand((), g) < config.backbone.image_cond_prob))
        if use_image:
            cond = vocab.embeddings[tem_ids].unsqueeze(0).expand(
                batch, -1, -1).clone()
            cond[:, pos] = img_token[idx]
        else:
            cond = vocab.embeddings[ids[idx]]
        pred = model(z_t, t, cond)
        loss = torch.mean((eps - pred) ** 2)
        if not torch.isfinite(loss):
            raise RunFailure(f"pretraining diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if step % 200 == 0 or step == config.backbone.steps:
            logger.info("pretrain step %d/%d loss %.5f",
                        step, config.backbone.steps, losses[-1])
    model.freeze()
    vocab.freeze()
    return PretrainResult(model=model, losses=losses, param_count=n_params)


@dataclass
class BackboneBundle:
    """Everything a downstream stage needs, rebuilt from one checkpoint."""

    config: RunConfig
    config_hash: str
    model: LatentDenoiser
    vocab: Vocabulary
    encoder: ImagePatchEncoder
    codec: CodecParams
    sched: NoiseSchedule


def save_pretrained(path: str, config: RunConfig, model: LatentDenoiser,
                    vocab: Vocabulary) -> None:
    """Persist the trained denoiser and token table as one checkpoint."""
    tensors = {"denoiser." + n: p for n, p in model.named_parameters()}
    tensors["vocab.embeddings"] = vocab.embeddings
    save_checkpoint(path, config, tensors)


def load_pretrained(path: str) -> BackboneBundle:
    """Rebuild the frozen backbone stack from a checkpoint.

    Architecture and frozen helpers (codec, image encoder, schedule) are
    reconstructed from the embedded config; stored arrays overwrite the
    denoiser and token table.
    """
    config, tensors, stored_hash = load_checkpoint(path)
    model = build_denoiser(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = "denoiser." + name
            if key not in tensors:
                raise InputError(f"{path}: checkpoint is missing array {key!r}")
            if tuple(tensors[key].shape) != tuple(p.shape):
                raise InputError(f"{path}: array {key!r} has the wrong shape")
            p.copy_(tensors[key])
    vocab = build_vocabulary(config.conditioning.embed_dim,
                             config.conditioning.embed_seed,
                             config.conditioning.embed_scale)
    if "vocab.embeddings" not in tensors:
        raise InputError(f"{path}: checkpoint is missing the token table")
    if tuple(tensors["vocab.embeddings"].shape) != tuple(vocab.embeddings.shape):
        raise InputError(f"{path}: token table shape mismatch")
    with torch.no_grad():
        vocab.embeddings.copy_(tensors["vocab.embeddings"])
    model.freeze()
    vocab.freeze()
    codec = make_codec(config.codec.patch_size, config.image.size, config.codec.seed)
    sched = make_schedule(config.schedule.T, config.schedule.beta_start,
                          config.schedule.beta_end, config.schedule.sigma_mode)
    return BackboneBundle(config=config, config_hash=stored_hash, model=model,
                          vocab=vocab, encoder=build_image_encoder(config),
                          codec=codec, sched=sched)
