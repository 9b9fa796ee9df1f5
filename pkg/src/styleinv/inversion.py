"""Pseudo-word learning for a single reference image.

Two routes produce a placeholder embedding v_hat that makes the frozen
denoiser reproduce a reference image's latent statistics:

* direct optimization of the embedding vector itself, and
* a small multi-layer cross-attention module that reads the frozen image
  encoder's tokens and emits v_hat.

The attention route refines a token sequence v_i through layers

    v_{i+1} = attention(v_i W_q, tau W_k, tau W_v)

where tau is the image token sequence, followed by mean pooling and a
learned linear map to the pseudo-word vectors.  Layer weights start at
the identity (plus small seeded noise), so the initial v_hat is close to
the pooled image tokens rather than an arbitrary point.

Both routes minimize the same denoising objective
MSE(eps, model(z_t, t, cond)) with the denoiser, image encoder, and
token table all frozen; checksums taken before and after training
enforce that contract.
"""

import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .backbone import LatentDenoiser, build_image_encoder, denoise
from .codec import CodecParams, encode
from .conditioning import (ImagePatchEncoder, Vocabulary, assemble_conditioning,
                           image_encode, tokenize)
from .config import RunConfig
from .diffusion import NoiseSchedule, forward_diffuse
from .errors import InputError, RunFailure
from .hashing import tensor_checksum
from .seeding import DTYPE, derive_seed, generator, rand, randn

logger = logging.getLogger(__name__)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, d: int,
              return_weights: bool = False):
    """Scaled dot-product attention over row-vector token matrices.

    softmax(q k^T / sqrt(d)) v, with the softmax taken over keys.  ``d``
    is the query/key width used in the scale factor.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise InputError("attention inputs must be 2-D token matrices")
    if q.shape[1] != d or k.shape[1] != d:
        raise InputError(f"query/key width must equal d={d}")
    if k.shape[0] != v.shape[0]:
        raise InputError("key and value token counts must match")
    scores = q @ k.T / math.sqrt(d)
    weights = torch.softmax(scores, dim=1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def dropout_mask_apply(x: torch.Tensor, p: float, g: torch.Generator) -> torch.Tensor:
    """Inverted dropout with an explicit generator (deterministic given g)."""
    if not (0.0 <= p < 1.0):
        raise InputError("dropout probability must lie in [0, 1)")
    if p == 0.0:
        return x
    keep = (rand(tuple(x.shape), g) >= p).to(DTYPE)
    return x * keep / (1.0 - p)


def _identity_plus_noise(d: int, g: torch.Generator, noise: float) -> torch.Tensor:
    return torch.eye(d, dtype=DTYPE) + noise * torch.randn((d, d), generator=g, dtype=DTYPE)


class CrossAttentionInverter(nn.Module):
    """Maps image tokens (N, d) to pseudo-word vectors (L_v, d).

    With zero layers the module reduces to pooling: the mean over tokens
    through the output map, which starts as stacked identity blocks.
    Dropout (train mode only) is applied to each layer's output tokens.
    """

    def __init__(self, embed_dim: int, layers: int, dropout: float,
                 pseudo_words: int, seed: int, init_noise: float = 0.01):
        super().__init__()
        if layers < 0:
            raise InputError("layers must be >= 0")
        if pseudo_words < 1:
            raise InputError("pseudo_words must be >= 1")
        if not (0.0 <= dropout < 1.0):
            raise InputError("dropout must lie in [0, 1)")
        g = generator(seed)
        self.w_q = nn.ParameterList(
            [nn.Parameter(_identity_plus_noise(embed_dim, g, init_noise))
             for _ in range(layers)])
        self.w_k = nn.ParameterList(
            [nn.Parameter(_identity_plus_noise(embed_dim, g, init_noise))
             for _ in range(layers)])
        self.w_v = nn.ParameterList(
            [nn.Parameter(_identity_plus_noise(embed_dim, g, init_noise))
             for _ in range(layers)])
        pool = torch.cat([torch.eye(embed_dim, dtype=DTYPE)
                          for _ in range(pseudo_words)], dim=1)
        self.pool = nn.Parameter(pool)  # (d, L_v * d)
        self.embed_dim = embed_dim
        self.layers = layers
        self.dropout = dropout
        self.pseudo_words = pseudo_words

    def forward(self, img_tokens: torch.Tensor,
                g: torch.Generator | None = None) -> torch.Tensor:
        if img_tokens.ndim != 2 or img_tokens.shape[1] != self.embed_dim:
            raise InputError(f"image tokens must be (N, {self.embed_dim})")
        if self.training and self.dropout > 0.0 and g is None:
            raise InputError("train-mode forward needs a dropout generator")
        tau = img_tokens.to(DTYPE)
        v = tau
        for i in range(self.layers):
            q = v @ self.w_q[i]
            k = tau @ self.w_k[i]
            val = tau @ self.w_v[i]
            v = attention(q, k, val, self.embed_dim)
            if self.training:
                v = dropout_mask_apply(v, self.dropout, g)
        pooled = v.mean(dim=0)  # (d,)
        out = pooled @ self.pool  # (L_v * d,)
        return out.reshape(self.pseudo_words, self.embed_dim)


def multi_attn(img_tokens: torch.Tensor, module: CrossAttentionInverter,
               train: bool = False, g: torch.Generator | None = None) -> torch.Tensor:
    """Run the inverter in an explicit mode, restoring its previous mode after."""
    was_training = module.training
    module.train(train)
    try:
        return module(img_tokens, g=g)
    finally:
        module.train(was_training)


def denoising_loss(z0: torch.Tensor, cond, t: int, eps: torch.Tensor,
                   model: LatentDenoiser, sched: NoiseSchedule) -> torch.Tensor:
    """MSE between true and predicted noise at one (t, eps) draw."""
    z_t = forward_diffuse(z0, t, eps, sched)
    pred = denoise(z_t, t, cond, model)
    return torch.mean((eps - pred) ** 2)


def effective_learning_rate(base_lr: float, batch_size: int) -> float:
    """Scale the base rate by device count and batch size (one CPU device here)."""
    device_count = max(torch.cuda.device_count(), 1)
    return base_lr * device_count * batch_size


def _frozen_digest(model: LatentDenoiser, encoder: ImagePatchEncoder,
                   vocab: Vocabulary) -> str:
    return tensor_checksum(
        [("denoiser." + n, p) for n, p in model.named_parameters()]
        + [("image_encoder." + n, p) for n, p in encoder.named_parameters()]
        + [("vocab.embeddings", vocab.embeddings)])


@dataclass
class InversionResult:
    embedding: torch.Tensor  # (L_v, d), detached
    losses: list[float]
    effective_lr: float
    variant: str
    module: CrossAttentionInverter | None = None


def _draw_step(g: torch.Generator, sched: NoiseSchedule,
               shape: tuple[int, ...]) -> tuple[int, torch.Tensor]:
    t = int(torch.randint(1, sched.T + 1, (1,), generator=g))
    eps = randn(shape, g)
    return t, eps


def train_inversion(y: torch.Tensor, model: LatentDenoiser, codec: CodecParams,
                    vocab: Vocabulary, config: RunConfig, sched: NoiseSchedule,
                    *, steps: int | None = None, seed: int | None = None,
                    lr_override: float | None = None,
                    stop_fn=None) -> InversionResult:
    """Learn a pseudo-word for reference image ``y`` via the attention module.

    The denoiser, image encoder, and token table are frozen; a checksum
    mismatch after training raises RunFailure.  The (t, eps) draws come
    from a stream independent of the dropout stream, so the direct route
    under the same seed sees identical data.  ``stop_fn(losses)`` may end
    the run early (used by the convergence benchmark).
    """
    steps = config.inversion.steps if steps is None else steps
    seed = config.inversion.seed if seed is None else seed
    if steps < 1:
        raise InputError("inversion steps must be >= 1")
    encoder = build_image_encoder(config)
    z0 = encode(y, codec)
    tau = image_encode(y, encoder)
    template_ids = tokenize(config.inversion.template, vocab)
    module = CrossAttentionInverter(
        embed_dim=config.conditioning.embed_dim,
        layers=config.inversion.layers,
        dropout=config.inversion.dropout,
        pseudo_words=config.inversion.pseudo_words,
        seed=config.inversion.module_seed,
    )
    base_lr = config.inversion.lr if lr_override is None else lr_override
    eff_lr = effective_learning_rate(base_lr, config.inversion.batch_size)
    logger.info("inversion effective lr: %g (base %g, batch %d)",
                eff_lr, base_lr, config.inversion.batch_size)
    opt = torch.optim.Adam(module.parameters(), lr=eff_lr)
    g_data = generator(derive_seed(seed, "data"))
    g_drop = generator(derive_seed(seed, "dropout"))
    before = _frozen_digest(model, encoder, vocab)

    module.train()
    losses: list[float] = []
    for step in range(1, steps + 1):
        t, eps = _draw_step(g_data, sched, tuple(z0.shape))
        v_hat = module(tau, g=g_drop)
        cond = assemble_conditioning(template_ids, v_hat, vocab,
                                     source=config.inversion.template)
        loss = denoising_loss(z0, cond, t, eps, model, sched)
        if not torch.isfinite(loss):
            raise RunFailure(f"inversion diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if stop_fn is not None and stop_fn(losses):
            break
    module.eval()
    if _frozen_digest(model, encoder, vocab) != before:
        raise RunFailure("frozen components drifted during inversion training")
    with torch.no_grad():
        embedding = module(tau).detach().clone()
    return InversionResult(embedding=embedding, losses=losses,
                           effective_lr=eff_lr, variant="attention", module=module)


def direct_optimize(y: torch.Tensor, model: LatentDenoiser, codec: CodecParams,
                    vocab: Vocabulary, config: RunConfig, sched: NoiseSchedule,
                    *, steps: int | None = None, seed: int | None = None,
                    lr_override: float | None = None,
                    stop_fn=None) -> InversionResult:
    """Baseline: optimize the pseudo-word vectors directly.

    Initialized from the embedding of ``config.inversion.init_word``, so
    the first step's loss equals the denoising loss conditioned on that
    word spliced into the template.
    """
    steps = config.inversion.steps if steps is None else steps
    seed = config.inversion.seed if seed is None else seed
    if steps < 1:
        raise InputError("inversion steps must be >= 1")
    encoder = build_image_encoder(config)
    z0 = encode(y, codec)
    template_ids = tokenize(config.inversion.template, vocab)
    word = config.inversion.init_word
    if word not in vocab.word_to_id:
        raise InputError(f"init word {word!r} not in vocabulary")
    row = vocab.embeddings[vocab.word_to_id[word]].detach().clone()
    v_hat = nn.Parameter(row.unsqueeze(0).repeat(config.inversion.pseudo_words, 1))
    base_lr = config.inversion.lr if lr_override is None else lr_override
    eff_lr = effective_learning_rate(base_lr, config.inversion.batch_size)
    logger.info("direct-route effective lr: %g (base %g, batch %d)",
                eff_lr, base_lr, config.inversion.batch_size)
    opt = torch.optim.Adam([v_hat], lr=eff_lr)
    g_data = generator(derive_seed(seed, "data"))
    before = _frozen_digest(model, encoder, vocab)

    losses: list[float] = []
    for step in range(1, steps + 1):
        t, eps = _draw_step(g_data, sched, tuple(z0.shape))
        cond = assemble_conditioning(template_ids, v_hat, vocab,
                                     source=config.inversion.template)
        loss = denoising_loss(z0, cond, t, eps, model, sched)
        if not torch.isfinite(loss):
            raise RunFailure(f"direct route diverged at step {step}: loss={float(loss)}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if stop_fn is not None and stop_fn(losses):
            break
    if _frozen_digest(model, encoder, vocab) != before:
        raise RunFailure("frozen components drifted during direct optimization")
    return InversionResult(embedding=v_hat.detach().clone(), losses=losses,
                           effective_lr=eff_lr, variant="direct")
