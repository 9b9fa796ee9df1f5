"""Example-guided synthesis.

Generation runs the reverse chain from unit Gaussian noise (text to
image) or from a partially diffused content latent (image to image).
Stochastic runs inject per-step noise maps; those maps can come fresh
from the request seed, or be recovered from the reference image by
trajectory inversion, which biases the chain's randomness toward noise
that is consistent with the reference.

A final optional tone-transfer step matches per-channel output moments
to the reference image.
"""

from dataclasses import dataclass

import torch

from .backbone import LatentDenoiser, denoise
from .codec import CodecParams, decode, encode
from .conditioning import Vocabulary, assemble_conditioning, tokenize
from .diffusion import (NoiseMapSequence, NoiseSchedule, forward_diffuse,
                        invert_trajectory, sample_deterministic_step,
                        sample_stochastic_step)
from .errors import InputError
from .persist import StyleRecord
from .seeding import DTYPE, generator, randn

MODES = ("stochastic", "deterministic")
NOISE_SOURCES = ("inverted", "fresh")


@dataclass
class GenerationRequest:
    """One synthesis job.

    ``content`` and ``strength`` come together: strength in [0, 1] sets
    the fraction of the schedule applied to the content latent before
    denoising resumes.  Without content the chain starts at pure noise.
    """

    style: StyleRecord
    template: str
    seed: int
    mode: str = "stochastic"
    content: torch.Tensor | None = None
    strength: float | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if (self.content is None) != (self.strength is None):
            raise InputError("content and strength must be given together")
        if self.strength is not None and not (0.0 <= self.strength <= 1.0):
            raise InputError("strength must lie in [0, 1]")


def _conditioning(req: GenerationRequest, vocab: Vocabulary):
    ids = tokenize(req.template, vocab)
    return assemble_conditioning(ids, req.style.embedding, vocab, source=req.template)


def noise_predictor(cond, model: LatentDenoiser):
    """Bind conditioning into the ``(z, t) -> eps`` closure samplers consume."""
    return lambda z, t: denoise(z, t, cond, model)


def _check_style(req: GenerationRequest, vocab: Vocabulary,
                 expected_hash: str | None) -> None:
    req.validate()
    if req.style.embed_dim != vocab.embed_dim:
        raise InputError(
            f"style embedding width {req.style.embed_dim} does not match"
            f" the model's conditioning width {vocab.embed_dim}")
    if expected_hash is not None and req.style.config_hash != expected_hash:
        raise InputError(
            f"style record hash {req.style.config_hash[:12]}... does not match"
            f" the backbone's config hash {expected_hash[:12]}...")


def _reverse_chain(z: torch.Tensor, t_start: int, predict,
                   sched: NoiseSchedule, mode: str, inject_for,
                   t_end: int = 1) -> torch.Tensor:
    """Run the reverse chain from z at t_start down through t_end.

    ``predict(z, t)`` is the noise predictor; ``inject_for(t)`` supplies
    the stochastic injection for step t >= 2 and is not consulted in
    deterministic mode or at t = 1.
    """
    for t in range(t_start, t_end - 1, -1):
        eps_pred = predict(z, t)
        if mode == "stochastic" and t >= 2:
            z = sample_stochastic_step(z, t, eps_pred, inject_for(t), sched)
        else:
            z = sample_deterministic_step(z, t, eps_pred, sched)
    return z


def txt2img(req: GenerationRequest, model: LatentDenoiser, codec: CodecParams,
            vocab: Vocabulary, sched: NoiseSchedule,
            expected_hash: str | None = None) -> torch.Tensor:
    """Generate an image from a template with the style's pseudo-word.

    Fully deterministic given the request: the seed drives the starting
    noise and, in stochastic mode, every injected map (drawn per step,
    t = T first).
    """
    _check_style(req, vocab, expected_hash)
    if req.content is not None:
        raise InputError("txt2img takes no content image; use style_transfer")
    predict = noise_predictor(_conditioning(req, vocab), model)
    g = generator(req.seed)
    z = randn(codec.latent_shape, g)
    with torch.no_grad():
        z = _reverse_chain(z, sched.T, predict, sched, req.mode,
                           lambda t: randn(codec.latent_shape, g))
    return decode(z, codec)


def style_transfer(req: GenerationRequest, model: LatentDenoiser,
                   codec: CodecParams, vocab: Vocabulary, sched: NoiseSchedule,
                   noise_source: str = "inverted",
                   expected_hash: str | None = None) -> torch.Tensor:
    """Re-synthesize a content image under the style's pseudo-word.

    The content image is encoded and diffused to t0 = round(strength T),
    then denoised back.  With ``noise_source='inverted'`` both the
    starting point and the injected maps come from a trajectory inversion
    of the content latent under the same conditioning, so strength 1 with
    a deterministic replay would walk the inverted chain exactly.  With
    ``'fresh'`` the seed supplies new noise; strength 1 then reduces to
    the txt2img code path.
    """
    _check_style(req, vocab, expected_hash)
    if req.content is None:
        raise InputError("style_transfer requires a content image and strength")
    if noise_source not in NOISE_SOURCES:
        raise InputError(f"noise_source must be one of {NOISE_SOURCES}")
    z0 = encode(req.content, codec)
    t0 = int(round(req.strength * sched.T))
    if t0 == 0:
        return decode(z0, codec)
    cond = _conditioning(req, vocab)
    predict = noise_predictor(cond, model)
    with torch.no_grad():
        if noise_source == "inverted":
            maps = invert_trajectory(
                z0, sched, lambda z, t, c: predict(z, t), cond, req.seed)
            chain_g = generator(req.seed)
            z_start = None
            for t in range(sched.T, t0 - 1, -1):
                eps = randn(tuple(z0.shape), chain_g)
                if t == t0:
                    z_start = forward_diffuse(z0, t, eps, sched)
            z = _reverse_chain(z_start, t0, predict, sched, req.mode,
                               maps.map_for)
        else:
            g = generator(req.seed)
            if t0 == sched.T:
                z = randn(codec.latent_shape, g)
            else:
                z = forward_diffuse(z0, t0, randn(tuple(z0.shape), g), sched)
            z = _reverse_chain(z, t0, predict, sched, req.mode,
                               lambda t: randn(codec.latent_shape, g))
    return decode(z, codec)


def replay_with_maps(z0: torch.Tensor, maps: NoiseMapSequence, cond,
                     model: LatentDenoiser, codec: CodecParams,
                     sched: NoiseSchedule, seed: int) -> torch.Tensor:
    """Replay the stochastic chain that trajectory inversion recovered.

    Starts from the same z_T that :func:`invert_trajectory` built for
    ``seed`` and injects the recovered maps; with the same predictor the
    result is the chain's z_1 tail, matching the inversion's own chain
    exactly.  The final t = 1 posterior step is not taken: its output
    would differ from the chain by the model's own prediction error,
    which the recovered maps cannot absorb.
    """
    predict = noise_predictor(cond, model)
    g = generator(seed)
    z_top = forward_diffuse(z0, sched.T, randn(tuple(z0.shape), g), sched)
    with torch.no_grad():
        z = _reverse_chain(z_top, sched.T, predict, sched, "stochastic",
                           maps.map_for, t_end=2)
    return z


def tone_transfer(result: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Match per-channel mean and std of ``result`` to ``target``.

    Channels with zero target spread are a degenerate request and raise;
    a zero-spread result channel maps to the target mean (the
    moment-matched limit).  Output is clipped to [0, 1].
    """
    if result.ndim != 3 or result.shape[0] != 3:
        raise InputError("result must be (3, H, W)")
    if target.ndim != 3 or target.shape[0] != 3:
        raise InputError("target must be (3, H, W)")
    result = result.to(DTYPE)
    target = target.to(DTYPE)
    out = torch.empty_like(result)
    for c in range(3):
        mean_r = result[c].mean()
        std_r = result[c].std(unbiased=False)
        mean_t = target[c].mean()
        std_t = target[c].std(unbiased=False)
        if float(std_t) == 0.0:
            raise InputError(f"target channel {c} has zero spread;"
                             " tone statistics are degenerate")
        if float(std_r) == 0.0:
            out[c] = mean_t
        else:
            out[c] = (result[c] - mean_r) * (std_t / std_r) + mean_t
    return torch.clamp(out, 0.0, 1.0)
