"""Discrete-time Gaussian diffusion over latents.

Timesteps are integers t in [1, T].  Arrays are indexed ``[t - 1]``.
With a variance schedule beta_t, alpha_t = 1 - beta_t and
alpha_bar_t = prod_{s<=t} alpha_s, the package uses the standard
closed forms:

    forward marginal   z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps
    posterior mean     mu_t = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat)
                              / sqrt(alpha_t)
    stochastic step    z_{t-1} = mu_t + sigma_t * inject        (t >= 2)
    deterministic step z_{t-1} = mu_t

The injected term is suppressed at t = 1, so the final step is always
noiseless.  Because the stochastic step is affine in the injected map,
it can be inverted: given consecutive latents the per-step map is
``(z_{t-1} - mu_t) / sigma_t``, and replaying the sampler with the
recovered maps reproduces the chain exactly.
"""

from dataclasses import dataclass

import torch

from .errors import InputError
from .seeding import DTYPE, generator, randn


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed schedule tables, all shape ``(T,)`` float64."""

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            t = getattr(self, name)
            if t.shape != (self.T,):
                raise InputError(f"schedule table {name} must have shape ({self.T},)")


def schedule_from_betas(betas: torch.Tensor, sigma_mode: str = "beta") -> NoiseSchedule:
    """Build a schedule from an explicit beta table.

    sigma_mode 'beta' uses sigma_t = sqrt(beta_t); 'posterior' uses the
    true posterior std sqrt(beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)),
    which is zero at t = 1.
    """
    betas = torch.as_tensor(betas, dtype=DTYPE)
    if betas.ndim != 1 or betas.numel() < 1:
        raise InputError("betas must be a non-empty 1-D array")
    if not bool(torch.all((betas > 0) & (betas < 1))):
        raise InputError("every beta must lie in (0, 1)")
    T = betas.numel()
    alpha = 1.0 - betas
    alpha_bar = torch.cumprod(alpha, dim=0)
    if sigma_mode == "beta":
        sigma = torch.sqrt(betas)
    elif sigma_mode == "posterior":
        prev = torch.cat([torch.ones(1, dtype=DTYPE), alpha_bar[:-1]])
        sigma = torch.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bar))
    else:
        raise InputError("sigma_mode must be 'beta' or 'posterior'")
    return NoiseSchedule(T=T, beta=betas, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def make_schedule(T: int, beta_start: float, beta_end: float,
                  sigma_mode: str = "beta") -> NoiseSchedule:
    """Linear beta schedule over T steps (a single step uses beta_start)."""
    if not isinstance(T, int) or T < 1:
        raise InputError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InputError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        betas = torch.tensor([beta_start], dtype=DTYPE)
    else:
        betas = torch.linspace(beta_start, beta_end, T, dtype=DTYPE)
    return schedule_from_betas(betas, sigma_mode=sigma_mode)


def _check_t(t: int, T: int) -> None:
    if not isinstance(t, int) or isinstance(t, bool) or not (1 <= t <= T):
        raise InputError(f"timestep t={t!r} outside [1, {T}]")


def _check_like(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def forward_diffuse(z0: torch.Tensor, t: int, eps: torch.Tensor,
                    sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    _check_t(t, sched.T)
    _check_like(z0, eps, "forward_diffuse noise")
    ab = sched.alpha_bar[t - 1]
    return torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps


def posterior_mean(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor,
                   sched: NoiseSchedule) -> torch.Tensor:
    """Mean of the reverse step under the eps-parameterization."""
    _check_t(t, sched.T)
    _check_like(z_t, eps_pred, "posterior_mean eps_pred")
    coeff = sched.beta[t - 1] / torch.sqrt(1.0 - sched.alpha_bar[t - 1])
    return (z_t - coeff * eps_pred) / torch.sqrt(sched.alpha[t - 1])


def sample_stochastic_step(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor,
                           inject: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """One reverse step with an explicitly injected noise map.

    At t = 1 the injected term is suppressed and the step equals the
    posterior mean.
    """
    mu = posterior_mean(z_t, t, eps_pred, sched)
    if t == 1:
        return mu
    _check_like(z_t, inject, "injected noise")
    return mu + sched.sigma[t - 1] * inject


def sample_deterministic_step(z_t: torch.Tensor, t: int, eps_pred: torch.Tensor,
                              sched: NoiseSchedule) -> torch.Tensor:
    """Noise-free reverse step: just the posterior mean."""
    return posterior_mean(z_t, t, eps_pred, sched)


def invert_step_noise(z_t: torch.Tensor, z_prev: torch.Tensor, t: int,
                      eps_pred: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Recover the map that the stochastic step must have injected.

    Solves z_prev = mu_t + sigma_t * inject for inject.  Defined only
    for t >= 2; at t = 1 the step variance is zero and no map exists.
    """
    _check_t(t, sched.T)
    if t < 2:
        raise InputError("step-noise recovery needs t >= 2: the t=1 step is noiseless")
    sigma = sched.sigma[t - 1]
    if float(sigma) <= 0.0:
        raise InputError(f"sigma at t={t} is zero: step-noise recovery is degenerate")
    _check_like(z_t, z_prev, "z_prev")
    mu = posterior_mean(z_t, t, eps_pred, sched)
    return (z_prev - mu) / sigma


@dataclass
class NoiseMapSequence:
    """Per-step injected noise maps, stacked as ``maps[t - 1]`` for t in [1, T].

    The t = 1 slot is identically zero because that step is noiseless.
    ``origin`` records where the maps came from (a seed, or the tag of a
    trajectory inversion).
    """

    maps: torch.Tensor
    origin: str

    def __len__(self) -> int:
        return self.maps.shape[0]

    def map_for(self, t: int) -> torch.Tensor:
        _check_t(t, len(self))
        return self.maps[t - 1]


def sample_noisy_chain(z0: torch.Tensor, sched: NoiseSchedule,
                       seed: int) -> list[torch.Tensor]:
    """Draw z_1 .. z_T around z0 via the closed-form marginal.

    One fresh eps per step, drawn for t = T down to 1 from a generator
    seeded with ``seed``.  Returns the chain ordered [z_1, ..., z_T].
    """
    g = generator(seed)
    chain: list[torch.Tensor] = [torch.empty(0)] * sched.T
    for t in range(sched.T, 0, -1):
        eps = randn(tuple(z0.shape), g)
        chain[t - 1] = forward_diffuse(z0, t, eps, sched)
    return chain


def invert_trajectory(z0: torch.Tensor, sched: NoiseSchedule, denoiser,
                      cond, seed: int) -> NoiseMapSequence:
    """Recover the injected maps that make the sampler walk a noisy chain to z0.

    Builds the chain with :func:`sample_noisy_chain`, then for each
    t = T .. 2 recovers the map that takes z_t to z_{t-1} under the
    model's prediction ``denoiser(z_t, t, cond)``.  Replaying the
    stochastic sampler from z_T with these maps reconstructs the chain,
    ending at z_1, exactly (up to float64 rounding).
    """
    if sched.T < 2:
        raise InputError("trajectory inversion needs T >= 2")
    chain = sample_noisy_chain(z0, sched, seed)
    maps = torch.zeros((sched.T,) + tuple(z0.shape), dtype=DTYPE)
    for t in range(sched.T, 1, -1):
        eps_pred = denoiser(chain[t - 1], t, cond)
        maps[t - 1] = invert_step_noise(chain[t - 1], chain[t - 2], t, eps_pred, sched)
    return NoiseMapSequence(maps=maps, origin=f"inverted:seed={int(seed)}")
