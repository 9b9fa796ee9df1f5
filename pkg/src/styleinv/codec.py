"""Exactly invertible patch codec between RGB images and latents.

Replaces a learned autoencoder with a fixed linear map: pixels are
affinely normalized from [0, 1] to [-1, 1], cut into non-overlapping
``p x p`` patches, and each flattened patch (3 p^2 values) is multiplied
by a seeded orthogonal matrix.  Decoding applies the transpose and the
inverse normalization, so round trips are exact to float64 rounding and
latent norms equal normalized-pixel norms.
"""

from dataclasses import dataclass

import torch

from .errors import InputError, RunFailure
from .seeding import DTYPE, generator


@dataclass(frozen=True)
class CodecParams:
    patch_size: int
    image_size: int
    projection: torch.Tensor  # (3 p^2, 3 p^2), orthogonal

    @property
    def channels(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.grid, self.grid)


def make_codec(patch_size: int, image_size: int, seed: int) -> CodecParams:
    """Build codec parameters with a seeded orthogonal projection.

    The projection comes from the QR factorization of a seeded Gaussian
    matrix, with column signs fixed by the R diagonal so the result does
    not depend on LAPACK sign conventions.
    """
    if patch_size < 1:
        raise InputError("patch_size must be >= 1")
    if image_size < patch_size or image_size % patch_size != 0:
        raise InputError("image_size must be a positive multiple of patch_size")
    d = 3 * patch_size * patch_size
    g = generator(seed)
    a = torch.randn((d, d), generator=g, dtype=DTYPE)
    q, r = torch.linalg.qr(a)
    signs = torch.sign(torch.diagonal(r))
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    q = q * signs
    gram_err = float(torch.max(torch.abs(q.T @ q - torch.eye(d, dtype=DTYPE))))
    if gram_err > 1e-10:
        raise RunFailure(f"projection failed orthogonality check: {gram_err:.3e}")
    return CodecParams(patch_size=patch_size, image_size=image_size, projection=q)


def _check_image(x: torch.Tensor, params: CodecParams) -> torch.Tensor:
    s = params.image_size
    if x.shape != (3, s, s):
        raise InputError(f"expected image of shape (3, {s}, {s}), got {tuple(x.shape)}")
    x = x.to(DTYPE)
    if not bool(torch.isfinite(x).all()):
        raise InputError("image contains non-finite values")
    if float(x.min()) < -1e-9 or float(x.max()) > 1.0 + 1e-9:
        raise InputError("image values must lie in [0, 1]")
    return x


def encode(x: torch.Tensor, params: CodecParams) -> torch.Tensor:
    """Image (3, S, S) in [0, 1] -> latent (3 p^2, S/p, S/p)."""
    x = _check_image(x, params)
    p, n = params.patch_size, params.grid
    u = 2.0 * x - 1.0
    patches = u.reshape(3, n, p, n, p).permute(1, 3, 0, 2, 4).reshape(n, n, params.channels)
    z = patches @ params.projection.T
    return z.permute(2, 0, 1).contiguous()


def decode(z: torch.Tensor, params: CodecParams) -> torch.Tensor:
    """Latent -> image, exact inverse of :func:`encode` up to the final clip."""
    if z.shape != params.latent_shape:
        raise InputError(f"expected latent of shape {params.latent_shape}, got {tuple(z.shape)}")
    z = z.to(DTYPE)
    p, n = params.patch_size, params.grid
    patches = z.permute(1, 2, 0) @ params.projection
    u = patches.reshape(n, n, 3, p, p).permute(2, 0, 3, 1, 4).reshape(3, n * p, n * p)
    return torch.clamp((u + 1.0) / 2.0, 0.0, 1.0)
