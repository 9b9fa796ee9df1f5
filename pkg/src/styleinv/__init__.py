"""Single-image style inversion on a self-contained latent diffusion stack."""

__version__ = "0.1.0"

from .config import RunConfig, config_hash, defaults
from .diffusion import NoiseSchedule, make_schedule
from .errors import InputError, RunFailure

__all__ = [
    "InputError",
    "NoiseSchedule",
    "RunConfig",
    "RunFailure",
    "config_hash",
    "defaults",
    "make_schedule",
    "__version__",
]
