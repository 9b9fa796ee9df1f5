"""Content hashes used to tie artifacts to the configuration that made them."""

import hashlib
from collections.abc import Iterable

import numpy as np
import torch

from .errors import InputError


def flat_config_hash(flat: dict[str, object]) -> str:
    """SHA-256 over the canonical serialization of a flat key-value mapping.

    Keys are sorted; floats are rendered with ``repr`` so the hash is
    exactly the round-trip text representation, independent of insertion
    order or container type.
    """
    lines = []
    for key in sorted(flat):
        value = flat[key]
        if isinstance(value, bool):
            raise InputError("boolean config values are not supported")
        if isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key}={text}")
    payload = "\n".join(lines).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def tensor_checksum(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over named tensors in name order, as little-endian float64 bytes.

    Used to pin frozen components: any drift in any element changes the
    digest.
    """
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode("utf-8"))
        h.update(b"\x00")
        arr = t.detach().cpu().numpy().astype("<f8")
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return tensor_checksum(module.named_parameters())
