"""Artifact persistence.

Every artifact a run writes embeds the run's config hash so that a
directory of outputs can be audited for mixed provenance:

* checkpoints and style records: versioned binary containers with magic
  bytes, the flat config text (checkpoints) or metadata (style records),
  and named float32 little-endian arrays;
* PNG images: the hash rides in a ``config_hash`` text chunk;
* CSV metrics: the hash rides in a leading comment line.

Arrays are stored float32 regardless of the float64 runtime dtype; loads
cast back up.  The quantization is deterministic, so byte-identical
reruns stay byte-identical.
"""

import csv
import io
import logging
import struct
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from .config import RunConfig, config_hash, dump_config, parse_config
from .errors import InputError
from .seeding import DTYPE

CHECKPOINT_MAGIC = b"SIVCKPT1"
STYLE_MAGIC = b"SIVSTYL1"
SCHEMA_VERSION = 1


def _write_str(fh, text: str) -> None:
    data = text.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise InputError(f"truncated artifact while reading {what}")
    return data


def _read_str(fh, what: str) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4, what))
    if n > 1 << 24:
        raise InputError(f"implausible string length while reading {what}")
    return _read_exact(fh, n, what).decode("utf-8")


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    _write_str(fh, name)
    arr = np.ascontiguousarray(arr.astype("<f4"))
    fh.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(arr.tobytes())


def _read_array(fh) -> tuple[str, np.ndarray]:
    name = _read_str(fh, "array name")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "array rank"))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "array dim"))[0]
                  for _ in range(ndim))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = _read_exact(fh, 4 * count, f"array {name!r} data")
    arr = np.frombuffer(data, dtype="<f4").reshape(shape)
    return name, arr.copy()


def save_checkpoint(path: str, config: RunConfig,
                    tensors: dict[str, torch.Tensor]) -> None:
    """Write a self-contained checkpoint: config text plus named arrays."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", SCHEMA_VERSION))
        _write_str(fh, config_hash(config))
        _write_str(fh, dump_config(config))
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_array(fh, name, tensors[name].detach().cpu().numpy())


def load_checkpoint(path: str) -> tuple[RunConfig, dict[str, torch.Tensor], str]:
    """Read a checkpoint; returns (config, float64 tensors, config hash)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise InputError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SCHEMA_VERSION:
            raise InputError(f"unsupported checkpoint schema version {version}")
        stored_hash = _read_str(fh, "config hash")
        config = parse_config(_read_str(fh, "config text"))
        if config_hash(config) != stored_hash:
            raise InputError(f"{path}: config hash does not match embedded config")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "array count"))
        tensors = {}
        for _ in range(count):
            name, arr = _read_array(fh)
            tensors[name] = torch.from_numpy(arr).to(DTYPE)
    return config, tensors, stored_hash


@dataclass
class StyleRecord:
    """A learned pseudo-word embedding plus the context needed to use it."""

    embedding: torch.Tensor  # (L_v, embed_dim) float64
    template: str
    variant: str  # "attention" or "direct"
    seed: int
    steps: int
    config_hash: str

    @property
    def pseudo_words(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]


def save_style(path: str, record: StyleRecord) -> None:
    if record.embedding.ndim != 2:
        raise InputError("style embedding must be 2-D (pseudo_words, embed_dim)")
    with open(path, "wb") as fh:
        fh.write(STYLE_MAGIC)
        fh.write(struct.pack("<I", SCHEMA_VERSION))
        _write_str(fh, record.config_hash)
        _write_str(fh, record.template)
        _write_str(fh, record.variant)
        fh.write(struct.pack("<qI", int(record.seed), int(record.steps)))
        _write_array(fh, "embedding", record.embedding.detach().cpu().numpy())


def load_style(path: str, expected_hash: str | None = None,
               strict: bool = False) -> StyleRecord:
    """Read a style record; hash mismatch warns, or raises when strict."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise InputError(f"cannot open style record {path}: {exc}") from exc
    with fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != STYLE_MAGIC:
            raise InputError(f"{path} is not a style record (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SCHEMA_VERSION:
            raise InputError(f"unsupported style schema version {version}")
        stored_hash = _read_str(fh, "config hash")
        template = _read_str(fh, "template")
        variant = _read_str(fh, "variant")
        seed, steps = struct.unpack("<qI", _read_exact(fh, 12, "seed/steps"))
        name, arr = _read_array(fh)
        if name != "embedding" or arr.ndim != 2:
            raise InputError(f"{path}: malformed embedding array")
    record = StyleRecord(embedding=torch.from_numpy(arr).to(DTYPE),
                         template=template, variant=variant, seed=seed,
                         steps=steps, config_hash=stored_hash)
    if expected_hash is not None and stored_hash != expected_hash:
        message = (f"{path}: style config hash {stored_hash[:12]}... does not match"
                   f" expected {expected_hash[:12]}...")
        if strict:
            raise InputError(message)
        logging.getLogger(__name__).warning(message)
    return record


def save_image(path: str, image: torch.Tensor, config_hash_value: str) -> None:
    """Quantize a (3, H, W) float image in [0, 1] to 8-bit PNG with hash chunk."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise InputError("image must be (3, H, W)")
    arr = image.detach().cpu().numpy()
    if not np.isfinite(arr).all():
        raise InputError("image contains non-finite values")
    quantized = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    pil = Image.fromarray(np.transpose(quantized, (1, 2, 0)), mode="RGB")
    info = PngImagePlugin.PngInfo()
    info.add_text("config_hash", config_hash_value)
    pil.save(path, format="PNG", pnginfo=info)


def load_image(path: str) -> tuple[torch.Tensor, str | None]:
    """Read a PNG to a (3, H, W) float64 image in [0, 1] plus its hash chunk."""
    try:
        pil = Image.open(path)
        pil.load()
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if pil.mode != "RGB":
        pil = pil.convert("RGB")
    arr = np.asarray(pil, dtype=np.float64) / 255.0
    tensor = torch.from_numpy(np.transpose(arr, (2, 0, 1))).to(DTYPE)
    text = getattr(pil, "text", {})
    return tensor, text.get("config_hash")


METRICS_FIELDS = ("run_id", "variant", "step", "loss", "wall_time_s")


def write_metrics_csv(path: str, rows: list[dict], config_hash_value: str) -> None:
    """Write per-step metrics rows under a config-hash comment line."""
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash_value}\n")
    writer = csv.DictWriter(buf, fieldnames=METRICS_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        out = dict(row)
        out["loss"] = repr(float(out["loss"]))
        out["wall_time_s"] = f"{float(out['wall_time_s']):.6f}"
        writer.writerow(out)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_metrics_csv(path: str) -> tuple[list[dict], str | None]:
    """Read a metrics CSV; returns (rows, config hash from the comment line)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read metrics file {path}: {exc}") from exc
    hash_value = None
    if lines and lines[0].startswith("# config_hash="):
        hash_value = lines[0].split("=", 1)[1]
        lines = lines[1:]
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    rows = []
    for raw in reader:
        rows.append({"run_id": raw["run_id"], "variant": raw["variant"],
                     "step": int(raw["step"]), "loss": float(raw["loss"]),
                     "wall_time_s": float(raw["wall_time_s"])})
    return rows, hash_value
