"""Run configuration.

A run is fully described by a tree of small dataclasses.  The tree
serializes to a flat ``section.key = value`` text file, and its SHA-256
content hash is embedded in every artifact the run produces so that
mixed-provenance inputs can be detected later.
"""

from dataclasses import dataclass, field, fields

from .errors import InputError
from .hashing import flat_config_hash


@dataclass
class ImageConfig:
    size: int = 32


@dataclass
class ScheduleConfig:
    T: int = 64
    beta_start: float = 1e-4
    beta_end: float = 0.05
    sigma_mode: str = "beta"


@dataclass
class CodecConfig:
    patch_size: int = 4
    seed: int = 11


@dataclass
class ConditioningConfig:
    embed_dim: int = 64
    image_tokens: int = 16
    encoder_seed: int = 12
    # Lifts the frozen encoder's tanh tokens to the text-embedding scale.
    encoder_gain: float = 10.0
    embed_seed: int = 13
    embed_scale: float = 0.5


@dataclass
class CorpusConfig:
    size: int = 400
    seed: int = 15


@dataclass
class BackboneConfig:
    channels: int = 48
    time_dim: int = 64
    seed: int = 14
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-3
    # Cosine-decay floor; lr_min == lr keeps the rate constant.
    lr_min: float = 1e-3
    image_cond_prob: float = 0.5


@dataclass
class InversionConfig:
    layers: int = 3
    dropout: float = 0.05
    pseudo_words: int = 1
    steps: int = 1200
    lr: float = 1e-3
    batch_size: int = 1
    template: str = "a painting of [C]"
    init_word: str = "painting"
    seed: int = 16
    module_seed: int = 17


@dataclass
class BenchConfig:
    reference_steps: int = 5000
    max_steps: int = 5000
    num_seeds: int = 5
    seed: int = 18
    window: int = 50
    threshold_margin: float = 1.05


@dataclass
class EvalConfig:
    samples: int = 8
    seed: int = 19


@dataclass
class RunConfig:
    image: ImageConfig = field(default_factory=ImageConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.image.size < 4 or self.image.size % self.codec.patch_size != 0:
            raise InputError("image.size must be >= 4 and divisible by codec.patch_size")
        if self.schedule.T < 1:
            raise InputError("schedule.T must be >= 1")
        if not (0.0 < self.schedule.beta_start <= self.schedule.beta_end < 1.0):
            raise InputError("need 0 < schedule.beta_start <= schedule.beta_end < 1")
        if self.schedule.sigma_mode not in ("beta", "posterior"):
            raise InputError("schedule.sigma_mode must be 'beta' or 'posterior'")
        if not (0.0 <= self.inversion.dropout < 1.0):
            raise InputError("inversion.dropout must lie in [0, 1)")
        if not (0.0 < self.backbone.lr_min <= self.backbone.lr):
            raise InputError("need 0 < backbone.lr_min <= backbone.lr")
        if not (0.0 <= self.backbone.image_cond_prob <= 1.0):
            raise InputError("backbone.image_cond_prob must lie in [0, 1]")
        if self.inversion.layers < 0:
            raise InputError("inversion.layers must be >= 0")
        if self.inversion.pseudo_words < 1:
            raise InputError("inversion.pseudo_words must be >= 1")
        root = int(round(self.conditioning.image_tokens ** 0.5))
        if root * root != self.conditioning.image_tokens:
            raise InputError("conditioning.image_tokens must be a perfect square")
        if self.conditioning.encoder_gain <= 0.0:
            raise InputError("conditioning.encoder_gain must be > 0")
        for name in ("steps", "batch_size"):
            if getattr(self.backbone, name) < 1:
                raise InputError(f"backbone.{name} must be >= 1")
        if self.corpus.size < 1:
            raise InputError("corpus.size must be >= 1")


def _coerce(raw: str, kind: type) -> object:
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError as exc:
        raise InputError(f"cannot parse {raw!r} as {kind.__name__}") from exc
    return raw


def to_flat(config: RunConfig) -> dict[str, object]:
    flat: dict[str, object] = {}
    for group in fields(config):
        sub = getattr(config, group.name)
        for f in fields(sub):
            flat[f"{group.name}.{f.name}"] = getattr(sub, f.name)
    return flat


def from_flat(flat: dict[str, object]) -> RunConfig:
    config = RunConfig()
    groups = {g.name: g for g in fields(config)}
    for key, value in flat.items():
        if "." not in key:
            raise InputError(f"config key {key!r} is not of the form section.name")
        group_name, field_name = key.split(".", 1)
        if group_name not in groups:
            raise InputError(f"unknown config section {group_name!r}")
        sub = getattr(config, group_name)
        sub_fields = {f.name: f for f in fields(sub)}
        if field_name not in sub_fields:
            raise InputError(f"unknown config key {key!r}")
        kind = sub_fields[field_name].type
        kind = {"int": int, "float": float, "str": str}.get(kind, kind)
        if isinstance(value, str) and kind is not str:
            value = _coerce(value, kind)
        if kind is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, kind):
            raise InputError(f"config key {key!r} expects {kind.__name__}")
        setattr(sub, field_name, value)
    config.validate()
    return config


def config_hash(config: RunConfig) -> str:
    return flat_config_hash(to_flat(config))


def dump_config(config: RunConfig) -> str:
    lines = [f"{k} = {_render(v)}" for k, v in sorted(to_flat(config).items())]
    return "\n".join(lines) + "\n"


def _render(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines; '#' starts a comment, blank lines skipped."""
    flat: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise InputError(f"line {lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        flat[key.strip()] = raw.strip()
    return from_flat(flat)


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise InputError(f"cannot read config file {path}: {exc}") from exc


def apply_overrides(config: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``key=value`` override strings on top of an existing config."""
    flat = to_flat(config)
    for pair in pairs:
        if "=" not in pair:
            raise InputError(f"override {pair!r} is not of the form key=value")
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in flat:
            raise InputError(f"unknown config key {key!r}")
        flat[key] = raw.strip()
    return from_flat(flat)


def defaults() -> RunConfig:
    config = RunConfig()
    config.validate()
    return config
