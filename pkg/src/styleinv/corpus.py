"""Procedural painting corpus.

Five pattern families rendered at a fixed square size, each drawn in a
named two-color palette.  Every image is a pure function of its spec, so
corpus generation is reproducible from a single seed.  A fixed set of
(family, palette) combinations is held out of pretraining and serves as
the pool of novel styles for inversion experiments.
"""

from dataclasses import dataclass

import torch

from .conditioning import FAMILY_WORDS, PALETTE_WORDS
from .errors import InputError
from .seeding import DTYPE, derive_seed, generator, rand

PALETTES: dict[str, tuple[tuple[float, float, float], tuple[float, float, float]]] = {
    "ember": ((0.82, 0.18, 0.10), (0.99, 0.75, 0.30)),
    "ocean": ((0.05, 0.25, 0.55), (0.35, 0.80, 0.90)),
    "forest": ((0.08, 0.38, 0.15), (0.65, 0.85, 0.35)),
    "dusk": ((0.30, 0.10, 0.45), (0.85, 0.55, 0.75)),
    "gold": ((0.95, 0.80, 0.25), (0.55, 0.35, 0.08)),
    "berry": ((0.75, 0.10, 0.45), (0.98, 0.65, 0.80)),
    "slate": ((0.20, 0.22, 0.26), (0.75, 0.78, 0.82)),
    "sand": ((0.88, 0.78, 0.60), (0.45, 0.30, 0.18)),
}

FAMILIES = FAMILY_WORDS

# Combinations excluded from pretraining; inversion targets come from here.
HELD_OUT: tuple[tuple[str, str], ...] = (
    ("stripes", "gold"),
    ("dots", "ocean"),
    ("checker", "ember"),
    ("gradient", "forest"),
    ("noise", "dusk"),
)

_SCALE_CHOICES: dict[str, tuple[int, ...]] = {
    "stripes": (4, 8),
    "dots": (2, 3),
    "checker": (4, 8),
    "gradient": (0, 1, 2, 3),
    "noise": (4, 8),
}

_GRADIENT_GAMMAS = (0.7, 0.9, 1.1, 1.4)


@dataclass(frozen=True)
class StyleSpec:
    family: str
    palette: str
    scale: int
    seed: int


@dataclass
class CorpusExample:
    image: torch.Tensor  # (3, S, S) in [0, 1]
    caption: str
    spec: StyleSpec


def caption_for(spec: StyleSpec) -> str:
    return f"a painting of {spec.family} in {spec.palette}"


def _colors(palette: str) -> tuple[torch.Tensor, torch.Tensor]:
    if palette not in PALETTES:
        raise InputError(f"unknown palette {palette!r}")
    c0, c1 = PALETTES[palette]
    return (torch.tensor(c0, dtype=DTYPE).reshape(3, 1, 1),
            torch.tensor(c1, dtype=DTYPE).reshape(3, 1, 1))


def _two_tone(mask: torch.Tensor, palette: str) -> torch.Tensor:
    c0, c1 = _colors(palette)
    m = mask.to(DTYPE).unsqueeze(0)
    return c0 * (1.0 - m) + c1 * m


def render_style(spec: StyleSpec, size: int) -> torch.Tensor:
    """Render a style spec to a (3, size, size) image in [0, 1]."""
    if size < 4:
        raise InputError("size must be >= 4")
    if spec.family not in FAMILIES:
        raise InputError(f"unknown family {spec.family!r}")
    if spec.scale not in _SCALE_CHOICES[spec.family]:
        raise InputError(f"scale {spec.scale} invalid for family {spec.family!r}")
    y, x = torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij")
    if spec.family == "stripes":
        width = spec.scale
        phase = spec.seed % width
        mask = ((x + y + phase) // width) % 2
        return _two_tone(mask, spec.palette)
    if spec.family == "dots":
        cell = 8
        r = spec.scale
        ox = cell // 2 + (spec.seed % 3) - 1
        oy = cell // 2 + ((spec.seed // 3) % 3) - 1
        dy = (y % cell) - oy
        dx = (x % cell) - ox
        mask = (dy * dy + dx * dx) <= r * r
        return _two_tone(mask, spec.palette)
    if spec.family == "checker":
        s = spec.scale
        mask = ((y // s) + (x // s)) % 2
        return _two_tone(mask, spec.palette)
    if spec.family == "gradient":
        gamma = _GRADIENT_GAMMAS[spec.scale]
        u = (x.to(DTYPE) / (size - 1)) ** gamma
        c0, c1 = _colors(spec.palette)
        return c0 + u.unsqueeze(0) * (c1 - c0)
    # noise: a seeded low-resolution field, upsampled smoothly
    g = generator(derive_seed(spec.seed, "noise-field", spec.scale, spec.palette))
    field = rand((1, 1, spec.scale, spec.scale), g)
    u = torch.nn.functional.interpolate(
        field, size=(size, size), mode="bilinear", align_corners=True)[0, 0]
    c0, c1 = _colors(spec.palette)
    return c0 + u.unsqueeze(0) * (c1 - c0)


def training_combinations() -> list[tuple[str, str]]:
    held = set(HELD_OUT)
    return [(f, p) for f in FAMILIES for p in PALETTES if (f, p) not in held]


def generate_corpus(n: int, seed: int, size: int) -> list[CorpusExample]:
    """Generate a stratified corpus over all non-held-out combinations.

    Example i uses combination i mod len(combos), so family and palette
    histograms are uniform to within one count.  Scales and per-image
    jitter seeds come from the corpus seed.
    """
    if n < 1:
        raise InputError("corpus size must be >= 1")
    combos = training_combinations()
    g = generator(derive_seed(seed, "corpus"))
    examples = []
    for i in range(n):
        family, palette = combos[i % len(combos)]
        choices = _SCALE_CHOICES[family]
        scale = choices[int(torch.randint(0, len(choices), (1,), generator=g))]
        jitter = int(torch.randint(0, 2**31 - 1, (1,), generator=g))
        spec = StyleSpec(family=family, palette=palette, scale=scale, seed=jitter)
        examples.append(CorpusExample(image=render_style(spec, size),
                                      caption=caption_for(spec), spec=spec))
    return examples


def reference_specs() -> list[StyleSpec]:
    """Canonical specs for the held-out styles, one per combination."""
    return [StyleSpec(family=f, palette=p, scale=_SCALE_CHOICES[f][0], seed=7)
            for f, p in HELD_OUT]


# Every palette and family must be nameable in captions.
assert set(PALETTES) == set(PALETTE_WORDS)
assert set(FAMILIES) == set(FAMILY_WORDS)
