"""Text and image conditioning.

The vocabulary is a fixed word list (caption grammar plus a pool of
content words for editing prompts) with one reserved placeholder token
``[C]``.  Token embeddings are a trainable table that is co-trained with
the denoiser during pretraining and frozen afterwards.  Conditioning
sequences are treated as sets by the denoiser (no positional encoding),
so a learned pseudo-word can be spliced anywhere a template puts the
placeholder.

A small frozen convolutional encoder maps reference images to token
sequences; it is the input side of the inversion module and also the
feature extractor for evaluation metrics.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import InputError
from .seeding import DTYPE, generator, seeded_param_init

PLACEHOLDER = "[C]"

GRAMMAR_WORDS = ("a", "painting", "of", "in")

FAMILY_WORDS = ("stripes", "dots", "checker", "gradient", "noise")

PALETTE_WORDS = ("ember", "ocean", "forest", "dusk", "gold", "berry", "slate", "sand")

CONTENT_WORDS = (
    "the", "with", "and", "big", "small", "bright", "dark", "soft", "bold",
    "calm", "wild", "old", "new", "tiny", "grand", "quiet", "loud", "warm",
    "cool", "misty", "clear", "morning", "night", "summer", "winter",
    "spring", "autumn", "sun", "moon", "star", "cloud", "river", "mountain",
    "tree", "bird", "stone", "wave", "leaf", "flower", "field", "sky",
    "rain", "wind", "shore", "garden", "valley",
)

WORDS = GRAMMAR_WORDS + FAMILY_WORDS + PALETTE_WORDS + CONTENT_WORDS + (PLACEHOLDER,)


@dataclass
class Vocabulary:
    words: tuple[str, ...]
    word_to_id: dict[str, int]
    embeddings: nn.Parameter  # (V, embed_dim)
    placeholder_id: int

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def freeze(self) -> None:
        self.embeddings.requires_grad_(False)


def build_vocabulary(embed_dim: int, seed: int, scale: float = 0.5) -> Vocabulary:
    """Fixed word list with a seeded Gaussian embedding table (std = scale)."""
    if embed_dim < 1:
        raise InputError("embed_dim must be >= 1")
    g = generator(seed)
    table = torch.randn((len(WORDS), embed_dim), generator=g, dtype=DTYPE) * scale
    emb = nn.Parameter(table, requires_grad=True)
    return Vocabulary(
        words=WORDS,
        word_to_id={w: i for i, w in enumerate(WORDS)},
        embeddings=emb,
        placeholder_id=WORDS.index(PLACEHOLDER),
    )


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenizer; empty text gives an empty sequence."""
    ids = []
    for word in text.split():
        if word not in vocab.word_to_id:
            raise InputError(f"unknown token {word!r}")
        ids.append(vocab.word_to_id[word])
    return ids


@dataclass
class ConditioningSequence:
    """Conditioning vectors (L, embed_dim) plus splice bookkeeping.

    ``placeholder_span`` is the half-open [start, stop) row range holding
    pseudo-word vectors, or None for plain captions.
    """

    vectors: torch.Tensor
    source: str = ""
    placeholder_span: tuple[int, int] | None = None


def embed_caption(token_ids: list[int], vocab: Vocabulary,
                  source: str = "") -> ConditioningSequence:
    """Look up embeddings for a caption that contains no placeholder."""
    if len(token_ids) == 0:
        raise InputError("caption must contain at least one token")
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if bool((ids < 0).any()) or bool((ids >= len(vocab.words)).any()):
        raise InputError("token id outside vocabulary")
    if bool((ids == vocab.placeholder_id).any()):
        raise InputError("caption conditioning cannot contain the placeholder token")
    return ConditioningSequence(vectors=vocab.embeddings[ids], source=source)


def assemble_conditioning(token_ids: list[int], pseudo: torch.Tensor,
                          vocab: Vocabulary, source: str = "") -> ConditioningSequence:
    """Splice pseudo-word vectors into a template at its placeholder.

    The template must contain exactly one placeholder token.  ``pseudo``
    has shape (L_v, embed_dim); its rows replace the placeholder slot,
    all other rows come from the embedding table, and gradients flow to
    ``pseudo`` untouched.
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if ids.ndim != 1 or ids.numel() == 0:
        raise InputError("template must contain at least one token")
    if bool((ids < 0).any()) or bool((ids >= len(vocab.words)).any()):
        raise InputError("token id outside vocabulary")
    hits = (ids == vocab.placeholder_id).nonzero().flatten()
    if hits.numel() != 1:
        raise InputError(f"template must contain exactly one {PLACEHOLDER}, found {hits.numel()}")
    if pseudo.ndim != 2 or pseudo.shape[1] != vocab.embed_dim:
        raise InputError(f"pseudo-word must have shape (L_v, {vocab.embed_dim})")
    pos = int(hits[0])
    pseudo = pseudo.to(DTYPE)
    before = vocab.embeddings[ids[:pos]]
    after = vocab.embeddings[ids[pos + 1:]]
    vectors = torch.cat([before, pseudo, after], dim=0)
    span = (pos, pos + pseudo.shape[0])
    return ConditioningSequence(vectors=vectors, source=source, placeholder_span=span)


class ImagePatchEncoder(nn.Module):
    """Frozen convolutional encoder from an RGB image to a token sequence.

    Stride-2 stages reduce the image to a sqrt(tokens) x sqrt(tokens)
    feature map and a 1x1 convolution maps to the embedding width.  A
    tanh bounds activations; the fixed output gain then lifts the token
    scale to match the text embedding table, since the denoiser reads
    both through the same projections and would otherwise see image
    tokens as nearly zero.  Weights are seeded and never trained.
    """

    def __init__(self, image_size: int, embed_dim: int, tokens: int, seed: int,
                 gain: float = 1.0):
        super().__init__()
        grid = int(round(math.sqrt(tokens)))
        if grid * grid != tokens:
            raise InputError("tokens must be a perfect square")
        if image_size % grid != 0:
            raise InputError("image_size must be divisible by sqrt(tokens)")
        stages = int(round(math.log2(image_size // grid)))
        if 2**stages * grid != image_size:
            raise InputError("image_size / sqrt(tokens) must be a power of two")
        if gain <= 0.0:
            raise InputError("gain must be > 0")
        widths = [3] + [min(24 * 2**i, 96) for i in range(stages)]
        layers: list[nn.Module] = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers.append(nn.Conv2d(cin, cout, 3, stride=2, padding=1))
            layers.append(nn.SiLU())
        layers.append(nn.Conv2d(widths[-1], embed_dim, 1))
        self.stack = nn.Sequential(*layers)
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.tokens = tokens
        self.gain = float(gain)
        self.to(DTYPE)
        seeded_param_init(self, generator(seed))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape != (3, self.image_size, self.image_size):
            raise InputError(
                f"expected image of shape (3, {self.image_size}, {self.image_size}),"
                f" got {tuple(image.shape)}")
        h = self.stack(image.to(DTYPE).unsqueeze(0))
        out = self.gain * torch.tanh(h[0].flatten(1).T)
        return out  # (tokens, embed_dim)


def image_encode(image: torch.Tensor, encoder: ImagePatchEncoder) -> torch.Tensor:
    """Encode an image to its (tokens, embed_dim) conditioning sequence."""
    with torch.no_grad():
        return encoder(image)


def save_vocabulary(path: str, vocab: Vocabulary, config_hash: str) -> None:
    lines = [f"version=1 config_hash={config_hash}"]
    lines += [f"{w}\t{i}" for i, w in enumerate(vocab.words)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_vocabulary_words(path: str) -> tuple[list[str], str]:
    """Read a vocabulary file, returning (words, config_hash)."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot read vocabulary file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("version=1"):
        raise InputError(f"{path} is not a version-1 vocabulary file")
    head = dict(part.split("=", 1) for part in lines[0].split() if "=" in part)
    words = []
    for line in lines[1:]:
        if not line.strip():
            continue
        word, _, idx = line.partition("\t")
        if int(idx) != len(words):
            raise InputError(f"vocabulary ids in {path} are not contiguous")
        words.append(word)
    return words, head.get("config_hash", "")
