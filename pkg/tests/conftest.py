"""Shared fixtures.

The pretrained backbone is expensive, so one bundle per config is cached
on disk under ``tests/.cache`` keyed by the config hash.  Deleting the
directory forces a retrain.
"""

import os

import pytest

from styleinv.backbone import load_pretrained, pretrain_backbone, save_pretrained
from styleinv.conditioning import build_vocabulary
from styleinv.config import RunConfig, apply_overrides, config_hash
from styleinv.corpus import generate_corpus
from styleinv.diffusion import make_schedule

CACHE_DIR = os.path.join(os.path.dirname(__file__), ".cache")

SMOKE_OVERRIDES = ["backbone.steps=200", "corpus.size=32"]


def pretrained_bundle(config: RunConfig):
    """Train (or load from cache) the backbone for ``config``."""
    os.makedirs(CACHE_DIR, exist_ok=True)
    path = os.path.join(CACHE_DIR, f"backbone-{config_hash(config)[:16]}.ckpt")
    if not os.path.exists(path):
        sched = make_schedule(config.schedule.T, config.schedule.beta_start,
                              config.schedule.beta_end, config.schedule.sigma_mode)
        vocab = build_vocabulary(config.conditioning.embed_dim,
                                 config.conditioning.embed_seed,
                                 config.conditioning.embed_scale)
        corpus = generate_corpus(config.corpus.size, config.corpus.seed,
                                 config.image.size)
        result = pretrain_backbone(corpus, sched, vocab, config)
        save_pretrained(path, config, result.model, vocab)
    return load_pretrained(path)


@pytest.fixture(scope="session")
def default_bundle():
    """The full default-config backbone; used by the acceptance suite."""
    return pretrained_bundle(RunConfig())


@pytest.fixture(scope="session")
def smoke_bundle():
    """A quickly trained backbone for tests that only need plausibility."""
    return pretrained_bundle(apply_overrides(RunConfig(), SMOKE_OVERRIDES))
