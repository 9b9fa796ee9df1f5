"""Config parsing, overrides, hashing, and validation."""

import pytest

from styleinv.config import (RunConfig, apply_overrides, config_hash, defaults,
                             dump_config, from_flat, load_config, parse_config,
                             to_flat)
from styleinv.errors import InputError
from styleinv.hashing import flat_config_hash


def test_flat_round_trip():
    config = defaults()
    again = from_flat(to_flat(config))
    assert to_flat(again) == to_flat(config)
    assert config_hash(again) == config_hash(config)


def test_dump_parse_round_trip():
    config = defaults()
    text = dump_config(config)
    assert parse_config(text) == config
    # Floats survive the text form exactly.
    assert "backbone.lr = 0.001" in text


def test_parse_skips_comments_and_blanks():
    text = dump_config(defaults()) + "\n# a comment\n\n"
    assert parse_config(text) == defaults()


def test_parse_rejects_malformed_lines():
    with pytest.raises(InputError):
        parse_config("schedule.T\n")
    with pytest.raises(InputError):
        parse_config("nosuchsection.x = 1\n")
    with pytest.raises(InputError):
        parse_config("schedule.nosuchkey = 1\n")
    with pytest.raises(InputError):
        parse_config("schedule.T = notanint\n")


def test_overrides_return_new_config():
    base = defaults()
    changed = apply_overrides(base, ["schedule.T=16", "backbone.lr=0.01"])
    assert changed.schedule.T == 16
    assert changed.backbone.lr == 0.01
    assert base.schedule.T == defaults().schedule.T
    with pytest.raises(InputError):
        apply_overrides(base, ["schedule.T"])
    with pytest.raises(InputError):
        apply_overrides(base, ["no.such=1"])


def test_hash_changes_with_any_key():
    base = defaults()
    h = config_hash(base)
    assert len(h) == 64
    for pair in ("schedule.T=16", "codec.seed=99", "backbone.lr=0.002"):
        assert config_hash(apply_overrides(base, [pair])) != h


def test_hash_is_order_independent():
    flat = {"b.y": 2, "a.x": 1}
    assert flat_config_hash(flat) == flat_config_hash(dict(reversed(list(flat.items()))))
    assert flat_config_hash({"a.x": 1, "b.y": 2}) != flat_config_hash({"a.x": 1, "b.y": 3})


def test_hash_distinguishes_float_and_int():
    assert flat_config_hash({"a.x": 1}) != flat_config_hash({"a.x": 1.0})
    with pytest.raises(InputError):
        flat_config_hash({"a.x": True})


def test_validation_rejects_bad_values():
    bad = [
        ["schedule.T=0"],
        ["schedule.beta_start=0.2", "schedule.beta_end=0.1"],
        ["schedule.sigma_mode=weird"],
        ["image.size=30"],  # not divisible by patch 4
        ["inversion.dropout=1.0"],
        ["inversion.pseudo_words=0"],
        ["backbone.steps=0"],
        ["backbone.image_cond_prob=1.5"],
        ["corpus.size=0"],
        ["conditioning.image_tokens=15"],  # not a perfect square
    ]
    for pairs in bad:
        with pytest.raises(InputError):
            apply_overrides(defaults(), pairs)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(InputError):
        load_config(str(tmp_path / "absent.cfg"))
    path = tmp_path / "run.cfg"
    path.write_text(dump_config(defaults()), encoding="utf-8")
    assert load_config(str(path)) == defaults()
