import os

import pytest
import torch

from styleinv.backbone import (BackboneBundle, build_image_encoder,
                               pretrain_backbone)
from styleinv.codec import make_codec
from styleinv.config import RunConfig, apply_overrides, config_hash
from styleinv.conditioning import build_vocabulary, save_vocabulary
from styleinv.corpus import generate_corpus, render_style, reference_specs
from styleinv.diffusion import make_schedule
from styleinv.errors import InputError
from styleinv.evaluate import (eval_accuracy, eval_editability,
                               feature_vector, run_convergence_benchmark,
                               steps_to_threshold, trailing_mean, verify_run)
from styleinv.persist import (StyleRecord, save_image, save_style,
                              write_metrics_csv)
from styleinv.seeding import generator, randn


def test_trailing_mean_values():
    assert trailing_mean([1.0, 2.0, 3.0, 4.0], 2) == [1.5, 2.5, 3.5]
    assert trailing_mean([5.0], 1) == [5.0]
    assert trailing_mean([1.0, 2.0], 3) == []
    with pytest.raises(InputError):
        trailing_mean([1.0], 0)


def test_steps_to_threshold():
    losses = [4.0, 3.0, 2.0, 1.0]
    # window-2 means: 3.5, 2.5, 1.5 at steps 2, 3, 4
    assert steps_to_threshold(losses, 2.5, 2) == 3
    assert steps_to_threshold(losses, 0.5, 2) is None
    assert steps_to_threshold(losses, 5.0, 2) == 2


@pytest.fixture(scope="module")
def bundle():
    config = apply_overrides(RunConfig(), [
        "image.size=8",
        "codec.patch_size=2",
        "conditioning.embed_dim=16",
        "conditioning.image_tokens=4",
        "backbone.channels=8",
        "backbone.time_dim=16",
        "schedule.T=8",
        "corpus.size=8",
        "backbone.steps=40",
        "backbone.batch_size=4",
        "inversion.layers=2",
        "bench.reference_steps=60",
        "bench.max_steps=80",
        "bench.num_seeds=2",
        "bench.window=10",
        "eval.samples=2",
    ])
    sched = make_schedule(config.schedule.T, config.schedule.beta_start,
                          config.schedule.beta_end, config.schedule.sigma_mode)
    vocab = build_vocabulary(config.conditioning.embed_dim,
                             config.conditioning.embed_seed,
                             config.conditioning.embed_scale)
    corpus = generate_corpus(config.corpus.size, config.corpus.seed,
                             config.image.size)
    model = pretrain_backbone(corpus, sched, vocab, config).model
    codec = make_codec(config.codec.patch_size, config.image.size,
                       config.codec.seed)
    return BackboneBundle(config=config, config_hash=config_hash(config),
                          model=model, vocab=vocab,
                          encoder=build_image_encoder(config), codec=codec,
                          sched=sched)


def _style(bundle, seed):
    g = generator(seed)
    emb = 0.5 * randn((1, bundle.config.conditioning.embed_dim), g)
    return StyleRecord(embedding=emb, template="a painting of [C]",
                       variant="direct", seed=seed, steps=10,
                       config_hash=bundle.config_hash)


def test_feature_vector_width(bundle):
    img = render_style(reference_specs()[0], bundle.config.image.size)
    feat = feature_vector(img, bundle.encoder)
    assert feat.shape == (2 * bundle.config.conditioning.embed_dim,)


def test_convergence_benchmark_structure(bundle):
    y = render_style(reference_specs()[0], bundle.config.image.size)
    report, rows = run_convergence_benchmark(y, bundle, bundle.config)
    bench = bundle.config.bench
    assert report.reference_steps == bench.reference_steps
    assert report.threshold > 0.0
    assert len(report.runs) == 2 * bench.num_seeds
    assert len(report.ratios) == bench.num_seeds
    assert report.median_ratio is not None and report.median_ratio > 0.0
    assert not report.failed
    variants = {run.variant for run in report.runs}
    assert variants == {"attention", "direct"}
    assert {row["run_id"] for row in rows} == {"reference", "seed0", "seed1"}
    for row in rows:
        assert set(row) == {"run_id", "variant", "step", "loss", "wall_time_s"}
    # the loss stream must be reproducible; wall time is measured anew
    report2, rows2 = run_convergence_benchmark(y, bundle, bundle.config)
    assert [r["loss"] for r in rows2] == [r["loss"] for r in rows]
    assert report2.ratios == report.ratios


def test_eval_accuracy_report(bundle):
    styles = [_style(bundle, 1), _style(bundle, 2)]
    refs = [render_style(s, bundle.config.image.size)
            for s in reference_specs()[:2]]
    report = eval_accuracy(styles, refs, bundle, bundle.config)
    assert len(report.rows) == 2 * bundle.config.eval.samples
    assert 0.0 <= report.rate <= 1.0
    for row in report.rows:
        assert row.own_distance >= 0.0
        assert row.min_other_distance >= 0.0
        assert row.correct == (row.own_distance < row.min_other_distance)


def test_eval_accuracy_validation(bundle):
    style = _style(bundle, 1)
    ref = render_style(reference_specs()[0], bundle.config.image.size)
    with pytest.raises(InputError):
        eval_accuracy([style], [ref], bundle, bundle.config)
    with pytest.raises(InputError):
        eval_accuracy([style, style], [ref], bundle, bundle.config)


def test_eval_editability_report(bundle):
    style = _style(bundle, 3)
    ref = render_style(reference_specs()[0], bundle.config.image.size)
    templates = ["a painting of [C]", "a bright painting of [C]",
                 "a painting of [C] in winter"]
    report = eval_editability(style, templates, ref, bundle, bundle.config)
    assert len(report.template_rows) == 3
    assert len(report.pair_rows) == 3
    for row in report.pair_rows:
        assert row.pixel_distance > 0.0
    for row in report.template_rows:
        assert row.distance_to_reference_pixel >= 0.0


def test_eval_editability_validation(bundle):
    style = _style(bundle, 3)
    ref = render_style(reference_specs()[0], bundle.config.image.size)
    with pytest.raises(InputError):
        eval_editability(style, ["a painting of [C]"], ref, bundle,
                         bundle.config)
    with pytest.raises(InputError):
        eval_editability(style, ["a painting of [C]"] * 2, ref, bundle,
                         bundle.config)


def test_verify_run_clean_and_mismatched(bundle, tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    h = bundle.config_hash
    save_style(str(run / "a.style"), _style(bundle, 4))
    img = torch.rand((3, 8, 8), generator=generator(9), dtype=torch.float64)
    save_image(str(run / "b.png"), img, h)
    write_metrics_csv(str(run / "c.csv"),
                      [{"run_id": "r", "variant": "direct", "step": 1,
                        "loss": 0.5, "wall_time_s": 0.1}], h)
    save_vocabulary(str(run / "vocab.txt"), bundle.vocab, h)
    (run / "notes.md").write_text("free text, no hash\n")
    report = verify_run(str(run))
    assert report.ok
    assert report.reference_hash == h
    assert len(report.checked) == 4  # notes.md is not an artifact

    stray = StyleRecord(embedding=_style(bundle, 5).embedding,
                        template="a painting of [C]", variant="direct",
                        seed=5, steps=10, config_hash="f" * 64)
    save_style(str(run / "stray.style"), stray)
    report = verify_run(str(run))
    assert not report.ok
    assert any("stray.style" in m for m in report.mismatches)


def test_verify_run_errors(tmp_path):
    with pytest.raises(InputError):
        verify_run(str(tmp_path / "missing"))
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "readme.txt").write_text("nothing to check\n")
    with pytest.raises(InputError):
        verify_run(str(empty))
