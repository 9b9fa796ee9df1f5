"""Attention math, the inversion module, and both optimization routes."""

import math

import pytest
import torch

from styleinv.backbone import build_denoiser
from styleinv.codec import encode, make_codec
from styleinv.conditioning import build_vocabulary, image_encode
from styleinv.config import RunConfig, apply_overrides
from styleinv.corpus import StyleSpec, render_style
from styleinv.diffusion import make_schedule
from styleinv.errors import InputError, RunFailure
from styleinv.inversion import (CrossAttentionInverter, attention,
                                denoising_loss, direct_optimize,
                                dropout_mask_apply, effective_learning_rate,
                                multi_attn, train_inversion)
from styleinv.seeding import DTYPE, generator, randn


def test_attention_singleton_identity():
    # One key: softmax weight is exactly 1, output equals the value row.
    q = torch.tensor([[0.3, -1.2]], dtype=DTYPE)
    k = torch.tensor([[2.0, 0.5]], dtype=DTYPE)
    v = torch.tensor([[7.0, -3.0]], dtype=DTYPE)
    out = attention(q, k, v, 2)
    assert torch.allclose(out, v, atol=1e-12)


def test_attention_uniform_identity():
    # Identical keys: uniform weights, output is the mean of the values.
    q = torch.tensor([[1.0, 2.0], [0.0, -1.0]], dtype=DTYPE)
    k = torch.ones((4, 2), dtype=DTYPE)
    g = generator(0)
    v = randn((4, 3), g)
    out = attention(q, k, v, 2)
    want = v.mean(dim=0).expand(2, -1)
    assert torch.allclose(out, want, atol=1e-12)


def test_attention_two_key_hand_value():
    # d=1, scores 2 and 0, values 2 and 0: output = 2 exp(2) / (exp(2)+1).
    q = torch.tensor([[2.0]], dtype=DTYPE)
    k = torch.tensor([[1.0], [0.0]], dtype=DTYPE)
    v = torch.tensor([[2.0], [0.0]], dtype=DTYPE)
    out = attention(q, k, v, 1)
    want = 2.0 * math.exp(2.0) / (math.exp(2.0) + 1.0)
    assert float(out[0, 0]) == pytest.approx(want, rel=1e-12)
    assert float(out[0, 0]) == pytest.approx(1.7615941559557646, rel=1e-12)


def test_attention_weights_and_validation():
    g = generator(1)
    q, k, v = randn((3, 4), g), randn((5, 4), g), randn((5, 2), g)
    out, w = attention(q, k, v, 4, return_weights=True)
    assert out.shape == (3, 2) and w.shape == (3, 5)
    assert torch.allclose(w.sum(dim=1), torch.ones(3, dtype=DTYPE), atol=1e-12)
    with pytest.raises(InputError):
        attention(q.unsqueeze(0), k, v, 4)
    with pytest.raises(InputError):
        attention(q, k, v, 3)
    with pytest.raises(InputError):
        attention(q, k, randn((4, 2), g), 4)


def test_dropout_rate_and_determinism():
    x = torch.ones(100000, dtype=DTYPE)
    y = dropout_mask_apply(x, 0.05, generator(42))
    rate = float((y == 0).to(DTYPE).mean())
    assert 0.045 <= rate <= 0.055
    # Survivors are rescaled by 1/(1-p).
    kept = y[y != 0]
    assert torch.allclose(kept, torch.full_like(kept, 1.0 / 0.95), atol=1e-12)
    assert torch.equal(y, dropout_mask_apply(x, 0.05, generator(42)))
    assert torch.equal(dropout_mask_apply(x, 0.0, generator(1)), x)
    with pytest.raises(InputError):
        dropout_mask_apply(x, 1.0, generator(1))


def _micro_config() -> RunConfig:
    return apply_overrides(RunConfig(), [
        "image.size=4", "codec.patch_size=2", "conditioning.embed_dim=8",
        "conditioning.image_tokens=4", "inversion.layers=2",
        "backbone.channels=8", "backbone.time_dim=8", "schedule.T=8",
        "inversion.steps=30",
    ])


def _micro_stack():
    config = _micro_config()
    codec = make_codec(config.codec.patch_size, config.image.size,
                       config.codec.seed)
    sched = make_schedule(config.schedule.T, config.schedule.beta_start,
                          config.schedule.beta_end, config.schedule.sigma_mode)
    vocab = build_vocabulary(config.conditioning.embed_dim,
                             config.conditioning.embed_seed,
                             config.conditioning.embed_scale)
    model = build_denoiser(config, zero_final=False)
    model.freeze()
    vocab.freeze()
    y = render_style(StyleSpec(family="checker", palette="ember",
                               scale=4, seed=3), config.image.size)
    return config, codec, sched, vocab, model, y


def test_inverter_shapes_and_zero_layer_pooling():
    g = generator(2)
    tokens = randn((5, 8), g)
    module = CrossAttentionInverter(embed_dim=8, layers=0, dropout=0.0,
                                    pseudo_words=2, seed=1)
    out = module(tokens)
    assert out.shape == (2, 8)
    # Zero layers and identity pool blocks: both words are the token mean.
    want = tokens.mean(dim=0)
    assert torch.allclose(out[0], want, atol=1e-12)
    assert torch.allclose(out[1], want, atol=1e-12)


def test_inverter_identity_init_tracks_pooled_tokens():
    g = generator(3)
    tokens = randn((6, 8), g)
    module = CrossAttentionInverter(embed_dim=8, layers=3, dropout=0.0,
                                    pseudo_words=1, seed=1, init_noise=0.0)
    module.eval()
    out = module(tokens)
    # Pure identity weights: each layer is plain self-attention over the
    # token set, so the output stays within the tokens' convex-hull scale.
    assert out.shape == (1, 8)
    assert float(out.abs().max()) <= float(tokens.abs().max()) + 1e-9


def test_inverter_permutation_invariance():
    g = generator(4)
    tokens = randn((9, 8), g)
    module = CrossAttentionInverter(embed_dim=8, layers=2, dropout=0.05,
                                    pseudo_words=2, seed=5)
    module.eval()
    out = module(tokens)
    perm = torch.randperm(9, generator=torch.Generator().manual_seed(0))
    out_perm = module(tokens[perm])
    assert float((out - out_perm).abs().max()) < 1e-6


def test_inverter_dropout_contract():
    g = generator(5)
    tokens = randn((4, 8), g)
    module = CrossAttentionInverter(embed_dim=8, layers=1, dropout=0.5,
                                    pseudo_words=1, seed=6)
    module.train()
    with pytest.raises(InputError):
        module(tokens)  # train mode needs a generator
    a = module(tokens, g=generator(7))
    b = module(tokens, g=generator(7))
    assert torch.equal(a, b)
    module.eval()
    c = module(tokens)
    d = module(tokens, g=generator(8))
    assert torch.equal(c, d)  # eval mode ignores dropout entirely


def test_multi_attn_restores_mode():
    module = CrossAttentionInverter(embed_dim=8, layers=1, dropout=0.1,
                                    pseudo_words=1, seed=6)
    tokens = randn((4, 8), generator(9))
    module.eval()
    multi_attn(tokens, module, train=True, g=generator(10))
    assert not module.training
    module.train()
    multi_attn(tokens, module, train=False)
    assert module.training


def test_inverter_validation():
    with pytest.raises(InputError):
        CrossAttentionInverter(embed_dim=8, layers=-1, dropout=0.0,
                               pseudo_words=1, seed=1)
    with pytest.raises(InputError):
        CrossAttentionInverter(embed_dim=8, layers=1, dropout=1.0,
                               pseudo_words=1, seed=1)
    with pytest.raises(InputError):
        CrossAttentionInverter(embed_dim=8, layers=1, dropout=0.0,
                               pseudo_words=0, seed=1)
    module = CrossAttentionInverter(embed_dim=8, layers=1, dropout=0.0,
                                    pseudo_words=1, seed=1)
    with pytest.raises(InputError):
        module(randn((4, 7), generator(1)))


def test_gradients_match_central_differences():
    """Micro-config check of loss gradients w.r.t. module parameters."""
    config, codec, sched, vocab, model, y = _micro_stack()
    from styleinv.backbone import build_image_encoder
    from styleinv.conditioning import assemble_conditioning, tokenize
    encoder = build_image_encoder(config)
    z0 = encode(y, codec)
    tau = image_encode(y, encoder)
    module = CrossAttentionInverter(embed_dim=8, layers=2, dropout=0.0,
                                    pseudo_words=1, seed=8)
    module.eval()
    template = tokenize("a painting of [C]", vocab)
    t_step = 3
    eps = randn(tuple(z0.shape), generator(11))

    def loss_value() -> torch.Tensor:
        v_hat = module(tau)
        cond = assemble_conditioning(template, v_hat, vocab)
        return denoising_loss(z0, cond, t_step, eps, model, sched)

    loss = loss_value()
    loss.backward()
    h = 1e-6
    checked = 0
    for name, p in module.named_parameters():
        grad = p.grad
        flat = p.data.flatten()
        for idx in range(0, flat.numel(), max(flat.numel() // 3, 1)):
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_value())
            flat[idx] = orig - h
            down = float(loss_value())
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grad.flatten()[idx])
            scale = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / scale < 1e-3, (name, idx)
            checked += 1
    assert checked >= 9


def test_train_inversion_runs_and_freezes(tmp_path):
    config, codec, sched, vocab, model, y = _micro_stack()
    result = train_inversion(y, model, codec, vocab, config, sched,
                             steps=25, seed=3)
    assert result.variant == "attention"
    assert len(result.losses) == 25
    assert result.embedding.shape == (1, 8)
    assert not result.embedding.requires_grad
    assert result.module is not None and not result.module.training
    # Reproducible given the same seed.
    again = train_inversion(y, model, codec, vocab, config, sched,
                            steps=25, seed=3)
    assert result.losses == again.losses
    assert torch.equal(result.embedding, again.embedding)


def test_train_inversion_detects_frozen_drift():
    config, codec, sched, vocab, model, y = _micro_stack()

    def sabotage(losses):
        with torch.no_grad():
            model.conv_out.weight.add_(1.0)
        return True  # stop immediately; the digest check must still fire

    with pytest.raises(RunFailure):
        train_inversion(y, model, codec, vocab, config, sched,
                        steps=5, seed=3, stop_fn=sabotage)
    with torch.no_grad():
        model.conv_out.weight.sub_(1.0)


def test_direct_optimize_runs_from_init_word():
    config, codec, sched, vocab, model, y = _micro_stack()
    result = direct_optimize(y, model, codec, vocab, config, sched,
                             steps=25, seed=3)
    assert result.variant == "direct"
    assert result.embedding.shape == (1, 8)
    row = vocab.embeddings[vocab.word_to_id[config.inversion.init_word]]
    assert not torch.equal(result.embedding[0], row)  # it moved
    again = direct_optimize(y, model, codec, vocab, config, sched,
                            steps=25, seed=3)
    assert result.losses == again.losses


def test_both_routes_share_the_data_stream():
    # Same seed, same (t, eps) draws: the two variants see identical data,
    # so their step-1 losses differ only through their v_hat inits.
    config, codec, sched, vocab, model, y = _micro_stack()
    direct = direct_optimize(y, model, codec, vocab, config, sched,
                             steps=1, seed=3)
    att = train_inversion(y, model, codec, vocab, config, sched,
                          steps=1, seed=3)
    assert len(direct.losses) == len(att.losses) == 1
    assert direct.losses[0] != att.losses[0]


def test_inversion_validation():
    config, codec, sched, vocab, model, y = _micro_stack()
    with pytest.raises(InputError):
        train_inversion(y, model, codec, vocab, config, sched, steps=0)
    with pytest.raises(InputError):
        direct_optimize(y, model, codec, vocab, config, sched, steps=0)
    bad = apply_overrides(config, ["inversion.init_word=plaid"])
    with pytest.raises(InputError):
        direct_optimize(y, model, codec, vocab, bad, sched, steps=1)


def test_effective_learning_rate():
    assert effective_learning_rate(1e-3, 1) == pytest.approx(1e-3)
    assert effective_learning_rate(1e-3, 4) == pytest.approx(4e-3)


def test_stop_fn_can_end_early():
    config, codec, sched, vocab, model, y = _micro_stack()
    result = direct_optimize(y, model, codec, vocab, config, sched,
                             steps=50, seed=3,
                             stop_fn=lambda losses: len(losses) >= 7)
    assert len(result.losses) == 7
