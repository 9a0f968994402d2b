import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectral_tta import tensor as T
from spectral_tta.adapt import (
    AdaptConfig,
    MaskedAdam,
    adapt_step,
    combined_loss,
    diversity_loss,
    entropy_loss,
    make_optimizer,
    masked_grad_norm,
    sample_entropies,
)
from spectral_tta.model import AlignmentStats, SpectralViT, ViTConfig
from spectral_tta.tensor import Tensor

from helpers import assert_gradients_match, numeric_gradient

SMALL = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=2, heads=2,
                  mlp_ratio=2, frozen_tail_blocks=1, dm_tail_blocks=1)


def _fresh_model(seed=3):
    m = SpectralViT(SMALL, seed=seed)
    m.decompose()
    return m


def _images(rng, n, cfg=SMALL):
    return Tensor(rng.uniform(0.0, 1.0, (n, cfg.channels, cfg.image_size, cfg.image_size)))


# -- entropy loss -------------------------------------------------------------


def test_confident_sample_kept_with_near_zero_loss():
    logits = Tensor(np.array([[30.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]))
    loss, kept = entropy_loss(logits, 10, 0.4)
    assert kept.all()
    assert loss.item() < 1e-8


def test_uniform_sample_filtered():
    logits = Tensor(np.zeros((1, 10)))
    h = sample_entropies(logits).item()
    assert abs(h - math.log(10)) < 1e-12
    assert h >= 0.4 * math.log(10)
    loss, kept = entropy_loss(logits, 10, 0.4)
    assert not kept.any()
    assert loss.item() == 0.0


def test_mixed_batch_mean_over_kept_matches_oracle():
    rng = np.random.default_rng(0)
    logits_data = np.vstack([
        rng.normal(0, 5, (3, 10)),   # confident-ish
        rng.normal(0, 0.01, (2, 10)),  # near uniform -> filtered
    ])
    logits = Tensor(logits_data)
    loss, kept = entropy_loss(logits, 10, 0.4)

    # per-sample oracle
    z = logits_data - logits_data.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    h = -(p * np.log(p)).sum(axis=1)
    expected_kept = h < 0.4 * math.log(10)
    assert np.array_equal(kept, expected_kept)
    assert abs(loss.item() - h[expected_kept].mean()) < 1e-12


def test_filtered_samples_have_exactly_zero_gradient():
    rng = np.random.default_rng(1)
    confident = np.zeros((2, 10))
    confident[0, 3] = 8.0
    confident[1, 7] = 9.0
    logits_data = np.vstack([confident, np.zeros((2, 10))])
    logits = Tensor(logits_data, requires_grad=True)
    loss, kept = entropy_loss(logits, 10, 0.4)
    T.backward(loss)
    assert kept[:2].all() and not kept[2:].any()
    assert np.array_equal(logits.grad[2:], np.zeros((2, 10)))
    assert np.abs(logits.grad[:2]).max() > 0

    # perturbing a filtered sample (keeping it filtered) changes nothing
    logits2_data = logits_data.copy()
    logits2_data[3] += rng.normal(0, 1e-3, 10)
    logits2 = Tensor(logits2_data, requires_grad=True)
    loss2, kept2 = entropy_loss(logits2, 10, 0.4)
    assert np.array_equal(kept, kept2)
    assert loss2.item() == loss.item()
    T.backward(loss2)
    assert np.array_equal(logits.grad[:2], logits2.grad[:2])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_entropy_nonnegative_and_bounded(seed):
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(0, 3, (4, 6)))
    h = sample_entropies(logits).data
    assert (h >= -1e-12).all()
    assert (h <= math.log(6) + 1e-9).all()


# -- diversity loss -------------------------------------------------------------


def _stats(layer_id, std):
    std = np.asarray(std, dtype=float)
    return AlignmentStats(layer_id, Tensor(np.zeros_like(std)), Tensor(std), 8)


def test_diversity_zero_for_constant_inputs():
    assert diversity_loss([_stats("a", [0.0, 0.0, 0.0])]).item() == 0.0


def test_diversity_hand_example():
    assert abs(diversity_loss([_stats("a", [0.5, 0.3])]).item() + 0.4) < 1e-15


def test_diversity_two_layers_matches_formula():
    rng = np.random.default_rng(2)
    s1, s2 = rng.uniform(0, 1, 5), rng.uniform(0, 1, 3)
    got = diversity_loss([_stats("a", s1), _stats("b", s2)]).item()
    assert abs(got - (-(s1.mean() + s2.mean()))) < 1e-12


def test_diversity_rejects_empty():
    with pytest.raises(ValueError):
        diversity_loss([])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_diversity_never_positive(seed):
    rng = np.random.default_rng(seed)
    stats = [_stats("l", rng.uniform(0, 2, rng.integers(1, 6)))]
    assert diversity_loss(stats).item() <= 0.0


# -- optimizer ---------------------------------------------------------------------


def _reference_scalar_adam(grad_fn, x0, lr, betas, eps, steps):
    """Plain scalar Adam, written independently of MaskedAdam."""
    x, m, v = x0, 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        x = x - lr * (m / (1 - betas[0] ** t)) / (math.sqrt(v / (1 - betas[1] ** t)) + eps)
        trace.append(x)
    return trace


def test_masked_adam_matches_scalar_reference():
    lr, betas, eps = 0.05, (0.9, 0.999), 1e-8
    param = Tensor(np.array([2.0]), requires_grad=True)
    opt = MaskedAdam([(param, np.array([True]))], lr=lr, betas=betas, eps=eps)
    trace = []
    for _ in range(50):
        g = 2.0 * (param.data - 0.5)  # d/dx of (x - 0.5)^2
        opt.step([g])
        trace.append(float(param.data[0]))
    expected = _reference_scalar_adam(lambda x: 2.0 * (x - 0.5), 2.0, lr, betas, eps, 50)
    assert np.allclose(trace, expected, rtol=0, atol=1e-14)


def test_masked_adam_leaves_masked_out_entries_untouched():
    param = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    mask = np.array([True, False, True])
    frozen_before = param.data[1]
    opt = MaskedAdam([(param, mask)], lr=0.1)
    for _ in range(20):
        opt.step([np.array([1.0, 5.0, -1.0])])
    assert param.data[1] == frozen_before
    assert param.data[0] != 1.0 and param.data[2] != 3.0


def test_masked_grad_norm_is_global():
    grads = [np.array([3.0, 100.0]), np.array([4.0])]
    masks = [np.array([True, False]), np.array([True])]
    assert masked_grad_norm(grads, masks) == 5.0


# -- full objective gradient ---------------------------------------------------------


def test_combined_objective_gradient_matches_finite_differences():
    model = _fresh_model(seed=5)
    rng = np.random.default_rng(6)
    imgs = _images(rng, 4)
    config = AdaptConfig(lambda_dm=50.0)

    loss, _ = combined_loss(model, imgs, config)
    sigmas = [s for _, s, _ in model.trainable_sigmas()]
    for s in sigmas:
        s.grad = None
    T.backward(loss)
    analytic = [s.grad.copy() for s in sigmas]
    for s in sigmas:
        s.grad = None

    def forward():
        l, _ = combined_loss(model, imgs, config)
        return l.item()

    for sigma, grad in zip(sigmas, analytic):
        fd = numeric_gradient(forward, sigma.data)
        assert_gradients_match(grad, fd)


# -- adapt_step behavior -----------------------------------------------------------


def test_step_no_op_when_all_filtered_and_no_dm():
    model = _fresh_model(seed=7)
    config = AdaptConfig(mode="entmin_only", entropy_margin_factor=1e-9)
    opt = make_optimizer(model, config)
    before = [s.data.copy() for _, s, _ in model.trainable_sigmas()]
    rng = np.random.default_rng(8)
    report = adapt_step(model, _images(rng, 4), config, opt)
    assert not report.updated
    assert report.kept_samples == 0
    for (_, s, _), b in zip(model.trainable_sigmas(), before):
        assert np.array_equal(s.data, b)


def test_masked_entries_bit_identical_across_steps():
    model = _fresh_model(seed=9)
    model.set_masks("top", 50)
    config = AdaptConfig(learning_rate=0.05, entropy_margin_factor=2.0)
    opt = make_optimizer(model, config)
    frozen = {
        lid: s.data[~mask].copy() for lid, s, mask in model.trainable_sigmas()
    }
    tail = {l.layer_id: l.sigma.data.copy() for l in model.spectral_layers()
            if l.layer_id not in frozen}
    rng = np.random.default_rng(10)
    for _ in range(100):
        adapt_step(model, _images(rng, 4), config, opt)
    for lid, s, mask in model.trainable_sigmas():
        assert np.array_equal(s.data[~mask], frozen[lid])
        assert np.abs(s.data[mask] - 0).size  # touched entries exist
    for layer in model.spectral_layers():
        if layer.layer_id in tail:
            assert np.array_equal(layer.sigma.data, tail[layer.layer_id])


def test_entmin_only_equals_lambda_zero_trajectory():
    rng_a, rng_b = np.random.default_rng(11), np.random.default_rng(11)
    model_a, model_b = _fresh_model(seed=12), _fresh_model(seed=12)
    cfg_a = AdaptConfig(mode="entmin_only", entropy_margin_factor=2.0)
    cfg_b = AdaptConfig(mode="entmin_dm", lambda_dm=0.0, entropy_margin_factor=2.0)
    opt_a, opt_b = make_optimizer(model_a, cfg_a), make_optimizer(model_b, cfg_b)
    for _ in range(10):
        ra = adapt_step(model_a, _images(rng_a, 4), cfg_a, opt_a)
        rb = adapt_step(model_b, _images(rng_b, 4), cfg_b, opt_b)
        assert ra.entmin == rb.entmin and ra.kept_samples == rb.kept_samples
    for (_, sa, _), (_, sb, _) in zip(model_a.trainable_sigmas(), model_b.trainable_sigmas()):
        assert np.array_equal(sa.data, sb.data)


def test_sam_rho_zero_is_plain_adam():
    model_a, model_b = _fresh_model(seed=13), _fresh_model(seed=13)
    cfg = AdaptConfig(sam_rho=0.0, entropy_margin_factor=2.0)
    opt_a = make_optimizer(model_a, cfg)
    rng = np.random.default_rng(14)
    imgs = _images(rng, 4)
    adapt_step(model_a, imgs, cfg, opt_a)

    # hand-rolled: one forward/backward + one adam step
    loss, _ = combined_loss(model_b, imgs, cfg)
    sigmas = [s for _, s, _ in model_b.trainable_sigmas()]
    T.backward(loss)
    grads = [s.grad.copy() for s in sigmas]
    for s in sigmas:
        s.grad = None
    opt_b = make_optimizer(model_b, cfg)
    opt_b.step(grads)
    for (_, sa, _), (_, sb, _) in zip(model_a.trainable_sigmas(), model_b.trainable_sigmas()):
        assert np.array_equal(sa.data, sb.data)


def test_sam_perturbation_changes_update():
    model_a, model_b = _fresh_model(seed=15), _fresh_model(seed=15)
    rng = np.random.default_rng(16)
    imgs = _images(rng, 4)
    cfg_plain = AdaptConfig(sam_rho=0.0, entropy_margin_factor=2.0)
    cfg_sam = AdaptConfig(sam_rho=0.5, entropy_margin_factor=2.0)
    adapt_step(model_a, imgs, cfg_plain, make_optimizer(model_a, cfg_plain))
    adapt_step(model_b, imgs, cfg_sam, make_optimizer(model_b, cfg_sam))
    diffs = [
        np.abs(sa.data - sb.data).max()
        for (_, sa, _), (_, sb, _) in zip(model_a.trainable_sigmas(), model_b.trainable_sigmas())
    ]
    assert max(diffs) > 0


def test_sam_restores_sigmas_when_gradient_norm_zero():
    # zero-gradient branch: perturbation is skipped outright
    param = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    grads = [np.zeros(2)]
    assert masked_grad_norm(grads, [np.array([True, True])]) == 0.0


def test_config_rejects_zero_learning_rate():
    with pytest.raises(ValueError, match="learning_rate"):
        AdaptConfig(learning_rate=0.0).validate()


def test_argmax_preserved_with_zero_lr_optimizer():
    model = _fresh_model(seed=19)
    cfg = AdaptConfig(entropy_margin_factor=2.0)
    opt = MaskedAdam(
        [(s, mask) for _, s, mask in model.trainable_sigmas()], lr=0.0
    )
    rng = np.random.default_rng(20)
    imgs = _images(rng, 5)
    with T.no_grad():
        before = model.forward(imgs).logits.data
    adapt_step(model, imgs, cfg, opt)
    with T.no_grad():
        after = model.forward(imgs).logits.data
    assert np.array_equal(before.argmax(axis=1), after.argmax(axis=1))
    assert np.array_equal(before, after)


def test_report_fields_consistent():
    model = _fresh_model(seed=17)
    cfg = AdaptConfig(entropy_margin_factor=2.0)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(18)
    report = adapt_step(model, _images(rng, 6), cfg, opt)
    assert 0 <= report.kept_samples <= report.batch_size == 6
    assert abs(report.combined - (report.entmin + cfg.lambda_dm * report.dm)) < 1e-12
    assert report.logits.shape == (6, 10)
    assert set(report.layer_std_means) == set(model.dm_layer_ids())
