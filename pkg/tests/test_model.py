import numpy as np
import pytest

from alignlab._backend import get_backend
from alignlab.diffcore import grad_check
from alignlab.errors import ConfigError, DataFormatError, DimensionError, UsageError
from alignlab.losses import DiceFpConfig, cross_entropy, dice_fp_batch
from alignlab.model import (ModelConfig, ModelParams, accumulate_backward,
                            backward, field_layout, forward, forward_batch,
                            init_params, load_checkpoint, n_params,
                            save_checkpoint)

SMALL = ModelConfig(image_size=8, patch_size=4, embed_dim=6, num_classes=3)


class TestConfig:
    def test_patch_must_divide_image(self):
        with pytest.raises(ConfigError):
            ModelConfig(image_size=32, patch_size=5)

    def test_grid_side(self):
        assert ModelConfig(image_size=32, patch_size=4).grid_side == 8


class TestInit:
    def test_deterministic(self):
        a = init_params(SMALL, seed=7)
        b = init_params(SMALL, seed=7)
        assert np.array_equal(a.vec, b.vec)

    def test_patch_proj_shape(self):
        cfg = ModelConfig(image_size=32, patch_size=4, embed_dim=16)
        assert init_params(cfg, 0).view("patch_proj").shape == (16, 16)

    def test_seed_sensitivity(self):
        assert not np.array_equal(init_params(SMALL, 7).vec,
                                  init_params(SMALL, 8).vec)

    def test_scaled_uniform_range(self):
        cfg = ModelConfig(image_size=32, patch_size=4, embed_dim=16)
        p = init_params(cfg, 3)
        assert np.abs(p.view("patch_proj")).max() <= 1 / np.sqrt(16)
        assert p.scalar("aligner_gamma") == 1.0
        assert p.scalar("aligner_beta") == 0.0
        assert np.all(p.view("patch_bias") == 0.0)

    def test_layout_covers_vector(self):
        total = sum(int(np.prod(s)) if s else 1 for _, s in field_layout(SMALL))
        assert total == n_params(SMALL) == init_params(SMALL, 0).vec.size


class TestForward:
    def test_attention_sums_to_one(self):
        p = init_params(SMALL, 1)
        img = np.random.default_rng(0).random((8, 8))
        for c in range(SMALL.num_classes):
            pred = forward(p, img, c)
            assert pred.raw_attention.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(pred.raw_attention >= 0)
            assert np.all((pred.aligned_map >= 0) & (pred.aligned_map <= 1))

    def test_uniform_image_zero_qproj_gives_uniform_attention(self):
        p = init_params(SMALL, 1)
        p.view("q_proj")[...] = 0.0
        pred = forward(p, np.full((8, 8), 0.7), 0)
        n = SMALL.n_tokens
        assert np.allclose(pred.raw_attention, 1.0 / n)

    def test_deterministic(self):
        p = init_params(SMALL, 2)
        img = np.random.default_rng(1).random((8, 8))
        a = forward(p, img, 1)
        b = forward(p, img, 1)
        assert np.array_equal(a.raw_attention, b.raw_attention)
        assert a.logit == b.logit and a.prob == b.prob

    def test_prob_is_sigmoid_of_logit(self):
        p = init_params(SMALL, 3)
        pred = forward(p, np.random.default_rng(2).random((8, 8)), 0)
        assert pred.prob == pytest.approx(1 / (1 + np.exp(-pred.logit)), abs=1e-15)

    def test_bad_image_shape(self):
        with pytest.raises(DimensionError):
            forward(init_params(SMALL, 0), np.zeros((7, 8)), 0)

    def test_bad_class(self):
        with pytest.raises(ConfigError):
            forward(init_params(SMALL, 0), np.zeros((8, 8)), 5)

    def test_class_permutation_equivariance(self):
        # permuting class embeddings permutes per-class outputs identically
        p = init_params(SMALL, 4)
        img = np.random.default_rng(3).random((8, 8))
        before = [forward(p, img, c) for c in range(3)]
        perm = [2, 0, 1]
        q = p.copy()
        q.view("class_embed")[...] = p.view("class_embed")[perm]
        after = [forward(q, img, c) for c in range(3)]
        for new_c, old_c in enumerate(perm):
            assert np.array_equal(after[new_c].raw_attention,
                                  before[old_c].raw_attention)
            assert after[new_c].logit == before[old_c].logit


class TestBackward:
    def test_requires_cache(self):
        p = init_params(SMALL, 0)
        pred = forward(p, np.zeros((8, 8)), 0)
        with pytest.raises(UsageError):
            backward(p, 0, pred, np.zeros((2, 2)), 1.0)

    def test_zero_upstream_zero_grads(self):
        p = init_params(SMALL, 0)
        pred = forward(p, np.random.default_rng(0).random((8, 8)), 0,
                       keep_cache=True)
        g = backward(p, 0, pred, np.zeros((2, 2)), 0.0)
        assert np.all(g == 0.0)

    def test_other_class_embedding_untouched(self):
        p = init_params(SMALL, 0)
        rng = np.random.default_rng(1)
        pred = forward(p, rng.random((8, 8)), 1, keep_cache=True)
        g = backward(p, 1, pred, rng.random((2, 2)), 0.5)
        ce_grad = ModelParams(SMALL, g).view("class_embed")
        assert np.all(ce_grad[0] == 0.0)
        assert np.all(ce_grad[2] == 0.0)
        assert np.any(ce_grad[1] != 0.0)


def total_loss_and_grad(cfg, vec, images, labels, masks, backend=None):
    """CE + dice-FP through the aligner head, all classes, with flat grads."""
    params = ModelParams(cfg, vec)
    grad = np.zeros_like(vec)
    loss = 0.0
    dice = DiceFpConfig()
    for c in range(cfg.num_classes):
        logits, _, aligned, cache = forward_batch(params, images, c, backend)
        logits = np.asarray(logits)
        aligned = np.asarray(aligned)
        ce, d_logit = cross_entropy(labels[:, c], logits)
        loss += ce
        al_losses, d_aligned = dice_fp_batch(masks[:, c], aligned, dice)
        loss += float(al_losses.sum())
        accumulate_backward(grad, params, c, cache, d_logit, d_aligned, backend)
    return loss, grad


@pytest.mark.parametrize("image_size", [8, 16])
@pytest.mark.parametrize("seed", range(10))
def test_full_model_gradient_check(image_size, seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(image_size=image_size, patch_size=4,
                      embed_dim=int(rng.integers(3, 8)), num_classes=2)
    images = rng.random((2, image_size, image_size))
    labels = rng.integers(0, 2, size=(2, 2)).astype(float)
    masks = (rng.random((2, 2, cfg.n_tokens)) < 0.4).astype(float)
    masks[masks.sum(axis=2) == 0] = 1.0
    theta = init_params(cfg, seed).vec

    def f(v):
        return total_loss_and_grad(cfg, v, images, labels, masks)

    # h large enough that fp64 roundoff on O(1e-8) gradient entries stays
    # below the acceptance threshold
    assert grad_check(f, theta, h=1e-4) <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = init_params(SMALL, 9)
        save_checkpoint(p, tmp_path / "m.ckpt")
        q = load_checkpoint(tmp_path / "m.ckpt")
        assert q.config == SMALL
        assert np.array_equal(p.vec, q.vec)

    def test_truncation_fails_closed(self, tmp_path):
        p = init_params(SMALL, 9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-1])
        with pytest.raises(DataFormatError):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        p = init_params(SMALL, 9)
        path = tmp_path / "m.ckpt"
        save_checkpoint(p, path)
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b'"version": 1', b'"version": 9', 1))
        with pytest.raises(DataFormatError, match="version"):
            load_checkpoint(path)

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"not json\n" + b"\x00" * 64)
        with pytest.raises(DataFormatError):
            load_checkpoint(path)


def test_backends_agree():
    cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=8, num_classes=2)
    rng = np.random.default_rng(0)
    images = rng.random((4, 16, 16))
    labels = rng.integers(0, 2, size=(4, 2)).astype(float)
    masks = (rng.random((4, 2, cfg.n_tokens)) < 0.4).astype(float)
    masks[masks.sum(axis=2) == 0] = 1.0
    vec = init_params(cfg, 5).vec
    results = {}
    for name in ("pure", "fast"):
        try:
            backend = get_backend(name)
        except ImportError:
            pytest.skip("compiled backend unavailable")
        results[name] = total_loss_and_grad(cfg, vec, images, labels, masks,
                                            backend)
    l_pure, g_pure = results["pure"]
    l_fast, g_fast = results["fast"]
    assert l_fast == pytest.approx(l_pure, rel=1e-12)
    assert np.allclose(g_fast, g_pure, rtol=1e-10, atol=1e-12)
