import itertools
import math

import numpy as np
import pytest

from tabcl.contrastive import (FingerprintMismatch, PretrainConfig, batch_gradients, build_model,
                               encode, encode_dataset, load_model, nt_xent, pretrain, save_model)
from tabcl.data import load_adult, normalize

from conftest import fd_grad, rel_err


def brute_nt_xent(za, zb, tau):
    """Direct summation over all 2m anchors with explicit loops."""
    z = [*za, *zb]
    m = len(za)

    def cos(u, v):
        return sum(a * b for a, b in zip(u, v)) / math.sqrt(sum(a * a for a in u) * sum(b * b for b in v))

    total = 0.0
    for i in range(2 * m):
        j = (i + m) % (2 * m)
        denom = sum(math.exp(cos(z[i], z[k]) / tau) for k in range(2 * m) if k != i)
        total += -math.log(math.exp(cos(z[i], z[j]) / tau) / denom)
    return total / (2 * m)


class TestNtXent:
    def test_brute_force_small(self):
        za = np.array([[1.0, 0.5], [-0.3, 2.0]])
        zb = np.array([[0.8, 0.9], [0.1, -1.0]])
        assert nt_xent(za, zb, 1.0)[0] == pytest.approx(brute_nt_xent(za, zb, 1.0), rel=1e-12)

    def test_brute_force_random(self, rng):
        for _ in range(10):
            m, p = rng.integers(2, 6), rng.integers(2, 6)
            za, zb = rng.normal(size=(m, p)), rng.normal(size=(m, p))
            tau = rng.uniform(0.1, 2.0)
            assert nt_xent(za, zb, tau)[0] == pytest.approx(brute_nt_xent(za, zb, tau), rel=1e-10)

    def test_scale_invariance(self, rng):
        za, zb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert nt_xent(3.7 * za, 3.7 * zb, 0.5)[0] == pytest.approx(nt_xent(za, zb, 0.5)[0], rel=1e-12)

    def test_symmetry(self, rng):
        za, zb = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        assert nt_xent(zb, za, 0.5)[0] == pytest.approx(nt_xent(za, zb, 0.5)[0], rel=1e-12)

    def test_gradients(self, rng):
        for _ in range(20):
            m, p = rng.integers(2, 9), rng.integers(2, 9)
            za, zb = rng.normal(size=(m, p)), rng.normal(size=(m, p))
            tau = rng.uniform(0.2, 1.0)
            _, ga, gb = nt_xent(za, zb, tau)
            assert rel_err(ga, fd_grad(lambda: nt_xent(za, zb, tau)[0], za)) < 1e-6
            assert rel_err(gb, fd_grad(lambda: nt_xent(za, zb, tau)[0], zb)) < 1e-6

    def test_true_pairing_minimizes(self, rng):
        # b_i is a small perturbation of a_i, so the identity pairing is the most similar one
        for _ in range(5):
            za = rng.normal(size=(4, 6))
            zb = za + 0.05 * rng.normal(size=(4, 6))
            losses = {perm: nt_xent(za, zb[list(perm)], 0.5)[0]
                      for perm in itertools.permutations(range(4))}
            assert min(losses, key=losses.get) == (0, 1, 2, 3)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            nt_xent(np.ones((1, 3)), np.ones((1, 3)), 0.5)


class TestBatchGradients:
    @pytest.mark.parametrize("reconstruction", [False, True])
    def test_against_finite_differences(self, rng, reconstruction):
        model = build_model(5, hidden=12, latent=8, projection=3, reconstruction=reconstruction,
                            temperature=0.5, seed=2)
        x = rng.normal(size=(4, 5))
        views = (x + 0.3 * rng.normal(size=x.shape), x + 0.3 * rng.normal(size=x.shape))
        _, grads = batch_gradients(model, x, views)
        assert min(np.abs(g).max() for g in grads) > 1e-4  # no layer is entirely dead
        for p, g in zip(model.params(), grads):
            assert rel_err(g, fd_grad(lambda: batch_gradients(model, x, views)[0], p)) < 1e-5

    def test_reconstruction_only(self, rng):
        model = build_model(5, hidden=6, latent=4, projection=3, reconstruction=True, seed=2)
        x = rng.normal(size=(3, 5))
        _, grads = batch_gradients(model, x, None)
        n_enc, n_dec = len(model.encoder.params()), len(model.decoder.params())
        assert all(np.all(g == 0) for g in grads[n_enc:n_enc + n_dec])
        for p, g in zip(model.params(), grads):
            assert rel_err(g, fd_grad(lambda: batch_gradients(model, x, None)[0], p)) < 1e-5


class TestPretrain:
    def test_zero_epochs(self, blobs):
        model = build_model(blobs.d, hidden=8, latent=4, projection=4)
        trained, trace = pretrain(model, blobs, PretrainConfig(epochs=0))
        assert trace == []
        for a, b in zip(model.params(), trained.params()):
            np.testing.assert_array_equal(a, b)

    def test_deterministic_and_input_untouched(self, blobs):
        model = build_model(blobs.d, hidden=16, latent=8, projection=4, seed=1)
        before = [p.copy() for p in model.params()]
        cfg = PretrainConfig(epochs=3, batch_size=64, seed=5)
        a, ta = pretrain(model, blobs, cfg)
        b, tb = pretrain(model, blobs, cfg)
        assert ta == tb
        for p, q in zip(a.params(), b.params()):
            np.testing.assert_array_equal(p, q)
        for p, q in zip(before, model.params()):
            np.testing.assert_array_equal(p, q)

    def test_adult_loss_decreases_and_stays_finite(self):
        ds = normalize(load_adult(max_rows=1000, seed=0), "l2")
        model = build_model(ds.d, seed=0)
        trained, trace = pretrain(model, ds, PretrainConfig(epochs=10))
        assert trace[-1] < trace[0]
        assert all(np.isfinite(p).all() for p in trained.params())

    def test_bad_config(self):
        with pytest.raises(ValueError):
            PretrainConfig(batch_size=1)
        with pytest.raises(ValueError):
            PretrainConfig(corruption_rate=1.5)


class TestEncode:
    def test_shape_and_determinism(self, blobs):
        model = build_model(blobs.d, hidden=8, latent=5, projection=3)
        h = encode(model, blobs.features)
        assert h.shape == (blobs.n, 5)
        np.testing.assert_array_equal(h, encode(model, blobs.features))

    def test_batch_independence(self, blobs):
        model = build_model(blobs.d, hidden=8, latent=5, projection=3)
        x1, x2 = blobs.features[:30], blobs.features[30:70]
        np.testing.assert_allclose(encode(model, np.vstack([x1, x2])),
                                   np.vstack([encode(model, x1), encode(model, x2)]), rtol=1e-13)

    def test_fingerprint_mismatch(self, blobs):
        model, _ = pretrain(build_model(blobs.d, hidden=8, latent=4, projection=4), blobs,
                            PretrainConfig(epochs=1))
        encode_dataset(model, blobs)
        with pytest.raises(FingerprintMismatch):
            encode_dataset(model, normalize(blobs, "l2"))


def test_save_load_round_trip(tmp_path, blobs):
    model, _ = pretrain(build_model(blobs.d, hidden=8, latent=4, projection=4, reconstruction=True),
                        blobs, PretrainConfig(epochs=1))
    save_model(tmp_path / "m.npz", model)
    back = load_model(tmp_path / "m.npz")
    assert back.temperature == model.temperature
    assert back.fingerprint == model.fingerprint
    assert back.corruption_rate == model.corruption_rate
    for p, q in zip(model.params(), back.params()):
        np.testing.assert_array_equal(p, q)
    np.testing.assert_array_equal(encode(back, blobs.features), encode(model, blobs.features))

