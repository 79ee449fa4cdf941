import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mderain import losses
from mderain import tensor as T


def t(x):
    return T.Tensor(np.asarray(x, dtype=np.float64))


def ssim_loops(x, y, size=11, sigma=1.5):
    w = losses.gaussian_window(size, sigma)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    h, wd, ch = x.shape
    for c in range(ch):
        for i in range(h - size + 1):
            for j in range(wd - size + 1):
                a = x[i : i + size, j : j + size, c]
                b = y[i : i + size, j : j + size, c]
                ma, mb = (w * a).sum(), (w * b).sum()
                va = (w * a * a).sum() - ma**2
                vb = (w * b * b).sum() - mb**2
                cov = (w * a * b).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return np.mean(vals)


@pytest.mark.parametrize("d,expect", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (1.0, 0.5)])
def test_smooth_l1_values(d, expect):
    assert float(losses.smooth_l1(t([d]), np.zeros(1)).data) == pytest.approx(expect, abs=1e-15)


def test_ssim_identity_and_oracle(rng):
    x = rng.random((2, 16, 14, 3))
    y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
    assert float(losses.ssim(t(x), x).data) == pytest.approx(1.0, abs=1e-12)
    expect = np.mean([ssim_loops(x[i], y[i]) for i in range(2)])
    assert float(losses.ssim(t(x), y).data) == pytest.approx(expect, abs=1e-10)
    with pytest.raises(ValueError):
        losses.ssim(t(np.zeros((1, 8, 8, 3))), np.zeros((1, 8, 8, 3)))


def test_tv_of_constant_is_zero_and_of_ramp_is_known():
    assert float(losses.tv_loss(t(np.full((2, 2, 6, 6, 3), 0.4))).data) == 0.0
    ramp = np.tile(np.arange(6.0)[None, :, None], (5, 1, 3))[None]
    assert float(losses.tv_loss(t(ramp)).data) == pytest.approx(1.0)


def test_contrastive_terms_vanish_at_the_positive(rng):
    pyr = losses.FeaturePyramid(0)
    clean = rng.random((1, 3, 3, 16, 16, 3))
    rainy = np.clip(clean + 0.3, 0, 1)
    assert float(losses.contrastive_reg(clean, t(clean), rainy, pyr).data) == 0.0
    positive = rng.random(clean.shape)
    assert float(losses.ucr(positive, t(positive), rainy, pyr).data) == 0.0


def test_contrastive_denominator_is_floored(rng):
    pyr = losses.FeaturePyramid(0)
    x = rng.random((1, 16, 16, 3))
    value = float(losses.contrastive_reg(np.zeros_like(x), t(x), x, pyr).data)
    assert np.isfinite(value) and value > 1e3


def test_feature_pyramid_is_deterministic_and_strided(rng):
    x = t(rng.random((2, 32, 32, 3)))
    a = losses.FeaturePyramid(5)(x)
    b = losses.FeaturePyramid(5)(x)
    assert [f.shape[1] for f in a] == [32, 16, 8, 4, 2]
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))


def test_kl_identities(rng):
    z = rng.standard_normal((4, 8))
    assert float(losses.kl_divergence(z, t(z)).data) == pytest.approx(0.0, abs=1e-15)
    p, q = np.log([[0.5, 0.5]]), np.log([[0.9, 0.1]])
    assert float(losses.kl_divergence(p, t(q)).data) == pytest.approx(0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(5.0), abs=1e-12)
    assert float(losses.kl_divergence(p, t(q)).data) == pytest.approx(0.5108, abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 30))
def test_kl_is_non_negative(seed, scale):
    r = np.random.default_rng(seed)
    p, q = r.standard_normal((2, 3, 6)) * scale
    assert float(losses.kl_divergence(p, t(q)).data) >= -1e-12


def test_kl_floor_keeps_extreme_logits_finite():
    p = np.array([[0.0, 0.0]])
    q = np.array([[0.0, -1e4]])
    value = float(losses.kl_divergence(p, t(q)).data)
    assert np.isfinite(value) and value == pytest.approx(0.5 * np.log(0.5 / 1e-12) + 0.5 * np.log(0.5), rel=1e-6)


def test_nearest_combine_k1_returns_the_nearest_entry(rng):
    bank = rng.standard_normal((10, 4))
    z = bank[3] + 1e-3
    out, alpha = losses.nearest_combine(z, bank, k=1)
    assert np.array_equal(out, bank[3]) and alpha.tolist() == [1.0]


def test_nearest_combine_weights_and_clamping(rng):
    bank = rng.standard_normal((5, 3))
    z = rng.standard_normal(3)
    out, alpha = losses.nearest_combine(z, bank)  # default k=16 > 5 entries
    assert alpha.size == 5
    d = np.linalg.norm(bank - z, axis=1)
    order = np.argsort(d)
    w = np.exp(-d[order])
    w /= w.sum()
    np.testing.assert_allclose(alpha, w)
    np.testing.assert_allclose(out, w @ bank[order])
    big = rng.standard_normal((40, 3))
    assert losses.nearest_combine(z, big)[1].size == 16


def test_nearest_combine_ties_ignore_bank_order():
    bank = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [3.0, 3.0]])
    a = losses.nearest_combine(np.zeros(2), bank, k=2)[0]
    b = losses.nearest_combine(np.zeros(2), bank[::-1], k=2)[0]
    assert np.array_equal(a, b)


def test_nearest_combine_errors():
    with pytest.raises(ValueError):
        losses.nearest_combine(np.zeros(3), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        losses.nearest_combine(np.zeros(2), np.zeros((4, 3)))


def test_memory_bank_refresh_replaces_everything(rng):
    bank = losses.MemoryBank(levels=(3, 4))
    first = [{3: rng.standard_normal(4), 4: rng.standard_normal(6)} for _ in range(5)]
    bank.refresh(first)
    assert len(bank) == 5
    second = [{3: rng.standard_normal(4), 4: rng.standard_normal(6)} for _ in range(3)]
    bank.refresh(second)
    assert len(bank) == 3 and bank.vectors(3).shape == (3, 4)
    np.testing.assert_array_equal(bank.vectors(4), np.stack([s[4] for s in second]))
    with pytest.raises(ValueError):
        bank.refresh([])


def test_pool_latent(rng):
    f = rng.standard_normal((2, 5, 5, 3))
    np.testing.assert_allclose(losses.pool_latent(f), f.mean(axis=(1, 2)))
    np.testing.assert_allclose(losses.pool_latent(f, per_sample=False), f.mean(axis=(0, 1, 2)))


def test_ramp_weights():
    w = losses.LossWeights()
    assert losses.ramp_weights(0, 10, w) == (0.0, 0.0)
    assert losses.ramp_weights(9, 10, w) == (1.0, 0.1)
    a, b = losses.ramp_weights(3, 7, w)
    assert a == pytest.approx(0.5) and b == pytest.approx(0.05)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(lambda_cr=-1)


def test_supervised_total_combines_parts(rng):
    pyr = losses.FeaturePyramid(0)
    clean = rng.random((1, 3, 3, 16, 16, 3))
    rainy = np.clip(clean + 0.2, 0, 1)
    pred = t(np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1))
    w = losses.LossWeights()
    total, parts = losses.supervised_loss(pred, clean, rainy, pyr, w)
    expect = parts["smooth_l1"].data + w.lambda_ssim * parts["ssim"].data + w.lambda_cr * parts["cr"].data
    assert float(total.data) == pytest.approx(float(expect))
