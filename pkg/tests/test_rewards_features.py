import numpy as np
import pytest
import scipy.fft
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from birdsr import diffmath as dm
from birdsr.degrade import gaussian_blur, gen_corpus
from birdsr.features import FrozenFeatures, extract, sem_align_loss, struct_loss
from birdsr.rewards import (
    PreferenceFn,
    RewardFn,
    high_band_mask,
    pair_loss,
    reward,
    reward_per_image,
    reward_values,
    unpair_loss,
)

BAND = RewardFn("band_energy")
TV = RewardFn("tv_target", slope=0.05, target_tv=0.1)
FEATS = FrozenFeatures.create(1234)


def band_energy_oracle(img, thr=0.5, slope=20.0):
    c = scipy.fft.dctn(np.asarray(img, np.float64), norm="ortho")
    h, w = c.shape
    i, j = np.mgrid[0:h, 0:w]
    hi = (c[(i + j) / (h + w - 2) >= thr] ** 2).sum()
    return np.tanh(slope * hi / ((c**2).sum() + 1e-8))


def tv_oracle(img, target=0.1, slope=0.05):
    img = np.asarray(img, np.float64)
    dy, dx = np.diff(img, axis=0), np.diff(img, axis=1)
    tv = np.sqrt(dy**2 + 1e-6).mean() + np.sqrt(dx**2 + 1e-6).mean()
    return np.exp(-(((tv - target) / slope) ** 2))


# --------------------------------------------------------------------------
# rewards
# --------------------------------------------------------------------------


def test_rewards_match_straight_line_oracles():
    imgs = np.stack(gen_corpus(5, 16, 2)).astype(np.float64)
    np.testing.assert_allclose(reward_values(imgs, BAND), [band_energy_oracle(x[0]) for x in imgs], rtol=1e-10)
    np.testing.assert_allclose(reward_values(imgs, TV), [tv_oracle(x[0]) for x in imgs], rtol=1e-10)


def test_band_energy_examples():
    assert reward(np.full((1, 8, 8), 0.3), BAND).item() == pytest.approx(0.0, abs=1e-12)
    checker = (np.indices((8, 8)).sum(0) % 2).astype(np.float64)[None]
    checker = checker - checker.mean()  # zero-mean: all energy in the top corner coefficient
    c = scipy.fft.dctn(checker[0], norm="ortho")
    assert np.unravel_index(np.argmax(np.abs(c)), c.shape) == (7, 7)
    assert reward(checker, BAND).item() == pytest.approx(np.tanh(20.0), abs=1e-6)


def test_blur_lowers_band_energy():
    for img in gen_corpus(20, 32, 9):
        rewards = [reward_values(gaussian_blur(img, s), BAND)[0] for s in (0.0, 0.5, 1.0, 2.0)]
        assert rewards[1] < rewards[0]
        assert all(a >= b for a, b in zip(rewards, rewards[1:]))


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (2, 1, 6, 6), elements=st.floats(-1e3, 1e3)), st.sampled_from([BAND, TV]))
def test_reward_range(x, r):
    v = reward_values(x, r)
    assert np.all((v >= 0.0) & (v <= 1.0))


@pytest.mark.parametrize("r", [BAND, TV])
def test_reward_gradient_matches_fd(r):
    rng = np.random.default_rng(3)
    x = rng.random((1, 1, 8, 8))
    t = dm.Tensor(x, requires_grad=True)
    dm.backward(reward(t, r))
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        fd = (reward(xp, r).item() - reward(xm, r).item()) / 2e-6
        assert abs(t.grad[idx] - fd) <= 1e-3 * abs(fd) + 1e-9


def test_pair_loss_examples():
    x = np.stack(gen_corpus(2, 16, 0)).astype(np.float64)
    assert pair_loss(x, x, BAND).item() == 0.0
    phi = PreferenceFn()
    assert phi(dm.Tensor(np.array(0.7 - 0.9))).item() == 0.0
    assert phi(dm.Tensor(np.array(0.7 - 0.5))).item() == pytest.approx(0.2)


def test_pair_loss_gradient_only_through_prediction():
    x0 = dm.Tensor(np.stack(gen_corpus(2, 16, 1)).astype(np.float64), requires_grad=True)
    blurred = np.stack([gaussian_blur(im, 1.0) for im in x0.data])
    xh = dm.Tensor(blurred, requires_grad=True)
    loss = pair_loss(x0, xh, BAND)
    assert loss.item() > 0
    dm.backward(loss)
    assert x0.grad is None
    assert np.abs(xh.grad).sum() > 0


def test_pair_loss_is_mean_of_per_item_hinges():
    x0 = np.stack(gen_corpus(4, 16, 5)).astype(np.float64)
    xh = np.stack([gaussian_blur(im, s) for im, s in zip(x0, (0.0, 1.0, 0.0, 2.0))])
    xh[2] = x0[2] + 0.2 * np.random.default_rng(0).standard_normal(x0[2].shape)  # sharper than clean
    rc, rp = reward_values(x0, BAND), reward_values(xh, BAND)
    assert pair_loss(x0, xh, BAND).item() == pytest.approx(np.mean(np.maximum(rc - rp, 0)), rel=1e-12)


def test_unpair_loss_examples():
    assert RewardFn().kind == "tv_target" and RewardFn().slope == 0.1
    assert BAND.slope == 20.0 and RewardFn("tv_target", slope=0.2).slope == 0.2
    x = np.stack(gen_corpus(3, 16, 4)).astype(np.float64)
    r = reward_values(x, BAND)
    assert unpair_loss(x, BAND).item() == pytest.approx(np.mean(1.0 - r), rel=1e-12)
    assert unpair_loss(x, BAND, tau=0.0).item() == 0.0
    xt = dm.Tensor(x, requires_grad=True)
    dm.backward(unpair_loss(xt, BAND))
    xr = dm.Tensor(x, requires_grad=True)
    dm.backward(dm.scale(reward(xr, BAND), -1.0))
    np.testing.assert_allclose(xt.grad, xr.grad, rtol=1e-12)


def test_reward_validation():
    with pytest.raises(ValueError):
        RewardFn("musiq")
    with pytest.raises(ValueError):
        reward(np.zeros((0, 4)), BAND)
    mask = high_band_mask(4, 4, 0.5)
    assert mask.sum() == 10 and mask[3, 3] and not mask[0, 0]


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------


def test_extract_shape_and_determinism():
    x = gen_corpus(1, 32, 0)[0]
    a, b = extract(FEATS, x), extract(FEATS, x)
    assert a.shape == (16, 8, 8)
    np.testing.assert_array_equal(a.data, b.data)
    with pytest.raises(ValueError):
        extract(FEATS, np.zeros((1, 30, 32)))
    with pytest.raises(ValueError):
        FEATS.arrays["conv1.w"][0, 0, 0, 0] = 0.0
    again = FrozenFeatures.create(1234)
    for k in FEATS.arrays:
        np.testing.assert_array_equal(FEATS.arrays[k], again.arrays[k])


def test_extract_grad_matches_fd():
    f64 = FrozenFeatures.create(1234, dtype="float64")
    rng = np.random.default_rng(1)
    x = rng.random((1, 1, 8, 8))
    t = dm.Tensor(x, requires_grad=True)
    dm.backward(dm.total(dm.square(extract(f64, t))))
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += 1e-6
        xm[idx] -= 1e-6
        fp = np.sum(extract(f64, xp).data ** 2)
        fm = np.sum(extract(f64, xm).data ** 2)
        fd = (fp - fm) / 2e-6
        assert abs(t.grad[idx] - fd) <= 1e-3 * abs(fd) + 1e-9


def test_sem_align_properties():
    a, b = np.stack(gen_corpus(2, 16, 3)), np.stack(gen_corpus(2, 16, 4))
    assert sem_align_loss(FEATS, a, a).item() == 0.0
    assert sem_align_loss(FEATS, a, b).item() == pytest.approx(sem_align_loss(FEATS, b, a).item(), rel=1e-6)
    ta, tb = dm.Tensor(a, requires_grad=True), dm.Tensor(b, requires_grad=True)
    dm.backward(sem_align_loss(FEATS, ta, tb))
    assert ta.grad is not None and tb.grad is None
    with pytest.raises(ValueError):
        sem_align_loss(FEATS, a, b[:, :, :8, :8])


def test_struct_loss_examples():
    x = np.stack(gen_corpus(2, 32, 6)).astype(np.float64)
    f64 = FrozenFeatures.create(1234, dtype="float64")
    assert struct_loss(f64, x, x).item() == 0.0
    shifted = struct_loss(f64, x + 0.1, x).item()
    assert shifted >= 0.1 - 1e-12
    feat = np.mean((extract(f64, x + 0.1).data - extract(f64, x).data) ** 2)
    assert shifted == pytest.approx(0.1 + 0.5 * feat, rel=1e-12)
    with pytest.raises(ValueError):
        struct_loss(f64, x, x[:1])


def test_struct_loss_straight_line_oracle():
    rng = np.random.default_rng(8)
    a, b = rng.random((1, 1, 32, 32)), rng.random((1, 1, 32, 32))
    f64 = FrozenFeatures.create(1234, dtype="float64")
    w = f64.arrays

    def conv(x, w, b):  # direct loop convolution, stride 2, pad 1
        cin, h, wd = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        out = np.zeros((w.shape[0], (h - 1) // 2 + 1, (wd - 1) // 2 + 1))
        for o in range(w.shape[0]):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    out[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]) + b[o]
        return out

    def feats(x):
        h = conv(x, w["conv1.w"], w["conv1.b"])
        h = h / (1 + np.exp(-h))
        return conv(h, w["conv2.w"], w["conv2.b"])

    expected = np.mean(np.abs(a - b)) + 0.5 * np.mean((feats(a[0]) - feats(b[0])) ** 2)
    assert struct_loss(f64, a, b).item() == pytest.approx(expected, rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (1, 1, 8, 8), elements=st.floats(0, 1)), hnp.arrays(np.float64, (1, 1, 8, 8), elements=st.floats(0, 1)))
def test_struct_loss_nonnegative_and_zero_iff_equal(a, b):
    v = struct_loss(FrozenFeatures.create(1234, dtype="float64"), a, b).item()
    assert v >= 0.0
    assert (v == 0.0) == np.array_equal(a, b)
