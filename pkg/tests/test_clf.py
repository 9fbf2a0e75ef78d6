import math

import numpy as np
import pytest

from aed import clf as K
from aed.clf import ClfHyper, clf_forward, clf_loss, init_clf
from aed.tensor import ShapeError
from oracles import directional

SMALL = dict(input_size=32, widths=(4, 4, 3, 4, 4))


def _inputs(rng, stream, n, size=32, lat_c=3):
    c = 1 if stream == "appearance" else 2
    return rng.normal(size=(n, size, size, c)), rng.normal(size=(n, size // 8, size // 8, lat_c))


def test_defaults():
    h = ClfHyper()
    assert (h.lr, h.epochs, h.batch_size) == (1e-3, 30, 64)


def test_zero_head_gives_even_split_and_sums_to_one():
    rng = np.random.default_rng(0)
    cp = init_clf("appearance", 0)
    d, lat = _inputs(rng, "appearance", 3, 64, 16)
    probs = clf_forward(cp, d, lat)
    np.testing.assert_array_equal(probs, 0.5)
    cp.params.tensors["fc.w"][:] = rng.normal(size=cp.params.tensors["fc.w"].shape)
    probs = clf_forward(cp, d, lat)
    assert np.all(np.abs(probs.sum(axis=1) - 1) <= 1e-12)
    assert np.all((probs >= 0) & (probs <= 1))


def test_motion_shape_contract():
    cp = init_clf("motion-forward", 0)
    lat = np.zeros((8, 8, 16))
    assert clf_forward(cp, np.zeros((64, 64, 2)), lat).shape == (2,)
    with pytest.raises(ShapeError):
        clf_forward(cp, np.zeros((64, 64, 3)), lat)
    with pytest.raises(ShapeError):
        clf_forward(cp, np.zeros((64, 64, 2)), np.zeros((8, 8, 8)))


def test_loss_examples():
    assert clf_loss(1.0, 1 - 1e-7) < 2e-7
    assert abs(clf_loss(1.0, 0.5) - math.log(2)) < 1e-15
    assert abs(clf_loss(0.0, 0.5) - math.log(2)) < 1e-15
    assert np.isfinite(clf_loss(1.0, 0.0)) and np.isfinite(clf_loss(0.0, 1.0))


def test_zero_learning_rate_keeps_params():
    rng = np.random.default_rng(1)
    cp = init_clf("motion-backward", 2, **SMALL)
    before = {k: v.copy() for k, v in cp.params.tensors.items()}
    d, lat = _inputs(rng, "motion-backward", 4)
    K.clf_train_step(cp, d, lat, np.array([1, 0, 1, 0]), ClfHyper(lr=0.0))
    for k, v in cp.params.tensors.items():
        np.testing.assert_array_equal(v, before[k])


@pytest.mark.parametrize("seed", range(100))
def test_gradients_finite_difference(seed):
    stream = ("appearance", "motion-backward", "motion-forward")[seed % 3]
    rng = np.random.default_rng(seed)
    cp = init_clf(stream, seed, **SMALL)
    for name, arr in cp.params.tensors.items():
        arr += rng.normal(scale=0.3 if name.startswith("fc") else 0.05, size=arr.shape)
    d, lat = _inputs(rng, stream, 3)
    y = np.array([1.0, 0.0, 1.0])
    grads, _ = K.clf_gradients(cp, d, lat, y)
    loss = lambda: float(np.mean(clf_loss(y, clf_forward(cp, d, lat)[:, 1])))
    for name, arr in cp.params.tensors.items():
        v = rng.normal(size=arr.shape)
        fd = directional(loss, arr, v, h=1e-7)  # stays inside one linear piece
        an = float(np.sum(grads[name] * v))
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-8), (name, an, fd)


def _toy(rng, n):
    normal = rng.normal(scale=0.01, size=(n, 32, 32, 2))
    pseudo = 3.0 + rng.normal(scale=0.5, size=(n, 32, 32, 2))
    lat = rng.normal(scale=0.1, size=(2 * n, 4, 4, 3))
    return np.concatenate([normal, pseudo]), lat, np.r_[np.ones(n), np.zeros(n)]


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(3)
    cp = init_clf("motion-forward", 0, **SMALL)
    d, lat, y = _toy(rng, 8)
    losses = [K.clf_train_step(cp, d, lat, y, ClfHyper(lr=1e-2))[1] for _ in range(25)]
    assert all(b < a for a, b in zip(losses[:10], losses[1:10]))
    assert abs(losses[0] - math.log(2)) < 1e-12
    dt, lt, yt = _toy(np.random.default_rng(4), 16)
    pred = clf_forward(cp, dt, lt)[:, 1] > 0.5
    assert np.all(pred == (yt == 1))


def test_forward_independent_of_batch_composition():
    rng = np.random.default_rng(5)
    cp = init_clf("appearance", 1, **SMALL)
    cp.params.tensors["fc.w"][:] = rng.normal(size=cp.params.tensors["fc.w"].shape)
    d, lat = _inputs(rng, "appearance", 5)
    full = clf_forward(cp, d, lat)
    for i in range(5):
        np.testing.assert_allclose(clf_forward(cp, d[i], lat[i]), full[i], rtol=0, atol=1e-15)
    np.testing.assert_allclose(clf_forward(cp, d[::-1], lat[::-1]), full[::-1], rtol=0, atol=1e-15)


def test_difference_modes():
    x = np.array([1.0, -2.0])
    r = np.array([0.5, 1.0])
    np.testing.assert_array_equal(K.classifier_input(x, r, "absolute"), [0.5, 3.0])
    np.testing.assert_array_equal(K.classifier_input(x, r, "signed"), [0.5, -3.0])
    with pytest.raises(ValueError):
        K.classifier_input(x, r, "squared")
    with pytest.raises(ValueError):
        init_clf("appearance", 0, "squared")


def test_normality_is_normal_probability():
    rng = np.random.default_rng(6)
    cp = init_clf("motion-backward", 0, "signed", **SMALL)
    x, lat = _inputs(rng, "motion-backward", 2)
    recon = x + 0.1
    np.testing.assert_array_equal(K.normality(cp, x, recon, lat), [0.5, 0.5])


def test_non_finite_loss_aborts():
    cp = init_clf("appearance", 0, **SMALL)
    d, lat = _inputs(np.random.default_rng(0), "appearance", 2)
    d[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="appearance"):
        K.clf_train_step(cp, d, lat, np.array([1.0, 0.0]), ClfHyper())
