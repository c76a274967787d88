import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_equal

from tbdmnet import features as F
from tbdmnet import tensor as T
from tbdmnet.tensor import _result
from tbdmnet.testing import (
    check_gradient,
    gradients,
    numerical_gradient,
    separable_dataset,
    tone,
    white_noise,
    write_wav,
)


def test_numerical_gradient():
    x = np.array([1.0, -2.0, 3e5])
    g = numerical_gradient(lambda a: float(np.sum(a ** 3)), x)
    assert_allclose(g, 3 * x ** 2, rtol=1e-6)
    g = numerical_gradient(lambda a: float(np.sum(a ** 2)), x[:2], h=1e-3)
    assert_allclose(g, 2 * x[:2], rtol=1e-9)


def test_gradients():
    ga, gb = gradients(lambda a, b: T.reduce_sum(T.mul(a, a)), [np.arange(3.0), np.ones(2)])
    assert_equal(ga, [0, 2, 4])
    assert_equal(gb, [0, 0])


def test_check_gradient():
    def square_sum(a):
        return T.reduce_sum(T.mul(a, a))

    assert check_gradient(square_sum, [np.array([0.5, -1.5, 2.0])]) < 1e-8

    def wrong(a):
        def _backward(g):
            return (g * 3 * a.data,)

        return _result("wrong", np.asarray((a.data ** 2).sum()), (a,), _backward)

    assert check_gradient(wrong, [np.array([0.5, -1.5, 2.0])]) == pytest.approx(1 / 3)


def test_separable_dataset():
    d = separable_dataset(n_classes=3, n_samples=9, frames=5, channels=6, seed=2)
    assert d.X.shape == (9, 6, 5)
    assert d.X.dtype == np.float32
    assert_equal(d.y, [0, 1, 2] * 3)
    assert d.label_set == ("class0", "class1", "class2")
    assert list(d.genders[:3]) == ["M", "F", "M"]
    means = d.X.mean(axis=2)
    for i, c in enumerate(d.y):
        assert means[i, 2 * c : 2 * c + 2].min() > means[i].max() - 1.0
    again = separable_dataset(n_classes=3, n_samples=9, frames=5, channels=6, seed=2)
    assert_equal(again.X, d.X)
    with pytest.raises(ValueError):
        separable_dataset(n_classes=5, channels=4)


def test_signals(tmp_path):
    x = tone(1000, 0.5, 8000)
    assert len(x) == 4000
    assert np.abs(x).max() == pytest.approx(0.5, abs=1e-3)
    n = white_noise(0.1, 1000, seed=1)
    assert len(n) == 100
    assert n.min() >= -0.5 and n.max() < 0.5
    assert_equal(white_noise(0.1, 1000, seed=1), n)

    back = write_wav(tmp_path / "t.wav", x, 8000)
    assert_allclose(back, x, atol=1 / 32768)
    samples, rate = F.load_audio(tmp_path / "t.wav")
    assert rate == F.SAMPLE_RATE
    clipped = write_wav(tmp_path / "c.wav", np.array([1.0, -1.0]))
    assert_equal(clipped, [32767 / 32768, -1.0])
    assert_equal(F.load_audio(tmp_path / "c.wav")[0], clipped)
