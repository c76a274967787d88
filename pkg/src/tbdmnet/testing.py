"""
Helpers for tests: finite-difference gradients, synthetic datasets and audio signals.

Also see: https://en.wikipedia.org/wiki/Finite_difference
"""
from pathlib import Path
import numpy as np
from scipy.io import wavfile
from typing import Callable, List, Optional, Sequence, Union

from .features import SAMPLE_RATE, FeatureSet
from .tensor import FLOAT64, Tape, Tensor, backward
from .util import as_generator


def numerical_gradient(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: Optional[float] = None
) -> np.ndarray:
    """
    Central finite differences of a scalar function.

    Parameters
    ----------
    f : callable
        Maps an array shaped like x to a float.
    x : array
        Evaluation point, float64.
    h : float, optional
        Fixed step. Default is ``1e-5 * max(1, |x_i|)`` per element.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        xi = flat[i]
        step = h if h is not None else 1e-5 * max(1.0, abs(xi))
        flat[i] = xi + step
        up = f(x)
        flat[i] = xi - step
        down = f(x)
        flat[i] = xi
        g[i] = (up - down) / (2 * step)
    return grad


def gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Return the autograd gradients of a scalar tensor function for each input."""
    tensors = [Tensor(np.asarray(x, dtype=FLOAT64), requires_grad=True) for x in inputs]
    with Tape():
        loss = fn(*tensors)
        backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradient(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], atol: float = 1e-8
) -> float:
    """
    Compare autograd against finite differences.

    Returns the largest elementwise relative error ``|a - n| / max(|a|, |n|)`` over all
    inputs. Differences below ``atol`` count as zero.

    Parameters
    ----------
    fn : callable
        Maps tensors, one per input, to a scalar tensor.
    inputs : sequence of arrays
        Evaluation point, converted to float64.
    atol : float, optional
        Absolute floor.
    """
    inputs = [np.array(x, dtype=FLOAT64) for x in inputs]
    analytic = gradients(fn, inputs)
    worst = 0.0
    for i, a in enumerate(analytic):

        def f(xi):
            args = [Tensor(xi if j == i else x) for j, x in enumerate(inputs)]
            return fn(*args).data.item()

        n = numerical_gradient(f, inputs[i])
        diff = np.abs(a - n)
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.divide(diff, scale, out=np.zeros_like(diff), where=diff > atol)
        if rel.size:
            worst = max(worst, float(rel.max()))
    return worst


def separable_dataset(
    n_classes: int = 4,
    n_samples: int = 32,
    frames: int = 64,
    channels: int = 39,
    seed: int = 0,
) -> FeatureSet:
    """
    Return a small dataset that a working model must fit perfectly.

    Sample i has label ``i % n_classes``. Class c adds 1.5 to its own block of channels
    on top of Gaussian noise with standard deviation 0.3. Even samples are male, odd
    samples female.
    """
    if channels < n_classes:
        raise ValueError(f"channels={channels} must be at least n_classes={n_classes}")
    rng = as_generator(seed)
    y = np.arange(n_samples) % n_classes
    X = rng.normal(0.0, 0.3, size=(n_samples, channels, frames))
    block = channels // n_classes
    for i, c in enumerate(y):
        X[i, c * block : (c + 1) * block] += 1.5
    return FeatureSet(
        X.astype(np.float32),
        y,
        [f"u{i:03d}" for i in range(n_samples)],
        [f"class{c}" for c in range(n_classes)],
        [f"s{i % 4}" for i in range(n_samples)],
        ["M" if i % 2 == 0 else "F" for i in range(n_samples)],
    )


def tone(freq: float, duration: float = 1.0, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Return a sine wave of amplitude 0.5."""
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    return 0.5 * np.sin(2 * np.pi * freq * t)


def white_noise(
    duration: float = 1.0, sample_rate: int = SAMPLE_RATE, seed: int = 0
) -> np.ndarray:
    """Return uniform white noise in [-0.5, 0.5)."""
    rng = as_generator(seed)
    return rng.uniform(-0.5, 0.5, size=int(round(duration * sample_rate)))


def write_wav(
    path: Union[str, Path], samples: np.ndarray, sample_rate: int = SAMPLE_RATE
) -> np.ndarray:
    """
    Write samples in [-1, 1) as 16-bit PCM and return what reading the file gives back.

    The returned float64 array is the quantized signal scaled by 1/32768.
    """
    pcm = np.clip(np.round(np.asarray(samples) * 32768), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
    return pcm.astype(np.float64) / 32768.0
