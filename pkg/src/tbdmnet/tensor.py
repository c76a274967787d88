"""
Dense tensors with reverse-mode automatic differentiation.

The engine provides exactly the operations needed by the network in
:mod:`tbdmnet.model`. Operations are recorded on the active :class:`Tape` when at
least one input requires a gradient. :func:`backward` walks the tape in reverse
recording order and accumulates gradients into every tensor that requires one.

Basic usage::

    from tbdmnet.tensor import Tensor, Tape, activation, reduce_sum, backward

    x = Tensor([[[1.0, -2.0, 3.0]]], requires_grad=True)
    with Tape():
        loss = reduce_sum(activation(x, "gelu"))
        backward(loss)
    print(x.grad)

Precision follows the data: tensors are created as float32 unless float64 data or
``dtype=np.float64`` is passed. Gradient checks must run in float64.

Tape construction is thread-local, so independent sessions in different threads do not
interfere. Tensors that are not attached to a tape are plain immutable values.
"""
import math
import threading
import numpy as np
from scipy.special import erf, expit
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

FLOAT32 = np.float32
FLOAT64 = np.float64

ACTIVATIONS = ("gelu", "relu", "sigmoid")
MODES = ("train", "eval")

_SQRT_HALF = math.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    """Return the innermost active tape of the current thread or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Op:
    """Recorded operation: inputs, output and a rule mapping output grad to input grads."""

    __slots__ = ("tape", "index", "name", "inputs", "output", "backward")

    def __init__(self, tape, index, name, inputs, output, backward):
        self.tape = tape
        self.index = index
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self) -> str:
        return f"<_Op {self.index} {self.name}>"


class Tape:
    """
    Ordered record of differentiable operations.

    Use as a context manager. Every operation executed inside the block whose inputs
    require a gradient is appended in execution order, which is a topological order of
    the computation graph.
    """

    __slots__ = ("ops", "_consumed")

    def __init__(self):
        self.ops: List[_Op] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.ops)

    def record(
        self,
        name: str,
        inputs: Tuple["Tensor", ...],
        output: "Tensor",
        backward: Callable,
    ) -> _Op:
        """Append an operation and return its node."""
        op = _Op(self, len(self.ops), name, inputs, output, backward)
        self.ops.append(op)
        return op


class Tensor:
    """
    Dense n-dimensional array with an optional gradient.

    Parameters
    ----------
    data : array-like
        Values. Integer and Python data are converted to float32.
    requires_grad : bool, optional
        Whether gradients should be accumulated into :attr:`grad`. Default False.
    dtype : numpy dtype, optional
        Force a floating point precision.
    name : str, optional
        Label used in diagnostics.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: Optional[str] = None,
    ):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            elif isinstance(data, np.generic) and np.dtype(type(data)).kind == "f":
                dtype = np.dtype(type(data))
            else:
                dtype = FLOAT32
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[_Op] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        """Get shape of the data."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Get number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Get number of elements."""
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        """Get numeric precision."""
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Return the underlying array."""
        return self.data

    def detach(self) -> "Tensor":
        """Return a tensor sharing the data but detached from any tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        """Drop the accumulated gradient."""
        self.grad = None

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        """Get detailed text representation."""
        s = f"Tensor(shape={self.shape}, dtype={self.dtype}"
        if self.name:
            s += f", name={self.name!r}"
        if self.requires_grad:
            s += ", requires_grad=True"
        return s + ")"


TensorLike = Union[Tensor, np.ndarray, Sequence]


def as_tensor(x: TensorLike) -> Tensor:
    """Wrap array-like data into a Tensor, Tensors are passed through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(
    name: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward: Callable
) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = tape.record(name, inputs, out, backward)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype)
    else:
        t.grad += g


def _check_ndim(t: Tensor, ndim: int, what: str) -> None:
    if t.ndim != ndim:
        raise ValueError(f"{what} must be {ndim}-dimensional, got shape {t.shape}")


def _check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ValueError(f"mode={mode!r} must be one of {MODES}")
    return mode


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(t) into ``t.grad`` for every tensor t reachable from loss.

    Gradients add up across multiple uses of the same tensor and across repeated calls
    with fresh tapes. A tape can be differentiated only once.

    Parameters
    ----------
    loss : Tensor
        Scalar tensor computed inside an active :class:`Tape`.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ValueError(
            "loss is not recorded on a tape; compute it inside 'with Tape():' "
            "from tensors with requires_grad=True"
        )
    tape = loss.node.tape
    if tape._consumed:
        raise ValueError("backward was already called on this tape")
    tape._consumed = True
    loss.grad = np.ones_like(loss.data)
    for op in reversed(tape.ops[: loss.node.index + 1]):
        g = op.output.grad
        if g is None:
            continue
        grads = op.backward(g)
        for inp, gi in zip(op.inputs, grads):
            if gi is not None and inp.requires_grad:
                _accumulate(inp, gi)


def causal_dilated_conv1d(
    x: Tensor, weight: Tensor, bias: Tensor, dilation: int
) -> Tensor:
    """
    Causal dilated 1-d convolution that preserves the time length.

    ``y[b,o,t] = bias[o] + sum_{c,j} weight[o,c,j] * x[b,c,t-(k-1-j)*dilation]``, with
    zeros for negative time indices, so the output at t only sees inputs at times <= t.

    Parameters
    ----------
    x : Tensor of shape (B, Cin, T)
    weight : Tensor of shape (Cout, Cin, k)
    bias : Tensor of shape (Cout,)
    dilation : int
        Spacing between kernel taps, must be positive.

    Returns
    -------
    Tensor of shape (B, Cout, T)
    """
    _check_ndim(x, 3, "x")
    _check_ndim(weight, 3, "weight")
    _check_ndim(bias, 1, "bias")
    nb, cin, nt = x.shape
    cout, wcin, k = weight.shape
    if wcin != cin:
        raise ValueError(
            f"x has {cin} input channels but weight of shape {weight.shape} expects {wcin}"
        )
    if bias.shape[0] != cout:
        raise ValueError(f"bias of shape {bias.shape} does not match {cout} output channels")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation={dilation} must be a positive integer")
    if k < 1 or nt < 1:
        raise ValueError(f"kernel size and time length must be positive, got k={k} T={nt}")

    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0))) if pad else x.data
    w = weight.data
    y = np.empty((nb, cout, nt), dtype=np.result_type(x.data, w, bias.data))
    y[...] = bias.data[:, None]
    for j in range(k):
        s = j * dilation
        y += np.matmul(w[:, :, j], xp[:, :, s : s + nt])

    def _backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w) if weight.requires_grad else None
        for j in range(k):
            s = j * dilation
            if gw is not None:
                xs = xp[:, :, s : s + nt]
                gw[:, :, j] = np.matmul(g, xs.transpose(0, 2, 1)).sum(axis=0)
            if gxp is not None:
                gxp[:, :, s : s + nt] += np.matmul(w[:, :, j].T, g)
        gx = gxp[:, :, pad:] if gxp is not None else None
        return gx, gw, g.sum(axis=(0, 2))

    return _result("causal_dilated_conv1d", y, (x, weight, bias), _backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """
    Apply an elementwise nonlinearity.

    GELU uses the exact form ``x * Phi(x)`` with the standard normal CDF computed from
    the error function.

    Parameters
    ----------
    x : Tensor
    kind : {"gelu", "relu", "sigmoid"}
    """
    k = str(kind).lower()
    a = x.data
    if k == "gelu":
        cdf = 0.5 * (1.0 + erf(a * _SQRT_HALF))
        y = a * cdf

        def _backward(g):
            return (g * (cdf + a * _INV_SQRT_2PI * np.exp(-0.5 * a * a)),)

    elif k == "relu":
        mask = a > 0
        y = np.where(mask, a, 0).astype(a.dtype, copy=False)

        def _backward(g):
            return (g * mask,)

    elif k == "sigmoid":
        y = expit(a)

        def _backward(g):
            return (g * y * (1.0 - y),)

    else:
        raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return _result(k, y, (x,), _backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """
    Concatenate (B, Ci, T) tensors along the channel axis in argument order.

    A single tensor is returned unchanged.
    """
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    for t in xs:
        _check_ndim(t, 3, "concat_channels input")
    nb, _, nt = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != nb or t.shape[2] != nt:
            raise ValueError(
                f"concat_channels inputs disagree in batch or time: {xs[0].shape} vs {t.shape}"
            )
    if len(xs) == 1:
        return xs[0]
    y = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def _backward(g):
        return tuple(g[:, a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return _result("concat_channels", y, tuple(xs), _backward)


def reverse_time(x: Tensor) -> Tensor:
    """Reverse the last (time) axis."""
    y = x.data[..., ::-1].copy()

    def _backward(g):
        return (g[..., ::-1],)

    return _result("reverse_time", y, (x,), _backward)


class BatchNormState:
    """Running statistics of one batch normalization layer."""

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(
        self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype: Any = FLOAT32
    ):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        """Return an independent copy."""
        s = BatchNormState(0, self.momentum, self.eps)
        s.running_mean = self.running_mean.copy()
        s.running_var = self.running_var.copy()
        return s


def batch_norm_1d(
    x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train"
) -> Tensor:
    """
    Normalize every channel of a (B, C, T) tensor.

    In train mode the statistics are taken over batch and time, and the running
    statistics in ``state`` are updated with ``state.momentum`` (the running variance
    uses the unbiased estimate). In eval mode the running statistics are used and not
    modified.
    """
    _check_mode(mode)
    _check_ndim(x, 3, "x")
    nb, nc, nt = x.shape
    if gamma.shape != (nc,) or beta.shape != (nc,):
        raise ValueError(
            f"gamma {gamma.shape} and beta {beta.shape} must have shape ({nc},)"
        )
    a = x.data
    train = mode == "train"
    if train:
        n = nb * nt
        if n < 2:
            raise ValueError(
                f"batch_norm_1d in train mode needs at least 2 values per channel, got {n}"
            )
        mean = a.mean(axis=(0, 2))
        xc = a - mean[None, :, None]
        var = (xc * xc).mean(axis=(0, 2))
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = xc * inv[None, :, None]
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mean
        state.running_var[...] = (1.0 - m) * state.running_var + m * var * (n / (n - 1))
    else:
        inv = (1.0 / np.sqrt(state.running_var + state.eps)).astype(a.dtype)
        xhat = (a - state.running_mean.astype(a.dtype)[None, :, None]) * inv[None, :, None]
    y = gamma.data[None, :, None] * xhat + beta.data[None, :, None]

    def _backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        gxhat = g * gamma.data[None, :, None]
        if train:
            gx = (inv[None, :, None] / n) * (
                n * gxhat
                - gxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2), keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None]
        return gx, ggamma, gbeta

    return _result("batch_norm_1d", y, (x, gamma, beta), _backward)


def spatial_dropout(
    x: Tensor, rate: float, mode: str = "train", rng: Optional[np.random.Generator] = None
) -> Tensor:
    """
    Zero whole channels of a (B, C, T) tensor with probability ``rate``.

    Survivors are scaled by ``1 / (1 - rate)``. Eval mode and ``rate == 0`` return the
    input unchanged. The mask is drawn from ``rng`` with one uniform number per
    (batch, channel) pair.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate={rate} must be in [0, 1)")
    _check_mode(mode)
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ValueError("spatial_dropout in train mode needs a random generator")
    _check_ndim(x, 3, "x")
    nb, nc, _ = x.shape
    keep = rng.random((nb, nc, 1)) >= rate
    scale = keep.astype(x.dtype) * (1.0 / (1.0 - rate))
    y = x.data * scale

    def _backward(g):
        return (g * scale,)

    return _result("spatial_dropout", y, (x,), _backward)


def global_avg_pool_time(x: Tensor) -> Tensor:
    """Average a (B, C, T) tensor over time, giving (B, C)."""
    _check_ndim(x, 3, "x")
    nt = x.shape[2]
    if nt < 1:
        raise ValueError("global_avg_pool_time needs at least one frame")
    y = x.data.mean(axis=2)

    def _backward(g):
        return (np.broadcast_to((g / nt)[:, :, None], x.shape),)

    return _result("global_avg_pool_time", y, (x,), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (B, D) and weight (D, O)."""
    _check_ndim(x, 2, "x")
    _check_ndim(weight, 2, "weight")
    _check_ndim(bias, 1, "bias")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"x of shape {x.shape} does not match weight of shape {weight.shape}"
        )
    if bias.shape[0] != weight.shape[1]:
        raise ValueError(
            f"bias of shape {bias.shape} does not match weight of shape {weight.shape}"
        )
    y = x.data @ weight.data + bias.data

    def _backward(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result("linear", y, (x, weight, bias), _backward)


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (B, K) array, stabilized by max subtraction."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Any) -> Tuple[Tensor, Tensor]:
    """
    Mean negative log-likelihood of integer labels under softmax(logits).

    Returns
    -------
    loss : Tensor
        Scalar, recorded on the active tape.
    probs : Tensor
        (B, K) class probabilities, not differentiable.
    """
    _check_ndim(logits, 2, "logits")
    nb, nk = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (nb,):
        raise ValueError(f"labels of shape {labels.shape} do not match batch size {nb}")
    if labels.size and labels.dtype.kind not in "iu":
        raise ValueError(f"labels must be integers, got {labels.dtype}")
    bad = labels[(labels < 0) | (labels >= nk)]
    if bad.size:
        raise ValueError(f"label {int(bad[0])} out of range [0, {nk})")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    rows = np.arange(nb)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=z.dtype)

    def _backward(g):
        d = probs.copy()
        d[rows, labels] -= 1
        return (d * (g / nb),)

    return _result("softmax_cross_entropy", loss, (logits,), _backward), Tensor(probs)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        return g, g

    return _result("add", a.data + b.data, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ValueError(f"mul needs identical shapes, got {a.shape} and {b.shape}")

    def _backward(g):
        return g * b.data, g * a.data

    return _result("mul", a.data * b.data, (a, b), _backward)


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""

    def _backward(g):
        return (np.broadcast_to(g, x.shape),)

    return _result("reduce_sum", np.asarray(x.data.sum()), (x,), _backward)


def weighted_sum(xs: Sequence[Tensor], w: Tensor) -> Tensor:
    """
    Combine same-shaped tensors with learnable scalar weights: ``sum_k w[k] * xs[k]``.

    This is the linear fusion kernel of the network.
    """
    xs = list(xs)
    _check_ndim(w, 1, "w")
    if len(xs) != w.shape[0]:
        raise ValueError(f"got {len(xs)} tensors but {w.shape[0]} weights")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ValueError(f"weighted_sum needs identical shapes, got {shape} and {t.shape}")
    y = sum(wk * t.data for wk, t in zip(w.data, xs))

    def _backward(g):
        gx = tuple(g * wk for wk in w.data)
        gw = np.array([(g * t.data).sum() for t in xs], dtype=w.dtype)
        return gx + (gw,)

    return _result("weighted_sum", np.asarray(y), tuple(xs) + (w,), _backward)
