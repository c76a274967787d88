"""
The temporal-aware bi-direction multi-scale network.

A directional stack of K temporal-aware blocks (TAB) turns a (B, C0, T) batch into K
(B, F, T) outputs, block i using dilation ``dilations[i]`` and reading the concatenation
of the input and all earlier block outputs. The reverse direction runs an independent
stack on the time-reversed input; its outputs are reversed back before they are merged
with the forward outputs. Every merged scale is globally average pooled over time, the
pooled vectors are fused with learnable weights and a dense layer produces the logits.

Example::

    from tbdmnet.model import ModelConfig, build, forward

    cfg = ModelConfig(n_classes=7)
    params = build(cfg, rng=1)
    logits, probs = forward(x, params, cfg, mode="eval")
"""
import math
import numpy as np
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from .tensor import (
    FLOAT32,
    BatchNormState,
    Tensor,
    activation,
    add,
    as_tensor,
    batch_norm_1d,
    causal_dilated_conv1d,
    concat_channels,
    global_avg_pool_time,
    linear,
    reverse_time,
    softmax,
    spatial_dropout,
    weighted_sum,
)
from .util import ConfigError, Settings, as_generator, short_hash

MFCC_CHANNELS = 39
TAB_ACTIVATIONS = ("gelu", "relu")
MERGES = ("concat", "sum")


class ModelConfig(Settings):
    """
    Architecture hyperparameters.

    Parameters
    ----------
    n_classes : int
        Number of emotion classes.
    input_channels : int, optional
        Feature rows C0: 39 MFCCs plus 0, 1 or 2 gender rows. Default 39.
    n_tabs : int, optional
        Number of blocks K per direction. Default 6.
    dilations : sequence of int, optional
        Strictly increasing dilations, one per block. Default ``1, 2, 4, ..., 2**(K-1)``.
    filters : int, optional
        Output channels F of every convolution. Default 39.
    kernel_size : int, optional
        Convolution kernel size. Default 2.
    activation : {"gelu", "relu"}, optional
    bidirectional : bool, optional
        Whether to run the reverse direction. Default True.
    multiscale : bool, optional
        Fuse all K scales (True) or use only the deepest one. Default True.
    merge : {"concat", "sum"}, optional
        How forward and reverse outputs are merged. ``concat`` is followed by a
        width-1 convolution back to F channels; ``sum`` adds them. Default "concat".
    dropout_rate : float, optional
        Spatial dropout rate. Default 0.1.
    use_batch_norm : bool, optional
        Default True.
    """

    __slots__ = (
        "n_classes",
        "input_channels",
        "n_tabs",
        "dilations",
        "filters",
        "kernel_size",
        "activation",
        "bidirectional",
        "multiscale",
        "merge",
        "dropout_rate",
        "use_batch_norm",
    )

    def __init__(
        self,
        *,
        n_classes: int,
        input_channels: int = MFCC_CHANNELS,
        n_tabs: int = 6,
        dilations: Optional[Sequence[int]] = None,
        filters: int = MFCC_CHANNELS,
        kernel_size: int = 2,
        activation: str = "gelu",
        bidirectional: bool = True,
        multiscale: bool = True,
        merge: str = "concat",
        dropout_rate: float = 0.1,
        use_batch_norm: bool = True,
    ):
        if dilations is None:
            dilations = [2 ** i for i in range(n_tabs)]
        self.n_classes = n_classes
        self.input_channels = input_channels
        self.n_tabs = n_tabs
        self.dilations = tuple(dilations)
        self.filters = filters
        self.kernel_size = kernel_size
        self.activation = activation
        self.bidirectional = bidirectional
        self.multiscale = multiscale
        self.merge = merge
        self.dropout_rate = dropout_rate
        self.use_batch_norm = use_batch_norm
        self.validate()

    def validate(self) -> None:
        """Raise :class:`ConfigError` if any field is out of range."""
        for name in ("n_classes", "input_channels", "n_tabs", "filters", "kernel_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name}={v!r} must be a positive integer")
        if len(self.dilations) != self.n_tabs:
            raise ConfigError(
                f"length of dilations {list(self.dilations)} must equal n_tabs={self.n_tabs}"
            )
        if any(d < 1 for d in self.dilations) or any(
            b <= a for a, b in zip(self.dilations, self.dilations[1:])
        ):
            raise ConfigError(
                f"dilations {list(self.dilations)} must be positive and strictly increasing"
            )
        if MFCC_CHANNELS <= self.input_channels <= MFCC_CHANNELS + 2:
            if self.filters != MFCC_CHANNELS:
                raise ConfigError(
                    f"filters={self.filters} must equal {MFCC_CHANNELS} for MFCC input"
                )
        if self.activation not in TAB_ACTIVATIONS:
            raise ConfigError(
                f"activation {self.activation!r} must be one of {TAB_ACTIVATIONS}"
            )
        if self.merge not in MERGES:
            raise ConfigError(f"merge {self.merge!r} must be one of {MERGES}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate={self.dropout_rate} must be in [0, 1)")

    def hash(self) -> str:
        """Return a short stable identifier of the configuration."""
        return short_hash(self.to_dict())

    @property
    def tab_input_widths(self) -> List[int]:
        """Get input channel count of every block, ``C0 + i * F``."""
        return [self.input_channels + i * self.filters for i in range(self.n_tabs)]

    @property
    def merged_channels(self) -> int:
        """Get channel count after merging directions, before the reduction."""
        if self.bidirectional and self.merge == "concat":
            return 2 * self.filters
        return self.filters


class SubLayer:
    """Convolution weights with optional batch normalization."""

    __slots__ = ("weight", "bias", "gamma", "beta", "state")

    def __init__(
        self,
        weight: Tensor,
        bias: Tensor,
        gamma: Optional[Tensor] = None,
        beta: Optional[Tensor] = None,
        state: Optional[BatchNormState] = None,
    ):
        self.weight = weight
        self.bias = bias
        self.gamma = gamma
        self.beta = beta
        self.state = state

    def named_parameters(self, prefix: str) -> Iterator[Tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias
        if self.gamma is not None:
            yield prefix + "gamma", self.gamma
            yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str) -> Iterator[Tuple[str, np.ndarray]]:
        if self.state is not None:
            yield prefix + "running_mean", self.state.running_mean
            yield prefix + "running_var", self.state.running_var

    def copy(self) -> "SubLayer":
        return SubLayer(
            _copy_tensor(self.weight),
            _copy_tensor(self.bias),
            _copy_tensor(self.gamma),
            _copy_tensor(self.beta),
            self.state.copy() if self.state is not None else None,
        )


class TabParams:
    """Parameters of one temporal-aware block: two convolution sub-layers."""

    __slots__ = ("sub1", "sub2")

    def __init__(self, sub1: SubLayer, sub2: SubLayer):
        self.sub1 = sub1
        self.sub2 = sub2

    @property
    def in_channels(self) -> int:
        """Get number of input channels."""
        return self.sub1.weight.shape[1]

    def copy(self) -> "TabParams":
        return TabParams(self.sub1.copy(), self.sub2.copy())


def _copy_tensor(t: Optional[Tensor]) -> Optional[Tensor]:
    if t is None:
        return None
    return Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)


class ModelParams:
    """
    All tensors of a network.

    Parameter names are stable and define the checkpoint layout, for example
    ``forward.0.sub1.weight``, ``reverse.5.sub2.gamma``, ``reduction.3.weight``,
    ``fusion``, ``fc.weight``.
    """

    __slots__ = (
        "forward_tabs",
        "reverse_tabs",
        "reductions",
        "fusion",
        "fc_weight",
        "fc_bias",
    )

    def __init__(
        self,
        forward_tabs: List[TabParams],
        reverse_tabs: List[TabParams],
        reductions: List[SubLayer],
        fusion: Tensor,
        fc_weight: Tensor,
        fc_bias: Tensor,
    ):
        self.forward_tabs = forward_tabs
        self.reverse_tabs = reverse_tabs
        self.reductions = reductions
        self.fusion = fusion
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias

    def _sublayers(self) -> Iterator[Tuple[str, SubLayer]]:
        stacks = (("forward", self.forward_tabs), ("reverse", self.reverse_tabs))
        for direction, tabs in stacks:
            for i, tab in enumerate(tabs):
                yield f"{direction}.{i}.sub1.", tab.sub1
                yield f"{direction}.{i}.sub2.", tab.sub2
        for k, red in enumerate(self.reductions):
            yield f"reduction.{k}.", red

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Return learnable tensors in canonical order."""
        out = []
        for prefix, sub in self._sublayers():
            out.extend(sub.named_parameters(prefix))
        out.append(("fusion", self.fusion))
        out.append(("fc.weight", self.fc_weight))
        out.append(("fc.bias", self.fc_bias))
        return out

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        """Return batch normalization running statistics in canonical order."""
        out = []
        for prefix, sub in self._sublayers():
            out.extend(sub.named_buffers(prefix))
        return out

    def parameter_count(self) -> int:
        """Return number of learnable scalars."""
        return sum(t.size for _, t in self.named_parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Return copies of all parameters and buffers by name."""
        d = {name: t.data.copy() for name, t in self.named_parameters()}
        d.update((name, a.copy()) for name, a in self.named_buffers())
        return d

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """Overwrite parameters and buffers in place, names and shapes must match."""
        targets = {name: t.data for name, t in self.named_parameters()}
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise ValueError(
                f"state does not match the model: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, target in targets.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ValueError(
                    f"{name} has shape {value.shape}, the model expects {target.shape}"
                )
            target[...] = value

    def zero_grad(self) -> None:
        """Drop all accumulated gradients."""
        for _, t in self.named_parameters():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        """Return an independent deep copy without gradients."""
        return ModelParams(
            [t.copy() for t in self.forward_tabs],
            [t.copy() for t in self.reverse_tabs],
            [r.copy() for r in self.reductions],
            _copy_tensor(self.fusion),
            _copy_tensor(self.fc_weight),
            _copy_tensor(self.fc_bias),
        )

    def __repr__(self) -> str:
        return (
            f"<ModelParams tabs={len(self.forward_tabs)}+{len(self.reverse_tabs)} "
            f"parameters={self.parameter_count()}>"
        )


def build(config: ModelConfig, rng: Any = None, dtype: Any = FLOAT32) -> ModelParams:
    """
    Create freshly initialized parameters.

    Convolution and dense weights are drawn from U(-sqrt(3/fan_in), sqrt(3/fan_in)),
    biases from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Batch normalization starts at
    gamma=1, beta=0 and the fusion weights at 1/K. Draws happen in the order: forward
    blocks, reverse blocks, reductions, dense layer; so a seed fixes the model.

    Parameters
    ----------
    config : ModelConfig
    rng : int or numpy.random.Generator, optional
    dtype : numpy dtype, optional
        Float32 (default) for training, float64 for gradient checks.
    """
    config.validate()
    rng = as_generator(rng)
    nf = config.filters

    def param(shape, bound, name):
        values = rng.uniform(-bound, bound, shape)
        return Tensor(values, requires_grad=True, dtype=dtype, name=name)

    def conv(cin, width, name):
        fan_in = cin * width
        w = param((nf, cin, width), math.sqrt(3.0 / fan_in), name + ".weight")
        b = param((nf,), 1.0 / math.sqrt(fan_in), name + ".bias")
        return w, b

    def sublayer(cin, name):
        w, b = conv(cin, config.kernel_size, name)
        if not config.use_batch_norm:
            return SubLayer(w, b)
        gamma = Tensor(np.ones(nf), requires_grad=True, dtype=dtype, name=name + ".gamma")
        beta = Tensor(np.zeros(nf), requires_grad=True, dtype=dtype, name=name + ".beta")
        return SubLayer(w, b, gamma, beta, BatchNormState(nf, dtype=dtype))

    def stack(direction):
        return [
            TabParams(
                sublayer(c, f"{direction}.{i}.sub1"), sublayer(nf, f"{direction}.{i}.sub2")
            )
            for i, c in enumerate(config.tab_input_widths)
        ]

    forward_tabs = stack("forward")
    reverse_tabs = stack("reverse") if config.bidirectional else []
    reductions = []
    if config.merge == "concat":
        for k in range(config.n_tabs):
            reductions.append(SubLayer(*conv(config.merged_channels, 1, f"reduction.{k}")))
    fusion = Tensor(np.full(config.n_tabs, 1.0 / config.n_tabs), True, dtype, "fusion")
    fc_weight = param((nf, config.n_classes), math.sqrt(3.0 / nf), "fc.weight")
    fc_bias = param((config.n_classes,), 1.0 / math.sqrt(nf), "fc.bias")
    return ModelParams(forward_tabs, reverse_tabs, reductions, fusion, fc_weight, fc_bias)


def param_count(config: ModelConfig) -> int:
    """
    Return the number of learnable scalars of a configuration in closed form.

    Batch normalization running statistics are not counted.
    """
    nf, k = config.filters, config.kernel_size
    bn = 2 * nf if config.use_batch_norm else 0
    tabs = sum(
        (nf * c * k + nf + bn) + (nf * nf * k + nf + bn) for c in config.tab_input_widths
    )
    directions = 2 if config.bidirectional else 1
    reductions = 0
    if config.merge == "concat":
        reductions = config.n_tabs * (nf * config.merged_channels + nf)
    fc = nf * config.n_classes + config.n_classes
    return directions * tabs + reductions + config.n_tabs + fc


def tab_forward(
    x: Tensor,
    tab: TabParams,
    dilation: int,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Apply one block: (conv, batch norm, activation, spatial dropout) twice."""
    if x.shape[1] != tab.in_channels:
        raise ValueError(f"block expects {tab.in_channels} channels, got {x.shape[1]}")
    h = x
    for sub in (tab.sub1, tab.sub2):
        h = causal_dilated_conv1d(h, sub.weight, sub.bias, dilation)
        if sub.gamma is not None:
            h = batch_norm_1d(h, sub.gamma, sub.beta, sub.state, mode)
        h = activation(h, config.activation)
        h = spatial_dropout(h, config.dropout_rate, mode, rng)
    return h


def directional_stack(
    x: Tensor,
    tabs: Sequence[TabParams],
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> List[Tensor]:
    """
    Run the dense stack of blocks and return the K block outputs.

    Block i reads the channel concatenation of x and the outputs of blocks 0..i-1.
    """
    outputs = []
    h = x
    for i, (tab, d) in enumerate(zip(tabs, config.dilations)):
        y = tab_forward(h, tab, d, config, mode, rng)
        outputs.append(y)
        if i + 1 < len(tabs):
            h = concat_channels([h, y])
    return outputs


def forward(
    x: Any,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Compute logits and class probabilities of a (B, C0, T) batch.

    In train mode batch normalization uses batch statistics and spatial dropout draws
    from ``rng``, forward direction first.

    Returns
    -------
    logits : Tensor of shape (B, n_classes)
    probs : Tensor of shape (B, n_classes)
        Softmax of the logits, not differentiable.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != config.input_channels:
        raise ValueError(
            f"input must have shape (B, {config.input_channels}, T), got {x.shape}"
        )
    fwd = directional_stack(x, params.forward_tabs, config, mode, rng)
    rev = None
    if config.bidirectional:
        out = directional_stack(reverse_time(x), params.reverse_tabs, config, mode, rng)
        rev = [reverse_time(y) for y in out]

    scales = range(config.n_tabs) if config.multiscale else [config.n_tabs - 1]
    pooled = []
    for k in scales:
        g = fwd[k]
        if rev is not None:
            g = add(g, rev[k]) if config.merge == "sum" else concat_channels([g, rev[k]])
        if config.merge == "concat":
            red = params.reductions[k]
            g = causal_dilated_conv1d(g, red.weight, red.bias, 1)
        pooled.append(global_avg_pool_time(g))
    fused = weighted_sum(pooled, params.fusion) if config.multiscale else pooled[0]
    logits = linear(fused, params.fc_weight, params.fc_bias)
    return logits, Tensor(softmax(logits.data))


def predict_proba(
    params: ModelParams, config: ModelConfig, X: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    """Return (N, n_classes) eval-mode probabilities, computed in batches."""
    X = np.asarray(X)
    if len(X) == 0:
        return np.zeros((0, config.n_classes))
    dtype = params.fc_weight.dtype
    out = []
    for start in range(0, len(X), batch_size):
        _, probs = forward(Tensor(X[start : start + batch_size], dtype=dtype), params, config)
        out.append(probs.data)
    return np.concatenate(out)


def swap_directions(params: ModelParams, config: ModelConfig) -> ModelParams:
    """
    Return a copy with the forward and reverse stacks exchanged.

    With concatenation merge the reduction weights of the two input halves are swapped
    too, so evaluating the swapped model on a time-reversed input sees the mirrored
    computation of the original model.
    """
    if not config.bidirectional:
        raise ConfigError("swap_directions needs a bidirectional model")
    p = params.copy()
    p.forward_tabs, p.reverse_tabs = p.reverse_tabs, p.forward_tabs
    nf = config.filters
    for red in p.reductions:
        w = red.weight.data
        w[...] = np.concatenate([w[:, nf:], w[:, :nf]], axis=1)
    return p
