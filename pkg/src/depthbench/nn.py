"""Network building blocks, parameter storage, initialization and cost counting."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, no_grad

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ParamEntry:
    name: str
    tensor: Tensor
    trainable: bool
    role: str  # weight | bias | gamma | beta | running_mean | running_var
    fan_in: int = 0


class ParamStore:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self):
        self._entries: Dict[str, ParamEntry] = {}

    def add(self, name: str, shape, role: str, trainable: bool = True, fan_in: int = 0) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=trainable, name=name)
        self._entries[name] = ParamEntry(name, t, trainable, role, fan_in)
        return t

    def __iter__(self) -> Iterator[ParamEntry]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def names(self) -> List[str]:
        return list(self._entries)

    def trainable(self) -> List[Tensor]:
        return [e.tensor for e in self if e.trainable]

    def state(self) -> Dict[str, np.ndarray]:
        return {e.name: e.tensor.data.copy() for e in self}

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        for e in self:
            arr = state[e.name]
            if arr.shape != e.tensor.shape:
                raise ValueError(f"{e.name}: shape {arr.shape} != {e.tensor.shape}")
            e.tensor.data[...] = arr


def init_parameters(store: ParamStore, seed: int) -> None:
    """Fan-in uniform conv weights, zero biases, unit BN scale.

    Conv weights are drawn from U(-b, b) with b = sqrt(6 / fan_in) in store
    order from a single generator, so the result depends only on ``seed`` and
    the architecture.
    """
    rng = np.random.default_rng(seed)
    for e in store:
        d = e.tensor.data
        if e.role == "weight":
            b = np.sqrt(6.0 / e.fan_in)
            d[...] = rng.uniform(-b, b, size=d.shape)
        elif e.role in ("gamma", "running_var"):
            d[...] = 1.0
        else:
            d[...] = 0.0
        e.tensor.grad = None


def count_parameters(store: ParamStore) -> Dict[str, int]:
    trainable = sum(e.tensor.size for e in store if e.trainable)
    frozen = sum(e.tensor.size for e in store if not e.trainable)
    return {"trainable": int(trainable), "non_trainable": int(frozen), "total": int(trainable + frozen)}


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

_mac_log: Optional[List[Tuple[str, int]]] = None


@contextlib.contextmanager
def mac_counter():
    """Collect (layer name, MACs) for every convolution executed in the block."""
    global _mac_log
    prev = _mac_log
    _mac_log = []
    try:
        yield _mac_log
    finally:
        _mac_log = prev


def _record_macs(name: str, macs: int) -> None:
    if _mac_log is not None:
        _mac_log.append((name, int(macs)))


def count_flops(model: "Module", input_shape, **forward_kwargs) -> Dict[str, object]:
    """Multiply-accumulate count of one forward pass on zero inputs.

    Only convolutions are counted (out_elems * in_channels * k^d); pooling,
    resampling, BN and activations are treated as free.
    """
    args = model.flop_inputs(tuple(input_shape))
    was_training = model.training
    model.eval()
    try:
        with no_grad(), mac_counter() as log:
            model(*args, **forward_kwargs)
    finally:
        model.train(was_training)
    return {"total": int(sum(m for _, m in log)), "per_layer": list(log)}


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class Module:
    training = True

    def children(self) -> Iterator["Module"]:
        for v in vars(self).values():
            if isinstance(v, Module):
                yield v
            elif isinstance(v, (list, tuple)):
                yield from (m for m in v if isinstance(m, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def flop_inputs(self, shape: tuple) -> tuple:
        return (Tensor(np.zeros(shape)),)


class Conv(Module):
    """2-D or 3-D convolution, 'same' padding by default."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, padding: Optional[int] = None, bias: bool = True, nd: int = 2):
        if cin < 1 or cout < 1:
            raise ValueError(f"{name}: channel counts must be positive ({cin}->{cout})")
        self.name, self.cin, self.cout, self.k, self.nd = name, cin, cout, k, nd
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        fan_in = cin * k ** nd
        self.weight = store.add(f"{name}.weight", (cout, cin) + (k,) * nd, "weight", fan_in=fan_in)
        self.bias = store.add(f"{name}.bias", (cout,), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        fn = ops.conv2d if self.nd == 2 else ops.conv3d
        out = fn(x, self.weight, self.bias, self.stride, self.padding)
        _record_macs(self.name, out.size * self.cin * self.k ** self.nd)
        return out


class BatchNorm(Module):
    def __init__(self, store: ParamStore, name: str, channels: int):
        self.name = name
        self.gamma = store.add(f"{name}.gamma", (channels,), "gamma")
        self.beta = store.add(f"{name}.beta", (channels,), "beta")
        self.running_mean = store.add(f"{name}.running_mean", (channels,), "running_mean", trainable=False)
        self.running_var = store.add(f"{name}.running_var", (channels,), "running_var", trainable=False)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                             self.training, BN_EPS, BN_MOMENTUM)


@dataclass(frozen=True)
class BlockSpec:
    kind: str  # downscale | bottleneck | upscale | plain_conv | conv_volume
    in_channels: int
    out_channels: int
    activation: str = "leaky_relu"
    has_batchnorm: bool = True
    has_skip_concat: bool = False
    skip_channels: int = 0


BLOCK_KINDS = ("downscale", "bottleneck", "upscale", "plain_conv", "conv_volume")


class ConvBlock(Module):
    """Configurable convolution block.

    downscale: 2x(conv-BN-act) + maxpool
    bottleneck: 2x(conv-act)
    upscale: bilinear 2x (+ skip concat), then 2x(conv-BN-act)
    plain_conv: 1x(conv[-BN]-act)
    conv_volume: pre-activation BN-ReLU-conv3d over a 1-channel cost volume
    """

    def __init__(self, store: ParamStore, name: str, spec: BlockSpec, alpha: float = 0.2):
        if spec.kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block kind {spec.kind!r}")
        if spec.in_channels < 1 or spec.out_channels < 1:
            raise ValueError("block channel counts must be positive")
        self.spec, self.alpha = spec, alpha
        cin, cout = spec.in_channels, spec.out_channels
        if spec.kind == "upscale" and spec.has_skip_concat:
            cin += spec.skip_channels
        use_bn = spec.has_batchnorm and spec.kind != "bottleneck"
        n_convs = 1 if spec.kind in ("plain_conv", "conv_volume") else 2
        nd = 3 if spec.kind == "conv_volume" else 2
        self.convs, self.norms = [], []
        for i in range(n_convs):
            c_in = cin if i == 0 else cout
            if spec.kind == "conv_volume":
                self.norms.append(BatchNorm(store, f"{name}.bn{i}", c_in))
                self.convs.append(Conv(store, f"{name}.conv{i}", c_in, cout, bias=False, nd=3))
            else:
                self.convs.append(Conv(store, f"{name}.conv{i}", c_in, cout, nd=nd))
                if use_bn:
                    self.norms.append(BatchNorm(store, f"{name}.bn{i}", cout))

    def _act(self, x: Tensor) -> Tensor:
        return ops.activation(x, self.spec.activation, self.alpha)

    def forward(self, x: Tensor, skip: Optional[Tensor] = None) -> Tensor:
        if self.spec.kind == "downscale":
            return self.encode(x)[1]
        return self._body(x, skip)

    def encode(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """Downscale only: (pre-pool features for the skip path, pooled output)."""
        if self.spec.kind != "downscale":
            raise TypeError("encode() is only defined for downscale blocks")
        y = self._body(x, None)
        return y, ops.maxpool2x2(y)

    def _body(self, x: Tensor, skip: Optional[Tensor]) -> Tensor:
        kind = self.spec.kind
        if kind == "conv_volume":
            return self.convs[0](ops.relu(self.norms[0](x)))
        if kind == "upscale":
            x = ops.pool_and_resample(x, "upsample_bilinear2x")
            if self.spec.has_skip_concat:
                if skip is None:
                    raise ValueError("upscale block with skip concat needs a skip tensor")
                x = ops.concat([x, skip], axis=1)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if self.norms:
                x = self.norms[i](x)
            x = self._act(x)
        return x


def build_block(store: ParamStore, name: str, spec: BlockSpec, alpha: float = 0.2) -> ConvBlock:
    return ConvBlock(store, name, spec, alpha)
