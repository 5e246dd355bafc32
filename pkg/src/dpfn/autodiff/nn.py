"""Parameters, modules and the standard layers used by the models."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor. Its hierarchical name is assigned by the owning module tree."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


class Module:
    """Container that discovers parameters and sub-modules from its attributes.

    Lists of modules are traversed with their index as the name component,
    so names look like ``blocks.3.lstm.fwd.w_ih``.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if tuple(value.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {value.shape}, model {p.shape}")
            p.data = np.array(value, dtype=p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """y = x W^T + b over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.weight.T
        return y + self.bias if self.bias is not None else y


class Conv1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | tuple[int, int] = 0,
        bias: bool = True,
        dtype=np.float64,
    ):
        fan_in = in_channels * kernel_size
        self.weight = Parameter(uniform_init(rng, (out_channels, in_channels, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ConvTranspose1d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        bias: bool = False,
        dtype=np.float64,
    ):
        fan_in = in_channels * kernel_size
        self.weight = Parameter(uniform_init(rng, (in_channels, out_channels, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.transpose_conv1d(x, self.weight, stride=self.stride, bias=self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, axis: int = -1, eps: float = 1e-5, dtype=np.float64):
        self.gain = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.axis = axis
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.axis, self.gain, self.bias, self.eps)


class PReLU(Module):
    def __init__(self, channels: int, axis: int = -1, init: float = 0.25, dtype=np.float64):
        self.slope = Parameter(np.full(channels, init, dtype=dtype))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return F.prelu(x, self.slope, self.axis)


class LSTM(Module):
    """Single-direction LSTM; the forget-gate bias starts at 1."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float64):
        self.hidden_size = hidden_size
        self.w_ih = Parameter(uniform_init(rng, (4 * hidden_size, input_size), input_size, dtype))
        self.w_hh = Parameter(uniform_init(rng, (4 * hidden_size, hidden_size), hidden_size, dtype))
        b = np.zeros(4 * hidden_size, dtype=dtype)
        b[hidden_size : 2 * hidden_size] = 1.0
        self.b = Parameter(b)

    @property
    def weights(self) -> tuple[Parameter, Parameter, Parameter]:
        return self.w_ih, self.w_hh, self.b

    def forward(self, x: Tensor, reverse: bool = False) -> Tensor:
        return F.lstm(x, *self.weights, reverse=reverse)

    def cell(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        return F.lstm_cell(x, h, c, *self.weights)


class BiLSTM(Module):
    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, dtype=np.float64):
        self.fwd = LSTM(input_size, hidden_size, rng, dtype)
        self.bwd = LSTM(input_size, hidden_size, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.bilstm(x, self.fwd.weights, self.bwd.weights)
