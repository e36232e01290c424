"""Layer infrastructure: parameter registry and the few layer types used here.

Modules register child modules and trainable tensors automatically on
attribute assignment; ``named_parameters`` yields dotted parameter paths used
by the optimizer and the checkpoint format.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Container tracking trainable tensors and child modules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ValueError(
                f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}"
                )
            p.data = arr.astype(p.data.dtype)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _param(shape, rng: np.random.Generator, scale: float, zero: bool = False) -> Tensor:
    if zero:
        return Tensor(np.zeros(shape), requires_grad=True)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.weight = _param((d_in, d_out), rng, d_in ** -0.5, zero_init)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding="same", zero_init: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        scale = (2.0 / (c_in * k * k)) ** 0.5
        self.weight = _param((c_out, c_in, k, k), rng, scale, zero_init)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(Module):
    def __init__(self, c_in: int, c_out: int, k, rng: np.random.Generator,
                 stride=1, padding=0, zero_init: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        kt, kh, kw = k if isinstance(k, (tuple, list)) else (k,) * 3
        scale = (2.0 / (c_in * kt * kh * kw)) ** 0.5
        self.weight = _param((c_out, c_in, kt, kh, kw), rng, scale, zero_init)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ResBlock(Module):
    """conv-relu-conv with identity skip; the closing conv may start at zero
    so the block is an identity map at initialization."""

    def __init__(self, channels: int, rng: np.random.Generator, zero_init: bool = True):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, rng)
        self.conv2 = Conv2d(channels, channels, 3, rng, zero_init=zero_init)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv2(T.relu(self.conv1(x)))


class ChannelAttention(Module):
    """Global-average-pool bottleneck gate over channels of ``[C, H, W]``."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        pooled = T.reshape(x.mean(axis=(1, 2)), (1, -1))
        gate = T.sigmoid(self.fc2(T.relu(self.fc1(pooled))))
        c = x.shape[0]
        return x * T.reshape(gate, (c, 1, 1))
