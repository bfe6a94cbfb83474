"""Parameterised layers on top of the autodiff primitives."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class; parameters are discovered by walking attributes in order."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item._modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        if strict and missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


def he_uniform(rng, shape, fan_in, alpha=0.0):
    bound = np.sqrt(6.0 / ((1.0 + alpha * alpha) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _init(rng, shape, fan_in, fan_out, init, alpha):
    if init == "he":
        return he_uniform(rng, shape, fan_in, alpha)
    if init == "xavier":
        return xavier_uniform(rng, shape, fan_in, fan_out)
    raise ValueError(f"unknown init {init!r}")


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True, init="xavier", alpha=0.0):
        self.weight = Tensor(_init(rng, (fan_in, fan_out), fan_in, fan_out, init, alpha), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class _Conv(Module):
    nd = 2
    transpose = False

    def __init__(self, cin, cout, k, rng, stride=1, pad=0, bias=True, init="he", alpha=0.0):
        ks = (k,) * self.nd
        field = int(np.prod(ks))
        if self.transpose:
            shape = (cin, cout) + ks
            fan_in = cin * field / stride**self.nd
            fan_out = cout * field
        else:
            shape = (cout, cin) + ks
            fan_in, fan_out = cin * field, cout * field / stride**self.nd
        self.weight = Tensor(_init(rng, shape, fan_in, fan_out, init, alpha), requires_grad=True)
        self.bias = Tensor(np.zeros((cout,) + (1,) * self.nd), requires_grad=True) if bias else None
        self.stride, self.pad = stride, pad

    def _op(self, x, w):
        raise NotImplementedError

    def __call__(self, x):
        y = self._op(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(_Conv):
    nd = 2

    def _op(self, x, w):
        return ad.conv2d(x, w, self.stride, self.pad)


class Conv3d(_Conv):
    nd = 3

    def _op(self, x, w):
        return ad.conv3d(x, w, self.stride, self.pad)


class ConvTranspose3d(_Conv):
    nd = 3
    transpose = True

    def _op(self, x, w):
        return ad.conv_transpose3d(x, w, self.stride, self.pad)


def dihedral(images: np.ndarray, code: int) -> np.ndarray:
    """One of the 8 flips / quarter turns acting on the last two axes."""
    out = np.swapaxes(images, -1, -2) if code & 4 else images
    if code & 1:
        out = out[..., ::-1, :]
    if code & 2:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


@contextmanager
def frozen(module: Module):
    """Temporarily stop recording gradients for a module's parameters."""
    params = module.parameters()
    for p in params:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p in params:
            p.requires_grad = True
