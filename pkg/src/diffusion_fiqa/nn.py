"""Small layer library over :mod:`diffusion_fiqa.autograd`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ContractError


class Module:
    """Parameter container; attributes that are parameter tensors or sub-modules
    are discovered in assignment order, which fixes the checkpoint layout."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(state[name])
            if arr.shape != tensor.shape:
                raise ContractError(f"{name}: stored shape {arr.shape} != model shape {tensor.shape}")
            tensor.data = arr.astype(tensor.dtype, copy=True)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for _, p in self.named_parameters())


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(ag.default_dtype())


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: str = "same", rng: np.random.Generator | None = None, zero: bool = False):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        bound = 1.0 / math.sqrt(fan_in)
        shape = (out_ch, kernel, kernel, in_ch)
        w = np.zeros(shape, dtype=ag.default_dtype()) if zero else _uniform(rng, shape, math.sqrt(3.0) * bound)
        self.weight = ag.parameter(w)
        self.bias = ag.parameter(np.zeros((1, 1, 1, out_ch), dtype=ag.default_dtype()))
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return ag.conv2d(x, self.weight, self.stride, self.padding) + self.bias


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 bias: bool = True, zero: bool = False):
        rng = rng or np.random.default_rng(0)
        bound = math.sqrt(3.0 / in_dim)
        w = np.zeros((in_dim, out_dim), dtype=ag.default_dtype()) if zero else _uniform(rng, (in_dim, out_dim), bound)
        self.weight = ag.parameter(w)
        self.bias = ag.parameter(np.zeros((1, out_dim), dtype=ag.default_dtype())) if bias else None

    def __call__(self, x) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int):
        if channels % groups:
            raise ContractError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.gain = ag.parameter(np.ones((1, 1, 1, channels), dtype=ag.default_dtype()))
        self.shift = ag.parameter(np.zeros((1, 1, 1, channels), dtype=ag.default_dtype()))

    def __call__(self, x) -> Tensor:
        return ag.group_norm(x, self.groups) * self.gain + self.shift


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Fixed sin/cos features of integer steps, shape (len(t), dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(ag.default_dtype())
