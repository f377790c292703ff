"""Parameter containers and the small layer set the models are built from."""

from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a module. ``frozen`` parameters receive no gradient."""

    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=not frozen)
        self.frozen = frozen

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False
        self.grad = None

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


class Module:
    """Attribute-walking parameter registry (definition order is deterministic)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
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

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def frozen_flags(self) -> dict[str, bool]:
        return {name: p.frozen for name, p in self.named_parameters()}

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def num_parameters(self, trainable_only: bool = False) -> int:
        ps = self.trainable_parameters() if trainable_only else self.parameters()
        return int(sum(p.size for p in ps))


class Linear(Module):
    """``x @ W + b`` with W stored as [d_in, d_out].

    ``init_std=None`` uses 1/sqrt(d_in); ``init_std=0`` gives an all-zero layer.
    An optional low-rank adapter adds ``(x @ A) @ B`` (see :meth:`add_lora`).
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_std: float | None = None):
        std = 1.0 / np.sqrt(d_in) if init_std is None else init_std
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(rng.normal(0.0, std, size=(d_in, d_out)) if std > 0 else np.zeros((d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.lora_a: Parameter | None = None
        self.lora_b: Parameter | None = None

    def add_lora(self, rank: int, rng: np.random.Generator, std: float = 0.02) -> int:
        if rank < 1 or rank >= min(self.d_in, self.d_out):
            raise ValueError(f"LoRA rank {rank} must be in [1, {min(self.d_in, self.d_out)})")
        self.weight.freeze()
        if self.bias is not None:
            self.bias.freeze()
        self.lora_a = Parameter(rng.normal(0.0, std, size=(self.d_in, rank)))
        self.lora_b = Parameter(np.zeros((rank, self.d_out)))
        return rank * (self.d_in + self.d_out)

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.lora_a is not None:
            y = y + ad.matmul(ad.matmul(x, self.lora_a), self.lora_b)
        if self.bias is not None:
            y = y + self.bias
        return y


class MLP(Module):
    """Linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, last_std: float | None = None):
        self.layers = [
            Linear(a, b, rng, init_std=last_std if i == len(dims) - 2 else None)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gamma, self.beta, self.eps)


class Adam:
    """Adam with bias correction; skips frozen parameters."""

    def __init__(self, params: list[Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if not p.frozen]
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
