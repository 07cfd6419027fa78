"""Small parameter containers built on the autodiff tensors."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for name, mod in self.children.items():
            out.update(mod.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers.items()}
        for name, mod in self.children.items():
            out.update(mod.named_buffers(f"{prefix}{name}."))
        return out

    def _locate(self, dotted: str) -> tuple["Module", str]:
        mod = self
        *path, leaf = dotted.split(".")
        for p in path:
            mod = mod.children[p]
        return mod, leaf

    def set_parameter(self, dotted: str, value: np.ndarray) -> None:
        mod, leaf = self._locate(dotted)
        cur = mod.params[leaf]
        if cur.shape != value.shape:
            raise ValueError(f"shape mismatch for {dotted}: {cur.shape} vs {value.shape}")
        cur.data = np.array(value, dtype=cur.dtype)

    def set_buffer(self, dotted: str, value: np.ndarray) -> None:
        mod, leaf = self._locate(dotted)
        mod.buffers[leaf] = np.array(value, dtype=mod.buffers[leaf].dtype).reshape(mod.buffers[leaf].shape)

    def astype(self, dtype) -> "Module":
        for t in self.named_parameters().values():
            t.data = t.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False) -> None:
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
        self.param("weight", w)
        self.param("bias", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.params["weight"] + self.params["bias"]


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        super().__init__()
        self.param("gain", np.ones(d))
        self.param("bias", np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.params["gain"], self.params["bias"])


class MLP(Module):
    def __init__(self, rng: np.random.Generator, d: int, hidden: int) -> None:
        super().__init__()
        self.fc1 = self.child("fc1", Linear(rng, d, hidden))
        self.fc2 = self.child("fc2", Linear(rng, hidden, d))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))
