"""Parameter containers built on the autodiff tensors."""

from __future__ import annotations

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor, default_dtype, layer_norm, linear


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(default_dtype())


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameters are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True, skip=()) -> list:
        """Copy matching arrays in; returns the names that were loaded."""
        params = dict(self.named_parameters())
        loaded = []
        for name, p in params.items():
            if any(name.startswith(s) for s in skip):
                continue
            if name not in state:
                if strict:
                    raise CheckpointError(f"missing tensor {name!r} in checkpoint")
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = np.array(arr, dtype=p.dtype, copy=True)
            loaded.append(name)
        if strict:
            extra = sorted(set(state) - set(params))
            if extra:
                raise CheckpointError(f"unexpected tensors in checkpoint: {extra[:5]}")
        return loaded


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.weight, self.bias, self._eps)
