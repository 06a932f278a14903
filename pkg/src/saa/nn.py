"""Parameter containers and the two layers everything else is built from."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from saa import tensor as T
from saa.tensor import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Registers parameters and child modules in assignment order.

    The dotted attribute path is the checkpoint name of each parameter.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._children[f"{key}.{i}"] = v
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from saa.errors import CheckpointError

        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {state[name].shape}, model {p.shape}"
                )
            p.data[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def freeze(self) -> None:
        """Stop gradient flow into every parameter; grads stay at zero."""
        for p in self.parameters():
            p.requires_grad = False
            p.grad = np.zeros_like(p.data)

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        super().__init__()
        self.weight = T.parameter(glorot(rng, n_in, n_out))
        self.bias: Optional[Tensor] = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else T.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, n: int, eps: float = 1e-6):
        super().__init__()
        self.scale = T.parameter(np.ones(n))
        self.shift = T.parameter(np.zeros(n))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.scale, self.shift, self.eps)
