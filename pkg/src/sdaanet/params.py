"""Named parameter storage and seeded initialisation."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Map from dotted names to trainable tensors, iterated in sorted order."""

    def __init__(self, dtype=np.float32):
        self._params: dict[str, Tensor] = {}
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def with_prefix(self, prefix: str) -> list[str]:
        return [n for n in self.names() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for _, p in self.items():
            p.grad = np.zeros_like(p.data)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for name, value in state.items():
            p = self._params[name]
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} does not match {p.shape}")
            p.data = np.asarray(value, dtype=self.dtype).copy()

    def astype(self, dtype) -> "ParamStore":
        """Copy of the store in another float dtype (used for float64 gradient checks)."""
        out = ParamStore(dtype)
        for name, p in self.items():
            out.add(name, p.data)
        return out

    def num_values(self) -> int:
        return int(sum(p.data.size for _, p in self.items()))


def init_conv(store: ParamStore, name: str, cout: int, cin: int, k: int, rng: np.random.Generator) -> None:
    """He-uniform weights bounded by sqrt(6 / fan_in), zero bias."""
    bound = np.sqrt(6.0 / (cin * k * k))
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(cout, cin, k, k)))
    store.add(f"{name}.bias", np.zeros(cout))


def init_fc(store: ParamStore, name: str, dout: int, din: int, rng: np.random.Generator) -> None:
    bound = np.sqrt(6.0 / din)
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(dout, din)))
    store.add(f"{name}.bias", np.zeros(dout))


def init_norm(store: ParamStore, name: str, channels: int) -> None:
    store.add(f"{name}.weight", np.ones(channels))
    store.add(f"{name}.bias", np.zeros(channels))
