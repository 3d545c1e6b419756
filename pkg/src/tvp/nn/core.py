"""Flat-storage tensors, named parameters, and the parameter store.

Tensors are plain numpy ndarrays, row-major, float32 by default. Gradient
checks switch the whole stack to float64 through `using_dtype`.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Iterator

import numpy as np

_default_dtype = np.float32


class ShapeError(ValueError):
    """Tensor extents do not match an operation's contract."""


class ConfigError(ValueError):
    """A structural configuration value is invalid (e.g. even kernel extent)."""


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt.type


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily switch the default float width (float64 for grad checks)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def tensor(data, dtype=None) -> np.ndarray:
    return np.asarray(data, dtype=dtype or default_dtype())


def zeros(shape, dtype=None) -> np.ndarray:
    return np.zeros(shape, dtype=dtype or default_dtype())


class Parameter:
    """Named tensor with a gradient buffer and a freeze flag."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray, frozen: bool = False):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.frozen = bool(frozen)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def accumulate(self, grad: np.ndarray) -> None:
        """Add into the grad buffer. Frozen parameters are left untouched."""
        if self.frozen:
            return
        if grad.shape != self.value.shape:
            raise ShapeError(
                f"{self.name}: grad shape {grad.shape} != value shape {self.value.shape}"
            )
        self.grad += grad

    def __repr__(self) -> str:
        tag = " frozen" if self.frozen else ""
        return f"Parameter({self.name}, shape={self.value.shape}{tag})"


class ParamStore:
    """Ordered map of unique parameter names to Parameters.

    Iteration order is insertion order and is the serialization order.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, frozen=frozen)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def trainable(self) -> Iterator[Parameter]:
        return (p for p in self._params.values() if not p.frozen)

    def freeze_prefix(self, prefix: str) -> int:
        n = 0
        for p in self._params.values():
            if p.name.startswith(prefix):
                p.frozen = True
                n += 1
        return n

    def count_elements(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def count_trainable_elements(self) -> int:
        return sum(p.value.size for p in self._params.values() if not p.frozen)

    def trainable_fraction(self) -> float:
        total = self.count_elements()
        return self.count_trainable_elements() / total if total else 0.0

    # -- serialization ------------------------------------------------------
    # Record layout, in store order:
    #   u32 name length, UTF-8 name, u32 rank, u32 extents, f32 LE payload.

    def to_bytes(self) -> bytes:
        chunks = []
        for p in self._params.values():
            if p.value.dtype != np.float32:
                raise ConfigError(
                    f"{p.name}: serialization requires float32 storage, got {p.value.dtype}"
                )
            name = p.name.encode("utf-8")
            chunks.append(struct.pack("<I", len(name)))
            chunks.append(name)
            chunks.append(struct.pack("<I", p.value.ndim))
            chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
            chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, count: int) -> "ParamStore":
        store = cls()
        off = 0
        for _ in range(count):
            if off + 4 > len(data):
                raise ConfigError("truncated parameter payload")
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            raw = data[off : off + 4 * n]
            if len(raw) != 4 * n:
                raise ConfigError(f"truncated payload for parameter {name!r}")
            off += 4 * n
            value = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            store.add(name, value)
        if off != len(data):
            raise ConfigError("trailing bytes after parameter payload")
        return store

    def load_values(self, other: "ParamStore", strict: bool = False) -> int:
        """Copy values by name from `other`. Returns number of tensors copied."""
        n = 0
        for name, p in self._params.items():
            if name in other._params:
                src = other._params[name].value
                if src.shape != p.value.shape:
                    raise ShapeError(f"{name}: checkpoint shape {src.shape} != model {p.value.shape}")
                p.value[...] = src.astype(p.value.dtype)
                n += 1
            elif strict:
                raise ConfigError(f"missing parameter {name!r} in source store")
        return n
