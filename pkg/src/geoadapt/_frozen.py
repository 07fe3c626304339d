"""Shared machinery for frozen parameter holders (generator, feature stack)."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

from .errors import FrozenError


class Frozen:
    """Holds read-only numpy parameters and per-dtype torch copies of them.

    Subclasses call :meth:`_freeze` once from ``__init__``; afterwards every
    attribute assignment raises :class:`FrozenError`. :meth:`checksum` also
    hashes the live torch copies, so an in-place edit of a cached tensor shows
    up as a checksum change.
    """

    def _freeze(self, params: dict[str, np.ndarray], constants: dict[str, np.ndarray] | None = None):
        for a in params.values():
            a.setflags(write=False)
        for a in (constants or {}).values():
            a.setflags(write=False)
        object.__setattr__(self, "_params", params)
        object.__setattr__(self, "_constants", constants or {})
        object.__setattr__(self, "_cache", {})

    def __setattr__(self, name, value):
        raise FrozenError(f"{type(self).__name__} is frozen; cannot set {name!r}")

    def __delattr__(self, name):
        raise FrozenError(f"{type(self).__name__} is frozen; cannot delete {name!r}")

    @property
    def params(self) -> dict[str, np.ndarray]:
        return dict(self._params)

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self._params.values()))

    def _identity(self) -> str:
        return type(self).__name__

    def checksum(self) -> str:
        h = hashlib.sha256(self._identity().encode())
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._params[name]).tobytes())
        for dtype, tensors in self._cache.items():
            for name, t in tensors.items():
                ref = self._constants[name] if name in self._constants else self._params[name]
                if not torch.equal(t, torch.tensor(np.asarray(ref), dtype=dtype)):
                    h.update(f"mutated:{dtype}:{name}".encode())
        return h.hexdigest()

    def _tensors(self, dtype: torch.dtype) -> dict[str, torch.Tensor]:
        if dtype not in self._cache:
            merged = {**self._params, **self._constants}
            self._cache[dtype] = {k: torch.tensor(np.asarray(v), dtype=dtype) for k, v in merged.items()}
        return self._cache[dtype]
