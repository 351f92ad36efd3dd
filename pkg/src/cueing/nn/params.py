"""Named parameter registry."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List

import numpy as np


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamRegistry:
    """Ordered mapping of dotted names to :class:`Parameter` objects."""

    def __init__(self):
        self._params: Dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value, trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def values(self, prefix: str = "") -> Dict[str, np.ndarray]:
        """Arrays whose names start with ``prefix``, keyed with it stripped."""
        n = len(prefix)
        return {k[n:]: p.value for k, p in self._params.items() if k.startswith(prefix)}

    def count(self, trainable_only: bool = True) -> int:
        return sum(p.size for p in self if p.trainable or not trainable_only)

    def set_trainable(self, predicate: Callable[[str], bool]) -> None:
        for p in self:
            p.trainable = bool(predicate(p.name))

    def astype(self, dtype) -> None:
        for p in self:
            p.value = p.value.astype(dtype)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}
