"""Named parameters grouped for freezing, SGD, and the checkpoint format."""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"DPMCKPT1"


class FreezeGroup(str, enum.Enum):
    ENCODER = "ENCODER"
    HMG = "HMG"
    PROTOTYPE = "PROTOTYPE"


class CheckpointError(IOError):
    pass


@dataclass
class Param:
    tensor: Tensor
    group: FreezeGroup
    trainable: bool = True


class ParamStore:
    def __init__(self) -> None:
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray, group: FreezeGroup, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        self._params[name] = Param(t, FreezeGroup(group), trainable)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self) -> Iterator[tuple[str, Param]]:
        return iter(self._params.items())

    def group_of(self, name: str) -> FreezeGroup:
        return self._params[name].group

    def tensors(self, groups: Iterable[FreezeGroup] | None = None) -> dict[str, Tensor]:
        groups = set(FreezeGroup(g) for g in groups) if groups is not None else None
        return {n: p.tensor for n, p in self._params.items() if groups is None or p.group in groups}

    def set_active(self, groups: Iterable[FreezeGroup]) -> None:
        """Only trainable parameters in ``groups`` will record gradients."""
        active = set(FreezeGroup(g) for g in groups)
        for p in self._params.values():
            p.tensor.requires_grad = p.trainable and p.group in active
            p.tensor.grad = None

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def astype(self, dtype) -> None:
        for p in self._params.values():
            p.tensor.data = p.tensor.data.astype(dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.tensor.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self._params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.tensor.shape:
                raise CheckpointError(f"shape mismatch for {n}: {arr.shape} vs {p.tensor.shape}")
            p.tensor.data = arr.astype(p.tensor.data.dtype).copy()

    def checksum(self, groups: Iterable[FreezeGroup] | None = None) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.tensors(groups).items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def count(self) -> int:
        return int(sum(p.tensor.size for p in self._params.values()))


def save_checkpoint(store: ParamStore | dict[str, np.ndarray], path: str | Path) -> None:
    state = store.state() if isinstance(store, ParamStore) else store
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after {count} parameters")
    return state


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay.

    Only parameters that currently record gradients are touched, so frozen
    groups keep both their values and momentum buffers bitwise unchanged.
    """

    def __init__(self, store: ParamStore, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.store = store
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for name, p in self.store.items():
            t = p.tensor
            if not t.requires_grad or t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            v = self._velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self._velocity[name] = v
            t.data = (t.data - lr * v).astype(t.data.dtype)
