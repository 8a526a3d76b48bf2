"""Named parameter storage, PCK1 checkpoints, and finite-difference gradient checks."""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable

import numpy as np

from .tensor import Parameter

MAGIC = b"PCK1"


class ParamStore:
    """Ordered name -> Parameter map; insertion order is the canonical order."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def num_scalars(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def state_dict(self) -> OrderedDict:
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state_dict(self, state) -> None:
        if list(state) != self.names():
            missing = set(self.names()) ^ set(state)
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data[...] = arr


def save_checkpoint(store: ParamStore, path) -> None:
    """Write ``PCK1``: header of (name, rank, dims) per parameter, then payloads.

    Layout (little-endian): magic, u32 count; per parameter u32 name length,
    UTF-8 name, u32 rank, rank x u64 dims; then every parameter's float64 data
    in the same order, row-major.
    """
    parts = [MAGIC, struct.pack("<I", len(store))]
    for p in store:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)) + name)
        parts.append(struct.pack(f"<I{p.data.ndim}Q", p.data.ndim, *p.data.shape))
    for p in store:
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> OrderedDict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a PCK1 checkpoint")
    off = 4
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        header.append((name, tuple(dims)))
    out = OrderedDict()
    for name, dims in header:
        size = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def grad_check(loss_fn: Callable, store: ParamStore, samples: int,
               rng: np.random.Generator | None = None, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Every parameter tensor is sampled at least once (when ``samples`` allows);
    the remaining samples are drawn uniformly over all scalars.  ``loss_fn`` must
    be deterministic and return a scalar Tensor.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    store.zero_grad()
    loss_fn().backward()
    params = list(store)
    analytic = [p.grad.copy() for p in params]

    picks = []
    if samples >= len(params):
        picks = [(i, int(rng.integers(params[i].data.size))) for i in range(len(params))]
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    for _ in range(samples - len(picks)):
        i = int(rng.choice(len(params), p=sizes / sizes.sum()))
        picks.append((i, int(rng.integers(params[i].data.size))))

    worst = 0.0
    for i, j in picks:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = float(loss_fn().data)
        flat[j] = orig - h
        down = float(loss_fn().data)
        flat[j] = orig
        g_fd = (up - down) / (2 * h)
        g_ad = analytic[i].reshape(-1)[j]
        err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        worst = max(worst, err)
    store.zero_grad()
    return worst
