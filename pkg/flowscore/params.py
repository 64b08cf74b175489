# flowscore/params.py

import math
import struct
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"FMS1"


class ParameterStore:
    """
    Named parameter arrays (insertion-ordered) with matching gradient
    buffers and Adam state. Storage is float32; float64 stores exist for
    gradient checks.
    """

    def __init__(self, dtype: type = np.float32) -> None:
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.adam_m: Dict[str, np.ndarray] = {}
        self.adam_v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.array(value, dtype=self.dtype)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.adam_m[name] = np.zeros_like(arr)
        self.adam_v[name] = np.zeros_like(arr)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> List[str]:
        return list(self.params)

    def num_scalars(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def restore(self, snapshot: Mapping[str, np.ndarray]) -> None:
        for k, v in snapshot.items():
            self.params[k][...] = v

    def astype(self, dtype: type) -> "ParameterStore":
        out = ParameterStore(dtype)
        for k, v in self.params.items():
            out.add(k, v)
        return out

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy checkpoint arrays in; names and shapes must match exactly."""
        for name in self.params:
            if name not in arrays:
                raise CheckpointError("missing from checkpoint", tensor=name)
        for name, arr in arrays.items():
            if name not in self.params:
                raise CheckpointError("not a parameter of this model", tensor=name)
            if arr.shape != self.params[name].shape:
                raise CheckpointError(
                    f"shape {arr.shape} does not match model shape {self.params[name].shape}",
                    tensor=name,
                )
            self.params[name][...] = arr


# ---------- Initialization ----------

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def embedding_normal(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(dim), size=(rows, dim))


# ---------- Optimizer ----------

def adam_step(
    store: ParameterStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2_weight: float = 0.0,
) -> None:
    """
    One bias-corrected Adam update over every parameter, then zero grads.
    A nonzero `l2_weight` adds the gradient of l2_weight * ||p||^2 (coupled,
    not decoupled decay); leave it at 0 when the penalty is already a loss
    term on the tape.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = store.grads[name]
        if l2_weight:
            g = g + 2.0 * l2_weight * p
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    store.zero_grad()


# ---------- Checkpoints ----------

def checkpoint_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_checkpoint(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = values.astype(np.float32)
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} trailing bytes")
    return out


def save_checkpoint(params: Mapping[str, np.ndarray], path: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(p.read_bytes(), source=str(path))


def load_into(store: ParameterStore, path: str) -> ParameterStore:
    store.load_arrays(load_checkpoint(path))
    return store
