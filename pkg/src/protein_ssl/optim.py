"""Named parameter collections, Adam, the cosine schedule, and checkpoints.

Checkpoint layout (little-endian, magic ``SPM1``): a u32 entry count, then
per entry sorted by full name: u16 name length, utf-8 name ``role/path``,
u8 ndim, u32 per dimension, followed by the float64 payload in row-major
order. Identical parameter state always serializes to identical bytes.
"""

from __future__ import annotations

import hashlib
import math
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, param
from .errors import ShapeMismatch

CHECKPOINT_MAGIC = b"SPM1"

ROLES = ("theta", "omega", "alpha", "beta", "head")


class ParamSet:
    """Ordered name -> Tensor map for one parameter group (theta, omega, ...)."""

    def __init__(self, role):
        if role not in ROLES:
            raise ValueError(f"unknown parameter role {role!r}")
        self.role = role
        self._params: dict[str, Tensor] = {}

    def add(self, name, data):
        if name in self._params:
            raise ValueError(f"duplicate parameter {self.role}/{name}")
        t = param(np.array(data, dtype=np.float64))
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return list(self._params.items())

    def as_dict(self):
        return dict(self._params)

    def snapshot(self):
        """Copies of all parameter arrays, keyed by name."""
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_snapshot(self, snap):
        for name, t in self._params.items():
            arr = np.asarray(snap[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{self.role}/{name}: {arr.shape} vs {t.data.shape}")
            t.data[...] = arr

    def state_digest(self):
        """sha256 over names, shapes, and raw float64 payload."""
        h = hashlib.sha256()
        for name, t in sorted(self._params.items()):
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return h.hexdigest()


class AdamState:
    """First/second moment buffers and the step counter for one ParamSet."""

    def __init__(self, params):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction, in place.

    ``grads`` maps parameter names to arrays (or Tensors); names absent from
    ``grads`` are left untouched, including their moment buffers, so a subset
    of a group can be frozen. Unknown names are an error.
    """
    extra = set(grads) - set(state.m)
    if extra:
        raise KeyError(f"gradients for unknown parameters: {sorted(extra)}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        g = np.asarray(getattr(g, "data", g), dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{params.role}/{name}: grad {g.shape} vs param {p.data.shape}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def cosine_lr(step, total_steps, lr0):
    """Half-cosine decay from lr0 at step 0 to 0 at step == total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# checkpoint io


def save_checkpoint(path, sets):
    """Write parameter groups to ``path`` atomically (temp file + rename)."""
    entries = []
    for ps in sets:
        for name, t in ps.items():
            entries.append((f"{ps.role}/{name}", t.data))
    entries.sort(key=lambda kv: kv[0])
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", len(entries))
    for name, data in entries:
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", data.ndim)
        for d in data.shape:
            buf += struct.pack("<I", d)
        buf += np.ascontiguousarray(data, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back into ``{role: ParamSet}``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    sets: dict[str, ParamSet] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        full = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        role, _, name = full.partition("/")
        if role not in sets:
            sets[role] = ParamSet(role)
        sets[role].add(name, data)
    return sets
