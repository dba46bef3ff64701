"""Weight-space arithmetic: interpolation, averaging and checkpoint files."""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .tensor import get_dtype

MAGIC = b"OVCP"
FORMAT_VERSION = 1
ROLES = ("pretrained", "finetuned", "swa", "patched", "trainstate", "dataset")


class IncompatibleParamsError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class NameTableError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class ParamVector:
    """Ordered (name -> array) mapping over every trainable visual parameter."""

    __slots__ = ("_names", "_arrays")

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]]):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._names: tuple[str, ...] = ()
        arrays = {}
        names = []
        for name, arr in items:
            arr = np.asarray(arr)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(get_dtype())
            if name in arrays:
                raise ValueError(f"duplicate parameter name {name!r}")
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name!r} has non-finite values")
            arrays[name] = arr
            names.append(name)
        self._names = tuple(names)
        self._arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __len__(self) -> int:
        return len(self._names)

    def __repr__(self):
        return f"ParamVector({len(self)} tensors, {self.numel} values)"

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def items(self):
        return ((n, self._arrays[n]) for n in self._names)

    def values(self):
        return (self._arrays[n] for n in self._names)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [self._arrays[n].shape for n in self._names]

    @property
    def numel(self) -> int:
        return int(sum(a.size for a in self.values()))

    @property
    def dtype(self):
        return self._arrays[self._names[0]].dtype if self._names else get_dtype()

    def astype(self, dtype) -> "ParamVector":
        return ParamVector((n, a.astype(dtype)) for n, a in self.items())

    def copy(self) -> "ParamVector":
        return ParamVector((n, a.copy()) for n, a in self.items())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.values()])

    def from_flat(self, flat: np.ndarray) -> "ParamVector":
        """A vector with this layout holding the values of ``flat``."""
        flat = np.asarray(flat)
        if flat.size != self.numel:
            raise IncompatibleParamsError(f"flat vector has {flat.size} values, expected {self.numel}")
        out, pos = [], 0
        for n, a in self.items():
            out.append((n, flat[pos:pos + a.size].reshape(a.shape)))
            pos += a.size
        return ParamVector(out)

    def check_compatible(self, other: "ParamVector") -> None:
        if self._names != other._names:
            for i, (a, b) in enumerate(zip(self._names, other._names)):
                if a != b:
                    raise IncompatibleParamsError(f"entry {i}: name {a!r} vs {b!r}")
            raise IncompatibleParamsError(f"entry count {len(self)} vs {len(other)}")
        for n in self._names:
            if self._arrays[n].shape != other._arrays[n].shape:
                raise IncompatibleParamsError(
                    f"{n!r}: shape {self._arrays[n].shape} vs {other._arrays[n].shape}"
                )

    def equal(self, other: "ParamVector") -> bool:
        """Exact (bitwise) equality of names, shapes and values."""
        try:
            self.check_compatible(other)
        except IncompatibleParamsError:
            return False
        return all(np.array_equal(a, other[n]) for n, a in self.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, a in self.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def combine(pairs, out_dtype=None) -> ParamVector:
    """Elementwise sum of coefficient * ParamVector terms (shared layout)."""
    pairs = list(pairs)
    first = pairs[0][1]
    for _, p in pairs[1:]:
        first.check_compatible(p)
    out = []
    for n in first:
        acc = pairs[0][0] * pairs[0][1][n]
        for c, p in pairs[1:]:
            acc = acc + c * p[n]
        out.append((n, acc if out_dtype is None else acc.astype(out_dtype)))
    return ParamVector(out)


def interpolate(theta_a: ParamVector, theta_b: ParamVector, lam: float) -> ParamVector:
    """lam * theta_a + (1 - lam) * theta_b."""
    if not 0.0 <= lam <= 1.0 or math.isnan(lam):
        raise ValueError(f"interpolation ratio must lie in [0, 1], got {lam}")
    theta_a.check_compatible(theta_b)
    dt = theta_b.dtype
    la, lb = dt.type(lam), dt.type(1.0 - lam)
    return ParamVector((n, la * theta_a[n] + lb * theta_b[n]) for n in theta_a)


def param_distance(theta_a: ParamVector, theta_b: ParamVector) -> float:
    theta_a.check_compatible(theta_b)
    total = 0.0
    for n in theta_a:
        d = theta_a[n].astype(np.float64) - theta_b[n].astype(np.float64)
        total += float(np.dot(d.reshape(-1), d.reshape(-1)))
    return math.sqrt(total)


@dataclass
class SwaState:
    """Running mean of weight snapshots taken every ``cycle`` steps after ``start``."""

    start: int
    cycle: int
    mean: ParamVector | None = None
    count: int = 0
    snapshots: list[ParamVector] | None = None  # kept only when verifying

    def due(self, step: int) -> bool:
        return step > self.start and (step - self.start) % self.cycle == 0


def swa_update(state: SwaState, theta: ParamVector) -> SwaState:
    """Fold ``theta`` into the running mean: (mean * l + theta) / (l + 1)."""
    l = state.count
    if state.mean is None or l == 0:
        new_mean = theta.copy()
    else:
        state.mean.check_compatible(theta)
        dt = state.mean.dtype.type
        new_mean = ParamVector(
            (n, (state.mean[n] * dt(l) + theta[n]) / dt(l + 1)) for n in theta
        )
    snaps = None
    if state.snapshots is not None:
        snaps = state.snapshots + [theta.copy()]
    return SwaState(start=state.start, cycle=state.cycle, mean=new_mean, count=l + 1, snapshots=snaps)


def check_swa_commutation(theta_a: ParamVector, snapshots: list[ParamVector], lam: float) -> float:
    """Max |avg_i(interp(theta_a, s_i)) - interp(theta_a, avg_i s_i)| over coordinates.

    Both averages use the same running-mean recurrence as training.
    """
    if not snapshots:
        raise ValueError("need at least one snapshot")
    lhs = SwaState(start=0, cycle=1)
    rhs = SwaState(start=0, cycle=1)
    for s in snapshots:
        lhs = swa_update(lhs, interpolate(theta_a, s, lam))
        rhs = swa_update(rhs, s)
    patched = interpolate(theta_a, rhs.mean, lam)
    return max(float(np.max(np.abs(lhs.mean[n] - patched[n]))) for n in patched)


# -- checkpoint container -----------------------------------------------------

@dataclass
class Checkpoint:
    role: str
    params: ParamVector
    model_config: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown checkpoint role {self.role!r}")


def _encode(cp: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cp.params))]
    for name, arr in cp.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {"role": cp.role, "model_config": cp.model_config, "meta": cp.meta}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4:
        raise TruncatedError("truncated checkpoint: missing header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, reader supports {FORMAT_VERSION}")
    entries = []
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        entries.append((name, arr))
    blob = r.take(r.u32())
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after metadata")
    meta = json.loads(blob.decode("utf-8"))
    return Checkpoint(role=meta["role"], params=ParamVector(entries),
                      model_config=meta.get("model_config"), meta=meta.get("meta") or {})


def save_checkpoint(path, cp: Checkpoint) -> str:
    """Write ``cp``; returns the sha256 of the file contents."""
    data = _encode(cp)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, expected_config: dict | None = None,
                    expected_names: Iterable[str] | None = None) -> Checkpoint:
    cp = _decode(Path(path).read_bytes())
    if expected_config is not None and cp.model_config != expected_config:
        diff = sorted(k for k in set(expected_config) | set(cp.model_config or {})
                      if (cp.model_config or {}).get(k) != expected_config.get(k))
        raise ConfigMismatchError(f"config mismatch in {path}: fields {diff}")
    if expected_names is not None:
        expected = tuple(expected_names)
        if cp.params.names != expected:
            missing = sorted(set(expected) - set(cp.params.names))
            extra = sorted(set(cp.params.names) - set(expected))
            raise NameTableError(f"name table mismatch in {path}: missing {missing}, extra {extra}")
    return cp


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
