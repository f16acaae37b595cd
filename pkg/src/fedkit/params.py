"""Named tensor collections: the unit of exchange between clients and servers.

A :class:`ParameterSet` is an ordered, immutable mapping from tensor names
(``"W0"``, ``"b0"``, ...) to numpy arrays of dtype float32 or float64.  All
model state, updates, and aggregation results in this package are parameter
sets, so the arithmetic and the byte-level codec live here.

Wire format (big-endian lengths, little-endian element bytes)::

    u32  entry count
    per entry:
        u16  name length in bytes
        ...  name (UTF-8)
        u8   dtype tag (0 = float32, 1 = float64)
        u8   ndim
        u32  dim_0 ... dim_{ndim-1}
        ...  raw elements, row-major, little-endian

The same byte layout is used for ``.apfm`` checkpoint files.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import (
    BadDtypeTag,
    LengthMismatch,
    NameTooLong,
    ShapeMismatch,
    TrailingBytes,
    Truncated,
)

_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

MAX_NAME_BYTES = 0xFFFF
CHECKPOINT_SUFFIX = ".apfm"


def _as_tensor(name, value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype not in _DTYPE_TO_TAG:
        # everything else (ints, bools, f16) is promoted; complex is rejected
        if np.issubdtype(arr.dtype, np.complexfloating):
            raise ShapeMismatch(f"tensor {name!r}: complex dtype not supported")
        arr = arr.astype(np.float64)
    arr = arr.copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
    arr.flags.writeable = False
    return arr


class ParameterSet:
    """Ordered, immutable collection of named float tensors.

    >>> p = ParameterSet([("w", np.zeros(3, dtype=np.float32))])
    >>> p.param_count
    3
    >>> len(serialize_params(p))
    25
    """

    __slots__ = ("_names", "_arrays", "_index")

    def __init__(self, entries):
        names: list[str] = []
        arrays: list[np.ndarray] = []
        index: dict[str, int] = {}
        if isinstance(entries, Mapping):
            entries = entries.items()
        for name, value in entries:
            if not isinstance(name, str):
                raise ShapeMismatch(f"tensor name must be str, got {type(name).__name__}")
            if name in index:
                raise ShapeMismatch(f"duplicate tensor name {name!r}")
            index[name] = len(names)
            names.append(name)
            arrays.append(_as_tensor(name, value))
        self._names = tuple(names)
        self._arrays = tuple(arrays)
        self._index = index

    # -- container protocol -------------------------------------------------

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self._names, self._arrays))

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[self._index[name]]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self)

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self._arrays))

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}:{a.dtype.name}{list(a.shape)}" for n, a in self)
        return f"ParameterSet({inner})"

    # -- structure / equality ------------------------------------------------

    def same_structure(self, other: "ParameterSet") -> bool:
        if self._names != other._names:
            return False
        return all(
            a.shape == b.shape and a.dtype == b.dtype
            for a, b in zip(self._arrays, other._arrays)
        )

    def check_structure(self, other: "ParameterSet") -> None:
        if not self.same_structure(other):
            raise ShapeMismatch("parameter sets differ in names, shapes, or dtypes")

    def __eq__(self, other) -> bool:
        """Bit-exact equality (names, shapes, dtypes, and element bytes)."""
        if not isinstance(other, ParameterSet):
            return NotImplemented
        if not self.same_structure(other):
            return False
        return all(a.tobytes() == b.tobytes() for a, b in zip(self._arrays, other._arrays))

    __hash__ = None  # type: ignore[assignment]

    def allclose(self, other: "ParameterSet", rtol: float = 1e-9, atol: float = 0.0) -> bool:
        if not self.same_structure(other):
            return False
        return all(
            np.allclose(a, b, rtol=rtol, atol=atol)
            for a, b in zip(self._arrays, other._arrays)
        )

    # -- conversion ----------------------------------------------------------

    def map(self, fn) -> "ParameterSet":
        """Apply ``fn(name, array) -> array`` to every tensor."""
        return ParameterSet((n, fn(n, a)) for n, a in self)

    def astype(self, dtype) -> "ParameterSet":
        dt = np.dtype(dtype)
        return self.map(lambda n, a: a.astype(dt))

    def flat(self) -> np.ndarray:
        """All elements concatenated in entry order (copy)."""
        if not self._arrays:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([a.ravel() for a in self._arrays])


def zeros_like(p: ParameterSet) -> ParameterSet:
    return p.map(lambda n, a: np.zeros_like(a))


def weighted_sum(sets: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Elementwise ``sum_i weights[i] * sets[i]``.

    All sets must share names, order, shapes, and dtypes; the result keeps
    that dtype.  Weights may be any floats (no normalization is applied).
    """
    if len(sets) != len(weights):
        raise LengthMismatch(f"{len(sets)} sets but {len(weights)} weights")
    if not sets:
        raise LengthMismatch("weighted_sum needs at least one set")
    first = sets[0]
    for other in sets[1:]:
        first.check_structure(other)
    out = []
    for k, name in enumerate(first.names):
        acc = np.zeros_like(first._arrays[k])
        for p, w in zip(sets, weights):
            acc += p._arrays[k] * acc.dtype.type(w)
        out.append((name, acc))
    return ParameterSet(out)


def axpy(alpha: float, x: ParameterSet, y: ParameterSet) -> ParameterSet:
    """``alpha * x + y`` with structure checking."""
    x.check_structure(y)
    return ParameterSet(
        (n, a.dtype.type(alpha) * a + b)
        for (n, a), (_, b) in zip(x.items(), y.items())
    )


def norms(p: ParameterSet) -> tuple[float, float, float]:
    """(l1, l2, linf) over the concatenation of all tensors.

    >>> norms(ParameterSet([("a", np.array([3.0, -4.0]))]))
    (7.0, 5.0, 4.0)
    """
    v = p.flat().astype(np.float64)
    if v.size == 0:
        return (0.0, 0.0, 0.0)
    return (
        float(np.sum(np.abs(v))),
        float(np.sqrt(np.sum(v * v))),
        float(np.max(np.abs(v))),
    )


# ---------------------------------------------------------------------------
# serialization


def serialized_size(p: ParameterSet) -> int:
    """Exact byte length ``serialize_params`` will produce, without building it."""
    total = 4
    for name, arr in p:
        nbytes = len(name.encode("utf-8"))
        total += 2 + nbytes + 1 + 1 + 4 * arr.ndim + arr.dtype.itemsize * arr.size
    return total


def serialize_params(p: ParameterSet) -> bytes:
    chunks = [struct.pack(">I", len(p))]
    for name, arr in p:
        raw_name = name.encode("utf-8")
        if len(raw_name) > MAX_NAME_BYTES:
            raise NameTooLong(f"tensor name is {len(raw_name)} bytes (max {MAX_NAME_BYTES})")
        if arr.ndim > 0xFF:
            raise ShapeMismatch(f"tensor {name!r} has {arr.ndim} dims (max 255)")
        tag = _DTYPE_TO_TAG[arr.dtype]
        header = struct.pack(">H", len(raw_name)) + raw_name + struct.pack(">BB", tag, arr.ndim)
        dims = b"".join(struct.pack(">I", d) for d in arr.shape)
        body = arr.astype(_TAG_TO_DTYPE[tag], copy=False).tobytes(order="C")
        chunks.append(header + dims + body)
    return b"".join(chunks)


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise Truncated(
                f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


def deserialize_params(buf: bytes) -> ParameterSet:
    """Inverse of :func:`serialize_params`; rejects trailing bytes."""
    r = _Reader(bytes(buf))
    count = r.u32()
    entries = []
    for _ in range(count):
        name_len = r.u16()
        name = r.take(name_len).decode("utf-8")
        tag = r.u8()
        if tag not in _TAG_TO_DTYPE:
            raise BadDtypeTag(f"dtype tag {tag} in entry {name!r}")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        n_elem = 1
        for d in shape:
            n_elem *= d
        dt = _TAG_TO_DTYPE[tag]
        raw = r.take(n_elem * dt.itemsize)
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        entries.append((name, arr))
    if r.pos != len(r.buf):
        raise TrailingBytes(f"{len(r.buf) - r.pos} bytes left after last entry")
    return ParameterSet(entries)


def save_params(p: ParameterSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(p))


def load_params(path) -> ParameterSet:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())


# ---------------------------------------------------------------------------
# exchange records


@dataclass(frozen=True)
class ModelUpdate:
    """One client contribution, as submitted to the server.

    ``params`` holds full weights when ``is_delta`` is false, otherwise the
    difference ``local - base``.  ``base_epoch`` is the server epoch of the
    global model this update was trained from; staleness at aggregation time
    is ``server_epoch - base_epoch``.  ``wall_meta`` is the (start, end)
    training timestamp pair used for speed estimation; virtual seconds in
    simulation, wall seconds otherwise.
    """

    client_id: str
    params: ParameterSet
    is_delta: bool
    sample_count: int
    local_steps: int
    base_epoch: int
    wall_meta: Optional[tuple[float, float]] = None


@dataclass(frozen=True)
class MetricRecord:
    timestamp: float
    entity: str
    kind: str
    value: float
