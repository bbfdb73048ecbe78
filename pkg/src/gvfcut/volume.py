"""Regular-grid volumes, neighborhoods, distance transforms and SVOL I/O.

All grids are linearized row-major (last axis fastest), which is what
``numpy.ravel`` does for C-ordered arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy import ndimage


class EmptyLabelError(ValueError):
    """Raised when an operation needs a label that is absent from a volume."""


class SvolFormatError(ValueError):
    """Malformed SVOL (or PGM) file."""


@dataclass(frozen=True)
class GridShape:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"grids must have 2 or 3 axes, got {len(dims)}")
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != len(dims):
            raise ValueError("spacing must have one entry per axis")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))


def _default_spacing(ndim: int) -> tuple[float, ...]:
    return (1.0,) * ndim


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable N-d array plus physical voxel spacing (mm)."""

    data: np.ndarray
    spacing: tuple[float, ...] = ()

    def __post_init__(self):
        data = np.array(self.data, dtype=self._dtype(self.data), copy=True)
        spacing = self.spacing or _default_spacing(data.ndim)
        grid = GridShape(data.shape, spacing)
        self._check(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", grid.spacing)

    @staticmethod
    def _dtype(data):
        return None

    def _check(self, data: np.ndarray) -> None:
        pass

    @property
    def grid(self) -> GridShape:
        return GridShape(self.data.shape, self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )

    __hash__ = None


class ScalarVolume(Volume):
    """Real-valued volume (intensities, probabilities, field components)."""

    @staticmethod
    def _dtype(data):
        data = np.asarray(data)
        return data.dtype if data.dtype.kind == "f" else np.float64

    def _check(self, data):
        if not np.all(np.isfinite(data)):
            raise ValueError("scalar volume contains non-finite values")


class LabelVolume(Volume):
    """Small non-negative integer labels; 0 is background."""

    @staticmethod
    def _dtype(data):
        return np.uint8

    def _check(self, data):
        pass

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise ValueError("labels must lie in 0..255")
        if raw.dtype.kind == "f" and not np.array_equal(raw, np.round(raw)):
            raise ValueError("labels must be integers")
        super().__post_init__()

    def mask(self, label: int) -> np.ndarray:
        return self.data == label


def index(dims: Sequence[int], coord: Sequence[int]) -> int:
    """Row-major linear index of ``coord``; raises IndexError when out of bounds."""
    if len(coord) != len(dims):
        raise IndexError(f"coordinate {tuple(coord)} has wrong rank for dims {tuple(dims)}")
    for c, d in zip(coord, dims):
        if not 0 <= c < d:
            raise IndexError(f"coordinate {tuple(coord)} out of bounds for dims {tuple(dims)}")
    return int(np.ravel_multi_index(tuple(int(c) for c in coord), tuple(dims)))


def coord(dims: Sequence[int], linear: int) -> tuple[int, ...]:
    """Inverse of :func:`index`."""
    if not 0 <= linear < int(np.prod(dims)):
        raise IndexError(f"linear index {linear} out of bounds for dims {tuple(dims)}")
    return tuple(int(c) for c in np.unravel_index(int(linear), tuple(dims)))


@dataclass(frozen=True)
class Neighborhood:
    kind: str
    offsets: tuple[tuple[int, ...], ...]

    @classmethod
    def make(cls, kind: str, ndim: int) -> "Neighborhood":
        """``face`` gives 4/6-connectivity, ``full`` gives 8/26-connectivity.

        Offsets are listed in lexicographic order, which downstream code uses
        as the tie-break order.
        """
        if kind not in ("face", "full"):
            raise ValueError(f"unknown neighborhood kind {kind!r}")
        offsets = []
        for o in itertools.product((-1, 0, 1), repeat=ndim):
            nz = sum(1 for x in o if x)
            if nz == 0 or (kind == "face" and nz != 1):
                continue
            offsets.append(o)
        return cls(kind, tuple(offsets))

    @property
    def ndim(self) -> int:
        return len(self.offsets[0])

    def half(self) -> tuple[tuple[int, ...], ...]:
        """One offset of each (o, -o) pair: the lexicographically positive one."""
        return tuple(o for o in self.offsets if o > tuple(0 for _ in o))

    def __len__(self):
        return len(self.offsets)


def shifted_pairs(dims: Sequence[int], offset: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Linear indices (p, p + offset) for every p whose shifted voxel is in bounds."""
    dims = tuple(dims)
    src = []
    for d, o in zip(dims, offset):
        if abs(o) >= d:
            empty = np.empty(0, dtype=np.int64)
            return empty, empty
        src.append(slice(max(0, -o), d - max(0, o)))
    lin = np.arange(int(np.prod(dims)), dtype=np.int64).reshape(dims)
    p = lin[tuple(src)].ravel()
    step = int(np.dot(np.asarray(offset, dtype=np.int64), _strides(dims)))
    return p, p + step


def _strides(dims: Sequence[int]) -> np.ndarray:
    strides = np.ones(len(dims), dtype=np.int64)
    for a in range(len(dims) - 2, -1, -1):
        strides[a] = strides[a + 1] * dims[a + 1]
    return strides


def neighbor_pairs(dims: Sequence[int], nbhd: Neighborhood) -> tuple[np.ndarray, np.ndarray]:
    """All unordered neighbor pairs (p, q) of the grid, each listed once."""
    ps, qs = [], []
    for o in nbhd.half():
        p, q = shifted_pairs(dims, o)
        ps.append(p)
        qs.append(q)
    return np.concatenate(ps), np.concatenate(qs)


def distance_transform(mask: LabelVolume, label: int) -> ScalarVolume:
    """Exact Euclidean distance (mm) from every voxel to the nearest ``label`` voxel."""
    target = mask.data == label
    if not target.any():
        raise EmptyLabelError(f"label {label} not present")
    dist = ndimage.distance_transform_edt(~target, sampling=mask.spacing)
    return ScalarVolume(dist, mask.spacing)


def edt(target: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Array-level variant of :func:`distance_transform` for boolean masks."""
    if not target.any():
        raise EmptyLabelError("empty mask")
    return ndimage.distance_transform_edt(~target, sampling=tuple(spacing))


# SVOL format -----------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_volume(vol: Volume, path: Union[str, Path]) -> None:
    if isinstance(vol, LabelVolume):
        tag = "u8"
    elif isinstance(vol, ScalarVolume):
        tag = "f32"
    else:
        raise TypeError(f"cannot write {type(vol).__name__}")
    header = (
        "svol 1\n"
        f"dims: {' '.join(str(d) for d in vol.shape)}\n"
        f"spacing: {' '.join(repr(float(s)) for s in vol.spacing)}\n"
        f"dtype: {tag}\n"
        "data:\n"
    )
    payload = np.ascontiguousarray(vol.data, dtype=_DTYPES[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def _header_line(buf: bytes, pos: int, lineno: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise SvolFormatError(f"line {lineno} (byte {pos}): unterminated header line")
    try:
        text = buf[pos:end].decode("ascii")
    except UnicodeDecodeError:
        raise SvolFormatError(f"line {lineno} (byte {pos}): header is not ASCII") from None
    return text.strip(), end + 1


def _field(text: str, key: str, lineno: int, pos: int) -> list[str]:
    prefix = key + ":"
    if not text.startswith(prefix):
        raise SvolFormatError(f"line {lineno} (byte {pos}): expected '{prefix}', got {text!r}")
    return text[len(prefix):].split()


def read_volume(path: Union[str, Path]) -> Volume:
    """Read an SVOL file; ``u8`` payloads give LabelVolume, ``f32`` ScalarVolume."""
    buf = Path(path).read_bytes()
    pos = 0
    starts = []
    lines = []
    for lineno in range(1, 6):
        starts.append(pos)
        text, pos = _header_line(buf, pos, lineno)
        lines.append(text)

    if lines[0] != "svol 1":
        raise SvolFormatError(f"line 1 (byte 0): bad magic {lines[0]!r}, expected 'svol 1'")
    try:
        dims = tuple(int(x) for x in _field(lines[1], "dims", 2, starts[1]))
    except ValueError:
        raise SvolFormatError(f"line 2 (byte {starts[1]}): dims must be integers") from None
    if len(dims) not in (2, 3) or any(d <= 0 for d in dims):
        raise SvolFormatError(f"line 2 (byte {starts[1]}): invalid dims {dims}")
    try:
        spacing = tuple(float(x) for x in _field(lines[2], "spacing", 3, starts[2]))
    except ValueError:
        raise SvolFormatError(f"line 3 (byte {starts[2]}): spacing must be numbers") from None
    if len(spacing) != len(dims) or not all(s > 0 for s in spacing):
        raise SvolFormatError(f"line 3 (byte {starts[2]}): invalid spacing {spacing}")
    dtype_tokens = _field(lines[3], "dtype", 4, starts[3])
    if len(dtype_tokens) != 1 or dtype_tokens[0] not in _DTYPES:
        raise SvolFormatError(f"line 4 (byte {starts[3]}): unknown dtype {' '.join(dtype_tokens)!r}")
    tag = dtype_tokens[0]
    if lines[4] != "data:":
        raise SvolFormatError(f"line 5 (byte {starts[4]}): expected 'data:', got {lines[4]!r}")

    dtype = _DTYPES[tag]
    count = int(np.prod(dims))
    expected = count * dtype.itemsize
    actual = len(buf) - pos
    if actual != expected:
        raise SvolFormatError(
            f"byte {pos}: payload has {actual} bytes, header declares "
            f"{count} x {tag} = {expected} bytes"
        )
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
    if tag == "u8":
        return LabelVolume(data, spacing)
    return ScalarVolume(data.astype(np.float32), spacing)


def read_pgm(path: Union[str, Path], spacing: Sequence[float] = (1.0, 1.0)) -> ScalarVolume:
    """Binary (P5) 8-bit PGM as a 2D ScalarVolume."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SvolFormatError(f"byte {pos}: truncated PGM header")
        tokens.append(buf[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise SvolFormatError(f"byte 0: not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise SvolFormatError(f"byte {pos}: only 8-bit PGM is supported (maxval {maxval})")
    pos += 1
    data = np.frombuffer(buf, dtype=np.uint8, offset=pos)
    if data.size != width * height:
        raise SvolFormatError(f"byte {pos}: expected {width * height} pixels, found {data.size}")
    return ScalarVolume(data.reshape(height, width).astype(np.float32), spacing)
