"""Event streams, the ``.evb`` container, voxelization and sub-voxel cropping.

Conventions used throughout the package:

* pixel ``x`` covers the continuous interval ``[x, x + 1)``, so a box centred
  on the middle of pixel ``(x, y)`` has ``cx = x + 0.5``;
* voxels are binary ``uint8`` arrays laid out ``[polarity, H, W, T]`` with the
  oldest time bin at index 0.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

MAGIC = b"EVB1"
HEADER = struct.Struct("<4sHHQ")
RECORD_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert HEADER.size == 16 and RECORD_DTYPE.itemsize == 13

TEMPLATE_SIZE = 127
SEARCH_SIZE = 255


class FormatError(ValueError):
    """File is not a readable ``.evb`` container (bad magic, version, truncation)."""


class CorruptStream(ValueError):
    """Event records violate the stream invariants."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"record {index}: {message}")
        self.index = index


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered polarity events on a ``width x height`` sensor.

    Stored column-wise; iterating yields :class:`Event` tuples.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.int64)
        p = np.asarray(self.p, dtype=np.int64)
        n = len(t)
        if not (len(x) == len(y) == len(p) == n):
            raise ValueError("event columns differ in length")
        if n:
            if t.min() < 0:
                raise CorruptStream("negative timestamp", int(np.argmax(t < 0)))
            back = np.flatnonzero(np.diff(t) < 0)
            if back.size:
                raise CorruptStream("timestamp decreases", int(back[0]) + 1)
            bad = np.flatnonzero((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height))
            if bad.size:
                raise CorruptStream(
                    f"coordinate outside {self.width}x{self.height} sensor", int(bad[0])
                )
            badp = np.flatnonzero((p != 0) & (p != 1))
            if badp.size:
                raise CorruptStream("polarity is not a single bit", int(badp[0]))
        object.__setattr__(self, "t", _frozen(t))
        object.__setattr__(self, "x", _frozen(x.astype(np.uint16)))
        object.__setattr__(self, "y", _frozen(y.astype(np.uint16)))
        object.__setattr__(self, "p", _frozen(p.astype(np.uint8)))

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(width, height, z, z, z, z)

    @classmethod
    def from_events(cls, width: int, height: int, events) -> "EventStream":
        rows = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def window(self, t0: int, t1: int) -> slice:
        """Index slice of events with ``t0 <= t < t1``."""
        lo = int(np.searchsorted(self.t, t0, side="left"))
        hi = int(np.searchsorted(self.t, t1, side="left"))
        return slice(lo, hi)

    @property
    def duration(self) -> int:
        return int(self.t[-1]) if len(self) else 0


def write_events(stream: EventStream, path: str | os.PathLike) -> None:
    records = np.empty(len(stream), dtype=RECORD_DTYPE)
    records["t"] = stream.t
    records["x"] = stream.x
    records["y"] = stream.y
    records["p"] = stream.p
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, stream.width, stream.height, len(stream)))
        f.write(records.tobytes())


def read_events(path: str | os.PathLike) -> EventStream:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: shorter than the 16-byte header")
    magic, width, height, count = HEADER.unpack_from(raw)
    if magic[:3] == b"EVB" and magic != MAGIC:
        raise FormatError(f"{path}: unsupported container version {magic!r}")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[HEADER.size:]
    if len(body) != count * RECORD_DTYPE.itemsize:
        raise FormatError(
            f"{path}: header declares {count} records but payload holds "
            f"{len(body) / RECORD_DTYPE.itemsize:g}"
        )
    rec = np.frombuffer(body, dtype=RECORD_DTYPE)
    return EventStream(width, height, rec["t"], rec["x"], rec["y"], rec["p"])


@dataclass(frozen=True, eq=False)
class EventVoxel:
    """Binary ``[2, H, W, T]`` tensor covering ``[t_end - T*granularity, t_end)``."""

    data: np.ndarray
    t_end: int
    granularity_us: int

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 2:
            raise ValueError(f"voxel data must be [2,H,W,T], got {self.data.shape}")
        if self.granularity_us < 1:
            raise ValueError("granularity must be >= 1 us")

    @property
    def duration_bins(self) -> int:
        return self.data.shape[3]

    @property
    def window_us(self) -> int:
        return self.duration_bins * self.granularity_us

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def voxelize(stream: EventStream, t_end: int, bins: int, granularity_us: int) -> EventVoxel:
    """Binary voxel of the ``bins * granularity_us`` window ending (exclusive) at ``t_end``.

    Bin ``b`` covers ``[t_end - (bins-b)*g, t_end - (bins-b-1)*g)``; repeated events
    in one cell collapse to 1.
    """
    if bins < 1 or granularity_us < 1:
        raise ValueError("bins and granularity must be >= 1")
    t_start = t_end - bins * granularity_us
    data = np.zeros((2, stream.height, stream.width, bins), dtype=np.uint8)
    sl = stream.window(max(t_start, 0), t_end)
    if sl.stop > sl.start:
        b = (stream.t[sl] - t_start) // granularity_us
        data[stream.p[sl], stream.y[sl], stream.x[sl], b] = 1
    return EventVoxel(data, int(t_end), int(granularity_us))


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w} h={self.h}")

    @classmethod
    def from_ltwh(cls, left: float, top: float, w: float, h: float) -> "Box":
        return cls(left + w / 2.0, top + h / 2.0, w, h)

    @property
    def left(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def top(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def right(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def bottom(self) -> float:
        return self.cy + self.h / 2.0

    def ltwh(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.w, self.h)

    def corners(self) -> np.ndarray:
        l, t, r, b = self.left, self.top, self.right, self.bottom
        return np.array([[l, t], [r, t], [r, b], [l, b]], dtype=np.float64)

    def moved(self, cx: float, cy: float) -> "Box":
        return Box(cx, cy, self.w, self.h)


@dataclass(frozen=True, eq=False)
class SubVoxel:
    """Template (127) or search (255) crop of an event voxel, ``[2, S, S, T]``."""

    data: np.ndarray

    def __post_init__(self):
        s = self.data.shape
        if len(s) != 4 or s[0] != 2 or s[1] != s[2] or s[1] not in (TEMPLATE_SIZE, SEARCH_SIZE):
            raise ValueError(f"sub-voxel must be [2,127,127,T] or [2,255,255,T], got {s}")

    @property
    def size(self) -> int:
        return self.data.shape[1]


def crop_side(box: Box, context: float) -> float:
    return context * max(box.w, box.h)


def _sample_indices(center: float, side: float, out_size: int, limit: int):
    # nearest neighbour: output cell i samples the source pixel containing the
    # centre of its footprint
    step = side / out_size
    coords = center - side / 2.0 + (np.arange(out_size) + 0.5) * step
    idx = np.floor(coords).astype(np.int64)
    valid = (idx >= 0) & (idx < limit)
    return np.clip(idx, 0, limit - 1), valid


def crop_rescale(voxel: EventVoxel, box: Box, context: float, out_size: int) -> SubVoxel:
    """Square crop of side ``context * max(w, h)`` around the box centre, resized
    to ``out_size`` by nearest neighbour. Off-sensor area reads as zeros."""
    if context < 1:
        raise ValueError("context factor must be >= 1")
    if out_size not in (TEMPLATE_SIZE, SEARCH_SIZE):
        raise ValueError(f"out_size must be 127 or 255, got {out_size}")
    side = crop_side(box, context)
    ix, vx = _sample_indices(box.cx, side, out_size, voxel.width)
    iy, vy = _sample_indices(box.cy, side, out_size, voxel.height)
    out = voxel.data[:, iy[:, None], ix[None, :], :]
    mask = vy[:, None] & vx[None, :]
    if not mask.all():
        out[:, ~mask, :] = 0
    return SubVoxel(out)


def render_event_frame(stream: EventStream, t0: int, t1: int) -> np.ndarray:
    """``[3, H, W]`` uint8 frame: red marks positive events in ``[t0, t1)``, green negative."""
    if t0 > t1:
        raise ValueError("t0 must not exceed t1")
    img = np.zeros((3, stream.height, stream.width), dtype=np.uint8)
    sl = stream.window(t0, t1)
    p = stream.p[sl]
    # channel 0 (red) for p=1, channel 1 (green) for p=0
    img[1 - p.astype(np.int64), stream.y[sl], stream.x[sl]] = 1
    return img
