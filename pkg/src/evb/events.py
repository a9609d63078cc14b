"""Event data model, file I/O, temporal slicing, and voxelization.

Events are kept as parallel column arrays (timestamp, x, y, polarity)
rather than per-event objects; every operation in the toolkit works on
whole streams.  Timestamps are integer microseconds throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

#: Intensity floor used when mapping images into the log domain.
DEFAULT_LOG_EPS = 1.0 / 255.0

EVT1_MAGIC = b"EVT1"
# (u64 t_us, u16 x, u16 y, i8 p, 3 pad bytes) = 16 bytes, little-endian.
EVT1_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "V3")])
EVT1_HEADER_LEN = len(EVT1_MAGIC) + 2 + 2 + 8


class EventFileError(Exception):
    """Malformed event file: bad magic, header, or record."""


class Event(NamedTuple):
    """A single sensor event: pixel (x, y), timestamp t in µs, polarity ±1."""

    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-sorted events over a fixed (width, height) geometry.

    ``t`` is int64 microseconds, ``x``/``y`` int32 pixel coordinates,
    ``p`` int8 polarity in {-1, +1}.  Instances are treated as immutable
    values; operations return new streams.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    # Set by load_events when the source file was out of order.
    sorted_on_load: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.int64))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.int32))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int32))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=np.int8))
        n = self.t.size
        if not (self.x.size == self.y.size == self.p.size == n):
            raise ValueError("event columns must have equal length")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid geometry {self.width}x{self.height}")
        if n:
            if not np.all((self.p == 1) | (self.p == -1)):
                raise ValueError("polarity must be -1 or +1")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise ValueError("event x coordinate outside geometry")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise ValueError("event y coordinate outside geometry")
            if np.any(np.diff(self.t) < 0):
                raise ValueError("event timestamps must be non-decreasing")

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        z: list[int] = []
        return cls(width, height, np.array(z), np.array(z), np.array(z), np.array(z))

    @classmethod
    def from_records(cls, width: int, height: int, records: Iterable[Event]) -> "EventStream":
        recs = list(records)
        if not recs:
            return cls.empty(width, height)
        xs, ys, ts, ps = zip(*recs)
        order = np.lexsort((np.asarray(xs), np.asarray(ys), np.asarray(ts)))
        return cls(
            width,
            height,
            np.asarray(ts)[order],
            np.asarray(xs)[order],
            np.asarray(ys)[order],
            np.asarray(ps)[order],
        )

    def __len__(self) -> int:
        return int(self.t.size)

    def __iter__(self) -> Iterator[Event]:
        for i in range(len(self)):
            yield Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    @property
    def events(self) -> list[Event]:
        return list(self)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )


@dataclass(frozen=True)
class VoxelGrid:
    """Events of a time window merged into ``bins`` temporal channels.

    ``values`` is a (bins, H, W) int32 array of signed polarity counts;
    it stays exact integers here, any normalization for network input
    happens downstream.
    """

    bins: int
    t_start: int
    t_end: int
    values: np.ndarray

    @property
    def window(self) -> tuple[int, int]:
        return (self.t_start, self.t_end)


@dataclass(frozen=True)
class IntensityFrame:
    """H×W grayscale image with values clamped to [0, 1] and a timestamp in µs."""

    pixels: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class LogFrame:
    """H×W log-intensity map, L = log(max(I, epsilon))."""

    pixels: np.ndarray
    epsilon: float = DEFAULT_LOG_EPS

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]


def log_frame(frame: IntensityFrame, epsilon: float = DEFAULT_LOG_EPS) -> LogFrame:
    """Map an intensity frame into the log domain with floor ``epsilon``."""
    return LogFrame(np.log(np.maximum(frame.pixels, epsilon)), epsilon)


def to_intensity(lframe: LogFrame, t: int = 0) -> IntensityFrame:
    """Map a log frame back to clamped intensity."""
    return IntensityFrame(np.clip(np.exp(lframe.pixels), 0.0, 1.0), t)


def load_events(path: str | Path) -> EventStream:
    """Load an event stream from a CSV or EVT1 binary file.

    The format is sniffed from the leading magic bytes.  Out-of-order
    input is sorted and flagged via ``stream.sorted_on_load``.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == EVT1_MAGIC:
        return _load_evt1(path)
    return _load_csv(path)


def save_events(stream: EventStream, path: str | Path, format: str | None = None) -> None:
    """Write ``stream`` to ``path`` in ``format`` ("csv" or "evt1").

    With ``format=None`` the file suffix decides.  Round trips through
    either format are bit-exact.
    """
    path = Path(path)
    if format is None:
        format = path.suffix.lstrip(".").lower() or "csv"
    if format == "csv":
        _save_csv(stream, path)
    elif format == "evt1":
        _save_evt1(stream, path)
    else:
        raise ValueError(f"unknown event file format {format!r}")


def _load_csv(path: Path) -> EventStream:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline()
        if not header.strip():
            raise EventFileError(f"{path}:1: missing width,height header")
        try:
            w_s, h_s = header.strip().split(",")
            width, height = int(w_s), int(h_s)
        except ValueError as exc:
            raise EventFileError(f"{path}:1: bad header {header.strip()!r}") from exc
        ts: list[int] = []
        xs: list[int] = []
        ys: list[int] = []
        ps: list[int] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                t_s, x_s, y_s, p_s = line.split(",")
                ts.append(int(t_s))
                xs.append(int(x_s))
                ys.append(int(y_s))
                ps.append(int(p_s))
            except ValueError as exc:
                raise EventFileError(f"{path}:{lineno}: bad record {line!r}") from exc
    return _build_sorted(width, height, ts, xs, ys, ps, str(path))


def _save_csv(stream: EventStream, path: Path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{stream.width},{stream.height}\n")
        for i in range(len(stream)):
            fh.write(f"{stream.t[i]},{stream.x[i]},{stream.y[i]},{stream.p[i]}\n")


def _load_evt1(path: Path) -> EventStream:
    raw = path.read_bytes()
    if len(raw) < EVT1_HEADER_LEN:
        raise EventFileError(f"{path}: truncated EVT1 header ({len(raw)} bytes)")
    if raw[:4] != EVT1_MAGIC:
        raise EventFileError(f"{path}: bad magic {raw[:4]!r}")
    width = int(np.frombuffer(raw, "<u2", count=1, offset=4)[0])
    height = int(np.frombuffer(raw, "<u2", count=1, offset=6)[0])
    count = int(np.frombuffer(raw, "<u8", count=1, offset=8)[0])
    body = raw[EVT1_HEADER_LEN:]
    expected = count * EVT1_RECORD.itemsize
    if len(body) != expected:
        raise EventFileError(
            f"{path}: expected {expected} record bytes at offset {EVT1_HEADER_LEN}, got {len(body)}"
        )
    recs = np.frombuffer(body, dtype=EVT1_RECORD)
    return _build_sorted(
        width,
        height,
        recs["t"].astype(np.int64),
        recs["x"].astype(np.int64),
        recs["y"].astype(np.int64),
        recs["p"].astype(np.int64),
        str(path),
    )


def _save_evt1(stream: EventStream, path: Path) -> None:
    recs = np.zeros(len(stream), dtype=EVT1_RECORD)
    recs["t"] = stream.t
    recs["x"] = stream.x
    recs["y"] = stream.y
    recs["p"] = stream.p
    header = (
        EVT1_MAGIC
        + np.uint16(stream.width).tobytes()
        + np.uint16(stream.height).tobytes()
        + np.uint64(len(stream)).tobytes()
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(recs.tobytes())


def _build_sorted(width, height, ts, xs, ys, ps, origin: str) -> EventStream:
    t = np.asarray(ts, dtype=np.int64)
    was_unsorted = bool(t.size) and bool(np.any(np.diff(t) < 0))
    x = np.asarray(xs, dtype=np.int64)
    y = np.asarray(ys, dtype=np.int64)
    p = np.asarray(ps, dtype=np.int64)
    if was_unsorted:
        logger.warning("%s: events out of order, sorting on load", origin)
        order = np.lexsort((x, y, t))
        t, x, y, p = t[order], x[order], y[order], p[order]
    return EventStream(width, height, t, x, y, p, sorted_on_load=was_unsorted)


def slice_events(stream: EventStream, t_start: int, t_end: int) -> EventStream:
    """Events with t_start <= t < t_end, order preserved (half-open)."""
    if t_start >= t_end:
        raise ValueError(f"inverted interval [{t_start}, {t_end})")
    lo = int(np.searchsorted(stream.t, t_start, side="left"))
    hi = int(np.searchsorted(stream.t, t_end, side="left"))
    return EventStream(
        stream.width, stream.height, stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi]
    )


def voxelize(stream: EventStream, window: tuple[int, int], n_bins: int) -> VoxelGrid:
    """Bin events of ``window`` into ``n_bins`` signed polarity-count channels.

    An event at t lands in bin min(floor(n_bins*(t-t0)/(t1-t0)), n_bins-1);
    events outside the half-open window are ignored.
    """
    t_start, t_end = int(window[0]), int(window[1])
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    if t_start >= t_end:
        raise ValueError(f"invalid window [{t_start}, {t_end})")
    values = np.zeros((n_bins, stream.height, stream.width), dtype=np.int32)
    inside = (stream.t >= t_start) & (stream.t < t_end)
    if np.any(inside):
        t = stream.t[inside]
        # Integer arithmetic keeps bin assignment exact.
        bins = (n_bins * (t - t_start)) // (t_end - t_start)
        bins = np.minimum(bins, n_bins - 1)
        np.add.at(values, (bins, stream.y[inside], stream.x[inside]), stream.p[inside])
    return VoxelGrid(n_bins, t_start, t_end, values)


def polarity_counts(stream: EventStream) -> tuple[int, int]:
    """Number of positive and negative events, in that order."""
    n_pos = int(np.count_nonzero(stream.p == 1))
    return n_pos, len(stream) - n_pos
