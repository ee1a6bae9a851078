"""Raster stack container, the RST1 binary interchange format, and the fire catalog."""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RST1"
VERSION = 1

DEFAULT_CHANNELS = ("NDVI", "EVI", "LST", "FIREMASK", "PRECIP", "QA")

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


class FormatError(ValueError):
    """Malformed, truncated, or wrong-version RST1 payload."""


class CatalogError(ValueError):
    """Unparsable or invalid fire catalog row."""


@dataclass
class RasterStack:
    """A (t, row, col, channel) float32 grid with named channels and a missing mask.

    ``data`` and ``missing`` always share the shape (t_len, height, width,
    n_channels); ``missing`` marks values that must not be consumed before
    imputation.
    """

    channels: tuple[str, ...]
    data: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.data = np.asarray(self.data, dtype=np.float32)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.data.ndim != 4:
            raise ValueError(f"stack data must be 4-D, got shape {self.data.shape}")
        if self.missing.shape != self.data.shape:
            raise ValueError("missing mask shape must match data shape")
        if self.data.shape[3] != len(self.channels):
            raise ValueError(
                f"{len(self.channels)} channel names but data has "
                f"{self.data.shape[3]} channels"
            )

    @property
    def t_len(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_channels(self) -> int:
        return self.data.shape[3]

    def channel_index(self, name: str) -> int:
        try:
            return self.channels.index(name)
        except ValueError:
            raise KeyError(f"stack has no channel {name!r} (have {self.channels})") from None

    def channel(self, name: str) -> np.ndarray:
        """View of one channel, shape (t, h, w)."""
        return self.data[..., self.channel_index(name)]

    def copy(self) -> "RasterStack":
        return RasterStack(self.channels, self.data.copy(), self.missing.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterStack):
            return NotImplemented
        return (
            self.channels == other.channels
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.missing, other.missing)
        )


@dataclass(frozen=True)
class FireRecord:
    id: str
    name: str
    lon: float
    lat: float
    containment_month: str
    acres: float

    @property
    def start_month(self) -> int:
        """0-based calendar month index of containment."""
        m = _MONTH_RE.match(self.containment_month)
        if m is None:
            raise CatalogError(f"bad containment month {self.containment_month!r}")
        return int(m.group(2)) - 1


def step_month(start_month: int, t: int) -> int:
    """Calendar month (0-based) of time step ``t``, one step per month."""
    return (start_month + t) % 12


def write_stack(stack: RasterStack, path) -> None:
    """Serialize a stack to the RST1 binary layout.

    Layout: magic "RST1"; little-endian u32 version, t_len, height, width,
    n_channels; per channel a u16 name length plus UTF-8 bytes; float32 LE
    data in (t, row, col, channel) order; missing mask as packed bits in the
    same order.
    """
    t, h, w, c = stack.data.shape
    for extent in (t, h, w, c):
        if extent > 0xFFFFFFFF:
            raise FormatError(f"dimension {extent} overflows u32")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", VERSION, t, h, w, c))
        for name in stack.channels:
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise FormatError(f"channel name too long: {name!r}")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
        f.write(np.packbits(stack.missing.reshape(-1)).tobytes())


def read_stack(path) -> RasterStack:
    """Inverse of :func:`write_stack`; raises :class:`FormatError` on bad input."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 24:
        raise FormatError("truncated header")
    version, t, h, w, c = struct.unpack_from("<5I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported RST1 version {version}")
    off = 24
    channels = []
    for _ in range(c):
        if off + 2 > len(blob):
            raise FormatError("truncated channel table")
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + nlen > len(blob):
            raise FormatError("truncated channel name")
        channels.append(blob[off : off + nlen].decode("utf-8"))
        off += nlen
    n_vals = t * h * w * c
    data_bytes = n_vals * 4
    mask_bytes = (n_vals + 7) // 8
    if len(blob) - off < data_bytes + mask_bytes:
        raise FormatError(
            f"payload truncated: header promises {data_bytes + mask_bytes} bytes, "
            f"file carries {len(blob) - off}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=n_vals, offset=off).reshape(t, h, w, c)
    off += data_bytes
    bits = np.frombuffer(blob, dtype=np.uint8, count=mask_bytes, offset=off)
    missing = np.unpackbits(bits, count=n_vals).astype(bool).reshape(t, h, w, c)
    return RasterStack(tuple(channels), data.copy(), missing)


CATALOG_HEADER = ["id", "name", "lon", "lat", "containment_month", "acres"]


def read_catalog(path) -> list[FireRecord]:
    """Parse a fire catalog CSV, validating every row.

    Columns: id, name, lon, lat, containment_month (YYYY-MM), acres.
    Raises :class:`CatalogError` with the offending line number.
    """
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CATALOG_HEADER:
            raise CatalogError(f"bad catalog header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise CatalogError(f"line {lineno}: expected 6 fields, got {len(row)}")
            fid, name, lon_s, lat_s, month, acres_s = row
            try:
                lon, lat, acres = float(lon_s), float(lat_s), float(acres_s)
            except ValueError as e:
                raise CatalogError(f"line {lineno}: {e}") from None
            if not -180.0 <= lon <= 180.0:
                raise CatalogError(f"line {lineno}: longitude {lon} out of range")
            if not -90.0 <= lat <= 90.0:
                raise CatalogError(f"line {lineno}: latitude {lat} out of range")
            if acres < 3000.0:
                raise CatalogError(
                    f"line {lineno}: burn area {acres} below the 3000-acre inclusion floor"
                )
            rec = FireRecord(fid, name, lon, lat, month, acres)
            rec.start_month  # validates the month format
            records.append(rec)
    return records


def write_catalog(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CATALOG_HEADER)
        for r in records:
            writer.writerow([r.id, r.name, f"{r.lon:.6f}", f"{r.lat:.6f}", r.containment_month, f"{r.acres:.1f}"])
