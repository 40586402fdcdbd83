"""Shared vocabulary, spherical geometry and metadata CSV I/O.

Angles follow the usual Ambisonics frame: azimuth counterclockwise from +x
(so +90 points to +y, the listener's left), elevation up from the horizontal
plane. Poles get azimuth 0.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLASS_NAMES = (
    "female speech",
    "male speech",
    "clapping",
    "telephone",
    "laughter",
    "domestic sounds",
    "footsteps",
    "door",
    "music",
    "musical instrument",
    "water tap",
    "bell",
    "knock",
)
NUM_CLASSES = len(CLASS_NAMES)
NUM_TRACKS = 3

METADATA_HEADER = ("frame", "class", "track", "azimuth", "elevation", "distance")


class ZeroVector(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class RangeError(ValueError):
    def __init__(self, field: str, value, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field} out of range: {value!r}")
        self.field = field
        self.value = value
        self.line = line


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple = CLASS_NAMES

    def __post_init__(self):
        if len(self.names) != NUM_CLASSES:
            raise ValueError(f"expected {NUM_CLASSES} classes, got {len(self.names)}")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(frozen=True)
class ClipSpec:
    sample_rate: int = 24000
    stft_win: float = 0.040
    stft_hop: float = 0.020
    feature_frames: int = 250
    label_hop: float = 0.100
    label_frames: int = 50

    def __post_init__(self):
        a = self.feature_frames * self.stft_hop
        b = self.label_frames * self.label_hop
        if not math.isclose(a, b, rel_tol=1e-9):
            raise ValueError(f"feature span {a} s != label span {b} s")

    @property
    def win_length(self) -> int:
        return int(round(self.stft_win * self.sample_rate))

    @property
    def hop_length(self) -> int:
        return int(round(self.stft_hop * self.sample_rate))

    @property
    def label_hop_samples(self) -> int:
        return int(round(self.label_hop * self.sample_rate))

    @property
    def n_samples(self) -> int:
        return self.label_frames * self.label_hop_samples

    @property
    def duration(self) -> float:
        return self.label_frames * self.label_hop

    @property
    def pool(self) -> int:
        return self.feature_frames // self.label_frames


def wrap_azimuth(az: float) -> float:
    """Map any angle in degrees to [-180, 180); in-range values pass unchanged."""
    if -180.0 <= az < 180.0:
        return az
    return (az + 180.0) % 360.0 - 180.0


@dataclass(frozen=True, order=True)
class EventRecord:
    frame: int
    class_id: int
    track_id: int
    azimuth: float
    elevation: float
    distance: float

    def __post_init__(self):
        validate_event(self)

    @property
    def key(self):
        return (self.frame, self.class_id, self.track_id)

    def unit(self) -> np.ndarray:
        return sph_to_unit(self.azimuth, self.elevation)


def validate_event(ev: EventRecord, line: int | None = None):
    if ev.frame < 0:
        raise RangeError("frame", ev.frame, line)
    if not 0 <= ev.class_id < NUM_CLASSES:
        raise RangeError("class", ev.class_id, line)
    if not 0 <= ev.track_id < NUM_TRACKS:
        raise RangeError("track", ev.track_id, line)
    if not (math.isfinite(ev.azimuth) and -180.0 <= ev.azimuth < 180.0):
        raise RangeError("azimuth", ev.azimuth, line)
    if not (math.isfinite(ev.elevation) and -90.0 <= ev.elevation <= 90.0):
        raise RangeError("elevation", ev.elevation, line)
    if not (math.isfinite(ev.distance) and ev.distance > 0.0):
        raise RangeError("distance", ev.distance, line)


def sph_to_unit(azimuth: float, elevation: float) -> np.ndarray:
    az = math.radians(wrap_azimuth(float(azimuth)))
    # elevation beyond the poles folds back over the top
    el = math.radians(float(elevation))
    ce = math.cos(el)
    return np.array([ce * math.cos(az), ce * math.sin(az), math.sin(el)])


def unit_to_sph(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=float)
    n = float(np.linalg.norm(v))
    if n < 1e-9:
        raise ZeroVector("cannot take the direction of a zero vector")
    x, y, z = v / n
    el = math.degrees(math.asin(max(-1.0, min(1.0, z))))
    if math.hypot(x, y) < 1e-12:
        return 0.0, el
    return wrap_azimuth(math.degrees(math.atan2(y, x))), el


def angular_distance(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-9 or nv < 1e-9:
        raise ZeroVector("angular distance needs non-zero vectors")
    c = float(np.dot(u, v) / (nu * nv))
    return math.degrees(math.acos(max(-1.0, min(1.0, c))))


def _parse_row(row, lineno):
    if len(row) != 6:
        raise ParseError(lineno, f"expected 6 fields, got {len(row)}")
    try:
        frame, cls, track = (int(x) for x in row[:3])
    except ValueError as exc:
        raise ParseError(lineno, f"bad integer field: {exc}") from None
    try:
        az, el, dist = (float(x) for x in row[3:])
    except ValueError as exc:
        raise ParseError(lineno, f"bad decimal field: {exc}") from None
    try:
        ev = EventRecord(frame, cls, track, az, el, dist)
    except RangeError as exc:
        raise RangeError(exc.field, getattr(exc, "value", None), lineno) from None
    return ev


def parse_metadata(text: str) -> list[EventRecord]:
    events = []
    seen = set()
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip() == "frame":
            if tuple(c.strip() for c in row) != METADATA_HEADER:
                raise ParseError(lineno, f"unexpected header {row}")
            continue
        ev = _parse_row([c.strip() for c in row], lineno)
        if ev.key in seen:
            raise ParseError(lineno, f"duplicate (frame, class, track) {ev.key}")
        seen.add(ev.key)
        events.append(ev)
    return sorted(events)


def read_metadata(path) -> list[EventRecord]:
    return parse_metadata(Path(path).read_text(encoding="utf-8"))


def _fmt_angle(x: float, wrap: bool = False) -> str:
    x = round(x, 4)
    if wrap and x >= 180.0:
        x -= 360.0
    s = f"{x:.4f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def format_metadata(events) -> str:
    lines = [",".join(METADATA_HEADER)]
    for ev in sorted(events):
        lines.append(
            f"{ev.frame},{ev.class_id},{ev.track_id},"
            f"{_fmt_angle(ev.azimuth, wrap=True)},{_fmt_angle(ev.elevation)},{ev.distance:.3f}"
        )
    return "\n".join(lines) + "\n"


def write_metadata(events, path):
    Path(path).write_bytes(format_metadata(events).encode("utf-8"))
