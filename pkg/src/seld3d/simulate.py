"""Deterministic free-field scene generator for FOA and binaural audio.

Sources are class-tagged synthetic waveforms placed on static or linearly
moving trajectories. FOA uses analytic first-order SN3D encoding; binaural
uses a spherical-head model (Woodworth ITD plus a broadband ILD). Both apply
a 1/d distance gain relative to 1 m.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import NUM_CLASSES, NUM_TRACKS, ClipSpec, EventRecord, format_metadata, wrap_azimuth
from .tensorio import write_wav

HEAD_RADIUS = 0.0875
SPEED_OF_SOUND = 343.0
ILD_SLOPE_DB = 6.0
SOURCE_RMS = 0.1
MAX_POLYPHONY = 3
FLOOR_LEVEL = 0.5
SIGNAL_KINDS = ("noise", "am_tone", "tone_complex")


class BadTrajectory(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    seed: int = 0
    n_events: int = 4
    max_polyphony: int = MAX_POLYPHONY
    classes: tuple = tuple(range(NUM_CLASSES))
    distance_range: tuple = (0.5, 5.0)
    event_frames: tuple = (5, 30)  # label frames, inclusive
    elevation_range: tuple = (-45.0, 45.0)
    moving_fraction: float = 0.0
    max_speed: float = 30.0  # degrees per second
    snr_db: float = 40.0
    same_class_overlap: bool = True
    clip: ClipSpec = field(default_factory=ClipSpec)

    def validate(self):
        if not 0 <= self.n_events:
            raise ConfigError("n_events must be >= 0")
        if not 1 <= self.max_polyphony <= MAX_POLYPHONY:
            raise ConfigError(f"max_polyphony must be in 1..{MAX_POLYPHONY}")
        lo, hi = self.distance_range
        if not 0 < lo <= hi:
            raise ConfigError("distance range must be positive and ordered")
        a, b = self.event_frames
        if not 1 <= a <= b <= self.clip.label_frames:
            raise ConfigError("bad event length range")
        if not self.classes or any(not 0 <= c < NUM_CLASSES for c in self.classes):
            raise ConfigError("class ids out of range")


@dataclass
class Trajectory:
    """Per-label-frame positions of one event starting at ``start``."""
    start: int
    azimuth: np.ndarray
    elevation: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        self.azimuth = np.atleast_1d(np.asarray(self.azimuth, dtype=float))
        self.elevation = np.atleast_1d(np.asarray(self.elevation, dtype=float))
        self.distance = np.atleast_1d(np.asarray(self.distance, dtype=float))
        n = len(self.azimuth)
        if n == 0 or len(self.elevation) != n or len(self.distance) != n:
            raise BadTrajectory("trajectory arrays must be non-empty and equally long")
        if np.any(self.distance <= 0) or not np.all(np.isfinite(self.distance)):
            raise BadTrajectory("distance must stay positive")
        if self.start < 0:
            raise BadTrajectory("negative start frame")

    @classmethod
    def static(cls, azimuth, elevation, distance, n_frames, start=0):
        return cls(start, np.full(n_frames, azimuth), np.full(n_frames, elevation),
                   np.full(n_frames, distance))

    @property
    def n_frames(self):
        return len(self.azimuth)

    def unit_vectors(self):
        az, el = np.radians(self.azimuth), np.radians(self.elevation)
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def _frame_curve(values, traj, n_samples, clip):
    """Interpolate per-label-frame values to samples; anchors at frame centres."""
    hop = clip.label_hop_samples
    t_anchor = (traj.start + np.arange(traj.n_frames) + 0.5) * hop
    return np.interp(np.arange(n_samples), t_anchor, values)


def _check_len(source, traj, clip):
    if (traj.start + traj.n_frames) * clip.label_hop_samples > len(source) + clip.label_hop_samples - 1:
        raise BadTrajectory("trajectory extends beyond the source signal")


def encode_foa(source, traj: Trajectory, clip: ClipSpec = ClipSpec()) -> np.ndarray:
    """First-order SN3D encoding in ACN order (W, Y, Z, X), 1/d gain."""
    source = np.asarray(source, dtype=np.float64)
    _check_len(source, traj, clip)
    n = len(source)
    u = traj.unit_vectors()
    g = 1.0 / traj.distance
    gains = np.stack([g, g * u[:, 1], g * u[:, 2], g * u[:, 0]])
    return np.stack([source * _frame_curve(gi, traj, n, clip) for gi in gains])


def lateral_angle(azimuth, elevation):
    """Angle off the median plane in radians, positive towards +y (left)."""
    s = np.sin(np.radians(azimuth)) * np.cos(np.radians(elevation))
    return np.arcsin(np.clip(s, -1.0, 1.0))


def woodworth_itd(lateral, radius=HEAD_RADIUS, c=SPEED_OF_SOUND):
    """Signed ITD in seconds; positive when the left ear leads."""
    lat = np.asarray(lateral, dtype=float)
    return np.sign(lat) * (radius / c) * (np.abs(lat) + np.sin(np.abs(lat)))


def fractional_delay(x, delay, taps: int = 32):
    """Delay ``x`` by a per-sample ``delay`` (in samples) with a Hann-windowed sinc."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    delay = np.broadcast_to(np.asarray(delay, dtype=float), (n,))
    pos = np.arange(n) - delay
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    half = taps // 2
    k = np.arange(-half + 1, half + 1)
    idx = base[:, None] + k[None, :]
    off = k[None, :] - frac[:, None]
    h = np.sinc(off) * (0.5 + 0.5 * np.cos(np.pi * off / half))
    valid = (idx >= 0) & (idx < n)
    xs = np.where(valid, x[np.clip(idx, 0, n - 1)], 0.0)
    return (xs * h).sum(axis=1)


def render_binaural(source, traj: Trajectory, clip: ClipSpec = ClipSpec(),
                    radius=HEAD_RADIUS, c=SPEED_OF_SOUND, ild_slope=ILD_SLOPE_DB) -> np.ndarray:
    """Spherical-head rendering: (left, right) with ITD, ILD and 1/d gain.

    The far ear gets the whole ITD as delay; the ILD is split evenly in dB
    between the ears.
    """
    source = np.asarray(source, dtype=np.float64)
    _check_len(source, traj, clip)
    n = len(source)
    lat = lateral_angle(traj.azimuth, traj.elevation)
    itd = _frame_curve(woodworth_itd(lat, radius, c), traj, n, clip) * clip.sample_rate
    ild = _frame_curve(ild_slope * np.sin(lat), traj, n, clip)
    g = _frame_curve(1.0 / traj.distance, traj, n, clip)
    left = fractional_delay(source, np.maximum(-itd, 0.0)) * g * 10.0 ** (ild / 40.0)
    right = fractional_delay(source, np.maximum(itd, 0.0)) * g * 10.0 ** (-ild / 40.0)
    return np.stack([left, right])


def class_frequency(class_id: int) -> float:
    """Characteristic frequency of a class, log-spaced 300 Hz .. 4.8 kHz."""
    return 300.0 * 16.0 ** (class_id / (NUM_CLASSES - 1))


def class_signal_kind(class_id: int) -> str:
    return SIGNAL_KINDS[class_id % len(SIGNAL_KINDS)]


def source_signal(class_id, n_samples, rng, sample_rate=24000, kind=None, floor=FLOOR_LEVEL):
    """Class-tagged waveform normalized to ``SOURCE_RMS``.

    Every kind rides on a white broadband floor (``floor`` = floor RMS over
    the RMS of the tonal/band part) so that all bands carry direction cues.
    """
    kind = kind or class_signal_kind(class_id)
    f0 = class_frequency(class_id)
    t = np.arange(n_samples) / sample_rate
    if kind == "noise":
        spec = np.fft.rfft(rng.standard_normal(n_samples))
        f = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
        band = np.exp(-0.5 * (np.log2(np.maximum(f, 1.0) / f0) / 0.5) ** 2)
        x = np.fft.irfft(spec * band, n_samples)
    elif kind == "am_tone":
        fm = 4.0 + class_id
        x = (1.0 + 0.8 * np.sin(2 * np.pi * fm * t)) * np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif kind == "tone_complex":
        fund = f0 / 2.0
        x = np.zeros(n_samples)
        for h in range(1, 9):
            if h * fund < sample_rate / 2:
                x += np.sin(2 * np.pi * h * fund * t + rng.uniform(0, 2 * np.pi)) / h
    else:
        raise ConfigError(f"unknown signal kind {kind!r}")
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x = x / rms
    x = x + floor * rng.standard_normal(n_samples)
    rms = np.sqrt(np.mean(x ** 2))
    return x * (SOURCE_RMS / rms) if rms > 0 else x


@dataclass
class PlacedEvent:
    class_id: int
    track_id: int
    traj: Trajectory


def plan_scene(cfg: SceneConfig, rng):
    """Choose classes, spans and trajectories; enforces polyphony and track limits."""
    T = cfg.clip.label_frames
    active = np.zeros(T, dtype=int)
    tracks = np.zeros((NUM_CLASSES, NUM_TRACKS, T), dtype=bool)
    placed = []
    attempts = 0
    while len(placed) < cfg.n_events:
        attempts += 1
        if attempts > 200 * max(1, cfg.n_events):
            raise ConfigError("could not place events under the polyphony limit")
        length = int(rng.integers(cfg.event_frames[0], cfg.event_frames[1] + 1))
        start = int(rng.integers(0, T - length + 1))
        cls = int(rng.choice(cfg.classes))
        span = slice(start, start + length)
        if np.any(active[span] >= cfg.max_polyphony):
            continue
        free = [n for n in range(NUM_TRACKS) if not tracks[cls, n, span].any()]
        if not free or (not cfg.same_class_overlap and tracks[cls, :, span].any()):
            continue
        track = free[0]
        az0 = rng.uniform(-180.0, 180.0)
        el0 = rng.uniform(*cfg.elevation_range)
        dist = rng.uniform(*cfg.distance_range)
        if rng.random() < cfg.moving_fraction:
            speed = rng.uniform(-cfg.max_speed, cfg.max_speed) * cfg.clip.label_hop
            az = np.array([wrap_azimuth(az0 + speed * i) for i in range(length)])
        else:
            az = np.full(length, az0)
        # quantize to the metadata precision so files and audio agree exactly
        az = np.array([wrap_azimuth(round(a, 4)) for a in az])
        traj = Trajectory(start, az, np.full(length, round(el0, 4)), np.full(length, round(dist, 3)))
        active[span] += 1
        tracks[cls, track, span] = True
        placed.append(PlacedEvent(cls, track, traj))
    return placed


def scene_events(placed):
    events = []
    for p in placed:
        tr = p.traj
        for i in range(tr.n_frames):
            events.append(EventRecord(tr.start + i, p.class_id, p.track_id,
                                      float(tr.azimuth[i]), float(tr.elevation[i]),
                                      float(tr.distance[i])))
    return sorted(events)


def synth_scene(cfg: SceneConfig, formats=("foa", "binaural")):
    """Render one clip. Returns ``({format: channels x samples float32}, events)``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    clip = cfg.clip
    n = clip.n_samples
    hop = clip.label_hop_samples
    placed = plan_scene(cfg, rng)
    out = {}
    n_ch = {"foa": 4, "binaural": 2}
    for fmt in formats:
        if fmt not in n_ch:
            raise ConfigError(f"unknown format {fmt!r}")
        out[fmt] = np.zeros((n_ch[fmt], n))
    for p in placed:
        sig = np.zeros(n)
        a = p.traj.start * hop
        b = min(n, a + p.traj.n_frames * hop)
        sig[a:b] = source_signal(p.class_id, b - a, rng, clip.sample_rate)
        if "foa" in out:
            out["foa"] += encode_foa(sig, p.traj, clip)
        if "binaural" in out:
            out["binaural"] += render_binaural(sig, p.traj, clip)
    noise_rms = SOURCE_RMS * 10.0 ** (-cfg.snr_db / 20.0)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    if "foa" in out:
        # isotropic diffuse field: each SN3D dipole carries a third of the W power
        scale = noise_rms * np.array([1.0, 1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)])
        out["foa"] += scale[:, None] * noise_rng.standard_normal((4, n))
    if "binaural" in out:
        out["binaural"] += noise_rms * noise_rng.standard_normal((2, n))
    return {k: v.astype(np.float32) for k, v in out.items()}, scene_events(placed)


def clip_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def synth_dataset(cfg: SceneConfig, n_clips: int, out_dir, fmt="foa", n_events=None):
    """Write ``n_clips`` WAV + CSV pairs and ``manifest.csv``; existing clips are kept.

    ``n_events`` may be a callable ``rng -> int`` to vary the event count per
    clip. Returns the manifest rows ``(clip_id, seed, wav, csv)``.
    """
    out = Path(out_dir)
    (out / fmt).mkdir(parents=True, exist_ok=True)
    (out / "metadata").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_clips):
        clip_id = f"clip_{i:04d}"
        seed = clip_seed(cfg.seed, i)
        wav = out / fmt / f"{clip_id}.wav"
        meta = out / "metadata" / f"{clip_id}.csv"
        if not (wav.exists() and meta.exists()):
            c = replace(cfg, seed=seed)
            if callable(n_events):
                c = replace(c, n_events=int(n_events(np.random.default_rng(seed))))
            audio, events = synth_scene(c, formats=(fmt,))
            write_wav(wav, audio[fmt], cfg.clip.sample_rate)
            meta.write_bytes(format_metadata(events).encode("utf-8"))
        rows.append((clip_id, seed, f"{fmt}/{clip_id}.wav", f"metadata/{clip_id}.csv"))
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("clip_id", "seed", "path_wav", "path_csv"))
        w.writerows(rows)
    return rows


def read_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.DictReader(fh)
        return [(row["clip_id"], int(row["seed"]), path.parent / row["path_wav"],
                 path.parent / row["path_csv"]) for row in r]
