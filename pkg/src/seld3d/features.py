"""Input feature stacks for FOA and binaural clips.

FOA: 4 log-mel channels followed by 3 mel-aggregated intensity vector
channels (7 x 250 x 64). Binaural: log mean magnitude, sin/cos IPD and ILD on
the linear-frequency grid (4 x 250 x 512).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ClipSpec

EPS = 1e-8
ILD_CLAMP_DB = 40.0
N_MELS = 64


class EmptySignal(ValueError):
    pass


class ChannelCount(ValueError):
    pass


class BadConfig(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    format: str
    CH: int
    T: int
    F: int
    P: tuple

    @property
    def shape(self):
        return (self.CH, self.T, self.F)


FOA_SPEC = FeatureSpec("foa", 7, 250, 64, (4, 4, 2))
BINAURAL_SPEC = FeatureSpec("binaural", 4, 250, 512, (8, 8, 4))
SPECS = {"foa": FOA_SPEC, "binaural": BINAURAL_SPEC}


@dataclass
class FeatureTensor:
    spec: FeatureSpec
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape != self.spec.shape:
            raise ValueError(f"feature shape {self.data.shape} != {self.spec.shape}")


@dataclass
class FeatureConfig:
    clip: ClipSpec = field(default_factory=ClipSpec)
    mel_log: bool = True
    eps: float = EPS


def n_fft_for(clip: ClipSpec) -> int:
    n = 1
    while n < clip.win_length:
        n *= 2
    return n


def split_clips(audio, clip: ClipSpec = ClipSpec()):
    """Cut channels x samples audio into non-overlapping clips, zero-padding the last."""
    audio = np.atleast_2d(np.asarray(audio))
    n = clip.n_samples
    total = audio.shape[1]
    if total == 0:
        raise EmptySignal("no samples")
    out = []
    for start in range(0, total, n):
        seg = audio[:, start:start + n]
        if seg.shape[1] < n:
            seg = np.pad(seg, ((0, 0), (0, n - seg.shape[1])))
        out.append(seg)
    return out


def stft(signal, clip: ClipSpec = ClipSpec()) -> np.ndarray:
    """Hamming-windowed STFT of one clip, channels x T x 512, DC bin dropped.

    Frames start at multiples of the hop with no centering; the tail is
    zero-padded so that exactly ``clip.feature_frames`` frames come out.
    """
    x = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    if x.shape[1] == 0:
        raise EmptySignal("no samples")
    if x.shape[1] > clip.n_samples:
        raise ValueError(f"{x.shape[1]} samples exceed one clip; use split_clips first")
    win, hop, T = clip.win_length, clip.hop_length, clip.feature_frames
    nfft = n_fft_for(clip)
    need = (T - 1) * hop + win
    x = np.pad(x, ((0, 0), (0, need - x.shape[1])))
    idx = np.arange(T)[:, None] * hop + np.arange(win)[None, :]
    frames = x[:, idx] * np.hamming(win)
    spec = np.fft.rfft(frames, n=nfft, axis=-1)
    return spec[..., 1:]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def bin_frequencies(n_bins: int = 512, sample_rate: int = 24000) -> np.ndarray:
    nfft = 2 * n_bins
    return np.arange(1, n_bins + 1) * sample_rate / nfft


def mel_bank(n_mels: int = N_MELS, n_bins: int = 512, sample_rate: int = 24000) -> np.ndarray:
    """Triangular mel filters (n_mels x n_bins) over the retained STFT bins."""
    if not 0 < n_mels < n_bins:
        raise BadConfig(f"need 0 < n_mels < n_bins, got {n_mels}, {n_bins}")
    freqs = bin_frequencies(n_bins, sample_rate)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(up, down))
    if np.any(bank.sum(axis=1) <= 0):
        raise BadConfig("mel filter without any bin; lower n_mels")
    return bank


def intensity_vectors(spec, bank, eps: float = EPS) -> np.ndarray:
    """Normalized active intensity, 3 x T x n_mels, components ordered (x, y, z).

    ``spec`` holds FOA channels in ACN order (W, Y, Z, X). Each bin is
    normalized by |W|^2 + (|X|^2 + |Y|^2 + |Z|^2) / 3, then bands are a
    weighted average with the (row-normalized) mel filters.
    """
    spec = np.asarray(spec)
    if spec.shape[0] != 4:
        raise ChannelCount(f"FOA spectrogram needs 4 channels, got {spec.shape[0]}")
    W, Y, Z, X = spec
    energy = np.abs(W) ** 2 + (np.abs(X) ** 2 + np.abs(Y) ** 2 + np.abs(Z) ** 2) / 3.0 + eps
    cw = np.conj(W)
    iv = np.stack([np.real(cw * X), np.real(cw * Y), np.real(cw * Z)]) / energy
    weights = bank / bank.sum(axis=1, keepdims=True)
    return iv @ weights.T


def foa_features(audio, cfg: FeatureConfig = FeatureConfig()) -> FeatureTensor:
    audio = np.atleast_2d(np.asarray(audio))
    if audio.shape[0] != 4:
        raise ChannelCount(f"FOA audio needs 4 channels, got {audio.shape[0]}")
    spec = stft(audio, cfg.clip)
    bank = mel_bank(N_MELS, spec.shape[-1], cfg.clip.sample_rate)
    mel = (np.abs(spec) ** 2) @ bank.T
    if cfg.mel_log:
        mel = np.log(mel + cfg.eps)
    iv = intensity_vectors(spec, bank, cfg.eps)
    data = np.concatenate([mel, iv]).astype(np.float32)
    return FeatureTensor(FOA_SPEC, data)


def binaural_features(audio, cfg: FeatureConfig = FeatureConfig()) -> FeatureTensor:
    audio = np.atleast_2d(np.asarray(audio))
    if audio.shape[0] != 2:
        raise ChannelCount(f"binaural audio needs 2 channels, got {audio.shape[0]}")
    L, R = stft(audio, cfg.clip)
    mag_l, mag_r = np.abs(L), np.abs(R)
    logmag = np.log(0.5 * (mag_l + mag_r) + cfg.eps)
    ipd = np.angle(L) - np.angle(R)
    ild = 20.0 * np.log10((mag_l + cfg.eps) / (mag_r + cfg.eps))
    ild = np.clip(ild, -ILD_CLAMP_DB, ILD_CLAMP_DB)
    data = np.stack([logmag, np.sin(ipd), np.cos(ipd), ild]).astype(np.float32)
    return FeatureTensor(BINAURAL_SPEC, data)


def extract(audio, fmt: str, cfg: FeatureConfig = FeatureConfig()) -> FeatureTensor:
    if fmt == "foa":
        return foa_features(audio, cfg)
    if fmt == "binaural":
        return binaural_features(audio, cfg)
    raise BadConfig(f"unknown format {fmt!r}")
