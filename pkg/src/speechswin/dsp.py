"""Log-Mel spectrogram front end: pre-emphasis, STFT power, Mel bank, segmentation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import List

import numpy as np


class TooShortError(ValueError):
    """The clip holds fewer samples than one analysis window."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioClip needs a non-empty 1-D sample array")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")


@dataclass(frozen=True)
class DSPConfig:
    sample_rate: int = 16000
    pre_emphasis: float = 0.97
    win_ms: float = 20.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 32
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-10
    seg_len: int = 128
    min_partial: int = 64

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000.0))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        """SHA-256 over the canonical JSON form; threads through caches and checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


@dataclass
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    fmin_hz: float
    fmax_hz: float
    center_hz: np.ndarray = field(default_factory=lambda: np.zeros(0))
    center_bins: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def pre_emphasis(clip: AudioClip, alpha: float = 0.97) -> AudioClip:
    x = clip.samples
    y = np.empty_like(x)
    y[0] = x[0]
    y[1:] = x[1:] - alpha * x[:-1]
    return AudioClip(y, clip.sample_rate_hz)


def hamming(n: int) -> np.ndarray:
    """Periodic Hamming window of length ``n``."""
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, win_length: int, hop_length: int) -> np.ndarray:
    if x.size < win_length:
        raise TooShortError(f"clip has {x.size} samples, need at least {win_length}")
    n_frames = 1 + (x.size - win_length) // hop_length
    return np.lib.stride_tricks.sliding_window_view(x, win_length)[::hop_length][:n_frames]


def stft_power(clip: AudioClip, win_ms: float = 20.0, hop_ms: float = 10.0, n_fft: int = 512) -> np.ndarray:
    """Hamming-windowed power spectrogram, shape ``(frames, n_fft // 2 + 1)``."""
    sr = clip.sample_rate_hz
    win = int(round(sr * win_ms / 1000.0))
    hop = int(round(sr * hop_ms / 1000.0))
    if win > n_fft:
        raise ValueError(f"window of {win} samples exceeds n_fft={n_fft}")
    frames = frame_signal(clip.samples, win, hop) * hamming(win)
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def mel_filterbank(
    n_mels: int = 32, n_fft: int = 512, sr: int = 16000, fmin: float = 0.0, fmax: float = 8000.0
) -> MelFilterbank:
    """Triangular HTK-Mel filters peaking at exactly 1 on their (rounded) center bins."""
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    if not 0.0 <= fmin < fmax <= sr / 2.0:
        raise ValueError(f"invalid Mel range [{fmin}, {fmax}] for sample rate {sr}")
    n_bins = n_fft // 2 + 1
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    edge_bins = np.round(edges_hz * n_fft / sr).astype(int)
    if np.any(np.diff(edge_bins) <= 0):
        raise ValueError(f"{n_mels} Mel bands are too narrow for n_fft={n_fft}: center bins collide")
    weights = np.zeros((n_mels, n_bins))
    k = np.arange(n_bins)
    for m in range(n_mels):
        left, center, right = edge_bins[m], edge_bins[m + 1], edge_bins[m + 2]
        rise = (k - left) / (center - left)
        fall = (right - k) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rise, fall))
    return MelFilterbank(weights, float(fmin), float(fmax), edges_hz[1:-1], edge_bins[1:-1])


def log_mel(power: np.ndarray, fb: MelFilterbank, floor: float = 1e-10) -> np.ndarray:
    """Natural-log Mel energies, shape ``(frames, n_mels)``."""
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.weights.shape[1]:
        raise ValueError(f"power spectrum has {power.shape[-1]} bins, filterbank expects {fb.weights.shape[1]}")
    # Row-wise reduction keeps each frame's result independent of its position.
    mel = np.einsum("tk,mk->tm", power, fb.weights, optimize=False)
    return np.log(np.maximum(mel, floor))


def segment(frames: np.ndarray, seg_len: int = 128, min_partial: int = 64) -> List[np.ndarray]:
    """Cut ``(T, f)`` frames into non-overlapping ``(f, seg_len)`` segments.

    A trailing chunk of at least ``min_partial`` frames is zero-padded; shorter
    remainders are dropped.
    """
    frames = np.asarray(frames)
    out = []
    for start in range(0, frames.shape[0], seg_len):
        chunk = frames[start : start + seg_len]
        if chunk.shape[0] < seg_len:
            if chunk.shape[0] < min_partial:
                break
            pad = np.zeros((seg_len - chunk.shape[0], frames.shape[1]), dtype=frames.dtype)
            chunk = np.concatenate([chunk, pad], axis=0)
        out.append(np.ascontiguousarray(chunk.T))
    return out


_FB_CACHE: dict = {}


def _filterbank_for(cfg: DSPConfig) -> MelFilterbank:
    key = (cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    return _FB_CACHE[key]


def log_mel_frames(clip: AudioClip, cfg: DSPConfig = DSPConfig()) -> np.ndarray:
    if clip.sample_rate_hz != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz audio, got {clip.sample_rate_hz} Hz (no resampling)")
    emphasized = pre_emphasis(clip, cfg.pre_emphasis)
    power = stft_power(emphasized, cfg.win_ms, cfg.hop_ms, cfg.n_fft)
    return log_mel(power, _filterbank_for(cfg), cfg.log_floor)


def extract_segments(clip: AudioClip, cfg: DSPConfig = DSPConfig()) -> np.ndarray:
    """Full pipeline for one clip; returns float32 ``(n_segments, 1, n_mels, seg_len)``."""
    segs = segment(log_mel_frames(clip, cfg), cfg.seg_len, cfg.min_partial)
    if not segs:
        return np.zeros((0, 1, cfg.n_mels, cfg.seg_len), dtype=np.float32)
    return np.stack(segs)[:, None].astype(np.float32)
