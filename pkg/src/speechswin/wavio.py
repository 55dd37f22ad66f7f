"""16-bit PCM mono WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .dsp import AudioClip


class WavFormatError(ValueError):
    """The file is not a 16-bit PCM mono RIFF/WAVE file."""


def read_wav(path) -> AudioClip:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except wave.Error as exc:
        raise WavFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    samples = np.frombuffer(raw, dtype="<i2")
    if samples.size == 0:
        raise WavFormatError(f"{path}: no audio samples")
    return AudioClip(samples.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
