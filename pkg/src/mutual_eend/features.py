"""Frame features: 23 log-mel bands every 10 ms, spliced +-7 frames, decimated by 10.

The result is a 345-dimensional feature vector every 100 ms per channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.io import wavfile

N_MELS = 23
CONTEXT = 7
SUBSAMPLING = 10
WIN_SECONDS = 0.025
HOP_SECONDS = 0.010
FEATURE_DIM = N_MELS * (2 * CONTEXT + 1)
FRAME_HOP_SECONDS = HOP_SECONDS * SUBSAMPLING
LOG_FLOOR = 1e-10


class InputTooShortError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("a Waveform is mono; use SessionAudio for multi-channel audio")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")


@dataclass
class SessionAudio:
    """C time-aligned channels plus the reference speaker intervals."""

    channels: np.ndarray  # (C, n_samples)
    sample_rate: int
    reference: list = field(default_factory=list)  # per speaker: [(onset, offset), ...]
    session_id: str = ""

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def duration(self) -> float:
        return self.channels.shape[1] / self.sample_rate


@dataclass
class FeatureStack:
    """Per-channel feature matrices, each ``FEATURE_DIM x T``, on a shared 100 ms clock."""

    channels: list
    frame_hop_seconds: float = FRAME_HOP_SECONDS

    def __post_init__(self):
        shapes = {m.shape for m in self.channels}
        if len(shapes) != 1:
            raise ValueError(f"channels disagree in shape: {sorted(shapes)}")

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def n_frames(self) -> int:
        return self.channels[0].shape[1]

    def as_array(self) -> np.ndarray:
        """``(C, F, T)`` array."""
        return np.stack(self.channels)

    def select(self, indices: Sequence[int]) -> "FeatureStack":
        return FeatureStack([self.channels[i] for i in indices], self.frame_hop_seconds)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS) -> np.ndarray:
    """Triangular HTK-mel filters over ``[0, sample_rate/2]``, shape ``(n_mels, n_fft//2+1)``."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def n_frames_for(n_samples: int, sample_rate: int) -> int:
    """Number of 10 ms analysis frames before subsampling."""
    win = int(round(WIN_SECONDS * sample_rate))
    hop = int(round(HOP_SECONDS * sample_rate))
    if n_samples < win:
        return 0
    return (n_samples - win) // hop + 1


def logmel(w: Waveform, n_mels: int = N_MELS, win: float = WIN_SECONDS,
           hop: float = HOP_SECONDS) -> np.ndarray:
    """Log mel-filterbank energies, shape ``(n_mels, T0)``."""
    win_len = int(round(win * w.sample_rate))
    hop_len = int(round(hop * w.sample_rate))
    n = len(w.samples)
    if n < win_len:
        raise InputTooShortError(
            f"waveform has {n} samples, shorter than one {win_len}-sample window")
    n_fft = 1 << (win_len - 1).bit_length()
    n_frames = (n - win_len) // hop_len + 1
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win_len)[::hop_len][:n_frames]
    power = np.abs(np.fft.rfft(frames * np.hanning(win_len), n=n_fft, axis=1)) ** 2
    mel = mel_filterbank(w.sample_rate, n_fft, n_mels) @ power.T
    return np.log(np.maximum(mel, LOG_FLOOR))


def splice(m: np.ndarray, context: int = CONTEXT) -> np.ndarray:
    """Stack each frame with its +-``context`` neighbours; edges replicate."""
    n_rows, n_frames = m.shape
    idx = np.clip(np.arange(n_frames)[None, :] + np.arange(-context, context + 1)[:, None],
                  0, n_frames - 1)
    return m[:, idx].transpose(1, 0, 2).reshape((2 * context + 1) * n_rows, n_frames)


def subsample(m: np.ndarray, factor: int = SUBSAMPLING) -> np.ndarray:
    return m[:, ::factor]


def channel_features(samples: np.ndarray, sample_rate: int) -> np.ndarray:
    return subsample(splice(logmel(Waveform(samples, sample_rate))))


def extract_stack(audio: SessionAudio) -> FeatureStack:
    return FeatureStack([channel_features(ch, audio.sample_rate) for ch in audio.channels])


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read PCM16 or float32 WAV into ``(C, n)`` float64 samples in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32 or data.dtype == np.float64:
        data = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample type {data.dtype}")
    data = data[:, None] if data.ndim == 1 else data
    return data.T.copy(), rate


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """Write 16-bit PCM; ``samples`` is ``(n,)`` or ``(C, n)``."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(Path(path)), sample_rate, pcm.T if pcm.ndim == 2 else pcm)
