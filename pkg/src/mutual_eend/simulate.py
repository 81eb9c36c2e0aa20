"""Synthetic two-speaker, multi-channel conversations.

Each "speaker" is a harmonic source whose harmonics are shaped by a formant
envelope, so speakers differ spectrally.  Channels are built from per
speaker x channel gains and integer delays (distributed microphones without
reverberation), plus white noise at a target SNR.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .features import SessionAudio, write_wav
from .scoring import Annotation, write_rttm

SAMPLE_RATE = 8000
MIN_SEGMENT = 0.5
FADE_SECONDS = 0.010
MAX_DELAY = 40
PEAK = 0.9


@dataclass
class SpeakerProfile:
    f0: float  # Hz
    formants: list  # [(centre Hz, bandwidth Hz), ...]
    tilt: float = 0.5  # harmonic k is scaled by k**-tilt


@dataclass
class SessionSpec:
    session_id: str
    duration_seconds: float
    n_channels: int
    seed: int
    overlap_target: float = 0.34
    snr_db: float | None = 15.0
    speakers: list = field(default_factory=list)  # 2 x SpeakerProfile
    gains: np.ndarray | None = None  # (2, C) in (0, 1]
    delays: np.ndarray | None = None  # (2, C) integer samples
    turn_taking: bool = False

    def validate(self) -> None:
        if self.duration_seconds < 5:
            raise ValueError("sessions must last at least 5 s")
        gains = np.asarray(self.gains)
        delays = np.asarray(self.delays)
        if gains.shape != (2, self.n_channels) or delays.shape != gains.shape:
            raise ValueError("gains/delays must be 2 x n_channels")
        if np.any(gains <= 0) or np.any(gains > 1) or np.any(delays < 0):
            raise ValueError("gains must lie in (0, 1] and delays be non-negative")
        if self.n_channels > 1 and np.ptp(np.log(gains[0] / gains[1])) < 1e-6:
            raise ValueError("speaker gain vectors are proportional: no spatial contrast")


@dataclass
class CorpusConfig:
    n_train: int = 200
    n_eval: int = 50
    min_duration: float = 10.0
    max_duration: float = 30.0
    n_channels: int = 4
    overlap_target: float = 0.34
    snr_db_min: float = 10.0
    snr_db_max: float = 20.0
    min_spatial_contrast_db: float = 6.0
    seed: int = 0
    sample_rate: int = SAMPLE_RATE


# --------------------------------------------------------------------------
# activity


def _merge(intervals):
    out = []
    for on, off in sorted(intervals):
        if out and on <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], off))
        else:
            out.append((on, off))
    return out


def _alternating(duration, mean_speech, mean_pause, start_speaking, rng):
    intervals = []
    t = 0.0
    speaking = start_speaking
    while t < duration:
        if speaking:
            length = MIN_SEGMENT + rng.exponential(mean_speech - MIN_SEGMENT)
            end = min(t + length, duration)
            if end - t >= MIN_SEGMENT:
                intervals.append((t, end))
        else:
            length = MIN_SEGMENT + rng.exponential(mean_pause - MIN_SEGMENT)
            end = t + length
        t = end
        speaking = not speaking
    return intervals


def sample_activity(duration: float, overlap_target: float, rng: np.random.Generator,
                    turn_taking: bool = False, mean_speech: float = 2.5) -> list:
    """Two interval lists, one per speaker, with segments of at least 0.5 s.

    In the default mode both speakers alternate speech and pause
    independently with exponential holding times; the speech duty cycle
    ``p = 2r / (1 + r)`` makes the expected ratio of overlapped to total
    speech time equal ``r = overlap_target``.  ``turn_taking`` produces strict
    alternation with no overlap at all.
    """
    if duration < 5:
        raise ValueError("duration must be at least 5 s")
    if turn_taking or overlap_target <= 0:
        return _turn_taking(duration, mean_speech, rng)
    r = min(overlap_target, 0.95)
    duty = 2 * r / (1 + r)
    mean_pause = max(MIN_SEGMENT + 1e-3, mean_speech * (1 - duty) / duty)
    while True:
        spk = [_alternating(duration, mean_speech, mean_pause, rng.random() < duty, rng)
               for _ in range(2)]
        if all(spk):
            return [_merge(s) for s in spk]


def _turn_taking(duration, mean_speech, rng):
    while True:
        spk = [[], []]
        t = rng.uniform(0, 0.5)
        who = int(rng.integers(2))
        while True:
            length = MIN_SEGMENT + rng.exponential(mean_speech - MIN_SEGMENT)
            end = min(t + length, duration)
            if end - t < MIN_SEGMENT:
                break
            spk[who].append((t, end))
            t = end + MIN_SEGMENT * rng.uniform(0.2, 1.0)
            who = 1 - who
        if all(spk):
            return spk


def overlap_ratio(speakers: list) -> tuple[float, float]:
    """``(overlapped seconds, total speech seconds)`` for two interval lists."""
    a, b = speakers
    overlap = 0.0
    for on1, off1 in a:
        for on2, off2 in b:
            overlap += max(0.0, min(off1, off2) - max(on1, on2))
    total = sum(off - on for on, off in a) + sum(off - on for on, off in b) - overlap
    return overlap, total


# --------------------------------------------------------------------------
# audio


def random_profile(rng: np.random.Generator) -> SpeakerProfile:
    return SpeakerProfile(
        f0=float(rng.uniform(90, 260)),
        formants=[(float(rng.uniform(300, 900)), float(rng.uniform(80, 160))),
                  (float(rng.uniform(900, 2400)), float(rng.uniform(100, 220))),
                  (float(rng.uniform(2300, 3600)), float(rng.uniform(150, 300)))],
        tilt=float(rng.uniform(0.3, 0.9)),
    )


def _envelope(profile: SpeakerProfile, freqs: np.ndarray) -> np.ndarray:
    env = np.full_like(freqs, 0.02)
    for centre, bw in profile.formants:
        env += np.exp(-0.5 * ((freqs - centre) / bw) ** 2)
    return env


def _gate(intervals, n_samples, sample_rate):
    gate = np.zeros(n_samples)
    ramp = max(1, int(round(FADE_SECONDS * sample_rate)))
    for on, off in intervals:
        i0 = int(round(on * sample_rate))
        i1 = min(int(round(off * sample_rate)), n_samples)
        n = i1 - i0
        if n <= 0:
            continue
        seg = np.ones(n)
        r = min(ramp, n // 2)
        if r > 0:
            up = np.arange(1, r + 1) / (r + 1)
            seg[:r] = up
            seg[n - r:] = up[::-1]
        gate[i0:i1] = seg
    return gate


def render_speaker(profile: SpeakerProfile, intervals: list, duration: float,
                   rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Harmonic source gated by ``intervals`` (10 ms fade in/out), zero elsewhere."""
    n = int(round(duration * sample_rate))
    if not intervals:
        return np.zeros(n)
    t = np.arange(n) / sample_rate
    # slow pitch drift and syllable-rate loudness modulation
    drift = 1 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    vibrato = 1 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
    phase = 2 * np.pi * np.cumsum(profile.f0 * drift * vibrato) / sample_rate
    n_harm = max(1, int((sample_rate / 2 - 100) // (profile.f0 * 1.06)))
    k = np.arange(1, n_harm + 1)
    amps = _envelope(profile, k * profile.f0) * k ** -profile.tilt
    src = np.zeros(n)
    for kk, amp, ph in zip(k, amps, rng.uniform(0, 2 * np.pi, n_harm)):
        src += amp * np.sin(kk * phase + ph)
    syllable = 0.55 + 0.45 * np.abs(np.sin(2 * np.pi * rng.uniform(2.5, 4.5) * t
                                           + rng.uniform(0, np.pi)))
    src *= syllable
    src /= np.sqrt(np.mean(src ** 2)) + 1e-12
    return 0.1 * src * _gate(intervals, n, sample_rate)


def mix_channels(spec: SessionSpec, sources: list, rng: np.random.Generator,
                 reference: list | None = None, sample_rate: int = SAMPLE_RATE) -> SessionAudio:
    """Gain/delay mixture of the sources per channel, plus noise, peak-normalized."""
    n = len(sources[0])
    if any(len(s) != n for s in sources):
        raise ValueError("sources differ in length")
    gains = np.asarray(spec.gains, dtype=np.float64)
    delays = np.asarray(spec.delays, dtype=np.int64)
    channels = np.zeros((spec.n_channels, n))
    for s, src in enumerate(sources):
        for c in range(spec.n_channels):
            d = int(delays[s, c])
            channels[c, d:] += gains[s, c] * src[:n - d]
    if spec.snr_db is not None:
        for c in range(spec.n_channels):
            power = np.mean(channels[c] ** 2)
            noise = rng.standard_normal(n)
            noise *= np.sqrt(power / 10 ** (spec.snr_db / 10) / np.mean(noise ** 2))
            channels[c] += noise
    peak = np.max(np.abs(channels))
    if peak > 0:
        channels *= PEAK / peak
    return SessionAudio(channels, sample_rate, reference or [], spec.session_id)


# --------------------------------------------------------------------------
# corpus


def session_rng(master_seed: int, split: str, index: int) -> np.random.Generator:
    split_code = int(hashlib.sha256(split.encode()).hexdigest()[:8], 16)
    return np.random.default_rng(np.random.SeedSequence([master_seed, split_code, index]))


def _spatial_layout(n_channels, min_contrast_db, rng):
    while True:
        gains_db = rng.uniform(-18.0, 0.0, size=(2, n_channels))
        if n_channels == 1 or np.ptp(gains_db[0] - gains_db[1]) >= min_contrast_db:
            break
    delays = rng.integers(0, MAX_DELAY + 1, size=(2, n_channels))
    return 10 ** (gains_db / 20), delays


def make_session_spec(cfg: CorpusConfig, split: str, index: int) -> SessionSpec:
    rng = session_rng(cfg.seed, split, index)
    gains, delays = _spatial_layout(cfg.n_channels, cfg.min_spatial_contrast_db, rng)
    return SessionSpec(
        session_id=f"{split}_{index:05d}",
        duration_seconds=round(float(rng.uniform(cfg.min_duration, cfg.max_duration)), 1),
        n_channels=cfg.n_channels,
        seed=int(rng.integers(2 ** 31)),
        overlap_target=cfg.overlap_target,
        snr_db=float(rng.uniform(cfg.snr_db_min, cfg.snr_db_max)),
        speakers=[random_profile(rng), random_profile(rng)],
        gains=gains,
        delays=delays,
    )


def generate_session(spec: SessionSpec, sample_rate: int = SAMPLE_RATE) -> SessionAudio:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    intervals = sample_activity(spec.duration_seconds, spec.overlap_target, rng,
                                turn_taking=spec.turn_taking)
    sources = [render_speaker(p, iv, spec.duration_seconds, rng, sample_rate)
               for p, iv in zip(spec.speakers, intervals)]
    return mix_channels(spec, sources, rng, intervals, sample_rate)


def session_annotation(audio: SessionAudio) -> Annotation:
    return Annotation({f"spk{s}": iv for s, iv in enumerate(audio.reference)}, "reference")


def generate_corpus(cfg: CorpusConfig, out_dir) -> Path:
    """Write ``train/`` and ``eval/`` splits of WAV + RTTM files with a manifest each."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    for split, count in (("train", cfg.n_train), ("eval", cfg.n_eval)):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        lines = []
        for i in range(count):
            spec = make_session_spec(cfg, split, i)
            audio = generate_session(spec, cfg.sample_rate)
            wavs = []
            for c in range(audio.n_channels):
                name = f"{spec.session_id}.ch{c}.wav"
                write_wav(split_dir / name, audio.channels[c], audio.sample_rate)
                wavs.append(name)
            rttm = f"{spec.session_id}.rttm"
            write_rttm(split_dir / rttm, {spec.session_id: session_annotation(audio)})
            lines.append(f"{spec.session_id}\t{','.join(wavs)}\t{rttm}\t"
                         f"{spec.duration_seconds:.1f}\t{audio.n_channels}")
        (split_dir / "manifest.txt").write_text("\n".join(lines) + "\n")
    (out_dir / "corpus.conf").write_text(
        "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items()))
    return out_dir
