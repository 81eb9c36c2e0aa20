"""Load a generated corpus split into feature/label arrays."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import FRAME_HOP_SECONDS, SessionAudio, extract_stack, read_wav
from .scoring import Annotation, annotation_to_matrix, read_rttm


@dataclass
class Session:
    session_id: str
    features: np.ndarray  # (C, F, T) float32
    labels: np.ndarray  # (S, T) {0, 1}
    reference: Annotation

    @property
    def n_frames(self) -> int:
        return self.features.shape[-1]


def reference_labels(reference: Annotation, n_frames: int, n_speakers: int = 2) -> np.ndarray:
    labels = annotation_to_matrix(reference, n_frames, FRAME_HOP_SECONDS)
    if labels.shape[0] > n_speakers:
        raise ValueError(f"reference has {labels.shape[0]} speakers, model handles {n_speakers}")
    pad = np.zeros((n_speakers - labels.shape[0], n_frames), dtype=labels.dtype)
    return np.concatenate([labels, pad])


def session_from_audio(audio: SessionAudio, reference: Annotation,
                       n_speakers: int = 2) -> Session:
    stack = extract_stack(audio)
    feats = stack.as_array().astype(np.float32)
    return Session(audio.session_id, feats,
                   reference_labels(reference, stack.n_frames, n_speakers), reference)


def read_manifest(split_dir) -> list[dict]:
    entries = []
    for line in (Path(split_dir) / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        sid, wavs, rttm, duration, n_ch = line.split("\t")
        entries.append({"id": sid, "wavs": wavs.split(","), "rttm": rttm,
                        "duration": float(duration), "channels": int(n_ch)})
    return entries


def load_split(corpus_dir, split: str, n_speakers: int = 2, limit: int | None = None) -> list:
    split_dir = Path(corpus_dir) / split
    if not (split_dir / "manifest.txt").exists():
        raise FileNotFoundError(f"no manifest at {split_dir / 'manifest.txt'}")
    sessions = []
    for entry in read_manifest(split_dir)[:limit]:
        chans, rate = [], None
        for w in entry["wavs"]:
            data, rate = read_wav(split_dir / w)
            chans.append(data[0])
        audio = SessionAudio(np.stack(chans), rate, session_id=entry["id"])
        reference = read_rttm(split_dir / entry["rttm"]).get(entry["id"], Annotation({}))
        sessions.append(session_from_audio(audio, reference, n_speakers))
    return sessions
