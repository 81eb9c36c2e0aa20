import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mutual_eend.features import (FEATURE_DIM, FRAME_HOP_SECONDS, FeatureStack,
                                  InputTooShortError, SessionAudio, Waveform, channel_features,
                                  extract_stack, logmel, mel_centers, mel_filterbank, read_wav,
                                  splice, subsample, write_wav)

SR = 8000


def frames_oracle(n_samples, sr=SR):
    """25 ms windows every 10 ms, then every 10th frame kept."""
    win, hop = int(0.025 * sr), int(0.010 * sr)
    t0 = (n_samples - win) // hop + 1
    return t0, math.ceil(t0 / 10)


def test_one_second_gives_98_frames():
    m = logmel(Waveform(np.random.default_rng(0).standard_normal(SR), SR))
    assert m.shape == (23, 98)
    assert frames_oracle(SR)[0] == 98


def test_silence_hits_log_floor():
    m = logmel(Waveform(np.zeros(SR), SR))
    np.testing.assert_allclose(m, math.log(1e-10))
    assert round(float(m[0, 0]), 2) == -23.03


def test_tone_peaks_in_its_mel_band():
    t = np.arange(SR) / SR
    m = logmel(Waveform(np.sin(2 * math.pi * 1000 * t), SR))
    # HTK mel scale: 24 equal steps from 0 to mel(4000); the band whose centre
    # is nearest mel(1000) contains the tone
    mel = lambda f: 2595 * math.log10(1 + f / 700)  # noqa: E731
    step = mel(4000) / 24
    expected = round(mel(1000) / step) - 1
    assert expected == 10
    assert np.all(np.argmax(m, axis=0) == expected)


def test_too_short_raises():
    with pytest.raises(InputTooShortError):
        logmel(Waveform(np.zeros(199), SR))


def test_filterbank_tiles_band():
    fb = mel_filterbank(SR, 256)
    assert fb.shape == (23, 129)
    assert np.all(fb.sum(axis=1) > 0)
    assert np.all(fb >= 0) and fb.max() <= 1.0
    # between the first and last centre, neighbouring triangles sum to 1
    centres = mel_centers(SR)
    freqs = np.arange(129) * SR / 256
    inner = (freqs >= centres[0]) & (freqs <= centres[-1])
    np.testing.assert_allclose(fb[:, inner].sum(axis=0), 1.0, atol=1e-12)


def test_splice_examples():
    one = np.arange(23.0)[:, None]
    np.testing.assert_array_equal(splice(one), np.tile(one, (15, 1)))
    m = np.random.default_rng(1).standard_normal((23, 30))
    s = splice(m)
    assert s.shape == (345, 30)
    np.testing.assert_array_equal(s[161:184, 12], m[:, 12])
    np.testing.assert_array_equal(s[0:23, 12], m[:, 5])
    np.testing.assert_array_equal(s[0:23, 0], m[:, 0])  # clamped
    np.testing.assert_array_equal(s[322:345, 29], m[:, 29])


def test_subsample_keeps_every_tenth():
    m = np.arange(25)[None, :].repeat(3, 0)
    out = subsample(m)
    np.testing.assert_array_equal(out[0], [0, 10, 20])


@pytest.mark.parametrize("seconds", [1.0, 3.37, 7.2, 10.0, 12.05])
def test_frame_count_matches_oracle(seconds):
    n = int(round(seconds * SR))
    f = channel_features(np.random.default_rng(2).standard_normal(n) * 0.1, SR)
    assert f.shape == (FEATURE_DIM, frames_oracle(n)[1])


def test_four_channel_ten_seconds():
    x = np.random.default_rng(3).standard_normal((4, 10 * SR)) * 0.1
    stack = extract_stack(SessionAudio(x, SR))
    assert stack.n_channels == 4
    assert FEATURE_DIM == 345 and FRAME_HOP_SECONDS == pytest.approx(0.1)
    assert all(m.shape[0] == 345 and abs(m.shape[1] - 100) <= 1 for m in stack.channels)


def test_duplicated_channel_identical_features():
    x = np.random.default_rng(4).standard_normal(2 * SR)
    stack = extract_stack(SessionAudio(np.stack([x, x]), SR))
    np.testing.assert_array_equal(stack.channels[0], stack.channels[1])
    single = extract_stack(SessionAudio(x[None], SR))
    np.testing.assert_array_equal(single.channels[0], stack.channels[0])


@settings(max_examples=20, deadline=None)
@given(st.permutations(range(3)), st.integers(0, 1000))
def test_channel_permutation_permutes_features(perm, seed):
    x = np.random.default_rng(seed).standard_normal((3, SR // 2))
    base = extract_stack(SessionAudio(x, SR))
    permuted = extract_stack(SessionAudio(x[list(perm)], SR))
    for k, p in enumerate(perm):
        np.testing.assert_array_equal(permuted.channels[k], base.channels[p])


def test_stack_rejects_misaligned_channels():
    with pytest.raises(ValueError):
        FeatureStack([np.zeros((345, 3)), np.zeros((345, 4))])


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(5).uniform(-0.9, 0.9, (2, 400))
    write_wav(tmp_path / "a.wav", x, SR)
    y, rate = read_wav(tmp_path / "a.wav")
    assert rate == SR and y.shape == (2, 400)
    np.testing.assert_allclose(y, x, atol=1e-4)
