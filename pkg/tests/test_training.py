import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from mutual_eend.corpus import Session
from mutual_eend.features import FeatureStack
from mutual_eend.model import EEND, CheckpointError
from mutual_eend.tensor import Tensor
from mutual_eend.training import (AdamState, KDObjective, TrainConfig, TrainingDivergedError,
                                  TrainLog, adam_step, choose_channels, clip_global_norm,
                                  config_from_dict, derive_rng, distill_round, finetune_round,
                                  fit, make_chunks, mutual_learn, noam_lr, parse_config_text,
                                  select_channels, split_train_val, train_baseline)
from mutual_eend.training import _validation_loss


def test_noam_continuity_at_warmup():
    for d, w in [(64, 1000), (256, 100000), (8, 7), (64, 3)]:
        assert noam_lr(w, d, w) == d ** -0.5 * w ** -0.5
        assert noam_lr(w, d, w) == pytest.approx(d ** -0.5 * w * w ** -1.5, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5000))
def test_noam_rises_then_decays(warmup):
    lrs = [noam_lr(s, 64, warmup) for s in range(1, 2 * warmup + 2)]
    assert all(a < b for a, b in zip(lrs[:warmup - 1], lrs[1:warmup]))
    assert all(a > b for a, b in zip(lrs[warmup - 1:], lrs[warmup:]))


def test_noam_formula_example():
    assert noam_lr(1, 256, 100000) == pytest.approx(1 / (16 * 10 ** 7.5), rel=1e-12)
    assert noam_lr(1000, 64, 1000, 0.5) == pytest.approx(0.5 / (8 * math.sqrt(1000)))
    with pytest.raises(ValueError):
        noam_lr(0, 64, 10)


def test_adam_zero_gradient_leaves_params():
    p = Tensor.param(np.arange(6.0).reshape(2, 3))
    before = p.data.copy()
    state = AdamState()
    for _ in range(5):
        adam_step([p], [np.zeros((2, 3))], state, 0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_constant_gradient_steps_by_lr():
    # bias-corrected m / sqrt(v) equals g / |g| for a constant g
    g = np.array([3.0, -0.2, 1e-3, -50.0])
    p = Tensor.param(np.zeros(4))
    state = AdamState()
    lr = 0.01
    for _ in range(200):
        before = p.data.copy()
        adam_step([p], [g], state, lr)
    np.testing.assert_allclose(before - p.data, lr * np.sign(g), rtol=1e-6)


def test_adam_first_step_closed_form():
    g = np.array([0.5, -2.0])
    p = Tensor.param(np.ones(2))
    adam_step([p], [g], AdamState(eps=0.0), 0.1)
    np.testing.assert_allclose(p.data, 1 - 0.1 * np.sign(g))


def test_clip_global_norm():
    grads = [np.array([3.0, 0.0]), np.array([[4.0]])]
    assert clip_global_norm(grads, 10.0) == 5.0
    assert grads[0][0] == 3.0
    assert clip_global_norm(grads, 1.0) == 5.0
    norm = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads))
    assert norm == pytest.approx(1.0)


def test_single_channel_choice_is_uniform():
    rng = np.random.default_rng(0)
    counts = np.bincount([choose_channels(10, 1, 0.0, rng, True)[0] for _ in range(10000)],
                         minlength=10)
    assert chisquare(counts).pvalue > 0.01


def test_four_channel_choice_is_uniform():
    rng = np.random.default_rng(1)
    counts = np.zeros(10, int)
    for _ in range(10000):
        picked = choose_channels(10, 4, 0.0, rng, True)
        assert len(set(picked)) == 4
        counts[picked] += 1
    assert chisquare(counts).pvalue > 0.01


def test_channel_dropout_sizes():
    rng = np.random.default_rng(2)
    sizes = np.array([len(choose_channels(4, 4, 0.5, rng, True)) for _ in range(8000)])
    # k stays 4 with prob 0.5 + 0.5/4, otherwise uniform over 1..3
    freq = np.bincount(sizes, minlength=5)[1:] / len(sizes)
    np.testing.assert_allclose(freq, [0.125, 0.125, 0.125, 0.625], atol=0.02)
    assert all(len(choose_channels(4, 4, 1.0, rng, False)) == 4 for _ in range(50))


def test_select_channels_examples():
    rng = np.random.default_rng(3)
    chans = [np.full((2, 3), float(c)) for c in range(4)]
    stack = FeatureStack(chans)
    full = select_channels(stack, 4, 0.0, rng, True)
    assert sorted(float(m[0, 0]) for m in full.channels) == [0, 1, 2, 3]
    assert select_channels(stack, 1, 0.0, rng, True).n_channels == 1
    with pytest.raises(ValueError):
        select_channels(stack, 5, 0.0, rng, True)


def test_chunks_cover_every_frame():
    class S:
        def __init__(self, n):
            self.n_frames = n

    chunks = make_chunks([S(250), S(60), S(100)], 100)
    assert [(c.session, c.start, c.length) for c in chunks] == [
        (0, 0, 100), (0, 100, 100), (0, 150, 100), (1, 0, 60), (2, 0, 100)]


def test_split_train_val():
    assert split_train_val(list(range(10)), 0.2) == (list(range(8)), [8, 9])
    assert split_train_val([1, 2], 0.1) == ([1, 2], [])


def test_config_parsing():
    values = parse_config_text("# demo\nd_model = 32  # width\n\neda_shuffle = off\n"
                               "lr_scale=0.5\nprecision = float64\n")
    cfg = config_from_dict(values)
    assert (cfg.d_model, cfg.eda_shuffle, cfg.lr_scale, cfg.precision) == (32, False, 0.5,
                                                                          "float64")
    assert config_from_dict(parse_config_text(cfg.to_text())) == cfg
    with pytest.raises(ValueError):
        config_from_dict({"nope": "1"})
    with pytest.raises(ValueError):
        parse_config_text("d_model 32")
    with pytest.raises(ValueError):
        config_from_dict({"eda_shuffle": "maybe"})
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)


def test_derived_streams_differ_by_tag():
    a = derive_rng(0, "init", "x").integers(2 ** 31, size=4)
    assert np.array_equal(a, derive_rng(0, "init", "x").integers(2 ** 31, size=4))
    assert not np.array_equal(a, derive_rng(0, "init", "y").integers(2 ** 31, size=4))
    assert not np.array_equal(a, derive_rng(1, "init", "x").integers(2 ** 31, size=4))


def test_baseline_learns_and_is_deterministic(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    log_a, log_b = TrainLog(), TrainLog()
    a = train_baseline(train, tiny_cfg.replace(epochs=6), "multi", log_a)
    b = train_baseline(train, tiny_cfg.replace(epochs=6), "multi", log_b)
    assert a.history[-1][0] < a.history[0][0]
    assert a.history == b.history
    assert log_a.rows == log_b.rows
    assert a.model.to_bytes() == b.model.to_bytes()
    assert a.best_val_loss == min(v for _, v in a.history)


def test_multi_mode_on_one_channel_corpus_matches_single(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    mono = [Session(s.session_id, s.features[:1], s.labels, s.reference) for s in train]
    cfg = tiny_cfg.replace(channel_dropout_prob=0.0, epochs=8)
    model = EEND(cfg.model_config(345), seed=0)
    x = mono[0].features[None, :, :, :50]
    np.testing.assert_array_equal(model.infer(x, "multi"), model.infer(x, "single"))
    multi = train_baseline(mono, cfg, "multi")
    single = train_baseline(mono, cfg, "single")
    # same inputs and loss; only the seed-derived init differs
    assert multi.history[-1][0] < multi.history[0][0]
    assert single.history[-1][0] < single.history[0][0]


def test_divergence_is_reported(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    bad = [Session(s.session_id, s.features * np.float32(np.nan), s.labels, s.reference)
           for s in train]
    with pytest.raises(TrainingDivergedError, match="lr_scale"):
        train_baseline(bad, tiny_cfg, "single")


def _hash(model):
    return hashlib.sha256(model.to_bytes()).hexdigest()


def test_distillation_freezes_teacher_and_halves_kd(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    teacher = train_baseline(train, tiny_cfg, "multi").model
    before = _hash(teacher)
    cfg = tiny_cfg.replace(distill_epochs=15, val_fraction=0.0)
    result = distill_round(train, teacher, cfg)
    assert _hash(teacher) == before
    chunks = make_chunks(train, cfg.chunk_frames)
    initial = EEND(cfg.model_config(345), seed=1)
    kd_initial = _validation_loss(initial, KDObjective(teacher, 4), train, chunks, 4)
    kd_final = _validation_loss(result.model, KDObjective(teacher, 4), train, chunks, 4)
    assert kd_final <= 0.5 * kd_initial


def test_self_distillation_reaches_near_zero(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    one = [Session(train[0].session_id, train[0].features[:1, :, :40], train[0].labels[:, :40],
                   train[0].reference)]
    cfg = tiny_cfg.replace(teacher_channels=1, val_fraction=0.0, distill_epochs=300,
                           warmup_steps=20, eda_shuffle=False)
    teacher = EEND(cfg.model_config(345), seed=5)
    student = distill_round(one, teacher, cfg).model
    chunks = make_chunks(one, 40)
    start = _validation_loss(EEND(cfg.model_config(345), seed=6), KDObjective(teacher, 1), one,
                             chunks, 1)
    end = _validation_loss(student, KDObjective(teacher, 1), one, chunks, 1)
    assert end < 0.02 * start


def test_finetune_initialization_reproduces_single(tiny_sessions, tiny_cfg, tmp_path):
    train, _ = tiny_sessions
    single = train_baseline(train, tiny_cfg, "single").model
    single.save(tmp_path / "single.ckpt")
    loaded = EEND.load(tmp_path / "single.ckpt", single.config)
    init = finetune_round(train, loaded, tiny_cfg.replace(finetune_epochs=0)).model
    x = train[0].features[None, :1]
    diff = np.max(np.abs(init.infer(x, "multi") - single.infer(x, "single")))
    assert diff <= 1e-6
    wrong = EEND(tiny_cfg.replace(d_model=8).model_config(345), seed=0)
    with pytest.raises(CheckpointError):
        finetune_round(train, wrong, tiny_cfg)


def test_finetune_changes_weights_deterministically(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    single = EEND(tiny_cfg.model_config(345), seed=2)
    a = finetune_round(train, single, tiny_cfg).model
    b = finetune_round(train, single, tiny_cfg).model
    assert a.to_bytes() == b.to_bytes() != single.to_bytes()


def test_zero_rounds_returns_initial_state(tiny_sessions, tiny_cfg):
    train, _ = tiny_sessions
    initial = EEND(tiny_cfg.model_config(345), seed=0)
    state = mutual_learn(train, 0, tiny_cfg, initial)
    assert state.round == 0 and state.multi is initial
    assert state.single is None and state.metrics == []


def test_mutual_learning_round_logs_and_resumes(tiny_sessions, tiny_cfg, tmp_path):
    train, evals = tiny_sessions
    initial = EEND(tiny_cfg.model_config(345), seed=0)
    log = TrainLog()
    state = mutual_learn(train, 1, tiny_cfg, initial, evals, tmp_path, log)
    assert state.round == 1
    assert {p.name for p in tmp_path.iterdir()} == {"round1_single.ckpt", "round1_multi.ckpt",
                                                    "rounds.json"}
    entry = state.metrics[0]
    assert entry["round"] == 1
    assert {"single_der_1ch", "multi_der_multi", "multi_der_multi_median"} <= set(entry)
    assert {r[0] for r in log.rows} == {"distill-r1", "finetune-r1"}
    resumed = mutual_learn(train, 1, tiny_cfg, initial, evals, tmp_path)
    assert resumed.metrics == state.metrics
    assert resumed.multi.to_bytes() == state.multi.to_bytes()
    fresh = mutual_learn(train, 1, tiny_cfg, initial, evals, tmp_path / "again", resume=False)
    assert fresh.metrics == state.metrics


def test_fit_requires_data(tiny_cfg):
    model = EEND(tiny_cfg.model_config(345), seed=0)
    with pytest.raises(ValueError):
        fit(model, KDObjective(model, 1), [], [], tiny_cfg, 1, 1, np.random.default_rng(0))
