"""Optimization and the mutual-learning schedule.

A round of mutual learning is

1. distillation: train a fresh single-channel student on the logit-MSE loss
   against a frozen multi-channel teacher, and
2. finetuning: start a multi-channel model from the student's parameters
   and train it on the permutation-free BCE loss with multi-channel input.

Training works on fixed-length chunks cut from each session so that a batch
is a dense ``[B, C, F, T]`` array.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as tt
from .features import FeatureStack
from .losses import bce_pit, kd_pit
from .model import EEND, CheckpointError, ModelConfig, parameter_shapes
from .scoring import DEFAULT_COLLAR, evaluate_grid
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    n_speakers: int = 2
    # optimization
    epochs: int = 40
    distill_epochs: int = 40
    finetune_epochs: int = 15
    batch_size: int = 8
    chunk_frames: int = 100
    warmup_steps: int = 1000
    finetune_warmup_steps: int = 200
    lr_scale: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip: float = 5.0
    # data
    channel_dropout_prob: float = 0.1
    teacher_channels: int = 4
    val_fraction: float = 0.1
    eda_shuffle: bool = True
    seed: int = 0
    precision: str = "float32"
    # evaluation
    collar: float = DEFAULT_COLLAR

    def __post_init__(self):
        if self.warmup_steps < 1 or self.finetune_warmup_steps < 1:
            raise ValueError("warmup steps must be >= 1")

    def model_config(self, n_features: int | None = None) -> ModelConfig:
        kw = dict(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                  d_ff=self.d_ff, n_speakers=self.n_speakers)
        if n_features is not None:
            kw["n_features"] = n_features
        return ModelConfig(**kw)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))


def _coerce(value: str, kind):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return kind(value.strip())


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment.  Values stay strings."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def config_from_dict(values: dict, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    kinds = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    changes = {}
    for key, value in values.items():
        if key not in kinds:
            raise ValueError(f"unknown training config key {key!r}")
        changes[key] = _coerce(value, kinds[key]) if isinstance(value, str) else value
    return dataclasses.replace(base, **changes)


def load_config(path) -> TrainConfig:
    return config_from_dict(parse_config_text(Path(path).read_text()))


def derive_seed(seed: int, *tags) -> np.random.SeedSequence:
    codes = [int(hashlib.sha256(str(t).encode()).hexdigest()[:8], 16) for t in tags]
    return np.random.SeedSequence([seed, *codes])


def derive_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))


# --------------------------------------------------------------------------
# optimizer and schedule


def noam_lr(step: int, d_model: int, warmup: int, k: float = 1.0) -> float:
    if step < 1:
        raise ValueError("step counts from 1")
    # step * warmup^-1.5 written as (step / warmup) * warmup^-0.5 so the branches
    # agree exactly at step == warmup
    return k * d_model ** -0.5 * min(step ** -0.5, (step / warmup) * warmup ** -0.5)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: list[Tensor], grads: list, state: AdamState, lr: float) -> None:
    """In-place Adam update with bias-corrected moments."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


def clip_global_norm(grads: list, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads if g is not None))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            if g is not None:
                g *= factor
    return norm


# --------------------------------------------------------------------------
# channels and chunks


def choose_channels(n_available: int, want: int, dropout_prob: float,
                    rng: np.random.Generator, training: bool) -> list[int]:
    """``want`` distinct channels uniformly at random; with channel dropout, keep
    a uniform ``k in [1, want]`` of them instead."""
    if want > n_available:
        raise ValueError(f"asked for {want} channels but only {n_available} exist")
    chosen = [int(c) for c in rng.choice(n_available, size=want, replace=False)]
    if training and dropout_prob > 0 and rng.random() < dropout_prob:
        chosen = chosen[:int(rng.integers(1, want + 1))]
    return chosen


def select_channels(stack: FeatureStack, want: int, dropout_prob: float,
                    rng: np.random.Generator, training: bool) -> FeatureStack:
    return stack.select(choose_channels(stack.n_channels, want, dropout_prob, rng, training))


@dataclass(frozen=True)
class Chunk:
    session: int
    start: int
    length: int


def make_chunks(sessions, chunk_frames: int) -> list[Chunk]:
    """Non-overlapping windows; the last one is right-aligned to the session end."""
    chunks = []
    for i, sess in enumerate(sessions):
        n = sess.n_frames
        if n <= chunk_frames:
            chunks.append(Chunk(i, 0, n))
            continue
        starts = list(range(0, n - chunk_frames + 1, chunk_frames))
        if starts[-1] + chunk_frames < n:
            starts.append(n - chunk_frames)
        chunks.extend(Chunk(i, s, chunk_frames) for s in starts)
    return chunks


def split_train_val(sessions: list, fraction: float) -> tuple[list, list]:
    n_val = int(round(len(sessions) * fraction))
    if n_val == 0 or n_val >= len(sessions):
        return list(sessions), []
    return list(sessions[:-n_val]), list(sessions[-n_val:])


# --------------------------------------------------------------------------
# objectives


@dataclass
class Sample:
    key: tuple  # grouping key: samples sharing it are stacked into one forward pass
    x: np.ndarray  # (C, F, T)
    target: np.ndarray  # labels (S, T) or teacher logits (S, T)


class Objective:
    """Builds per-chunk samples and the loss of a stacked group."""

    mode = "multi"

    def sample(self, sessions, chunk: Chunk, rng: np.random.Generator | None) -> Sample:
        raise NotImplementedError

    def loss(self, model: EEND, x: np.ndarray, target: np.ndarray,
             shuffle_rng: np.random.Generator | None) -> Tensor:
        raise NotImplementedError


def _window(sess, chunk: Chunk, channels):
    sl = slice(chunk.start, chunk.start + chunk.length)
    return sess.features[channels, :, sl], sess.labels[:, sl]


class BCEObjective(Objective):
    def __init__(self, mode: str, want: int, dropout_prob: float):
        self.mode = mode
        self.want = 1 if mode == "single" else want
        self.dropout_prob = 0.0 if mode == "single" else dropout_prob

    def sample(self, sessions, chunk, rng):
        sess = sessions[chunk.session]
        n_ch = sess.features.shape[0]
        if rng is None:
            channels = list(range(self.want))
        else:
            channels = choose_channels(n_ch, self.want, self.dropout_prob, rng, True)
        x, y = _window(sess, chunk, channels)
        return Sample((chunk.length, len(channels)), x, y)

    def loss(self, model, x, target, shuffle_rng):
        mode = "single" if self.mode == "single" else "multi"
        trace = model.forward(x, mode, shuffle_rng=shuffle_rng)
        return bce_pit(trace.posteriors, target).loss


class KDObjective(Objective):
    """Student sees one of the teacher's channels; teacher logits are cached."""

    mode = "single"

    def __init__(self, teacher: EEND, teacher_channels: int):
        self.teacher = teacher
        self.teacher_channels = teacher_channels
        self._cache: dict = {}

    def teacher_logits(self, sessions, chunk, channels) -> np.ndarray:
        key = (id(sessions), chunk, tuple(channels))
        if key not in self._cache:
            x, _ = _window(sessions[chunk.session], chunk, channels)
            self._cache[key] = self.teacher.forward(x[None], "multi").logits.data[0].copy()
        return self._cache[key]

    def sample(self, sessions, chunk, rng):
        sess = sessions[chunk.session]
        n_ch = sess.features.shape[0]
        if rng is None:
            channels = list(range(self.teacher_channels))
            student = channels[0]
        else:
            channels = choose_channels(n_ch, self.teacher_channels, 0.0, rng, True)
            student = channels[int(rng.integers(len(channels)))]
        # the teacher output is invariant to channel order; sort for cache hits
        z_teacher = self.teacher_logits(sessions, chunk, sorted(channels))
        x, _ = _window(sess, chunk, [student])
        return Sample((chunk.length, 1), x, z_teacher)

    def loss(self, model, x, target, shuffle_rng):
        trace = model.forward(x, "single", shuffle_rng=shuffle_rng)
        return kd_pit(target, trace.logits).loss


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (phase, step, split, loss, lr)

    def add(self, phase: str, step: int, split: str, loss: float, lr: float) -> None:
        self.rows.append((phase, step, split, loss, lr))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "step", "split", "loss", "lr"])
            for phase, step, split, loss, lr in self.rows:
                w.writerow([phase, step, split, repr(float(loss)), repr(float(lr))])

    def series(self, phase: str, split: str) -> list:
        return [(s, l) for p, s, sp, l, _ in self.rows if p == phase and sp == split]


@dataclass
class TrainResult:
    model: EEND
    best_epoch: int
    best_val_loss: float
    history: list  # per epoch: (train_loss, val_loss)


def _group_loss(model, objective, samples, shuffle_rng):
    groups: dict = {}
    for s in samples:
        groups.setdefault(s.key, []).append(s)
    total = None
    n = len(samples)
    for key in sorted(groups):
        members = groups[key]
        x = np.stack([s.x for s in members])
        target = np.stack([s.target for s in members])
        part = tt.scale(objective.loss(model, x, target, shuffle_rng), len(members) / n)
        total = part if total is None else tt.add(total, part)
    return total


def _validation_loss(model, objective, sessions, chunks, batch_size) -> float:
    if not chunks:
        return float("nan")
    total = 0.0
    for i in range(0, len(chunks), batch_size):
        batch = chunks[i:i + batch_size]
        samples = [objective.sample(sessions, c, None) for c in batch]
        total += float(_group_loss(model, objective, samples, None).data) * len(batch)
    return total / len(chunks)


def fit(model: EEND, objective: Objective, train_sessions: list, val_sessions: list,
        cfg: TrainConfig, epochs: int, warmup: int, rng: np.random.Generator,
        phase: str = "train", train_log: TrainLog | None = None,
        on_epoch: Callable | None = None) -> TrainResult:
    """Minimize ``objective`` with Adam + Noam; return the best-by-validation model."""
    train_chunks = make_chunks(train_sessions, cfg.chunk_frames)
    val_chunks = make_chunks(val_sessions, cfg.chunk_frames)
    if not train_chunks:
        raise ValueError("no training data")
    params = model.parameters()
    state = AdamState(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    best_state, best_val, best_epoch = model.state(), math.inf, 0
    history = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train_chunks))
        epoch_loss = 0.0
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_chunks[j] for j in order[i:i + cfg.batch_size]]
            samples = [objective.sample(train_sessions, c, rng) for c in batch]
            for p in params:
                p.grad = None
            with Tape() as tape:
                loss = _group_loss(model, objective, samples,
                                   rng if cfg.eda_shuffle else None)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"{phase}: loss became {value} at step {step + 1} (epoch {epoch}); "
                    "try a smaller lr_scale or more warmup steps")
            tape.backward(loss)
            step += 1
            lr = noam_lr(step, cfg.d_model, warmup, cfg.lr_scale)
            grads = [p.grad for p in params]
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(params, grads, state, lr)
            epoch_loss += value * len(batch)
            if train_log is not None:
                train_log.add(phase, step, "train", value, lr)
        epoch_loss /= len(train_chunks)
        val = _validation_loss(model, objective, val_sessions, val_chunks, cfg.batch_size)
        if train_log is not None:
            train_log.add(phase, step, "val", val, noam_lr(max(step, 1), cfg.d_model, warmup,
                                                            cfg.lr_scale))
        history.append((epoch_loss, val))
        log.info("%s epoch %d/%d train %.4f val %.4f", phase, epoch, epochs, epoch_loss, val)
        score = val if val_chunks else epoch_loss
        if score < best_val:
            best_val, best_epoch, best_state = score, epoch, model.state()
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss, val)
    for name, t in model.params.items():
        t.data[...] = best_state[name]
    return TrainResult(model, best_epoch, best_val, history)


def _new_model(cfg: TrainConfig, n_features: int, *tags) -> EEND:
    rng = derive_rng(cfg.seed, "init", *tags)
    with tt.precision(cfg.precision):
        return EEND(cfg.model_config(n_features), seed=int(rng.integers(2 ** 31)))


def _n_features(sessions) -> int:
    return sessions[0].features.shape[1]


def train_baseline(sessions: list, cfg: TrainConfig, mode: str,
                   train_log: TrainLog | None = None) -> TrainResult:
    """Train from scratch on the BCE loss; ``single`` feeds 1 random channel,
    ``multi`` feeds ``teacher_channels`` random channels with channel dropout."""
    if not sessions:
        raise ValueError("empty corpus")
    train, val = split_train_val(sessions, cfg.val_fraction)
    want = min(cfg.teacher_channels, sessions[0].features.shape[0])
    model = _new_model(cfg, _n_features(sessions), "baseline", mode)
    objective = BCEObjective(mode, want, cfg.channel_dropout_prob)
    with tt.precision(cfg.precision):
        return fit(model, objective, train, val, cfg, cfg.epochs, cfg.warmup_steps,
                   derive_rng(cfg.seed, "baseline", mode), f"baseline-{mode}", train_log)


def distill_round(sessions: list, teacher: EEND, cfg: TrainConfig, tag="distill",
                  train_log: TrainLog | None = None) -> TrainResult:
    """Fresh single-channel student trained only on the KD loss against ``teacher``."""
    train, val = split_train_val(sessions, cfg.val_fraction)
    teacher_channels = min(cfg.teacher_channels, sessions[0].features.shape[0])
    student = _new_model(cfg, _n_features(sessions), "student", tag)
    objective = KDObjective(teacher, teacher_channels)
    with tt.precision(cfg.precision):
        return fit(student, objective, train, val, cfg, cfg.distill_epochs, cfg.warmup_steps,
                   derive_rng(cfg.seed, "distill", tag), tag, train_log)


def finetune_round(sessions: list, single: EEND, cfg: TrainConfig, tag="finetune",
                   train_log: TrainLog | None = None) -> TrainResult:
    """Multi-channel BCE training initialized from ``single``'s parameters."""
    if single.manifest() != parameter_shapes(cfg.model_config(_n_features(sessions))):
        raise CheckpointError("initial model is incompatible with the configured architecture")
    model = single.copy()
    train, val = split_train_val(sessions, cfg.val_fraction)
    want = min(cfg.teacher_channels, sessions[0].features.shape[0])
    objective = BCEObjective("multi", want, cfg.channel_dropout_prob)
    with tt.precision(cfg.precision):
        return fit(model, objective, train, val, cfg, cfg.finetune_epochs,
                   cfg.finetune_warmup_steps, derive_rng(cfg.seed, "finetune", tag), tag,
                   train_log)


# --------------------------------------------------------------------------
# mutual learning


def der_metrics(model: EEND, sessions: list, multi_channels: int, collar: float) -> dict:
    """DER_1ch / DER_4ch (named after ``multi_channels``), with and without median."""
    grid = evaluate_grid(model, sessions, [1, multi_channels], collar=collar)
    return {
        "der_1ch": grid[(1, False)].der, "der_1ch_median": grid[(1, True)].der,
        "der_multi": grid[(multi_channels, False)].der,
        "der_multi_median": grid[(multi_channels, True)].der,
    }


@dataclass
class RoundState:
    round: int
    multi: EEND
    single: EEND | None = None
    metrics: list = field(default_factory=list)  # one dict per completed round


def mutual_learn(sessions: list, rounds: int, cfg: TrainConfig, initial_multi: EEND,
                 eval_sessions: list | None = None, out_dir=None,
                 train_log: TrainLog | None = None, resume: bool = True) -> RoundState:
    """Alternate distillation and finetuning for ``rounds`` rounds."""
    state = RoundState(0, initial_multi)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    multi_channels = min(cfg.teacher_channels, sessions[0].features.shape[0])
    for r in range(1, rounds + 1):
        single = resume_or_train(
            out, f"round{r}_single.ckpt", resume, initial_multi.config,
            lambda: distill_round(sessions, state.multi, cfg, f"distill-r{r}", train_log).model)
        multi = resume_or_train(
            out, f"round{r}_multi.ckpt", resume, initial_multi.config,
            lambda: finetune_round(sessions, single, cfg, f"finetune-r{r}", train_log).model)
        entry = {"round": r}
        if eval_sessions:
            s_metrics = der_metrics(single, eval_sessions, multi_channels, cfg.collar)
            m_metrics = der_metrics(multi, eval_sessions, multi_channels, cfg.collar)
            entry.update({f"single_{k}": v for k, v in s_metrics.items()})
            entry.update({f"multi_{k}": v for k, v in m_metrics.items()})
            log.info("round %d: DER_1ch(single) %.4f  DER_%dch(multi) %.4f", r,
                     s_metrics["der_1ch"], multi_channels, m_metrics["der_multi"])
        state = RoundState(r, multi, single, state.metrics + [entry])
        if out is not None:
            (out / "rounds.json").write_text(json.dumps(state.metrics, indent=2))
    return state


def resume_or_train(out, name, resume, config, train_fn) -> EEND:
    path = out / name if out is not None else None
    if path is not None and resume and path.exists():
        log.info("resuming from %s", path)
        return EEND.load(path, config)
    model = train_fn()
    if path is not None:
        model.save(path)
    return model
