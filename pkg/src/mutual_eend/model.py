"""EEND-EDA with a channel-count-agnostic encoder.

One parameter set drives two forward modes:

* ``single``: Transformer encoder layers over one channel, ``E[B, D, T]``;
* ``multi``: co-attention encoder layers over ``E[B, C, D, T]`` whose
  attention weights are computed from all channels jointly and shared by
  them, followed by a mean over channels.

Both modes feed the same encoder-decoder attractor (EDA) block and produce
speaker logits ``Z = B^T E`` and posteriors ``sigmoid(Z)``.  With ``C == 1``
the multi mode reduces to the single mode exactly.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .features import FEATURE_DIM
from .tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"EENDCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ChannelModeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_features: int = FEATURE_DIM
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    n_speakers: int = 2

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) manifest.  The order is the checkpoint order."""
    d, f, ff = cfg.d_model, cfg.n_features, cfg.d_ff
    shapes = [("input.w0", (d, f)), ("input.ln.gain", (d,)), ("input.ln.bias", (d,))]
    for n in range(cfg.n_layers):
        p = f"layers.{n}."
        shapes += [
            (p + "w_q", (d, d)), (p + "w_k", (d, d)), (p + "w_v", (d, d)), (p + "w_o", (d, d)),
            (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
            (p + "ffn.w1", (ff, d)), (p + "ffn.b1", (ff,)),
            (p + "ffn.w2", (d, ff)), (p + "ffn.b2", (d,)),
            (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
        ]
    for part in ("enc", "dec"):
        shapes += [(f"eda.{part}.w_ih", (4 * d, d)), (f"eda.{part}.w_hh", (4 * d, d)),
                   (f"eda.{part}.b", (4 * d,))]
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Glorot-uniform matrices, unit/zero layer norms, PyTorch-style LSTM init."""
    params = {}
    for name, shape in parameter_shapes(cfg):
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.startswith("eda."):
            bound = 1.0 / math.sqrt(cfg.d_model)
            value = rng.uniform(-bound, bound, size=shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor.param(value, name=name)
    return params


@dataclass
class LayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def from_params(cls, params: dict, n: int) -> "LayerParams":
        p = f"layers.{n}."
        return cls(params[p + "w_q"], params[p + "w_k"], params[p + "w_v"], params[p + "w_o"],
                   params[p + "ln1.gain"], params[p + "ln1.bias"],
                   params[p + "ffn.w1"], params[p + "ffn.b1"],
                   params[p + "ffn.w2"], params[p + "ffn.b2"],
                   params[p + "ln2.gain"], params[p + "ln2.bias"])


@dataclass
class ForwardTrace:
    embeddings: list  # E^(0..N); [B, D, T] or [B, C, D, T]
    pooled: Tensor  # [B, D, T]
    attractors: Tensor  # [B, D, S]
    logits: Tensor  # [B, S, T]
    posteriors: Tensor  # [B, S, T]
    attention: list = field(default_factory=list)  # per layer: A^T as [B, h, T_key, T_query]


# --------------------------------------------------------------------------
# encoder layers


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, d, t = x.shape
    return tt.reshape(x, (*lead, n_heads, d // n_heads, t))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, dh, t = x.shape
    return tt.reshape(x, (*lead, h * dh, t))


def _ffn_block(e1: Tensor, layer: LayerParams) -> Tensor:
    hidden = tt.relu(tt.add_bias(tt.matmul(layer.w1, e1), layer.b1))
    out = tt.add_bias(tt.matmul(layer.w2, hidden), layer.b2)
    return tt.layer_norm(tt.add(e1, out), layer.ln2_gain, layer.ln2_bias)


def self_attention_weights(e: Tensor, layer: LayerParams, n_heads: int) -> Tensor:
    """Transposed attention ``A^T[B, h, T_key, T_query]``; each column sums to one."""
    q = _split_heads(tt.matmul(layer.w_q, e), n_heads)
    k = _split_heads(tt.matmul(layer.w_k, e), n_heads)
    d = e.shape[-2]
    scores = tt.scale(tt.matmul(tt.transpose(k), q), 1.0 / math.sqrt(d / n_heads))
    return tt.softmax_columns(scores)


def transformer_encoder_layer(e: Tensor, layer: LayerParams, n_heads: int,
                              attention_out: list | None = None) -> Tensor:
    """``E[B, D, T] -> E[B, D, T]``: post-norm self-attention and FFN blocks."""
    if e.ndim != 3:
        raise DimensionError(f"transformer layer expects [B, D, T], got {e.shape}")
    attn_t = self_attention_weights(e, layer, n_heads)
    if attention_out is not None:
        attention_out.append(attn_t)
    v = _split_heads(tt.matmul(layer.w_v, e), n_heads)
    heads = tt.matmul(v, attn_t)  # V A^T
    ma = tt.matmul(layer.w_o, _merge_heads(heads))
    e1 = tt.layer_norm(tt.add(e, ma), layer.ln1_gain, layer.ln1_bias)
    return _ffn_block(e1, layer)


def _concat_channels(x: Tensor) -> Tensor:
    """``[B, C, h, D/h, T] -> [B, h, C*D/h, T]``: per head, stack channels vertically."""
    b, c, h, dh, t = x.shape
    return tt.reshape(tt.swapaxes(x, 1, 2), (b, h, c * dh, t))


def _split_channels(x: Tensor, n_channels: int) -> Tensor:
    b, h, cdh, t = x.shape
    return tt.swapaxes(tt.reshape(x, (b, h, n_channels, cdh // n_channels, t)), 1, 2)


def coattention_weights(e: Tensor, layer: LayerParams, n_heads: int) -> Tensor:
    """Shared attention ``A^T[B, h, T_key, T_query]`` from all channels of ``E[B, C, D, T]``.

    Queries and keys of every channel are concatenated per head, so the dot
    products sum over channels and the scale becomes ``sqrt(C * D / h)``.
    """
    n_channels, d = e.shape[1], e.shape[2]
    q = _concat_channels(_split_heads(tt.matmul(layer.w_q, e), n_heads))
    k = _concat_channels(_split_heads(tt.matmul(layer.w_k, e), n_heads))
    scores = tt.matmul(tt.transpose(k), q)
    return tt.softmax_columns(tt.scale(scores, 1.0 / math.sqrt(n_channels * d / n_heads)))


def coattention_encoder_layer(e: Tensor, layer: LayerParams, n_heads: int,
                              attention_out: list | None = None) -> Tensor:
    """``E[B, C, D, T] -> E[B, C, D, T]``; only the attention weights mix channels."""
    if e.ndim != 4:
        raise DimensionError(f"co-attention layer expects [B, C, D, T], got {e.shape}")
    if e.shape[1] == 0:
        raise ChannelModeError("co-attention layer got zero channels")
    attn_t = coattention_weights(e, layer, n_heads)
    if attention_out is not None:
        attention_out.append(attn_t)
    n_channels = e.shape[1]
    v = _concat_channels(_split_heads(tt.matmul(layer.w_v, e), n_heads))
    # every channel's values are mixed by the same attention weights
    heads = _split_channels(tt.matmul(v, attn_t), n_channels)
    ma = tt.matmul(layer.w_o, _merge_heads(heads))
    e1 = tt.layer_norm(tt.add(e, ma), layer.ln1_gain, layer.ln1_bias)
    return _ffn_block(e1, layer)


# --------------------------------------------------------------------------
# attractors and activities


def eda_attractors(e: Tensor, params: dict, n_speakers: int,
                   order: np.ndarray | None = None) -> Tensor:
    """Attractors ``B[B, D, S]`` from frame embeddings ``E[B, D, T]``.

    An LSTM encoder reads the frames (in ``order[B, T]`` when given, else in
    time order); its final state seeds an LSTM decoder fed ``S`` zero
    vectors, whose hidden states are the attractors.
    """
    batch, d, n_frames = e.shape
    frames = tt.transpose(e)  # [B, T, D]
    if order is not None:
        order = np.asarray(order)
        if order.shape != (batch, n_frames):
            raise DimensionError(f"frame order {order.shape} does not match {(batch, n_frames)}")
        flat_idx = (order + n_frames * np.arange(batch)[:, None]).reshape(-1)
        frames = tt.reshape(tt.take(tt.reshape(frames, (batch * n_frames, d)), flat_idx, 0),
                            (batch, n_frames, d))
    zeros = np.zeros((batch, d), dtype=e.data.dtype)
    _, h, c = tt.lstm_scan(frames, zeros, zeros, params["eda.enc.w_ih"],
                           params["eda.enc.w_hh"], params["eda.enc.b"])
    dec_in = np.zeros((batch, n_speakers, d), dtype=e.data.dtype)
    hs, _, _ = tt.lstm_scan(dec_in, h, c, params["eda.dec.w_ih"],
                            params["eda.dec.w_hh"], params["eda.dec.b"])
    return tt.transpose(hs)


def activities(e: Tensor, attractors: Tensor) -> tuple[Tensor, Tensor]:
    """Logits ``Z = B^T E`` and posteriors ``sigmoid(Z)``, each ``[B, S, T]``."""
    z = tt.matmul(tt.transpose(attractors), e)
    return z, tt.sigmoid(z)


# --------------------------------------------------------------------------


class EEND:
    """Parameters plus the two forward modes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(
            config, np.random.default_rng(seed))
        self._check_manifest(self.params)

    def _check_manifest(self, params: dict) -> None:
        expected = parameter_shapes(self.config)
        got = [(k, tuple(v.shape)) for k, v in params.items()]
        if got != expected:
            raise CheckpointError("parameter manifest does not match the configured architecture")

    def manifest(self) -> list[tuple[str, tuple]]:
        return [(k, tuple(v.shape)) for k, v in self.params.items()]

    def n_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def layer(self, n: int) -> LayerParams:
        return LayerParams.from_params(self.params, n)

    def copy(self) -> "EEND":
        params = {k: Tensor.param(v.data.copy(), name=k) for k, v in self.params.items()}
        return EEND(self.config, params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def project_input(self, x) -> Tensor:
        """``LayerNorm(W0 X)`` for ``X[..., F, T]``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim < 2 or x.shape[-2] != self.config.n_features:
            raise DimensionError(
                f"input has {x.shape[-2] if x.ndim >= 2 else '?'} feature rows, "
                f"model expects {self.config.n_features}")
        p = self.params
        return tt.layer_norm(tt.matmul(p["input.w0"], x), p["input.ln.gain"], p["input.ln.bias"])

    def encode(self, x, mode: str = "multi", keep_attention: bool = False):
        """Frame embeddings for ``x[B, C, F, T]``.

        Returns ``(E^(0..N) list, pooled E[B, D, T], attention list)``.
        """
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise DimensionError(f"encode expects [B, C, F, T] features, got shape {x.shape}")
        attention = [] if keep_attention else None
        n_heads = self.config.n_heads
        if mode == "single":
            if x.shape[1] != 1:
                raise ChannelModeError(f"single mode needs exactly one channel, got {x.shape[1]}")
            e = self.project_input(x[:, 0])
            trace = [e]
            for n in range(self.config.n_layers):
                e = transformer_encoder_layer(e, self.layer(n), n_heads, attention)
                trace.append(e)
            pooled = e
        elif mode == "multi":
            if x.shape[1] < 1:
                raise ChannelModeError("multi mode needs at least one channel")
            e = self.project_input(x)
            trace = [e]
            for n in range(self.config.n_layers):
                e = coattention_encoder_layer(e, self.layer(n), n_heads, attention)
                trace.append(e)
            pooled = tt.mean_over_axis(e, 1)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return trace, pooled, attention or []

    def forward(self, x, mode: str = "multi", shuffle_rng: np.random.Generator | None = None,
                keep_attention: bool = False) -> ForwardTrace:
        trace, pooled, attention = self.encode(x, mode, keep_attention)
        order = None
        if shuffle_rng is not None:
            batch, _, n_frames = pooled.shape
            order = np.stack([shuffle_rng.permutation(n_frames) for _ in range(batch)])
        attractors = eda_attractors(pooled, self.params, self.config.n_speakers, order)
        z, y = activities(pooled, attractors)
        return ForwardTrace(trace, pooled, attractors, z, y, attention)

    def infer(self, x, mode: str | None = None) -> np.ndarray:
        """Posteriors ``[B, S, T]`` as a plain array (no tape)."""
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if mode is None:
            mode = "single" if x.shape[1] == 1 else "multi"
        return self.forward(x, mode).posteriors.data

    # ---------------------------------------------------------------- checkpoint

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(self.params)))
        for name, t in self.params.items():
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
            buf.write(struct.pack("<B", t.ndim))
            buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        for t in self.params.values():
            buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, config: ModelConfig) -> "EEND":
        view = memoryview(blob)
        if bytes(view[:8]) != CHECKPOINT_MAGIC:
            raise CheckpointError("not an EEND checkpoint (bad magic)")
        version, count = struct.unpack_from("<II", view, 8)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        manifest = []
        for _ in range(count):
            (n,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + n]).decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", view, pos)
            pos += 4 * ndim
            manifest.append((name, tuple(shape)))
        if manifest != parameter_shapes(config):
            raise CheckpointError(
                "checkpoint manifest does not match the configured architecture "
                f"(d_model={config.d_model}, n_layers={config.n_layers}, d_ff={config.d_ff})")
        params = {}
        for name, shape in manifest:
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params[name] = Tensor.param(arr.copy(), name=name)
        if pos != len(blob):
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(config, params)

    @classmethod
    def load(cls, path, config: ModelConfig) -> "EEND":
        return cls.from_bytes(Path(path).read_bytes(), config)
