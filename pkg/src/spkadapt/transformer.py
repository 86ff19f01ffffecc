"""Toy-scale speech transformer: conv subsampling, encoder, causal decoder.

All blocks are pre-norm (layer norm before each sublayer, residual added
after). Batched tensors are ``(batch, time, features)``; the single-utterance
entry points :func:`encode` and :func:`decode_forward` wrap the batched ones.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import stream
from .speaker_memory import (
    ConfigurationError,
    SpeakerMemoryBank,
    augment_kv,
    project_memory,
    xavier_uniform,
)

BOS, EOS, PAD = 0, 1, 2
N_SPECIAL = 3


@dataclass
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc: int = 4
    n_dec: int = 2
    vocab_size: int = 24
    d_feat: int = 8
    dropout_rate: float = 0.1
    memory_enabled: bool = False
    n_mem: int = 8
    memory_per_layer: bool = False

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "d_feat"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_enc < 0 or self.n_dec < 1:
            raise ConfigurationError("need n_enc >= 0 and n_dec >= 1")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.vocab_size <= N_SPECIAL:
            raise ConfigurationError(
                f"vocab_size must exceed the {N_SPECIAL} reserved ids (BOS/EOS/PAD)"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.memory_enabled and self.n_mem < 1:
            raise ConfigurationError("memory_enabled needs n_mem >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def freq_out(self) -> int:
        return _half(_half(self.d_feat))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _half(n: int) -> int:
    return (n + 1) // 2


def subsampled_length(t: int) -> int:
    return _half(_half(t))


# ------------------------------------------------------------------ params


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, c = cfg.d_model, cfg.d_ff, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "frontend.conv1.w": (9, c),
        "frontend.conv1.b": (c,),
        "frontend.conv2.w": (9 * c, c),
        "frontend.conv2.b": (c,),
        "frontend.out.w": (cfg.freq_out * c, d),
        "frontend.out.b": (d,),
    }

    def attn(prefix):
        for m in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{m}"] = (d, d)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.n_enc):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.attn")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    norm("enc.ln")
    shapes["dec.embed"] = (cfg.vocab_size, d)
    for i in range(cfg.n_dec):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    norm("dec.ln")
    shapes["dec.out.w"] = (d, cfg.vocab_size)
    shapes["dec.out.b"] = (cfg.vocab_size,)
    return shapes


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Xavier-uniform matrices, zero biases, unit layer-norm gains."""
    rng = stream(seed, "model-init")
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if len(shape) == 2:
            data = xavier_uniform(rng, *shape)
        elif name.endswith(".g"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def analytic_param_count(cfg: ModelConfig) -> int:
    d, f, c, v = cfg.d_model, cfg.d_ff, cfg.d_model, cfg.vocab_size
    frontend = 9 * c + c + 9 * c * c + c + cfg.freq_out * c * d + d
    ffn = d * f + f + f * d + d
    enc_layer = 4 * d * d + 2 * (2 * d) + ffn
    dec_layer = 8 * d * d + 3 * (2 * d) + ffn
    total = frontend + cfg.n_enc * enc_layer + 2 * d
    total += v * d + cfg.n_dec * dec_layer + 2 * d + d * v + v
    if cfg.memory_enabled:
        copies = cfg.n_enc if cfg.memory_per_layer else 1
        total += 2 * cfg.d_k * cfg.d_k * copies
    return total


class Model:
    """Parameters, config and (optional) speaker memory bank of one network."""

    def __init__(
        self,
        config: ModelConfig,
        params: dict[str, Tensor],
        bank: SpeakerMemoryBank | None = None,
    ):
        if config.memory_enabled != (bank is not None):
            raise ConfigurationError(
                "a speaker memory bank is required exactly when memory_enabled is set"
            )
        if bank is not None:
            if bank.n_slots != config.n_mem or bank.d_k != config.d_k:
                raise ConfigurationError(
                    f"bank is {bank.n_slots}x{bank.d_k}, config wants "
                    f"{config.n_mem}x{config.d_k}"
                )
            params = {**params, **bank.named_params()}
        self.config = config
        self.params = params
        self.bank = bank

    @classmethod
    def create(
        cls, config: ModelConfig, seed: int, bank: SpeakerMemoryBank | None = None
    ) -> "Model":
        return cls(config, init_params(config, seed), bank)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def clone(self) -> "Model":
        bank = None
        if self.bank is not None:
            bank = copy.deepcopy(self.bank)
        params = {
            k: Tensor(t.data.copy(), requires_grad=True, name=k)
            for k, t in self.params.items()
            if not k.startswith("mem.")
        }
        return Model(self.config, params, bank)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def encode(self, features, lengths=None, rng=None):
        return encode_batch(features, self.params, self.config, self.bank, lengths, rng)

    def logits(self, features, lengths, tokens_in, rng=None) -> Tensor:
        enc, enc_pad = self.encode(features, lengths, rng)
        return decode_forward_batch(tokens_in, enc, enc_pad, self.params, self.config, rng)


# ---------------------------------------------------------------- frontend


@lru_cache(maxsize=256)
def _patch_index(b: int, t: int, f: int, c: int) -> np.ndarray:
    """im2col indices for a 3x3, stride-2, pad-1 convolution.

    Input is ``(b, t, f, c)`` flattened; output rows are ``(b, t', f', 9*c)``
    with the patch laid out as (dt, df, channel). -1 marks zero padding.
    """
    t2, f2 = _half(t), _half(f)
    bi = np.arange(b)[:, None, None, None, None, None]
    ti = 2 * np.arange(t2)[None, :, None, None, None, None] - 1 + np.arange(3)[None, None, None, :, None, None]
    fi = 2 * np.arange(f2)[None, None, :, None, None, None] - 1 + np.arange(3)[None, None, None, None, :, None]
    ci = np.arange(c)[None, None, None, None, None, :]
    flat = ((bi * t + ti) * f + fi) * c + ci
    valid = (ti >= 0) & (ti < t) & (fi >= 0) & (fi < f)
    idx = np.where(valid, flat, -1)
    idx = np.broadcast_to(idx, (b, t2, f2, 3, 3, c))
    idx = idx.reshape(b, t2, f2, 9 * c)
    idx.flags.writeable = False
    return idx


def _time_mask(lengths: np.ndarray, t: int) -> np.ndarray:
    return np.arange(t)[None, :] < np.asarray(lengths)[:, None]


def subsample_frontend(
    features: np.ndarray | Tensor,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    lengths: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Two stride-2 3x3 convolutions with ReLU, then a linear map to d_model.

    Returns ``(out, out_lengths)`` with ``out`` of shape ``(B, ceil(ceil(T/2)/2), d_model)``.
    Frames past each utterance's length are zeroed between the two
    convolutions so padding never leaks into valid outputs.
    """
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 3:
        raise ShapeError(f"frontend expects (batch, time, feat), got {x.shape}")
    b, t, f = x.shape
    if t < 4:
        raise ValueError(f"input too short: {t} frames, need at least 4")
    if f != cfg.d_feat:
        raise ShapeError(f"feature dim {f} != config d_feat {cfg.d_feat}")
    if lengths is None:
        lengths = np.full(b, t)
    lengths = np.asarray(lengths)
    c = cfg.d_model

    h = ad.gather(x, _patch_index(b, t, f, 1))
    h = ad.relu(ad.matmul(h, params["frontend.conv1.w"]) + params["frontend.conv1.b"])
    t1, f1 = _half(t), _half(f)
    len1 = (lengths + 1) // 2
    if (len1 < t1).any():
        keep = _time_mask(len1, t1)[:, :, None, None].astype(np.float64)
        h = ad.mul(h, Tensor(keep))
    h = ad.gather(h, _patch_index(b, t1, f1, c))
    h = ad.relu(ad.matmul(h, params["frontend.conv2.w"]) + params["frontend.conv2.b"])
    t2, f2 = _half(t1), _half(f1)
    h = ad.reshape(h, (b, t2, f2 * c))
    out = ad.matmul(h, params["frontend.out.w"]) + params["frontend.out.b"]
    return out, (len1 + 1) // 2


@lru_cache(maxsize=64)
def _pe_table(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None].astype(np.float64)
    i2 = np.arange(0, d, 2).astype(np.float64)
    div = np.power(10000.0, i2 / d)
    pe = np.zeros((t, d))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div[: d // 2])
    pe.flags.writeable = False
    return pe


def positional_encoding(t: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd columns."""
    if t < 1:
        raise ValueError("positional_encoding needs t >= 1")
    return _pe_table(t, d_model)


# --------------------------------------------------------------- sublayers


def _as_mask4(mask, b: int, tq: int, tk: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.ndim != 3:
        raise ShapeError(f"attention mask must be 2-D or 3-D, got shape {mask.shape}")
    try:
        np.broadcast_shapes(mask.shape, (b, tq, tk))
        if np.broadcast_shapes(mask.shape, (b, tq, tk)) != (b, tq, tk):
            raise ValueError
    except ValueError as err:
        raise ShapeError(
            f"attention mask shape {mask.shape} does not fit queries x keys {(b, tq, tk)}"
        ) from err
    return mask[:, None]


def multi_head_attention(
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
    memory: tuple[Tensor, Tensor] | None = None,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over ``n_heads`` heads, then W^O.

    ``mask`` is True where a query may NOT attend, shaped (Tq, Tk),
    (B, Tq, Tk) or (B, 1, Tk). ``memory`` rows are appended to every head's
    keys/values and are never masked.
    """
    b, tq, d = q_in.shape
    tk = k_in.shape[1]
    dk = d // n_heads

    def heads(x, w, t):
        y = ad.matmul(x, params[f"{prefix}.{w}"])
        return ad.transpose(ad.reshape(y, (b, t, n_heads, dk)), (0, 2, 1, 3))

    q = heads(q_in, "wq", tq)
    k = heads(k_in, "wk", tk)
    v = heads(v_in, "wv", tk)
    mask4 = None if mask is None else _as_mask4(mask, b, tq, tk)
    if memory is not None:
        k, v = augment_kv(k, v, *memory)
        if mask4 is not None:
            n_mem = memory[0].shape[0]
            free = np.zeros(mask4.shape[:-1] + (n_mem,), dtype=bool)
            mask4 = np.concatenate([mask4, free], axis=-1)
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(dk))
    if mask4 is not None:
        scores = ad.masked_fill(scores, mask4)
    weights = ad.softmax(scores, axis=-1)
    attn = ad.dropout(weights, dropout_rate, rng)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    out = ad.matmul(ctx, params[f"{prefix}.wo"])
    if return_weights:
        return out, weights.data
    return out


def feed_forward(
    x: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``max(0, x W1 + b1) W2 + b2``."""
    h = ad.relu(ad.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    h = ad.dropout(h, dropout_rate, rng)
    return ad.matmul(h, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def _norm(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


# ------------------------------------------------------------ enc / dec


def encode_batch(
    features,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    bank: SpeakerMemoryBank | None = None,
    lengths: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    attn_weights: list | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Encode padded features ``(B, T, d_feat)``.

    Returns the encoder states ``(B, T', d_model)`` and a ``(B, T')`` mask
    that is True at padded positions. If ``attn_weights`` is a list, each
    layer's ``(B, heads, T', T' + n_mem)`` attention weights are appended.
    """
    if cfg.memory_enabled and bank is None:
        raise ConfigurationError("memory_enabled model needs a speaker memory bank")
    if not cfg.memory_enabled:
        bank = None
    p = cfg.dropout_rate if rng is not None else 0.0
    x, out_len = subsample_frontend(features, params, cfg, lengths)
    b, t, d = x.shape
    x = x + Tensor(positional_encoding(t, d))
    pad = ~_time_mask(out_len, t)
    key_mask = pad[:, None, :] if pad.any() else None
    shared = None
    if bank is not None and not bank.per_layer:
        shared = project_memory(bank)
    for i in range(cfg.n_enc):
        memory = shared
        if bank is not None and bank.per_layer:
            memory = project_memory(bank, i)
        h = _norm(x, params, f"enc.{i}.ln1")
        h = multi_head_attention(
            h, h, h, params, f"enc.{i}.attn", cfg.n_heads,
            mask=key_mask, memory=memory, dropout_rate=p, rng=rng,
            return_weights=attn_weights is not None,
        )
        if attn_weights is not None:
            h, w = h
            attn_weights.append(w)
        x = x + h
        h = _norm(x, params, f"enc.{i}.ln2")
        x = x + feed_forward(h, params, f"enc.{i}.ffn", p, rng)
    return _norm(x, params, "enc.ln"), pad


@lru_cache(maxsize=64)
def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: position i may not see j > i."""
    m = np.triu(np.ones((length, length), dtype=bool), k=1)
    m.flags.writeable = False
    return m


def decode_forward_batch(
    tokens: np.ndarray,
    enc_out: Tensor,
    enc_pad: np.ndarray | None,
    params: dict[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced logits ``(B, L, vocab)`` for decoder inputs ``(B, L)``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"decoder tokens must be (batch, length), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(
            f"token ids must lie in [0, {cfg.vocab_size}), got range "
            f"[{tokens.min()}, {tokens.max()}]"
        )
    p = cfg.dropout_rate if rng is not None else 0.0
    b, length = tokens.shape
    d = cfg.d_model
    x = ad.embedding(params["dec.embed"], tokens) + Tensor(positional_encoding(length, d))
    self_mask = causal_mask(length)
    cross_mask = None
    if enc_pad is not None and enc_pad.any():
        cross_mask = enc_pad[:, None, :]
    for i in range(cfg.n_dec):
        h = _norm(x, params, f"dec.{i}.ln1")
        x = x + multi_head_attention(
            h, h, h, params, f"dec.{i}.self", cfg.n_heads,
            mask=self_mask, dropout_rate=p, rng=rng,
        )
        h = _norm(x, params, f"dec.{i}.ln2")
        x = x + multi_head_attention(
            h, enc_out, enc_out, params, f"dec.{i}.cross", cfg.n_heads,
            mask=cross_mask, dropout_rate=p, rng=rng,
        )
        h = _norm(x, params, f"dec.{i}.ln3")
        x = x + feed_forward(h, params, f"dec.{i}.ffn", p, rng)
    x = _norm(x, params, "dec.ln")
    return ad.matmul(x, params["dec.out.w"]) + params["dec.out.b"]


def encode(features, params, cfg: ModelConfig, bank=None) -> Tensor:
    """Single utterance ``(T, d_feat)`` -> encoder states ``(T', d_model)``."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    out, _ = encode_batch(feats[None], params, cfg, bank)
    return ad.reshape(out, out.shape[1:])


def decode_forward(tokens, enc_out: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Single utterance teacher-forced logits ``(L, vocab)``."""
    enc = enc_out if enc_out.ndim == 3 else ad.reshape(enc_out, (1,) + enc_out.shape)
    logits = decode_forward_batch(np.asarray(tokens)[None], enc, None, params, cfg)
    return ad.reshape(logits, logits.shape[1:])


def pad_features(feats: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([f.shape[0] for f in feats])
    out = np.zeros((len(feats), lengths.max(), feats[0].shape[1]))
    for i, f in enumerate(feats):
        out[i, : f.shape[0]] = f
    return out, lengths
