"""MoE Transformer encoder/decoder, greedy generation and analytic cost counts.

Token ids are 1-based (``1..V``); row ``id - 1`` of the embedding table and
column ``id - 1`` of the head belong to token ``id``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module
from .moe import MoEFeedForward
from .tensor import Tensor

PAD_ID = 1
EOS_ID = 2
UNK_ID = 3


class SequenceTooLongError(ValueError):
    pass


class EmptyChannelError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 2        # E, per stack
    d_model: int = 64        # D
    n_heads: int = 4         # H
    n_experts: int = 4       # M
    top_k: int = 1           # K
    vocab_size: int = 128    # V
    max_len: int = 48        # N_max
    d_ff: int = 128
    activation: str = "gelu"
    tie_embeddings: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (1 <= self.top_k < self.n_experts or self.top_k == self.n_experts == 1):
            raise ValueError(f"need 1 <= K < M or K = M = 1, got K={self.top_k}, M={self.n_experts}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.vocab_size < 4:
            raise ValueError("vocab_size must leave room for <pad>, <eos>, <unk> and content")
        if self.n_layers < 1 or self.max_len < 1 or self.d_ff < 1:
            raise ValueError("n_layers, max_len and d_ff must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng, dtype=dtype)
        self.k = Linear(d_model, d_model, rng, dtype=dtype)
        self.v = Linear(d_model, d_model, rng, dtype=dtype)
        self.o = Linear(d_model, d_model, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.n_heads, d // self.n_heads).swapaxes(1, 2)

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None,
                 key_weights: Tensor | None = None) -> Tensor:
        """``mask`` broadcasts to (B, H, Nq, Nk); ``key_weights`` is (B, Nk)."""
        b, nq, d = xq.shape
        q, k, v = self._split(self.q(xq)), self._split(self.k(xkv)), self._split(self.v(xkv))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.n_heads))
        if key_weights is not None:
            key_weights = key_weights.reshape(b, 1, 1, key_weights.shape[-1])
        attn = T.softmax(scores, axis=-1, mask=mask, weights=key_weights)
        ctx = (attn @ v).swapaxes(1, 2).reshape(b, nq, d)
        return self.o(ctx)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.norm1 = LayerNorm(cfg.d_model, dtype)
        self.moe = MoEFeedForward(cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k, rng, cfg.activation, dtype)
        self.norm2 = LayerNorm(cfg.d_model, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        # the gate reads the attention sublayer output (X-tilde), as drawn
        x_tilde = self.norm1(x + self.attn(x, x, mask))
        return self.norm2(x_tilde + self.moe(x_tilde))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.norm1 = LayerNorm(cfg.d_model, dtype)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.norm2 = LayerNorm(cfg.d_model, dtype)
        self.moe = MoEFeedForward(cfg.d_model, cfg.d_ff, cfg.n_experts, cfg.top_k, rng, cfg.activation, dtype)
        self.norm3 = LayerNorm(cfg.d_model, dtype)

    def __call__(self, y: Tensor, memory: Tensor, causal: np.ndarray,
                 memory_weights: Tensor | None = None) -> Tensor:
        y = self.norm1(y + self.self_attn(y, y, causal))
        y = self.norm2(y + self.cross_attn(y, memory, None, memory_weights))
        return self.norm3(y + self.moe(y))


class MoETransformer(Module):
    """Semantic encoder (prompt -> feature rows) and decoder (feature rows -> tokens)."""

    def __init__(self, cfg: ModelConfig, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        self.token_emb = T.parameter((rng.standard_normal((cfg.vocab_size, d)) * 0.1).astype(dtype))
        self.enc_pos = T.parameter((rng.standard_normal((cfg.max_len, d)) * 0.1).astype(dtype))
        self.dec_pos = T.parameter((rng.standard_normal((cfg.max_len, d)) * 0.1).astype(dtype))
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.decoder = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.head = None if cfg.tie_embeddings else Linear(d, cfg.vocab_size, rng, bias=False, dtype=dtype)

    @property
    def dtype(self):
        return self.token_emb.data.dtype

    # -- encoder ---------------------------------------------------------
    def encode_batch(self, ids: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
        """(B, N) 1-based ids -> (B, N, D) features; ``valid`` marks non-padding."""
        ids = np.asarray(ids, dtype=np.int64)
        b, n = ids.shape
        if n > self.cfg.max_len:
            raise SequenceTooLongError(f"sequence of {n} tokens exceeds max_len={self.cfg.max_len}")
        x = T.embedding(self.token_emb, ids - 1) + T.embedding(self.enc_pos, np.arange(n))
        mask = None if valid is None else np.asarray(valid, bool)[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return x

    def encode(self, ids) -> Tensor:
        """One token sequence -> (N, D) feature matrix Z."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size > self.cfg.max_len:
            raise SequenceTooLongError(f"sequence of {ids.size} tokens exceeds max_len={self.cfg.max_len}")
        z = self.encode_batch(ids[None, :])
        return z.reshape(z.shape[1:])

    # -- decoder ---------------------------------------------------------
    def decode_logits(self, memory: Tensor, prefix: np.ndarray,
                      memory_weights: Tensor | None = None) -> Tensor:
        """Teacher-forced logits (B, L, V) for every prefix position.

        ``memory`` is (B, Nc, D).  ``memory_weights`` (B, Nc) scales each
        received row inside cross-attention; 0/1 weights equal dropping rows.
        """
        prefix = np.asarray(prefix, dtype=np.int64)
        if memory.shape[1] == 0:
            raise EmptyChannelError("decoder received no feature rows")
        b, length = prefix.shape
        if length > self.cfg.max_len:
            raise SequenceTooLongError(f"prefix of {length} tokens exceeds max_len={self.cfg.max_len}")
        y = T.embedding(self.token_emb, prefix - 1) + T.embedding(self.dec_pos, np.arange(length))
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        for layer in self.decoder:
            y = layer(y, memory, causal, memory_weights)
        if self.head is None:
            return y @ self.token_emb.swapaxes(0, 1)
        return self.head(y)

    def decode_step(self, memory: Tensor, prefix) -> np.ndarray:
        """Probability vector over the vocabulary for the token after ``prefix``."""
        mem = memory if memory.ndim == 3 else memory.reshape((1,) + memory.shape)
        if mem.shape[1] == 0:
            raise EmptyChannelError("decoder received no feature rows")
        logits = self.decode_logits(mem, np.asarray(prefix, dtype=np.int64)[None, :])
        return T.softmax(T.Tensor(logits.data[0, -1]), axis=-1).data

    def generate(self, memory: Tensor, max_new: int) -> tuple[list[int], bool]:
        """Greedy decoding from <pad> until <eos> or ``max_new`` tokens.

        Returns the generated ids (including <eos> when produced) and whether
        the output was truncated.
        """
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        prefix = [PAD_ID]
        out: list[int] = []
        for _ in range(max_new):
            probs = self.decode_step(memory, prefix)
            tok = int(np.argmax(probs)) + 1
            out.append(tok)
            if tok == EOS_ID:
                return out, False
            prefix.append(tok)
        return out, True

    def generate_batch(self, memory: Tensor, max_new: int,
                       memory_weights: np.ndarray | None = None) -> list[list[int]]:
        """Batched greedy decoding; each row stops at its own <eos>."""
        b = memory.shape[0]
        weights = None if memory_weights is None else T.Tensor(np.asarray(memory_weights, dtype=memory.dtype))
        prefix = np.full((b, 1), PAD_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        outs: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_new):
            logits = self.decode_logits(memory, prefix, weights).data[:, -1]
            nxt = np.argmax(logits, axis=-1) + 1
            for i in np.nonzero(~done)[0]:
                outs[i].append(int(nxt[i]))
                if nxt[i] == EOS_ID:
                    done[i] = True
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        return outs


# ---------------------------------------------------------------------------
# analytic counts


def expert_params(cfg: ModelConfig) -> int:
    return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model


def _attention_params(d: int) -> int:
    return 4 * (d * d + d)


def count_params(cfg: ModelConfig) -> int:
    """Exact parameter count of :class:`MoETransformer` for ``cfg``."""
    d, m = cfg.d_model, cfg.n_experts
    moe = m * expert_params(cfg) + (d * m if m > 1 else 0)
    norm = 2 * d
    enc_layer = _attention_params(d) + moe + 2 * norm
    dec_layer = 2 * _attention_params(d) + moe + 3 * norm
    emb = cfg.vocab_size * d + 2 * cfg.max_len * d
    head = 0 if cfg.tie_embeddings else d * cfg.vocab_size
    return cfg.n_layers * (enc_layer + dec_layer) + emb + head


def flops_breakdown(cfg: ModelConfig, context: int | None = None) -> dict[str, int]:
    """Per-token FLOPs by term, counting 2*fan_in*fan_out per linear map.

    ``decoder_*`` terms price one generated token at the receiver: both
    attention blocks with all four projections, score and context products
    over ``context`` positions (default ``max_len``), the K active experts
    and the output head.  ``encoder_*`` terms price one source token.  The
    router's D*M product is left out so that the count is exactly constant
    in M; it is below 0.01% of the total at any published size.
    """
    n = cfg.max_len if context is None else context
    d, e = cfg.d_model, cfg.n_layers
    proj = 4 * 2 * d * d
    scores = 2 * 2 * n * d
    ffn = cfg.top_k * 2 * 2 * d * cfg.d_ff
    return {
        "decoder_attention_proj": e * 2 * proj,
        "decoder_attention_scores": e * 2 * scores,
        "decoder_expert_ffn": e * ffn,
        "decoder_head": 2 * d * cfg.vocab_size,
        "encoder_attention_proj": e * proj,
        "encoder_attention_scores": e * scores,
        "encoder_expert_ffn": e * ffn,
    }


def count_flops_per_token(cfg: ModelConfig, context: int | None = None) -> int:
    """FLOPs to generate one output token (decoder terms of :func:`flops_breakdown`)."""
    parts = flops_breakdown(cfg, context)
    return sum(v for k, v in parts.items() if k.startswith("decoder_"))
