"""SNR-aware feature extraction: score each feature row, keep rows above a threshold.

Rows of the encoder output are scored by one of B linear extractors on the
concatenation of an SNR representation and a per-row feature representation.
A top-1 gate on the row-averaged representation picks the extractor.  The
hard 0/1 mask passes gradients straight through to the soft scores.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .layers import Linear, Module
from .tensor import Tensor

SNR_SCALE_DB = 10.0


@dataclass
class FEMConfig:
    n_extractors: int = 4      # B
    threshold: float = 0.5     # t-bar
    feature_hidden: int = 64
    snr_hidden: int = 16
    init_bias: float = 1.0     # extractor bias at init; sigmoid(1) ~ 0.73 keeps every row
    seed: int = 1

    def __post_init__(self):
        if self.n_extractors < 1:
            raise ValueError("n_extractors must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FEMConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class MaskPair:
    """Soft scores, hard mask and chosen extractor.

    Batched forward passes keep (B, N) tensors; :func:`fem_forward` returns
    plain arrays for one sentence.
    """

    soft: Tensor | np.ndarray
    hard: Tensor | np.ndarray
    extractor_index: np.ndarray | int


def hard_threshold(soft: np.ndarray, threshold: float, valid: np.ndarray | None = None,
                   never_empty: bool = True) -> np.ndarray:
    """0/1 mask with ``soft >= threshold`` along the last axis.

    Padding (``valid`` False) is always 0.  If a row would keep nothing, its
    highest-scoring valid entry is kept instead.
    """
    soft = np.asarray(soft)
    shape = soft.shape
    soft = soft.reshape(-1, shape[-1])
    valid = (np.ones(soft.shape, dtype=bool) if valid is None
             else np.asarray(valid, bool).reshape(soft.shape))
    hard = (soft >= threshold) & valid
    if never_empty:
        empty = np.nonzero(~hard.any(axis=-1))[0]
        if empty.size:
            best = np.argmax(np.where(valid, soft, -np.inf), axis=-1)
            hard[empty, best[empty]] = True
    return hard.astype(soft.dtype).reshape(shape)


def ste_threshold(soft: Tensor, threshold: float, valid: np.ndarray | None = None,
                  never_empty: bool = True) -> Tensor:
    """Forward: :func:`hard_threshold`.  Backward: the incoming gradient, unchanged."""
    hard = hard_threshold(soft.data, threshold, valid, never_empty)
    return T.custom(hard, (soft,), lambda g: (g,))


def compression_ratio(mask) -> float:
    """Fraction of retained rows, N_c / N."""
    m = np.asarray(mask).reshape(-1)
    if m.size == 0:
        raise ValueError("empty mask")
    kept = int(np.count_nonzero(m))
    if kept == 0:
        raise ValueError("mask retains no rows; the never-empty rule was bypassed")
    return kept / m.size


class FeatureExtractionModule(Module):
    def __init__(self, d_model: int, cfg: FEMConfig, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        width = cfg.feature_hidden + cfg.snr_hidden
        self.feature_mlp = Linear(d_model, cfg.feature_hidden, rng, dtype=dtype)
        self.snr_in = Linear(1, cfg.snr_hidden, rng, dtype=dtype)
        self.snr_out = Linear(cfg.snr_hidden, cfg.snr_hidden, rng, dtype=dtype)
        self.gate = T.parameter((rng.standard_normal((width, cfg.n_extractors)) / np.sqrt(width)).astype(dtype))
        # all B extractors side by side; column k is extractor k
        self.extractors = Linear(width, cfg.n_extractors, rng, dtype=dtype)
        self.extractors.weight.data *= 0.1
        self.extractors.bias.data[:] = cfg.init_bias

    def fused_features(self, z: Tensor, snr_db: np.ndarray) -> Tensor:
        """cat(F_gamma, F_z) per row: (B, N, snr_hidden + feature_hidden)."""
        b, n, _ = z.shape
        f_z = T.gelu(self.feature_mlp(z))
        g = T.Tensor(np.asarray(snr_db, dtype=z.dtype).reshape(b, 1) / SNR_SCALE_DB)
        f_g = self.snr_out(T.gelu(self.snr_in(g)))
        f_g = T.broadcast_to(f_g.reshape(b, 1, -1), (b, n, f_g.shape[-1]))
        return T.concat([f_g, f_z], axis=-1)

    def choose_extractor(self, fused: np.ndarray, valid: np.ndarray) -> np.ndarray:
        """Top-1 gate over the mean of valid rows; ties go to the lower index."""
        w = valid[..., None].astype(fused.dtype)
        pooled = (fused * w).sum(axis=1) / np.maximum(w.sum(axis=1), 1.0)
        logits = pooled @ self.gate.data
        return np.argsort(-logits, axis=-1, kind="stable")[:, 0]

    def __call__(self, z: Tensor, snr_db, valid: np.ndarray | None = None) -> MaskPair:
        b, n, _ = z.shape
        valid = np.ones((b, n), dtype=bool) if valid is None else np.asarray(valid, bool)
        fused = self.fused_features(z, np.broadcast_to(np.asarray(snr_db, dtype=float), (b,)))
        k = self.choose_extractor(fused.data, valid)
        scores = self.extractors(fused)                       # (B, N, n_extractors)
        index = np.broadcast_to(k[:, None, None], (b, n, 1))
        logit = T.take_along(scores, index, axis=-1).reshape(b, n)
        soft = T.sigmoid(logit) * T.Tensor(valid.astype(z.dtype))
        hard = ste_threshold(soft, self.cfg.threshold, valid)
        return MaskPair(soft, hard, k)


def fem_forward(z: Tensor, snr_db: float, fem: FeatureExtractionModule) -> MaskPair:
    """Mask for one (N, D) feature matrix at ``snr_db``."""
    out = fem(z.reshape((1,) + z.shape), np.array([snr_db]))
    return MaskPair(out.soft.data[0], out.hard.data[0], int(out.extractor_index[0]))
