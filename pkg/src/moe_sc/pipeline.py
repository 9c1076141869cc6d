"""Transmitter -> channel -> receiver wiring, batched for training and evaluation.

Batched passes keep every sentence at full length N and express the filter
as 0/1 weights on the decoder's cross-attention keys; a zero weight removes a
row exactly as deleting it would.  The channel perturbation for each sentence
is computed on its filtered rows by the same functions the single-sentence
path uses, then added back as a constant, so the gradient through the link is
the identity (h and n treated as constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import channel as ch
from . import checkpoint as ckpt
from . import tensor as T
from .fem import FEMConfig, FeatureExtractionModule, fem_forward
from .tasks import TaskSample, Vocabulary, default_vocabulary
from .tensor import Tensor
from .transformer import EOS_ID, PAD_ID, MoETransformer


@dataclass
class Batch:
    prompt_ids: np.ndarray     # (B, N) padded with <pad>
    valid: np.ndarray          # (B, N) bool
    dec_input: np.ndarray      # (B, L) starts with <pad>
    targets: np.ndarray        # (B, L) ends with <eos>, padded with <pad>
    target_mask: np.ndarray    # (B, L) bool
    tasks: list[str]

    def __len__(self) -> int:
        return self.prompt_ids.shape[0]


def collate(samples: list[TaskSample], vocab: Vocabulary) -> Batch:
    prompts = [s.prompt_ids(vocab) for s in samples]
    targets = [s.target_ids(vocab) for s in samples]
    b = len(samples)
    n = max(len(p) for p in prompts)
    length = max(len(t) for t in targets)
    ids = np.full((b, n), PAD_ID, dtype=np.int64)
    valid = np.zeros((b, n), dtype=bool)
    tgt = np.full((b, length), PAD_ID, dtype=np.int64)
    tmask = np.zeros((b, length), dtype=bool)
    for i, (p, t) in enumerate(zip(prompts, targets)):
        ids[i, :len(p)] = p
        valid[i, :len(p)] = True
        tgt[i, :len(t)] = t
        tmask[i, :len(t)] = True
    dec_in = np.concatenate([np.full((b, 1), PAD_ID, dtype=np.int64), tgt[:, :-1]], axis=1)
    return Batch(ids, valid, dec_in, tgt, tmask, [s.task for s in samples])


@dataclass
class ForwardResult:
    logits: Tensor
    ce: Tensor             # scalar, Eq.-style mean over target positions, then over the batch
    rho: Tensor            # scalar, mean N_c / N with straight-through gradient
    hard_mask: np.ndarray  # (B, N)
    rho_per_sample: np.ndarray
    extractor_index: np.ndarray | None


class SemanticSystem:
    """Encoder + feature extraction + channel + decoder."""

    def __init__(self, model: MoETransformer, fem: FeatureExtractionModule, vocab: Vocabulary):
        self.model = model
        self.fem = fem
        self.vocab = vocab

    def parameters(self) -> list[Tensor]:
        return self.model.parameters() + self.fem.parameters()

    # -- batched ---------------------------------------------------------
    def transmit_features(self, z: Tensor, batch_valid: np.ndarray, snr_db, rng: np.random.Generator | None,
                          use_fem: bool, realizations: list[ch.ChannelRealization] | None = None):
        """Mask, filter and pass features through the link.

        Returns (received features, key weights, hard mask, extractor index).
        ``rng=None`` with no ``realizations`` means a noiseless identity link.
        """
        b, n, _ = z.shape
        snr = np.broadcast_to(np.asarray(snr_db, dtype=float), (b,))
        if use_fem:
            masks = self.fem(z, snr, batch_valid)
            hard_t = masks.hard
            k = masks.extractor_index
        else:
            hard_t = T.Tensor(batch_valid.astype(z.dtype))
            k = None
        hard = hard_t.data
        z_masked = z * hard_t.reshape(b, n, 1)
        if rng is None and realizations is None:
            return z_masked, hard_t, hard, k
        noise = np.zeros(z.shape, dtype=np.float64)
        zm = z_masked.data
        for i in range(b):
            real = realizations[i] if realizations is not None else ch.sample_channel(snr[i], rng)
            z_hat, rows = ch.filter_rows(zm[i], hard[i])
            y_hat, _ = ch.pass_through(z_hat, real, rng)
            noise[i, rows] = y_hat - z_hat
        received = z_masked + T.Tensor(noise.astype(z.dtype))
        return received, hard_t, hard, k

    def forward(self, batch: Batch, snr_db, rng: np.random.Generator | None, use_fem: bool,
                realizations: list[ch.ChannelRealization] | None = None) -> ForwardResult:
        z = self.model.encode_batch(batch.prompt_ids, batch.valid)
        received, weights, hard, k = self.transmit_features(z, batch.valid, snr_db, rng, use_fem, realizations)
        logits = self.model.decode_logits(received, batch.dec_input, weights)
        ce = sequence_cross_entropy(logits, batch.targets, batch.target_mask)
        lengths = batch.valid.sum(axis=1).astype(z.dtype)
        rho_b = weights.sum(axis=1) * T.Tensor(1.0 / lengths)
        return ForwardResult(logits, ce, rho_b.mean(), hard, rho_b.data.copy(), k)

    def generate(self, batch: Batch, snr_db, rng: np.random.Generator | None, use_fem: bool,
                 max_new: int = 8) -> tuple[list[str], np.ndarray]:
        """Greedy answers for a batch and each sentence's compression ratio."""
        z = self.model.encode_batch(batch.prompt_ids, batch.valid)
        received, _, hard, _ = self.transmit_features(z, batch.valid, snr_db, rng, use_fem)
        ids = self.model.generate_batch(received, max_new, hard)
        rho = hard.sum(axis=1) / batch.valid.sum(axis=1)
        return [self.vocab.detokenize(x) for x in ids], rho

    # -- one sentence, explicit filter -----------------------------------
    def transmit_sentence(self, prompt: str, snr_db: float, rng: np.random.Generator | None,
                          use_fem: bool = True, max_new: int = 8) -> dict:
        """Reference path: encode, mask, drop rows, link, decode."""
        z = self.model.encode(self.vocab.tokenize(prompt))
        if use_fem:
            mp = fem_forward(z, snr_db, self.fem)
            mask = mp.hard
        else:
            mask = np.ones(z.shape[0], dtype=z.dtype)
        z_masked = z.data * mask[:, None]
        z_hat, rows = ch.filter_rows(z_masked, mask)
        if rng is None:
            y_hat, deep = z_hat, False
        else:
            real = ch.sample_channel(snr_db, rng)
            y_hat, deep = ch.pass_through(z_hat, real, rng)
        ids, truncated = self.model.generate(T.Tensor(y_hat.astype(z.dtype)), max_new)
        return {"answer": self.vocab.detokenize(ids), "ids": ids, "truncated": truncated,
                "rho": len(rows) / z.shape[0], "rows": rows, "deep_fade": deep}


def sequence_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over valid positions of -log p(target), then mean over the batch."""
    logp = T.log_softmax(logits, axis=-1)
    picked = T.take_along(logp, (targets - 1)[..., None], axis=-1).reshape(targets.shape)
    w = mask.astype(logits.dtype) / mask.sum(axis=1, keepdims=True)
    return -(picked * T.Tensor(w)).sum() * (1.0 / targets.shape[0])


class ConfigMismatchError(ValueError):
    """Checkpoint does not fit the vocabulary or settings it is used with."""


def build_system(model_cfg, fem_cfg=None, vocab: Vocabulary | None = None) -> SemanticSystem:
    vocab = vocab or default_vocabulary()
    if model_cfg.vocab_size != len(vocab):
        raise ConfigMismatchError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {len(vocab)}")
    model = MoETransformer(model_cfg)
    fem = FeatureExtractionModule(model_cfg.d_model, fem_cfg or FEMConfig())
    return SemanticSystem(model, fem, vocab)


def load_system(path, vocab: Vocabulary | None = None) -> tuple[SemanticSystem, dict]:
    """Rebuild a system from a checkpoint; raises on vocabulary mismatch."""
    vocab = vocab or default_vocabulary()
    model, fem, header = ckpt.load_checkpoint(path)
    if model.cfg.vocab_size != len(vocab):
        raise ConfigMismatchError(
            f"checkpoint vocab_size {model.cfg.vocab_size} != vocabulary size {len(vocab)}")
    if fem is None:
        fem = FeatureExtractionModule(model.cfg.d_model, FEMConfig())
    return SemanticSystem(model, fem, vocab), header
