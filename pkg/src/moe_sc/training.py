"""Two-phase training: encoder/decoder without compression, then jointly with the FEM."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .pipeline import Batch, SemanticSystem, collate
from .tasks import TRAIN_TASKS, Corpus, TaskSample
from .tensor import Tensor

log = logging.getLogger(__name__)

CE_EPS = 1e-9


class TrainingDivergedError(RuntimeError):
    pass


class TrainingConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs_phase1: int = 40          # N_1
    epochs_phase2: int = 10          # N_2
    lr: float = 1e-3                 # eta, peak value
    warmup_steps: int = 300
    min_lr_ratio: float = 0.1        # cosine decay floor as a fraction of lr
    phase2_model_lr_scale: float = 0.1   # encoder/decoder learning-rate factor in phase 2
    batch_size: int = 32
    omega_ce: float = 1e3            # omega_1
    omega_rho: float = 30.0          # omega_2
    snr_low: float = -5.0
    snr_high: float = 25.0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0 or self.batch_size < 1 or self.lr <= 0:
            raise TrainingConfigError("epochs must be >= 0, batch_size >= 1, lr > 0")
        if not (math.isfinite(self.omega_ce) and math.isfinite(self.omega_rho)):
            raise TrainingConfigError("loss weights must be finite")
        if self.phase2_model_lr_scale <= 0:
            raise TrainingConfigError("phase2_model_lr_scale must be positive")
        if self.warmup_steps < 0 or not 0.0 <= self.min_lr_ratio <= 1.0:
            raise TrainingConfigError("warmup_steps must be >= 0 and min_lr_ratio in [0, 1]")
        if self.snr_low > self.snr_high:
            raise TrainingConfigError("snr_low must not exceed snr_high")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LossReport:
    phase: int
    step: int
    ce: float
    rho: float
    combined: float
    snr_db: float
    task: str


# ---------------------------------------------------------------------------
# losses


def cross_entropy(probs: np.ndarray, targets) -> float:
    """-(1/L) sum_i log l_i[q_i] for probability rows ``probs`` (L, V) and 1-based ids.

    Probabilities under 1e-9 are clamped before the log (and logged).
    """
    probs = np.asarray(probs, dtype=np.float64)
    q = np.asarray(targets, dtype=np.int64) - 1
    p = probs[np.arange(len(q)), q]
    if np.any(p < CE_EPS):
        log.warning("target probability below %.0e clamped", CE_EPS)
    return float(-np.mean(np.log(np.maximum(p, CE_EPS))))


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam moments with bias correction; weight decay applied to the weights directly."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0
        self.skipped = 0

    def step(self) -> bool:
        """Apply one update from the params' ``.grad``.  Returns False if skipped."""
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped")
            return False
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# batching


def task_batches(corpus: Corpus, batch_size: int, rng: np.random.Generator) -> list[list[TaskSample]]:
    """One epoch of task-pure batches, interleaved round-robin over the training tasks."""
    per_task = []
    for name in TRAIN_TASKS:
        samples = corpus.train.get(name, [])
        order = rng.permutation(len(samples))
        per_task.append([[samples[j] for j in order[i:i + batch_size]]
                         for i in range(0, len(samples), batch_size)])
    out = []
    for i in range(max((len(b) for b in per_task), default=0)):
        for batches in per_task:
            if i < len(batches):
                out.append(batches[i])
    return out


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    """Linear warmup to ``cfg.lr``, then cosine decay to ``cfg.min_lr_ratio * cfg.lr``."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(total - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    floor = cfg.min_lr_ratio
    return cfg.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


@dataclass
class Trainer:
    system: SemanticSystem
    cfg: TrainConfig
    trace: list[LossReport] = field(default_factory=list)
    seconds: dict[int, float] = field(default_factory=dict)     # wall time per phase

    def _snr(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.cfg.snr_low, self.cfg.snr_high))

    def _check(self, value: float, phase: int, step: int, batch: Batch) -> None:
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"non-finite loss in phase {phase} at step {step} (task {batch.tasks[0]}, batch of {len(batch)})")

    def train_step(self, opt: AdamW | list[AdamW], batch: Batch, phase: int, snr: float,
                   rng: np.random.Generator, step: int) -> LossReport:
        use_fem = phase == 2
        out = self.system.forward(batch, snr, rng, use_fem=use_fem)
        if use_fem:
            loss = out.ce * self.cfg.omega_ce + out.rho * self.cfg.omega_rho
        else:
            loss = out.ce
        value = float(loss.data)
        self._check(value, phase, step, batch)
        opts = opt if isinstance(opt, list) else [opt]
        for o in opts:
            o.zero_grad()
        loss.backward()
        for o in opts:
            o.step()
        report = LossReport(phase, step, float(out.ce.data), float(out.rho.data), value, snr, batch.tasks[0])
        self.trace.append(report)
        return report

    def _run(self, phase: int, groups: list[tuple[list[Tensor], float]], epochs: int, corpus: Corpus) -> None:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, phase])
        opts = [AdamW(params, cfg.lr * scale, cfg.betas, cfg.adam_eps, cfg.weight_decay) for params, scale in groups]
        vocab = self.system.vocab
        start = time.perf_counter()
        step = 0
        total = epochs * len(task_batches(corpus, cfg.batch_size, np.random.default_rng(0)))
        for epoch in range(epochs):
            for samples in task_batches(corpus, cfg.batch_size, rng):
                lr = learning_rate(cfg, step, total)
                for o, (_, scale) in zip(opts, groups):
                    o.lr = lr * scale
                self.train_step(opts, collate(samples, vocab), phase, self._snr(rng), rng, step)
                step += 1
            recent = self.trace[-50:]
            log.info("phase %d epoch %d: ce=%.4f rho=%.3f", phase, epoch + 1,
                     np.mean([r.ce for r in recent]), np.mean([r.rho for r in recent]))
        self.seconds[phase] = self.seconds.get(phase, 0.0) + time.perf_counter() - start

    def phase1(self, corpus: Corpus, epochs: int | None = None) -> None:
        """FEM frozen and bypassed (all rows kept); encoder and decoder learn from cross-entropy."""
        epochs = self.cfg.epochs_phase1 if epochs is None else epochs
        self._run(1, [(self.system.model.parameters(), 1.0)], epochs, corpus)

    def phase2(self, corpus: Corpus, checkpoint: str | Path, epochs: int | None = None) -> None:
        """Load the phase-1 checkpoint, then train encoder, FEM and decoder jointly."""
        path = Path(checkpoint)
        if not path.exists():
            raise TrainingConfigError(f"phase-1 checkpoint {path} not found")
        ckpt.load_into(path, self.system.model)
        epochs = self.cfg.epochs_phase2 if epochs is None else epochs
        # the pretrained stack is fine-tuned gently; the FEM starts fresh at the full rate
        groups = [(self.system.model.parameters(), self.cfg.phase2_model_lr_scale),
                  (self.system.fem.parameters(), 1.0)]
        self._run(2, groups, epochs, corpus)

    def frozen_loss(self, batch: Batch, channel_seed: int = 0) -> float:
        """Cross-entropy on ``batch`` with every row kept and a fixed channel draw."""
        out = self.system.forward(batch, self.cfg.snr_high, np.random.default_rng(channel_seed), use_fem=False)
        return float(out.ce.data)

    def save(self, path: str | Path, phase: int) -> None:
        extra = {"phase": phase, "train_config": self.cfg.to_dict(), "steps": len(self.trace),
                 "seconds": self.seconds.get(phase, 0.0)}
        ckpt.save_checkpoint(path, self.system.model, self.system.fem, extra)

    def write_trace(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "phase", "L_CE", "L_rho", "rho", "snr_db", "task"])
            for r in self.trace:
                w.writerow([r.step, r.phase, f"{r.ce:.6f}", f"{r.rho:.6f}", f"{r.rho:.6f}",
                            f"{r.snr_db:.4f}", r.task])
