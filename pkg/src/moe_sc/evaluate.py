"""SNR sweeps, ablations over M and B, analytic cost tables and their CSV/figure output.

Every CSV carries a ``schema`` column naming its emitter and version so that
downstream readers can refuse files they do not understand.  Floats are
written with fixed precision, which keeps seeded reruns byte-identical.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .pipeline import SemanticSystem, collate, load_system
from .tasks import HELD_OUT_TASKS, TASKS, TRAIN_TASKS, exact_match, make_sample
from .transformer import ModelConfig, count_flops_per_token, count_params

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GAP = "missing"


class ExperimentConfigError(ValueError):
    pass


def resolve_tasks(selection: str | Sequence[str]) -> list[str]:
    """``"train"``, ``"held_out"``, ``"all"`` or explicit task names."""
    if isinstance(selection, str):
        if selection == "train":
            return list(TRAIN_TASKS)
        if selection == "held_out":
            return list(HELD_OUT_TASKS)
        if selection == "all":
            return list(TASKS)
        selection = [s.strip() for s in selection.split(",") if s.strip()]
    unknown = [t for t in selection if t not in TASKS]
    if unknown or not selection:
        raise ExperimentConfigError(f"unknown task selection {unknown or selection!r}")
    return list(selection)


@dataclass
class ExperimentConfig:
    checkpoint: str = ""
    snr_grid: list[float] = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0])
    samples_per_point: int = 200
    tasks: str | list[str] = "held_out"
    axis: str | None = None                   # "M" or "B" for ablations
    values: list[int] = field(default_factory=list)
    runs: dict[str, str] = field(default_factory=dict)   # ablation value -> checkpoint
    output: str = "results"
    seed: int = 0
    corpus_seed: int = 0
    use_fem: bool | None = None               # None: decided by the checkpoint's phase
    batch_size: int = 125
    max_new: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        grid = [float(g) for g in self.snr_grid]
        if not grid:
            raise ExperimentConfigError("snr_grid must not be empty")
        if grid != sorted(grid):
            raise ExperimentConfigError("snr_grid must be sorted ascending")
        self.snr_grid = grid
        if self.samples_per_point < 1:
            raise ExperimentConfigError("samples_per_point must be >= 1")
        if self.axis not in (None, "M", "B"):
            raise ExperimentConfigError(f"ablation axis must be M or B, got {self.axis!r}")
        resolve_tasks(self.tasks)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SweepPoint:
    task: str
    snr_db: float
    accuracy: float
    rho: float
    n: int
    half_width: float


def half_width(p: float, n: int, z: float = 1.96) -> float:
    """Normal-approximation 95% half-width of a proportion."""
    return z * math.sqrt(max(p * (1.0 - p), 0.0) / n)


# ---------------------------------------------------------------------------
# sweeps


def sweep(system: SemanticSystem, tasks: Sequence[str], snr_grid: Sequence[float], n: int, seed: int = 0,
          corpus_seed: int = 0, use_fem: bool = True, batch_size: int = 125, max_new: int = 8) -> list[SweepPoint]:
    """Accuracy and compression ratio per (task, SNR).

    Each item gets its own channel draw.  Every (task, SNR) point owns an
    RNG stream keyed by its grid position, so points do not depend on each
    other or on evaluation order.
    """
    out = []
    for ti, task in enumerate(tasks):
        samples = [make_sample(corpus_seed, task, "eval", i) for i in range(n)]
        for gi, snr in enumerate(snr_grid):
            rng = np.random.default_rng([seed, list(TASKS).index(task), gi])
            hits, rhos = [], []
            for i in range(0, n, batch_size):
                chunk = samples[i:i + batch_size]
                answers, rho = system.generate(collate(chunk, system.vocab), snr, rng, use_fem, max_new)
                hits += [exact_match(a, s.target) for a, s in zip(answers, chunk)]
                rhos += rho.tolist()
            acc = float(np.mean(hits))
            out.append(SweepPoint(task, float(snr), acc, float(np.mean(rhos)), n, half_width(acc, n)))
            log.info("%s @ %.1f dB: acc=%.3f rho=%.3f", task, snr, acc, out[-1].rho)
    return out


def _fem_default(header: dict) -> bool:
    return int(header.get("extra", {}).get("phase", 1)) >= 2


def run_sweep(cfg: ExperimentConfig) -> list[SweepPoint]:
    system, header = load_system(cfg.checkpoint)
    use_fem = _fem_default(header) if cfg.use_fem is None else cfg.use_fem
    return sweep(system, resolve_tasks(cfg.tasks), cfg.snr_grid, cfg.samples_per_point, cfg.seed,
                 cfg.corpus_seed, use_fem, cfg.batch_size, cfg.max_new)


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationRow:
    axis: str
    value: int
    snr_db: float
    accuracy: float | None     # None marks a missing run
    rho: float | None
    n: int
    params: int | None
    flops_per_token: int | None
    status: str


def run_ablation(cfg: ExperimentConfig, axis: str, values: Iterable[int],
                 runs: dict[int, str | None]) -> list[AblationRow]:
    """Mean accuracy over the selected tasks per ablation value and SNR.

    ``runs`` maps each value to a checkpoint path.  A value without a
    checkpoint, or whose checkpoint cannot be read, yields gap rows with
    status ``missing`` rather than being dropped.
    """
    if axis not in ("M", "B"):
        raise ExperimentConfigError(f"ablation axis must be M or B, got {axis!r}")
    tasks = resolve_tasks(cfg.tasks)
    rows = []
    for value in values:
        path = runs.get(value)
        if path is None or not Path(path).exists():
            log.warning("ablation %s=%s: no run available", axis, value)
            rows += [AblationRow(axis, value, g, None, None, 0, None, None, GAP) for g in cfg.snr_grid]
            continue
        system, header = load_system(path)
        actual = system.model.cfg.n_experts if axis == "M" else system.fem.cfg.n_extractors
        if actual != value:
            raise ExperimentConfigError(f"run for {axis}={value} has {axis}={actual}")
        use_fem = _fem_default(header) if cfg.use_fem is None else cfg.use_fem
        points = sweep(system, tasks, cfg.snr_grid, cfg.samples_per_point, cfg.seed, cfg.corpus_seed,
                       use_fem, cfg.batch_size, cfg.max_new)
        params = count_params(system.model.cfg) + system.fem.n_params()
        flops = count_flops_per_token(system.model.cfg)
        for g in cfg.snr_grid:
            at = [p for p in points if p.snr_db == g]
            rows.append(AblationRow(axis, value, g, float(np.mean([p.accuracy for p in at])),
                                    float(np.mean([p.rho for p in at])), sum(p.n for p in at),
                                    params, flops, "ok"))
    return rows


# ---------------------------------------------------------------------------
# analytic cost table

PUBLISHED_DIMS = dict(n_layers=12, d_model=768, n_heads=12, vocab_size=32128, max_len=512, d_ff=3072,
                      tie_embeddings=False)
PUBLISHED = {
    "moe_m10_k1": (ModelConfig(**PUBLISHED_DIMS, n_experts=10, top_k=1), 1.27e9, 300e6),
    "dense_m1": (ModelConfig(**PUBLISHED_DIMS, n_experts=1, top_k=1), 250e6, 300e6),
}


@dataclass(frozen=True)
class CostRow:
    name: str
    params: int
    flops_per_token: int
    published_params: float | None = None
    published_flops: float | None = None

    @property
    def params_rel_err(self) -> float | None:
        return None if self.published_params is None else self.params / self.published_params - 1.0

    @property
    def flops_rel_err(self) -> float | None:
        return None if self.published_flops is None else self.flops_per_token / self.published_flops - 1.0


def report_table1(configs: dict[str, ModelConfig] | None = None, check: bool = True) -> list[CostRow]:
    """Parameter and per-token FLOP counts; ``check`` appends the published reference rows."""
    rows = [CostRow(name, count_params(c), count_flops_per_token(c)) for name, c in (configs or {}).items()]
    if check:
        rows += [CostRow(f"check_{name}", count_params(c), count_flops_per_token(c), p, f)
                 for name, (c, p, f) in PUBLISHED.items()]
    return rows


# ---------------------------------------------------------------------------
# CSV emitters


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def _write(path: str | Path, schema: str, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schema"] + header)
        for r in rows:
            w.writerow([f"{schema}.v{SCHEMA_VERSION}"] + [_fmt(x) for x in r])
    return path


def write_accuracy_sweep(points: list[SweepPoint], path: str | Path) -> Path:
    """Accuracy versus SNR per task with 95% half-widths."""
    return _write(path, "accuracy_sweep", ["task", "snr_db", "accuracy", "half_width", "n"],
                  [[p.task, p.snr_db, p.accuracy, p.half_width, p.n] for p in points])


def write_task_sweep(points: list[SweepPoint], path: str | Path) -> Path:
    """Accuracy and compression ratio versus SNR per task."""
    return _write(path, "task_sweep", ["task", "snr_db", "accuracy", "half_width", "rho", "n"],
                  [[p.task, p.snr_db, p.accuracy, p.half_width, p.rho, p.n] for p in points])


def write_ablation(rows: list[AblationRow], path: str | Path) -> Path:
    """Long-form ablation table; one emitter serves both the M and the B axis."""
    schema = f"ablation_{rows[0].axis}" if rows else "ablation"
    return _write(path, schema, ["axis", "value", "snr_db", "accuracy", "rho", "n", "params",
                                 "flops_per_token", "status"],
                  [[r.axis, r.value, r.snr_db, r.accuracy, r.rho, r.n, r.params, r.flops_per_token, r.status]
                   for r in rows])


def write_cost_table(rows: list[CostRow], path: str | Path) -> Path:
    return _write(path, "cost_table", ["name", "params", "flops_per_token", "published_params",
                                       "published_flops", "params_rel_err", "flops_rel_err"],
                  [[r.name, r.params, r.flops_per_token, r.published_params, r.published_flops,
                    r.params_rel_err, r.flops_rel_err] for r in rows])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# figures


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_sweep(points: list[SweepPoint], path: str | Path, with_rho: bool = True) -> Path:
    plt = _pyplot()
    ncols = 2 if with_rho else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5 * ncols, 3.6), squeeze=False)
    for task in dict.fromkeys(p.task for p in points):
        pts = [p for p in points if p.task == task]
        snr = [p.snr_db for p in pts]
        axes[0, 0].errorbar(snr, [p.accuracy for p in pts], yerr=[p.half_width for p in pts],
                            marker="o", capsize=3, label=task)
        if with_rho:
            axes[0, 1].plot(snr, [p.rho for p in pts], marker="s", label=task)
    axes[0, 0].set(xlabel="SNR (dB)", ylabel="exact-match accuracy", ylim=(-0.02, 1.02))
    if with_rho:
        axes[0, 1].set(xlabel="SNR (dB)", ylabel="compression ratio", ylim=(0, 1.05))
    for ax in axes[0]:
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: list[AblationRow], path: str | Path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for value in dict.fromkeys(r.value for r in rows):
        rs = [r for r in rows if r.value == value and r.status == "ok"]
        if rs:
            ax.plot([r.snr_db for r in rs], [r.accuracy for r in rs], marker="o", label=f"{rs[0].axis}={value}")
    ax.set(xlabel="SNR (dB)", ylabel="mean held-out accuracy", ylim=(-0.02, 1.02))
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
