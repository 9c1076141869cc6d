"""Command-line entry point: ``moe-sc <subcommand> [--config FILE] [--set section.key=value ...]``.

Config files are INI (``configparser``) with sections ``corpus``, ``model``,
``fem``, ``train``, ``eval`` and ``baseline``.  Values are read as JSON when
they parse (numbers, booleans, lists, objects) and as plain strings
otherwise.  Every command writes ``manifest.json`` beside its outputs.

Exit codes: 0 success, 2 configuration error, 3 integrity error
(unreadable or mismatched checkpoint, corrupt corpus file).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import baseline as bl
from . import evaluate as ev
from .checkpoint import CheckpointError, ShapeMismatchError
from .fem import FEMConfig, FeatureExtractionModule
from .pipeline import ConfigMismatchError, build_system, collate, load_system
from .tasks import build_corpus, default_vocabulary, exact_match, export_corpus, import_corpus, make_sample
from .training import Trainer, TrainConfig, TrainingConfigError
from .transformer import ModelConfig

log = logging.getLogger("moe_sc")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY = 0, 2, 3
SECTIONS = ("corpus", "model", "fem", "train", "eval", "baseline")
CORPUS_DEFAULTS = {"seed": 0, "n_train": 2000, "n_eval": 500}
BASELINE_DEFAULTS = {"snr_grid": [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0], "samples_per_point": 200,
                     "tasks": "all", "seed": 0, "corpus_seed": 0}


class ConfigError(ValueError):
    pass


class IntegrityError(Exception):
    """An input file exists but cannot be trusted."""


# ---------------------------------------------------------------------------
# configuration


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    cfg: dict[str, dict] = {s: {} for s in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            cfg[section] = {k: _value(v) for k, v in parser.items(section)}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not (sep and dot and name) or section not in cfg:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        cfg[section][name] = _value(value)
    return cfg


def _typed(cls, values: dict):
    known = set(cls.__dataclass_fields__)
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _section(cfg: dict, name: str, defaults: dict) -> dict:
    unknown = set(cfg[name]) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown [{name}] keys: {sorted(unknown)}")
    return {**defaults, **cfg[name]}


def _code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_manifest(out_dir: Path, command: str, cfg: dict, outputs: list[Path], seed: int) -> Path:
    manifest = {
        "command": command,
        "config": cfg,
        "seed": seed,
        "code_version": _code_version(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "outputs": sorted(str(p.name) for p in outputs),
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands


def _corpus(cfg: dict, corpus_file: str | None):
    if corpus_file:
        try:
            return import_corpus(corpus_file)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"cannot read corpus {corpus_file}: {exc}") from exc
    c = _section(cfg, "corpus", CORPUS_DEFAULTS)
    return build_corpus(int(c["seed"]), int(c["n_train"]), int(c["n_eval"]))


def cmd_gen_corpus(args, cfg) -> list[Path]:
    c = _section(cfg, "corpus", CORPUS_DEFAULTS)
    path = args.out_dir / "corpus.jsonl"
    export_corpus(build_corpus(int(c["seed"]), int(c["n_train"]), int(c["n_eval"])), path)
    return [path]


def cmd_train_phase1(args, cfg) -> list[Path]:
    model_cfg = _typed(ModelConfig, {"vocab_size": len(default_vocabulary()), **cfg["model"]})
    fem_cfg = _typed(FEMConfig, cfg["fem"])
    train_cfg = _typed(TrainConfig, cfg["train"])
    system = build_system(model_cfg, fem_cfg)
    trainer = Trainer(system, train_cfg)
    trainer.phase1(_corpus(cfg, args.corpus))
    ckpt_path, trace = args.out_dir / "phase1.ckpt", args.out_dir / "trace_phase1.csv"
    trainer.save(ckpt_path, 1)
    trainer.write_trace(trace)
    return [ckpt_path, trace]


def cmd_train_phase2(args, cfg) -> list[Path]:
    if not args.checkpoint:
        raise ConfigError("train-phase2 needs --checkpoint (the phase-1 checkpoint)")
    system, _ = load_system(args.checkpoint)
    if cfg["fem"]:
        # a phase-1 checkpoint carries an untrained FEM; its settings may still be changed here
        fem_cfg = _typed(FEMConfig, {**system.fem.cfg.to_dict(), **cfg["fem"]})
        system.fem = FeatureExtractionModule(system.model.cfg.d_model, fem_cfg)
    trainer = Trainer(system, _typed(TrainConfig, cfg["train"]))
    trainer.phase2(_corpus(cfg, args.corpus), args.checkpoint)
    ckpt_path, trace = args.out_dir / "phase2.ckpt", args.out_dir / "trace_phase2.csv"
    trainer.save(ckpt_path, 2)
    trainer.write_trace(trace)
    return [ckpt_path, trace]


def _experiment(args, cfg) -> ev.ExperimentConfig:
    values = dict(cfg["eval"])
    if args.checkpoint:
        values["checkpoint"] = args.checkpoint
    values["output"] = str(args.out_dir)
    try:
        return _typed(ev.ExperimentConfig, values)
    except ev.ExperimentConfigError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_eval_sweep(args, cfg) -> list[Path]:
    exp = _experiment(args, cfg)
    if not exp.checkpoint:
        raise ConfigError("eval-sweep needs a checkpoint (--checkpoint or eval.checkpoint)")
    points = ev.run_sweep(exp)
    outputs = [ev.write_accuracy_sweep(points, args.out_dir / "accuracy_sweep.csv"),
               ev.write_task_sweep(points, args.out_dir / "task_sweep.csv")]
    if not args.no_plots:
        outputs.append(ev.plot_sweep(points, args.out_dir / "sweep.png"))
    return outputs


def cmd_ablate(args, cfg) -> list[Path]:
    exp = _experiment(args, cfg)
    if exp.axis is None or not exp.values:
        raise ConfigError("ablate needs eval.axis (M or B) and eval.values")
    runs = {int(k): v for k, v in exp.runs.items()}
    rows = ev.run_ablation(exp, exp.axis, [int(v) for v in exp.values], runs)
    outputs = [ev.write_ablation(rows, args.out_dir / f"ablation_{exp.axis}.csv")]
    if not args.no_plots:
        outputs.append(ev.plot_ablation(rows, args.out_dir / f"ablation_{exp.axis}.png"))
    return outputs


def cmd_table1(args, cfg) -> list[Path]:
    configs = {}
    if cfg["model"]:
        configs["configured"] = _typed(ModelConfig, {"vocab_size": len(default_vocabulary()), **cfg["model"]})
    rows = ev.report_table1(configs)
    return [ev.write_cost_table(rows, args.out_dir / "cost_table.csv")]


def _answer_recovered(system, samples, texts: list[str], batch_size: int = 125) -> float:
    """Exact match of the model run, with no channel, on text the classical link delivered."""
    limit = system.model.cfg.max_len
    recovered = []
    for s, text in zip(samples, texts):
        words = text.split()[:limit] or ["<unk>"]
        recovered.append(replace(s, prompt=" ".join(words)))
    hits = []
    for i in range(0, len(recovered), batch_size):
        chunk = recovered[i:i + batch_size]
        answers, _ = system.generate(collate(chunk, system.vocab), None, None, use_fem=False)
        hits += [exact_match(a, s.target) for a, s in zip(answers, chunk)]
    return float(np.mean(hits))


def cmd_baseline_eval(args, cfg) -> list[Path]:
    b = _section(cfg, "baseline", BASELINE_DEFAULTS)
    grid = [float(g) for g in b["snr_grid"]]
    if not grid or grid != sorted(grid) or int(b["samples_per_point"]) < 1:
        raise ConfigError("baseline.snr_grid must be nonempty and sorted; samples_per_point >= 1")
    tasks = ev.resolve_tasks(b["tasks"])
    n = int(b["samples_per_point"])
    system = load_system(args.checkpoint)[0] if args.checkpoint else None
    rows = []
    for gi, snr in enumerate(grid):
        rng = np.random.default_rng([int(b["seed"]), gi])
        for task in tasks:
            samples = [make_sample(int(b["corpus_seed"]), task, "eval", i) for i in range(n)]
            links = [bl.baseline_link(s.prompt, snr, rng) for s in samples]
            text_exact = float(np.mean([r.text == s.prompt for r, s in zip(links, samples)]))
            acc, hw = ev.GAP, ev.GAP
            if system is not None:
                acc = _answer_recovered(system, samples, [r.text for r in links])
                hw = ev.half_width(acc, n)
            rows.append([task, snr, acc, hw, text_exact, float(np.mean([r.n_symbols for r in links])), n])
    path = ev._write(args.out_dir / "baseline_sweep.csv", "baseline_sweep",
                     ["task", "snr_db", "accuracy", "half_width", "text_exact", "mean_symbols", "n"], rows)
    return [path]


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-phase1": cmd_train_phase1,
    "train-phase2": cmd_train_phase2,
    "eval-sweep": cmd_eval_sweep,
    "ablate": cmd_ablate,
    "table1": cmd_table1,
    "baseline-eval": cmd_baseline_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-sc", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--out-dir", type=Path, default=Path("results"))
        p.add_argument("--checkpoint", help="checkpoint to load")
        p.add_argument("--corpus", help="JSONL corpus written by gen-corpus")
        p.add_argument("--no-plots", action="store_true", help="write CSV only")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](args, cfg)
        seed = int(cfg["train"].get("seed", cfg["eval"].get("seed", 0)))
        write_manifest(args.out_dir, args.command, cfg, outputs, seed)
    except (ConfigError, ConfigMismatchError, TrainingConfigError, ev.ExperimentConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, ShapeMismatchError, IntegrityError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
