"""Synthetic prompted multi-task corpus, word-level tokenizer and exact-match scoring.

Four families are used for training (pattern copy, polarity
classification, membership QA, sequence completion).  Three more are held
out for zero-shot evaluation.  Each asks for a trained skill through an
instruction phrasing that never occurs in training:

* short membership drops the words "the list" from the membership question;
* rephrased polarity puts the phrase first and the question after it;
* rephrased sequence asks for the next element before naming the sequence.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .transformer import EOS_ID, PAD_ID, UNK_ID

COLORS = ["red", "blue", "green", "yellow", "black", "white", "brown", "pink"]
ANIMALS = ["cat", "dog", "fish", "bird", "cow", "horse", "lion", "mouse", "bear", "frog"]
POSITIVE = ["good", "great", "happy", "nice", "kind", "love", "fun", "calm", "bright", "warm", "sweet", "brave"]
NEGATIVE = ["bad", "awful", "sad", "ugly", "cruel", "hate", "boring", "angry", "dark", "cold", "bitter", "weak"]
NUMBERS = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"]
ITEMS = COLORS + ANIMALS

MODIFIERS = ["very", "really", "so"]

TEMPLATE_WORDS = ("repeat the words : copy this is word positive or negative ? what sentiment of "
                  "not in within list does contain continue sequence comes next yes no").split() + MODIFIERS

SPECIALS = ["<pad>", "<eos>", "<unk>"]


class Vocabulary:
    """Word <-> id map.  Ids start at 1; <pad>=1, <eos>=2, <unk>=3."""

    def __init__(self, words: Iterable[str]):
        self.tokens: list[str] = list(SPECIALS)
        for w in words:
            if w not in self.tokens:
                self.tokens.append(w)
        self._ids = {t: i + 1 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self._ids.get(word, UNK_ID)

    def token(self, idx: int) -> str:
        return self.tokens[idx - 1]

    def tokenize(self, text: str) -> list[int]:
        return [self.id(w) for w in text.split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if i == EOS_ID:
                break
            if i == PAD_ID:
                continue
            words.append(self.token(i))
        return " ".join(words)


def default_vocabulary() -> Vocabulary:
    return Vocabulary(TEMPLATE_WORDS + ITEMS + POSITIVE + NEGATIVE + NUMBERS)


# ---------------------------------------------------------------------------
# task families


def _polarity(word: str) -> str:
    return "positive" if word in POSITIVE else "negative"


def _flip(label: str) -> str:
    return {"positive": "negative", "negative": "positive", "yes": "no", "no": "yes"}[label]


def _gen_copy(rng: np.random.Generator) -> tuple[dict, str]:
    n = int(rng.integers(1, 5))
    words = " ".join(rng.choice(ITEMS, size=n, replace=True))
    return {"words": words}, words


def _gen_polarity(rng: np.random.Generator) -> tuple[dict, str]:
    word = str(rng.choice(POSITIVE + NEGATIVE))
    negated = bool(rng.integers(2))
    label = _polarity(word)
    mod = str(rng.choice([""] + MODIFIERS))
    phrase = f"{'not ' if negated else ''}{mod} {word}"
    return {"word": " ".join(phrase.split())}, _flip(label) if negated else label


def _gen_membership(rng: np.random.Generator) -> tuple[dict, str]:
    n = int(rng.integers(1, 5))
    items = list(rng.choice(ITEMS, size=n, replace=False))
    present = bool(rng.integers(2))
    if present:
        query = str(items[int(rng.integers(n))])
    else:
        query = str(rng.choice([w for w in ITEMS if w not in items]))
    return {"x": query, "items": " ".join(items)}, "yes" if present else "no"


def _gen_sequence(rng: np.random.Generator) -> tuple[dict, str]:
    step = int(rng.integers(1, 3))
    start = int(rng.integers(0, len(NUMBERS) - 3 * step))
    seq = [NUMBERS[start + i * step] for i in range(3)]
    return {"seq": " ".join(seq)}, NUMBERS[start + 3 * step]


@dataclass(frozen=True)
class TaskSpec:
    name: str
    templates: tuple[str, ...]
    generator: Callable[[np.random.Generator], tuple[dict, str]]
    split: str                          # "train" or "held_out"
    answers: tuple[str, ...] = ()       # closed answer space; empty for open-ended tasks
    data_weight: int = 1                # training samples per corpus unit

    @property
    def chance_rate(self) -> float:
        """Exact-match rate of a uniform guess over the answer space (0 if open-ended)."""
        return 1.0 / len(self.answers) if self.answers else 0.0

    def sample(self, rng: np.random.Generator) -> tuple[str, str]:
        content, target = self.generator(rng)
        template = self.templates[int(rng.integers(len(self.templates)))]
        return " ".join(template.format(**content).split()), target


TASKS: dict[str, TaskSpec] = {
    t.name: t for t in [
        TaskSpec("copy", ("repeat the words : {words}", "copy this : {words}"), _gen_copy, "train"),
        TaskSpec("polarity", ("is the word {word} positive or negative ?",
                              "what is the sentiment of {word} ?"),
                 _gen_polarity, "train", ("positive", "negative")),
        # membership is the slowest skill to pick up in the mix, so it gets twice the data
        TaskSpec("membership", ("is {x} in the list {items} ?", "does the list {items} contain {x} ?"),
                 _gen_membership, "train", ("yes", "no"), data_weight=2),
        TaskSpec("sequence", ("continue the sequence {seq}", "what comes next : {seq} ?"),
                 _gen_sequence, "train", tuple(NUMBERS[3:])),
        TaskSpec("membership_rephrased", ("is {x} within the list {items} ?",), _gen_membership, "held_out",
                 ("yes", "no")),
        TaskSpec("polarity_rephrased", ("the word {word} is positive or negative ?",),
                 _gen_polarity, "held_out", ("positive", "negative")),
        TaskSpec("sequence_rephrased", ("what comes next in the sequence {seq} ?",),
                 _gen_sequence, "held_out", tuple(NUMBERS[3:])),
    ]
}

TRAIN_TASKS = [n for n, t in TASKS.items() if t.split == "train"]
HELD_OUT_TASKS = [n for n, t in TASKS.items() if t.split == "held_out"]


# ---------------------------------------------------------------------------
# corpus


@dataclass
class TaskSample:
    task: str
    prompt: str
    target: str
    split: str
    index: int

    def prompt_ids(self, vocab: Vocabulary) -> list[int]:
        return vocab.tokenize(self.prompt)

    def target_ids(self, vocab: Vocabulary) -> list[int]:
        return vocab.tokenize(self.target) + [EOS_ID]


@dataclass
class Corpus:
    train: dict[str, list[TaskSample]] = field(default_factory=dict)
    eval: dict[str, list[TaskSample]] = field(default_factory=dict)

    def all_samples(self) -> list[TaskSample]:
        out: list[TaskSample] = []
        for split in (self.train, self.eval):
            for samples in split.values():
                out.extend(samples)
        return out


_SPLIT_CODE = {"train": 0, "eval": 1}


def make_sample(seed: int, task: str, split: str, index: int) -> TaskSample:
    """Sample ``index`` of ``task``/``split``; a pure function of its arguments."""
    task_code = list(TASKS).index(task)
    rng = np.random.default_rng([seed, task_code, _SPLIT_CODE[split], index])
    prompt, target = TASKS[task].sample(rng)
    return TaskSample(task, prompt, target, split, index)


def build_corpus(seed: int = 0, n_train: int = 2000, n_eval: int = 500) -> Corpus:
    """Training samples for the training tasks, eval samples for every task.

    Each training task gets ``n_train * data_weight`` samples.
    """
    if n_train < 1 or n_eval < 1:
        raise ValueError("corpus sizes must be positive")
    corpus = Corpus()
    for name in TRAIN_TASKS:
        corpus.train[name] = [make_sample(seed, name, "train", i) for i in range(n_train * TASKS[name].data_weight)]
    for name in TASKS:
        corpus.eval[name] = [make_sample(seed, name, "eval", i) for i in range(n_eval)]
    return corpus


def export_corpus(corpus: Corpus, path: str | Path) -> None:
    """One JSON record per line: task, split, index, prompt, target."""
    with open(path, "w") as fh:
        for s in corpus.all_samples():
            fh.write(json.dumps({"task": s.task, "split": s.split, "index": s.index,
                                 "prompt": s.prompt, "target": s.target}, sort_keys=True) + "\n")


def import_corpus(path: str | Path) -> Corpus:
    corpus = Corpus()
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            s = TaskSample(r["task"], r["prompt"], r["target"], r["split"], int(r["index"]))
            getattr(corpus, s.split).setdefault(s.task, []).append(s)
    return corpus


# ---------------------------------------------------------------------------
# scoring


def exact_match(generated: str, target: str) -> int:
    """1 iff identical after trimming trailing whitespace (case-sensitive)."""
    return int(generated.rstrip() == target.rstrip())


def accuracy(pairs: Iterable[tuple[str, str]]) -> float:
    pairs = list(pairs)
    if not pairs:
        return float("nan")
    return sum(exact_match(g, t) for g, t in pairs) / len(pairs)
