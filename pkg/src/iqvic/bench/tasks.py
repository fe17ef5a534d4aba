"""Synthetic question-answer samples over symbolic frame streams.

``kv_retrieval``: frame t shows one (key_t, value_t) pair on a grid of
filler symbols; the question names one of the stream's keys and the answer
is its value.

``single_frame``: one such frame; the question names either the shown key
(answer: its value) or a key not on screen (answer: ``none``).  This is the
image-QA stand-in used to train the compressor side.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..transformer import ConfigError
from ..vocab import Vocab

TASKS = ("single_frame", "kv_retrieval")


@dataclass
class QASample:
    frames: np.ndarray  # (T, G, G) symbol ids
    question: list[int]
    gold_answer: list[int]
    task_tag: str
    seed: int = 0
    index: int = 0

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "index": self.index,
            "task": self.task_tag,
            "frames": self.frames.tolist(),
            "question": list(self.question),
            "answer": list(self.gold_answer),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> QASample:
        d = json.loads(line)
        if d["task"] not in TASKS:
            raise ValueError(f"unknown task tag {d['task']!r}")
        return cls(np.asarray(d["frames"], dtype=np.int64), list(d["question"]), list(d["answer"]),
                   d["task"], int(d["seed"]), int(d["index"]))

    def __eq__(self, other):
        return (isinstance(other, QASample) and np.array_equal(self.frames, other.frames)
                and self.question == other.question and self.gold_answer == other.gold_answer
                and self.task_tag == other.task_tag and self.seed == other.seed and self.index == other.index)


def _frame(vocab: Vocab, rng: np.random.Generator, grid: int, key: int, value: int) -> np.ndarray:
    cells = vocab.fill_symbol(0) + rng.integers(0, vocab.n_fill, size=grid * grid)
    at = rng.choice(grid * grid, size=2, replace=False)
    cells[at[0]] = vocab.key_symbol(key)
    cells[at[1]] = vocab.value_symbol(value)
    return cells.reshape(grid, grid)


def gen_kv_stream(n_frames: int, vocab: Vocab, seed: int, index: int = 0, grid: int = 4,
                  query_frame: int | None = None) -> QASample:
    """Needle-style stream: distinct keys per frame, question asks one of them."""
    if n_frames < 1:
        raise ConfigError("a stream needs at least one frame")
    if vocab.n_keys < n_frames:
        raise ConfigError(f"{n_frames} frames need distinct keys but only {vocab.n_keys} exist")
    if grid * grid < 2:
        raise ConfigError("grid must hold at least a key and a value cell")
    rng = np.random.default_rng([seed, index])
    keys = rng.choice(vocab.n_keys, size=n_frames, replace=False)
    values = rng.integers(0, vocab.n_values, size=n_frames)
    frames = np.stack([_frame(vocab, rng, grid, int(k), int(v)) for k, v in zip(keys, values)])
    t = int(rng.integers(0, n_frames)) if query_frame is None else query_frame
    return QASample(frames, vocab.question(int(keys[t])), [vocab.value_token(int(values[t]))],
                    "kv_retrieval", seed, index)


def gen_single_frame(vocab: Vocab, seed: int, index: int = 0, grid: int = 4,
                     p_present: float = 0.5) -> QASample:
    rng = np.random.default_rng([seed, index])
    key = int(rng.integers(0, vocab.n_keys))
    value = int(rng.integers(0, vocab.n_values))
    frame = _frame(vocab, rng, grid, key, value)
    if rng.random() < p_present:
        q, ans = key, vocab.value_token(value)
    else:
        q = int((key + 1 + rng.integers(0, vocab.n_keys - 1)) % vocab.n_keys)
        ans = vocab.none_id
    return QASample(frame[None], vocab.question(q), [ans], "single_frame", seed, index)


def generate(task: str, n: int, vocab: Vocab, seed: int, n_frames: int = 8, grid: int = 4,
             start: int = 0) -> list[QASample]:
    if task == "kv_retrieval":
        return [gen_kv_stream(n_frames, vocab, seed, i, grid) for i in range(start, start + n)]
    if task == "single_frame":
        return [gen_single_frame(vocab, seed, i, grid) for i in range(start, start + n)]
    raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")


def write_jsonl(path: str | Path, samples: Iterable[QASample]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[QASample]:
    return list(iter_jsonl(path))


def iter_jsonl(path: str | Path) -> Iterator[QASample]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield QASample.from_json(line)
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed sample ({exc})") from exc
