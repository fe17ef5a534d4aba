"""Closed whitespace vocabulary shared by the question, answer and frame symbols."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

PAD, EOS, NONE = "<pad>", "<eos>", "none"
PROMPT = ("what", "is")
QMARK = "?"


class VocabularyError(KeyError):
    def __init__(self, unknown):
        self.unknown = list(unknown)
        super().__init__(f"unknown words: {', '.join(self.unknown)}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Vocab:
    n_keys: int = 16
    n_values: int = 16
    n_fill: int = 16

    @property
    def words(self) -> list[str]:
        return ([PAD, EOS, NONE, *PROMPT, QMARK]
                + [f"k{i}" for i in range(self.n_keys)]
                + [f"v{i}" for i in range(self.n_values)])

    def __len__(self) -> int:
        return len(self.words)

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def none_id(self) -> int:
        return 2

    def key_token(self, k: int) -> int:
        return 6 + k

    def value_token(self, v: int) -> int:
        return 6 + self.n_keys + v

    # frame alphabet: keys, then values, then filler symbols
    @property
    def frame_alphabet(self) -> int:
        return self.n_keys + self.n_values + self.n_fill

    def key_symbol(self, k: int) -> int:
        return k

    def value_symbol(self, v: int) -> int:
        return self.n_keys + v

    def fill_symbol(self, f: int) -> int:
        return self.n_keys + self.n_values + f

    def question(self, k: int) -> list[int]:
        return self.encode(f"what is k{k} ?")

    def encode(self, text: str) -> list[int]:
        index = {w: i for i, w in enumerate(self.words)}
        toks = text.split()
        unknown = [w for w in toks if w not in index]
        if unknown:
            raise VocabularyError(unknown)
        return [index[w] for w in toks]

    def decode(self, ids) -> str:
        words = self.words
        return " ".join(words[i] if 0 <= i < len(words) else f"<{i}>" for i in ids)

    def to_dict(self) -> dict:
        return {"n_keys": self.n_keys, "n_values": self.n_values, "n_fill": self.n_fill, "words": self.words}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Vocab:
        d = json.loads(Path(path).read_text())
        return cls(d["n_keys"], d["n_values"], d["n_fill"])
