"""Fixed-capacity context memory with adjacent-pair similarity merging."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, DimensionError
from .compressor import ContextEmbedding
from .transformer import load_arrays, save_arrays


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class MergeRecord:
    step: int
    index: int  # 0-based position k of the merged pair (k, k+1)
    similarity: float


def entry_similarity(a: ContextEmbedding | np.ndarray, b: ContextEmbedding | np.ndarray) -> float:
    """Cosine of the two entries flattened to vectors; 0 if either is ~zero."""
    x = a.tokens if isinstance(a, ContextEmbedding) else np.asarray(a)
    y = b.tokens if isinstance(b, ContextEmbedding) else np.asarray(b)
    if x.shape != y.shape:
        raise DimensionError(f"entry shapes differ: {x.shape} vs {y.shape}")
    x, y = x.ravel(), y.ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx < 1e-12 or ny < 1e-12:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


@dataclass
class ContextMemory:
    capacity: int
    entries: list[ContextEmbedding] = field(default_factory=list)
    merge_log: list[MergeRecord] = field(default_factory=list)
    steps: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ContractError(f"capacity must be positive, got {self.capacity}")
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def question_hash(self) -> str | None:
        return self.entries[0].question_hash if self.entries else None

    @property
    def entry_shape(self) -> tuple[int, int] | None:
        return self.entries[0].shape if self.entries else None

    def insert(self, e_new: ContextEmbedding) -> ContextMemory:
        """Append ``e_new``; on overflow average the most similar adjacent pair.

        Ties in similarity go to the earliest pair.  Returns ``self``.
        """
        if self.entries:
            if e_new.shape != self.entry_shape:
                raise DimensionError(f"entry shape {e_new.shape} != memory entry shape {self.entry_shape}")
            if e_new.question_hash != self.question_hash:
                raise ConsistencyError("context embedding was conditioned on a different question")
        tokens = np.array(e_new.tokens, dtype=np.float64)
        tokens.setflags(write=False)
        staged = list(self.entries) + [ContextEmbedding(tokens, e_new.source_index, e_new.question_hash)]
        self.steps += 1
        record = None
        if len(staged) > self.capacity:
            sims = [entry_similarity(staged[i], staged[i + 1]) for i in range(len(staged) - 1)]
            k = int(np.argmax(sims))
            merged = (staged[k].tokens + staged[k + 1].tokens) / 2
            merged.setflags(write=False)
            staged[k:k + 2] = [ContextEmbedding(merged, staged[k].source_index, staged[k].question_hash)]
            record = MergeRecord(self.steps, k, sims[k])
        with self._lock:
            self.entries = staged
            if record is not None:
                self.merge_log.append(record)
        return self

    def snapshot(self) -> ContextMemory:
        """Immutable-by-convention copy usable as decoder input while writing continues."""
        with self._lock:
            snap = ContextMemory(self.capacity, list(self.entries), list(self.merge_log), self.steps)
        return snap

    def as_decoder_input(self) -> np.ndarray:
        if not self.entries:
            raise ContractError("memory is empty")
        return np.concatenate([e.tokens for e in self.entries], axis=0)

    def token_count(self) -> int:
        return sum(e.shape[0] for e in self.entries)

    @property
    def n_merges(self) -> int:
        return len(self.merge_log)

    # debugging dump ----------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        C, D = self.entry_shape or (0, 0)
        arrays = {f"entry.{i:05d}": e.tokens for i, e in enumerate(self.entries)}
        manifest = {
            "kind": "context_memory",
            "L": self.capacity,
            "C": C,
            "D_e": D,
            "question_hash": self.question_hash,
            "steps": self.steps,
            "source_index": [e.source_index for e in self.entries],
            "merge_log": [{"step": r.step, "k": r.index, "s_k": r.similarity} for r in self.merge_log],
        }
        save_arrays(path, arrays, manifest)

    @classmethod
    def load(cls, path: str | Path) -> ContextMemory:
        head, arrays = load_arrays(path)
        if head.get("kind") != "context_memory":
            raise ConsistencyError(f"{path} is not a memory dump")
        entries = []
        for i, src in enumerate(head["source_index"]):
            t = arrays[f"entry.{i:05d}"]
            t.setflags(write=False)
            entries.append(ContextEmbedding(t, src, head["question_hash"]))
        log = [MergeRecord(r["step"], r["k"], r["s_k"]) for r in head["merge_log"]]
        return cls(head["L"], entries, log, head["steps"])
