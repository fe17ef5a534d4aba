"""Answer generation from [question | memory] and the streaming orchestrator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .compressor import question_digest
from .memory import ConsistencyError, ContextMemory
from .pipeline import Pipeline
from .transformer import TransformerModel

DEFAULT_MAX_NEW = 16


@dataclass
class DecoderInput:
    prefix: Tensor  # (K + len * C, D_e)
    question: list[int]
    memory_snapshot: ContextMemory


@dataclass
class Answer:
    tokens: list[int]
    text: str


def build_decoder_input(decoder: TransformerModel, question, memory: ContextMemory,
                        order: str = "question_first") -> DecoderInput:
    if len(memory) == 0:
        raise ContractError("cannot decode from an empty memory")
    question = [int(t) for t in question]
    if memory.question_hash != question_digest(question):
        raise ConsistencyError("memory was built for a different question")
    snap = memory.snapshot()
    with ad.no_grad():
        e_q = decoder.embed_tokens(question).data
    e_m = snap.as_decoder_input()
    rows = [e_q, e_m] if order == "question_first" else [e_m, e_q]
    return DecoderInput(Tensor._wrap(np.concatenate(rows, axis=0)), question, snap)


def answer(decoder: TransformerModel, inp: DecoderInput, max_new: int = DEFAULT_MAX_NEW,
           stop_id: int = 1, detokenize: Callable[[list[int]], str] | None = None) -> Answer:
    toks = decoder.greedy_decode(inp.prefix, max_new, stop_id)
    return Answer(toks, detokenize(toks) if detokenize else " ".join(map(str, toks)))


@dataclass
class StreamResult:
    answer: Answer
    memory: ContextMemory
    snapshots: list[Answer]  # one per frame in incremental mode, else empty


def run_stream(pipe: Pipeline, frames, question, L: int | None = None, incremental: bool = False,
               max_new: int = DEFAULT_MAX_NEW) -> StreamResult:
    """Compress frames in order into a fresh memory, then answer.

    In incremental mode a snapshot answer is produced after every frame; the
    last snapshot is the final answer.
    """
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ContractError("need a non-empty (T, G, G) frame stream")
    memory = ContextMemory(L or pipe.L)
    snaps: list[Answer] = []
    question = [int(t) for t in question]
    for t in range(frames.shape[0]):
        (entry,) = pipe.compress_frames(question, frames[t:t + 1], start_index=t)
        memory.insert(entry)
        if incremental:
            snaps.append(_answer(pipe, question, memory.snapshot(), max_new))
    final = snaps[-1] if incremental else _answer(pipe, question, memory, max_new)
    return StreamResult(final, memory, snaps)


def _answer(pipe: Pipeline, question, memory: ContextMemory, max_new: int) -> Answer:
    inp = build_decoder_input(pipe.decoder, question, memory, pipe.spec.memory_order)
    return answer(pipe.decoder, inp, max_new, pipe.vocab.eos_id, pipe.vocab.decode)
