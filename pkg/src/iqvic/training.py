"""Two-step training: compressor side first, then the decoder's LoRA."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .bench.tasks import QASample
from .compressor import ContextEmbedding, question_digest
from .memory import ContextMemory
from .pipeline import Pipeline
from .transformer import ConfigError, TransformerModel, load_arrays, save_arrays

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    grad_accum_steps: int = 4
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_schedule: str = "constant"  # or "cosine"
    step1_epochs: int = 1
    step2_epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ConfigError("batch_size and grad_accum_steps must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
               lr: float | None = None) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update, in place."""
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        w = p.data * (1.0 - lr * state.weight_decay)
        p.data = w - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def scheduled_lr(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * min(step, total) / total))


# losses ---------------------------------------------------------------------

def decoder_loss(decoder: TransformerModel, question: np.ndarray, context: Tensor, answers: np.ndarray,
                 eos_id: int, supervise_eos: bool, order: str = "question_first",
                 rng: np.random.Generator | None = None) -> Tensor:
    """Teacher-forced cross-entropy on answer positions only.

    ``question`` (B, K), ``context`` (B, M, D), ``answers`` (B, m).
    """
    B, m = answers.shape
    e_q = decoder.embed_tokens(question)
    parts = [e_q, context] if order == "question_first" else [context, e_q]
    if supervise_eos:
        fed = answers
        targets = np.concatenate([answers, np.full((B, 1), eos_id)], axis=1)
    else:
        fed = answers[:, :-1]
        targets = answers
    if fed.shape[1]:
        parts.append(decoder.embed_tokens(fed))
    x = ad.concat_rows(parts)
    h = decoder.forward_embeddings(x, causal=True, rng=rng)
    start = e_q.shape[-2] + context.shape[-2] - 1
    hs = ad.slice_rows(h, start, start + targets.shape[1])
    return ad.cross_entropy(decoder.logits(hs), targets)


def _stack(samples: Sequence[QASample]):
    q = np.array([s.question for s in samples], dtype=np.int64)
    a = np.array([s.gold_answer for s in samples], dtype=np.int64)
    return q, a


def step1_loss(pipe: Pipeline, samples: Sequence[QASample], rng=None) -> Tensor:
    q, a = _stack(samples)
    cells = np.stack([s.frames[0] for s in samples])
    ctx = pipe.context_tensor(q, cells, rng=rng)
    return decoder_loss(pipe.decoder, q, ctx, a, pipe.vocab.eos_id, supervise_eos=False,
                        order=pipe.spec.memory_order)


def build_memories(pipe: Pipeline, samples: Sequence[QASample], chunk: int = 512) -> np.ndarray:
    """Stream every sample through compression and the memory; returns (N, len * C, D)."""
    if not samples:
        return np.zeros((0, 0, pipe.d_model))
    T = samples[0].n_frames
    if any(s.n_frames != T for s in samples):
        raise ConfigError("all streams in a batch must have the same frame count")
    K = len(samples[0].question)
    q = np.repeat(np.array([s.question for s in samples], dtype=np.int64), T, axis=0).reshape(-1, K)
    cells = np.concatenate([s.frames for s in samples], axis=0)
    out = np.empty((len(cells), pipe.C, pipe.d_model))
    with ad.no_grad():
        for lo in range(0, len(cells), chunk):
            out[lo:lo + chunk] = pipe.context_tensor(q[lo:lo + chunk], cells[lo:lo + chunk]).data
    mems = []
    for i, s in enumerate(samples):
        mem = ContextMemory(pipe.L)
        h = question_digest(s.question)
        for t in range(T):
            mem.insert(ContextEmbedding(out[i * T + t], t, h))
        mems.append(mem.as_decoder_input())
    return np.stack(mems)


# loop -------------------------------------------------------------------------

@dataclass
class StageResult:
    stage: int
    records: list[dict]
    state: OptimizerState

    def epoch_losses(self, steps_per_epoch: int) -> list[float]:
        losses = [r["loss"] for r in self.records]
        return [float(np.mean(losses[i:i + steps_per_epoch])) for i in range(0, len(losses), steps_per_epoch)]


def run_stage(stage: int, params: dict[str, Tensor], n_samples: int,
              loss_fn: Callable[[np.ndarray, np.random.Generator | None], Tensor],
              cfg: TrainConfig, epochs: int, state: OptimizerState | None = None,
              max_steps: int | None = None, use_dropout: bool = True,
              on_step: Callable[[dict], None] | None = None) -> StageResult:
    """Generic accumulate-then-step loop.

    Data order for epoch e is a permutation seeded by (seed, stage, e), and
    dropout for micro-batch j of optimizer step s is seeded by
    (seed, stage, s, j), so a run resumed from ``state`` continues exactly.
    """
    micro = cfg.batch_size
    per_step = micro * cfg.grad_accum_steps
    steps_per_epoch = n_samples // per_step
    if steps_per_epoch < 1:
        raise ConfigError(f"{n_samples} samples cannot fill one step of {per_step}")
    total = steps_per_epoch * epochs
    state = state or OptimizerState(cfg.learning_rate, cfg.weight_decay, (cfg.beta1, cfg.beta2), cfg.eps)
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    records = []
    for p in params.values():
        p.grad = None
    while state.step < total and (max_steps is None or state.step < max_steps):
        step = state.step
        epoch, pos = divmod(step, steps_per_epoch)
        perm = np.random.default_rng([cfg.seed, stage, epoch]).permutation(n_samples)
        losses = []
        for j in range(cfg.grad_accum_steps):
            lo = pos * per_step + j * micro
            idx = perm[lo:lo + micro]
            rng = np.random.default_rng([cfg.seed, stage, step, j]) if use_dropout else None
            try:
                loss = loss_fn(idx, rng)
            except NonFiniteError as exc:
                raise TrainingAbort(f"step {stage}: non-finite forward at optimizer step {step} "
                                    f"(epoch {epoch}, micro-batch {j}): {exc}") from exc
            if not np.isfinite(loss.item()):
                raise TrainingAbort(f"step {stage}: loss {loss.item()} at optimizer step {step}")
            ad.backward(loss, trainable.values())
            losses.append(loss.item())
        grads = {k: p.grad / cfg.grad_accum_steps for k, p in trainable.items()}
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise TrainingAbort(f"step {stage}: non-finite gradient at optimizer step {step}")
        lr = scheduled_lr(cfg, step, total)
        adamw_step(trainable, grads, state, lr)
        for p in trainable.values():
            p.grad = None
        rec = {"stage": stage, "step": state.step, "epoch": epoch, "loss": float(np.mean(losses)),
               "lr": lr, "grad_norm": gnorm}
        records.append(rec)
        if on_step:
            on_step(rec)
    return StageResult(stage, records, state)


def train_step1(pipe: Pipeline, samples: Sequence[QASample], cfg: TrainConfig, **kw) -> StageResult:
    pipe.freeze_for_step(1)
    samples = list(samples)

    def loss_fn(idx, rng):
        return step1_loss(pipe, [samples[i] for i in idx], rng)

    return run_stage(1, pipe.compressor_side(), len(samples), loss_fn, cfg, cfg.step1_epochs, **kw)


def train_step2(pipe: Pipeline, samples: Sequence[QASample], cfg: TrainConfig,
                memories: np.ndarray | None = None, **kw) -> StageResult:
    """Memory entries are built once with the frozen compressor and treated as constants."""
    pipe.freeze_for_step(2)
    samples = list(samples)
    if memories is None:
        memories = build_memories(pipe, samples)
    q_all, a_all = _stack(samples)

    def loss_fn(idx, rng):
        ctx = Tensor._wrap(memories[idx])
        return decoder_loss(pipe.decoder, q_all[idx], ctx, a_all[idx], pipe.vocab.eos_id,
                            supervise_eos=True, order=pipe.spec.memory_order, rng=rng)

    return run_stage(2, pipe.decoder_side(), len(samples), loss_fn, cfg, cfg.step2_epochs, **kw)


# optimizer state persistence ----------------------------------------------------

def save_state(path: str | Path, state: OptimizerState) -> None:
    arrays = {f"m.{k}": v for k, v in state.m.items()}
    arrays.update({f"v.{k}": v for k, v in state.v.items()})
    save_arrays(path, arrays, {"kind": "optimizer", "step": state.step, "lr": state.lr,
                               "weight_decay": state.weight_decay, "betas": list(state.betas),
                               "eps": state.eps})


def load_state(path: str | Path) -> OptimizerState:
    head, arrays = load_arrays(path)
    st = OptimizerState(head["lr"], head["weight_decay"], tuple(head["betas"]), head["eps"], head["step"])
    for k, v in arrays.items():
        kind, name = k.split(".", 1)
        (st.m if kind == "m" else st.v)[name] = np.array(v)
    return st


def write_log(path: str | Path, records: Sequence[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
