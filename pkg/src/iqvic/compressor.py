"""Question-conditioned frame compression into C context tokens."""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .transformer import CapacityError, TransformerModel


def question_digest(ids) -> str:
    arr = np.asarray(ids, dtype="<i8")
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


class ContextTokenLookup:
    """Trainable C x D_e table appended after the question and frame tokens."""

    def __init__(self, n_tokens: int, d_model: int, seed: int = 0, n_patches: int | None = None):
        if n_tokens < 1:
            raise ContractError(f"need at least one context token, got {n_tokens}")
        if n_patches is not None and n_tokens > n_patches:
            warnings.warn(f"C={n_tokens} exceeds P={n_patches}: no compression", stacklevel=2)
        rng = np.random.default_rng(seed)
        self.table = Tensor(rng.normal(0.0, 0.02, (n_tokens, d_model)), requires_grad=True, name="ctx_lookup")

    @property
    def C(self) -> int:
        return self.table.shape[0]

    @property
    def params(self) -> dict[str, Tensor]:
        return {"table": self.table}


@dataclass
class ContextEmbedding:
    tokens: np.ndarray  # (C, D_e)
    source_index: int
    question_hash: str

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape


def assemble_input(e_q: Tensor, e_v: Tensor, e_c0: Tensor) -> Tensor:
    """Rows ordered question, frame, context tokens.

    ``e_c0`` may be a plain (C, D_e) table even when the other two carry a
    batch dimension; it is tiled across the batch.
    """
    if e_q.shape[-2] == 0:
        raise ContractError("question must contain at least one token")
    widths = {e_q.shape[-1], e_v.shape[-1], e_c0.shape[-1]}
    if len(widths) != 1:
        raise DimensionError(f"width mismatch: q{e_q.shape} v{e_v.shape} c{e_c0.shape}")
    lead = e_v.shape[:-2]
    if e_q.shape[:-2] != lead:
        e_q = _tile(e_q, lead)
    if e_c0.shape[:-2] != lead:
        e_c0 = _tile(e_c0, lead)
    return ad.concat_rows([e_q, e_v, e_c0])


def _tile(t: Tensor, lead: tuple[int, ...]) -> Tensor:
    if t.shape[:-2] == lead:
        return t
    if t.ndim != 2:
        raise DimensionError(f"cannot tile {t.shape} over batch {lead}")
    zeros = Tensor._wrap(np.zeros(lead + t.shape))
    return ad.add(zeros, t)


def compress_tensor(compressor: TransformerModel, e_q: Tensor, e_v: Tensor, lookup: ContextTokenLookup,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Differentiable compression; returns the last C hidden rows, (..., C, D_e)."""
    K, P, C = e_q.shape[-2], e_v.shape[-2], lookup.C
    if K + P + C > compressor.config.max_positions:
        raise CapacityError(f"K+P+C={K + P + C} exceeds compressor max_positions={compressor.config.max_positions}")
    x = assemble_input(e_q, e_v, lookup.table)
    h = compressor.forward_embeddings(x, causal=True, rng=rng)
    return ad.slice_rows(h, K + P, K + P + C)


def compress(compressor: TransformerModel, question_ids, e_v, lookup: ContextTokenLookup,
             source_index: int = 0) -> ContextEmbedding:
    """Compress one frame's P x D_e embedding conditioned on ``question_ids``."""
    with ad.no_grad():
        e_q = compressor.embed_tokens(question_ids)
        ev = e_v if isinstance(e_v, Tensor) else Tensor._wrap(np.asarray(e_v, dtype=np.float64))
        out = compress_tensor(compressor, e_q, ev, lookup)
    return ContextEmbedding(out.data, source_index, question_digest(question_ids))


def compression_ratio(C: int, P: int) -> float:
    """Percentage of patch tokens that survive compression."""
    if P <= 0:
        raise ContractError("P must be positive")
    return 100.0 * C / P


def format_ratio(pct: float) -> str:
    """Whole percent at or above 10%, one decimal below, matching published tables."""
    exact = Decimal(repr(pct))
    step = Decimal("1") if pct >= 10.0 else Decimal("0.1")
    return f"{exact.quantize(step, rounding=ROUND_HALF_UP)}%"
