"""Question-agnostic compressors that fill the same C x D_e memory slot."""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..autodiff import ContractError, Tensor
from ..compressor import ContextEmbedding


def pool_matrix(P: int, C: int) -> np.ndarray:
    """(C, P) averaging matrix over consecutive windows of ceil(P / C) tokens."""
    if C > P:
        raise ContractError(f"C={C} exceeds P={P}")
    if C < 1:
        raise ContractError("C must be positive")
    w = math.ceil(P / C)
    if (C - 1) * w >= P:
        raise ContractError(f"windows of {w} tokens cover P={P} in fewer than C={C} windows")
    M = np.zeros((C, P))
    for i in range(C):
        lo, hi = i * w, min((i + 1) * w, P)
        M[i, lo:hi] = 1.0 / (hi - lo)
    return M


def avgpool_tensor(e_v: Tensor, C: int) -> Tensor:
    """Differentiable pooling of (..., P, D) to (..., C, D)."""
    M = pool_matrix(e_v.shape[-2], C)
    nd = e_v.ndim
    swap = tuple(range(nd - 2)) + (nd - 1, nd - 2)
    pooled = ad.matmul(ad.transpose(e_v, swap), Tensor._wrap(np.ascontiguousarray(M.T)))
    return ad.transpose(pooled, swap)


def truncate_tensor(e_v: Tensor, C: int) -> Tensor:
    P = e_v.shape[-2]
    if C > P:
        raise ContractError(f"C={C} exceeds P={P}")
    return ad.slice_rows(e_v, 0, C)


def _as_array(e_v) -> np.ndarray:
    return e_v.data if isinstance(e_v, Tensor) else np.asarray(e_v, dtype=np.float64)


def avgpool_compress(e_v, C: int, source_index: int = 0, question_hash: str = "") -> ContextEmbedding:
    x = _as_array(e_v)
    return ContextEmbedding(pool_matrix(x.shape[0], C) @ x, source_index, question_hash)


def truncate_compress(e_v, C: int, source_index: int = 0, question_hash: str = "") -> ContextEmbedding:
    x = _as_array(e_v)
    if C > x.shape[0]:
        raise ContractError(f"C={C} exceeds P={x.shape[0]}")
    return ContextEmbedding(x[:C].copy(), source_index, question_hash)
