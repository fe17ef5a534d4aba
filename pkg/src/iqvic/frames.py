"""Synthetic frames, the frozen frame encoder, and the two-layer projector."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


@dataclass(frozen=True)
class SymbolicFrame:
    cells: np.ndarray  # (G, G) symbol ids
    frame_index: int = 0

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1]:
            raise DimensionError(f"frame cells must be a square grid, got shape {cells.shape}")
        object.__setattr__(self, "cells", cells)

    @property
    def grid(self) -> int:
        return self.cells.shape[0]

    @property
    def n_patches(self) -> int:
        return self.cells.size


@dataclass
class RawFeature:
    tokens: np.ndarray  # (P, D_f)


@dataclass
class FrameEmbedding:
    tokens: Tensor  # (P, D_e) or (B, P, D_e)
    source_index: int = 0


class FrameEncoder:
    """Fixed random symbol table plus per-cell position table; never trained."""

    def __init__(self, alphabet_size: int, n_patches: int, feature_dim: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.enc_table = rng.normal(0.0, 1.0, (alphabet_size, feature_dim))
        self.pos_table = rng.normal(0.0, 0.1, (n_patches, feature_dim))
        self.enc_table.setflags(write=False)
        self.pos_table.setflags(write=False)

    @property
    def feature_dim(self) -> int:
        return self.enc_table.shape[1]

    def encode(self, frame: SymbolicFrame) -> RawFeature:
        return RawFeature(encode_frame(frame.cells, self.enc_table, self.pos_table))

    def encode_batch(self, cells: np.ndarray) -> np.ndarray:
        """``cells`` of shape (..., G, G) -> features (..., P, D_f)."""
        cells = np.asarray(cells, dtype=np.int64)
        flat = cells.reshape(cells.shape[:-2] + (-1,))
        return _lookup(flat, self.enc_table, self.pos_table)


def encode_frame(cells: np.ndarray, enc_table: np.ndarray, pos_table: np.ndarray) -> np.ndarray:
    """Row-major cell order: token p = enc_table[cell p] + pos_table[p]."""
    cells = np.asarray(cells, dtype=np.int64)
    if cells.ndim != 2:
        raise DimensionError(f"expected a (G, G) grid, got shape {cells.shape}")
    return _lookup(cells.reshape(-1), enc_table, pos_table)


def _lookup(flat: np.ndarray, enc_table: np.ndarray, pos_table: np.ndarray) -> np.ndarray:
    if flat.size and (flat.min() < 0 or flat.max() >= enc_table.shape[0]):
        raise IndexError(f"symbol id outside alphabet of size {enc_table.shape[0]}")
    P = flat.shape[-1]
    if P > pos_table.shape[0]:
        raise DimensionError(f"{P} patches but position table covers {pos_table.shape[0]}")
    return enc_table[flat] + pos_table[:P]


class Projector:
    """Per-token linear -> GELU -> linear mapping D_f to D_e."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None, seed: int = 0):
        hidden = hidden or 2 * out_dim
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": Tensor(rng.normal(0.0, 1.0 / math.sqrt(in_dim), (in_dim, hidden)), True, "proj.w1"),
            "b1": Tensor(np.zeros(hidden), True, "proj.b1"),
            "w2": Tensor(rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, out_dim)), True, "proj.w2"),
            "b2": Tensor(np.zeros(out_dim), True, "proj.b2"),
        }

    @property
    def in_dim(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["w2"].shape[1]

    def __call__(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor._wrap(np.asarray(features, dtype=np.float64))
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"projector expects width {self.in_dim}, got {x.shape[-1]}")
        p = self.params
        h = ad.gelu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
        return ad.add(ad.matmul(h, p["w2"]), p["b2"])

    def project(self, feature: RawFeature, source_index: int = 0) -> FrameEmbedding:
        return FrameEmbedding(self(feature.tokens), source_index)

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag
