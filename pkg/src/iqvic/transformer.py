"""Causal pre-norm transformer with optional LoRA on query/value projections.

The same class serves as the frame compressor and the answer decoder; the two
roles are separate instances with separate weights.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

CKPT_VERSION = "iqvic-ckpt-v1"


class CapacityError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TransformerConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 256
    vocab_size: int = 128
    max_positions: int = 128
    lora_rank: int = 4
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_layers", "d_ff", "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 0:
            raise ConfigError("lora_rank must be >= 0")
        if self.lora_alpha <= 0:
            raise ConfigError("lora_alpha must be positive")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def causal_mask(n: int) -> np.ndarray:
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


def apply_lora(Wx: Tensor, A: Tensor | None, B: Tensor | None, alpha: float, r: int, x: Tensor,
               dropout: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """``x @ W + (alpha / r) * (dropout(x) @ A) @ B``."""
    base = ad.matmul(x, Wx)
    if A is None or r == 0:
        return base
    if r <= 0:
        raise ContractError("LoRA rank must be positive")
    if A.shape != (Wx.shape[0], r) or B.shape != (r, Wx.shape[1]):
        raise DimensionError(f"LoRA shapes A{A.shape} B{B.shape} do not fit W{Wx.shape} at rank {r}")
    delta = ad.matmul(ad.matmul(ad.dropout(x, dropout, rng), A), B)
    return ad.add(base, ad.scale(delta, alpha / r))


class TransformerModel:
    """Parameters live in ``self.params`` (name -> Tensor).

    Names ending in ``.lora_A``/``.lora_B`` are adapter weights; everything
    else is the base model.  ``freeze_base`` turns gradient tracking off for
    the base and on for the adapters.
    """

    def __init__(self, config: TransformerConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.frozen_base = False
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model

        def new(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        new("tok_emb", rng.normal(0.0, 1.0, (c.vocab_size, d)))
        new("pos_emb", rng.normal(0.0, 0.1, (c.max_positions, d)))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            new(p + "ln1.g", np.ones(d))
            new(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv", "wo"):
                new(p + w, rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
            new(p + "ln2.g", np.ones(d))
            new(p + "ln2.b", np.zeros(d))
            new(p + "mlp.w1", rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.d_ff)))
            new(p + "mlp.b1", np.zeros(c.d_ff))
            new(p + "mlp.w2", rng.normal(0.0, 1.0 / math.sqrt(c.d_ff), (c.d_ff, d)))
            new(p + "mlp.b2", np.zeros(d))
            if c.lora_rank > 0:
                for w in ("wq", "wv"):
                    new(p + w + ".lora_A", rng.normal(0.0, 0.02, (d, c.lora_rank)))
                    new(p + w + ".lora_B", np.zeros((c.lora_rank, d)))
        new("ln_f.g", np.ones(d))
        new("ln_f.b", np.zeros(d))
        new("lm_head", rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.vocab_size)))

    # parameter groups ------------------------------------------------------

    @staticmethod
    def is_lora(name: str) -> bool:
        return name.endswith(".lora_A") or name.endswith(".lora_B")

    def lora_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if self.is_lora(k)}

    def base_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not self.is_lora(k)}

    def freeze_base(self, trainable: tuple[str, ...] = ()) -> None:
        """Freeze base weights; adapters and names in ``trainable`` stay live."""
        self.frozen_base = True
        for k, v in self.params.items():
            v.requires_grad = self.is_lora(k) or k in trainable

    def freeze_all(self) -> None:
        self.frozen_base = True
        for v in self.params.values():
            v.requires_grad = False

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    # forward ---------------------------------------------------------------

    def embed_tokens(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.shape[-1:] == (0,) or ids.size == 0:
            raise ContractError("embed_tokens needs a non-empty id sequence")
        return ad.take_rows(self.params["tok_emb"], ids)

    def forward_embeddings(self, embeds: Tensor, causal: bool = True,
                           rng: np.random.Generator | None = None) -> Tensor:
        """Run the stack on ``(..., n, d)`` input embeddings; returns final-norm hidden states."""
        c = self.config
        n = embeds.shape[-2]
        if embeds.shape[-1] != c.d_model:
            raise DimensionError(f"input width {embeds.shape[-1]} != d_model {c.d_model}")
        if n > c.max_positions:
            raise CapacityError(f"sequence of {n} positions exceeds max_positions={c.max_positions}")
        P = self.params
        x = ad.add(embeds, ad.slice_rows(P["pos_emb"], 0, n))
        mask = causal_mask(n) if causal else None
        lead = embeds.shape[:-2]
        H, hd = c.n_heads, c.head_dim
        drop = c.lora_dropout if rng is not None else 0.0
        r = c.lora_rank
        for i in range(c.n_layers):
            p = f"layers.{i}."
            h = ad.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], c.ln_eps)
            q = apply_lora(P[p + "wq"], P.get(p + "wq.lora_A"), P.get(p + "wq.lora_B"),
                           c.lora_alpha, r, h, drop, rng)
            k = ad.matmul(h, P[p + "wk"])
            v = apply_lora(P[p + "wv"], P.get(p + "wv.lora_A"), P.get(p + "wv.lora_B"),
                           c.lora_alpha, r, h, drop, rng)
            q, k, v = (self._split_heads(t, lead, n, H, hd) for t in (q, k, v))
            kt = ad.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
            scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(hd))
            att = ad.softmax_lastdim(scores, mask)
            ctx = self._merge_heads(ad.matmul(att, v), lead, n, H, hd)
            x = ad.add(x, ad.matmul(ctx, P[p + "wo"]))
            h = ad.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], c.ln_eps)
            h = ad.gelu(ad.add(ad.matmul(h, P[p + "mlp.w1"]), P[p + "mlp.b1"]))
            x = ad.add(x, ad.add(ad.matmul(h, P[p + "mlp.w2"]), P[p + "mlp.b2"]))
        return ad.layer_norm(x, P["ln_f.g"], P["ln_f.b"], c.ln_eps)

    @staticmethod
    def _split_heads(t: Tensor, lead, n, H, hd) -> Tensor:
        t = ad.reshape(t, lead + (n, H, hd))
        nl = len(lead)
        return ad.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    @staticmethod
    def _merge_heads(t: Tensor, lead, n, H, hd) -> Tensor:
        nl = len(lead)
        t = ad.transpose(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        return ad.reshape(t, lead + (n, H * hd))

    def logits(self, hidden: Tensor) -> Tensor:
        return ad.matmul(hidden, self.params["lm_head"])

    def greedy_decode(self, prefix: Tensor, max_new: int, stop_id: int) -> list[int]:
        """Append argmax tokens after ``prefix`` (n x d) until ``stop_id`` or ``max_new``."""
        n = prefix.shape[-2]
        if n + max_new > self.config.max_positions:
            raise CapacityError(
                f"prefix {n} + budget {max_new} exceeds max_positions={self.config.max_positions}")
        out: list[int] = []
        seq = prefix.data
        with ad.no_grad():
            for _ in range(max_new):
                h = self.forward_embeddings(Tensor._wrap(seq))
                last = h.data[-1] @ self.params["lm_head"].data
                tok = int(np.argmax(last))
                if tok == stop_id:
                    break
                out.append(tok)
                seq = np.concatenate([seq, self.params["tok_emb"].data[tok][None, :]], axis=0)
        return out

    # persistence -----------------------------------------------------------

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        save_arrays(path, self.state_arrays(),
                    {"kind": "transformer", "config": asdict(self.config), **(extra or {})})

    @classmethod
    def load(cls, path: str | Path) -> TransformerModel:
        manifest, arrays = load_arrays(path)
        if manifest.get("kind") != "transformer":
            raise ConfigError(f"{path} is not a transformer checkpoint")
        model = cls(TransformerConfig(**manifest["config"]), seed=0)
        model.load_arrays(arrays)
        return model

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks arrays: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    """Write a JSON manifest line followed by little-endian float64 payloads.

    The manifest records each array's name, shape and byte offset into the
    payload that follows the first newline.
    """
    index, offset, chunks = [], 0, []
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    head = {"version": CKPT_VERSION, **manifest, "arrays": index}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
        for ch in chunks:
            fh.write(ch)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl])
    if head.get("version") != CKPT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {head.get('version')!r}")
    body = raw[nl + 1:]
    arrays = {}
    for entry in head.pop("arrays"):
        n = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype="<f8", count=n, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(np.float64)
    return head, arrays
