"""Assembly of the full frame -> memory -> answer system and its checkpoints."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bench.baselines import avgpool_tensor, truncate_tensor
from .compressor import ContextEmbedding, ContextTokenLookup, compress_tensor, question_digest
from .frames import FrameEncoder, Projector
from .transformer import ConfigError, TransformerConfig, TransformerModel, load_arrays, save_arrays
from .vocab import Vocab

METHODS = ("iqvic", "avgpool", "truncate")
_METHOD_RE = re.compile(r"^(iqvic|avgpool|truncate)(?:-c(\d+))?$")


def parse_method(name: str, default_C: int) -> tuple[str, int]:
    """``iqvic`` / ``avgpool-c4`` -> (base method, C)."""
    m = _METHOD_RE.match(name.strip())
    if not m:
        raise ConfigError(f"unknown method {name!r}; expected one of {METHODS} with optional -c<N>")
    return m.group(1), int(m.group(2)) if m.group(2) else default_C


@dataclass
class PipelineSpec:
    method: str = "iqvic"
    C: int = 8
    L: int = 4
    grid: int = 4
    feature_dim: int = 32
    seed: int = 0
    memory_order: str = "question_first"  # or "memory_first"
    vocab: dict = field(default_factory=lambda: {"n_keys": 16, "n_values": 16, "n_fill": 16})
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.memory_order not in ("question_first", "memory_first"):
            raise ConfigError(f"memory_order must be question_first or memory_first, got {self.memory_order!r}")
        if self.C < 1 or self.L < 1:
            raise ConfigError("C and L must be positive")

    @property
    def P(self) -> int:
        return self.grid * self.grid


class Pipeline:
    """Frozen encoder, trainable projector, compressor (or baseline), decoder."""

    def __init__(self, spec: PipelineSpec):
        self.spec = spec
        self.vocab = Vocab(**{k: spec.vocab[k] for k in ("n_keys", "n_values", "n_fill")})
        mcfg = TransformerConfig(**spec.model)
        if mcfg.vocab_size < len(self.vocab):
            raise ConfigError(f"vocab_size {mcfg.vocab_size} < vocabulary of {len(self.vocab)} words")
        d = mcfg.d_model
        s = spec.seed
        self.encoder = FrameEncoder(self.vocab.frame_alphabet, spec.P, spec.feature_dim, seed=s * 10 + 1)
        self.projector = Projector(spec.feature_dim, d, seed=s * 10 + 2)
        self.decoder = TransformerModel(mcfg, seed=s * 10 + 3)
        if spec.method == "iqvic":
            self.compressor: TransformerModel | None = TransformerModel(mcfg, seed=s * 10 + 4)
            self.lookup: ContextTokenLookup | None = ContextTokenLookup(spec.C, d, seed=s * 10 + 5,
                                                                       n_patches=spec.P)
        else:
            self.compressor = None
            self.lookup = None

    @property
    def C(self) -> int:
        return self.spec.C

    @property
    def L(self) -> int:
        return self.spec.L

    @property
    def d_model(self) -> int:
        return self.decoder.config.d_model

    # compression ------------------------------------------------------------

    def frame_embeddings(self, cells) -> Tensor:
        """(..., G, G) symbol grids -> projected (..., P, D_e)."""
        return self.projector(self.encoder.encode_batch(cells))

    def context_tensor(self, question_ids, cells, rng: np.random.Generator | None = None) -> Tensor:
        """Compress a batch of frames; ``question_ids`` (B, K), ``cells`` (B, G, G)."""
        e_v = self.frame_embeddings(cells)
        if self.spec.method == "iqvic":
            e_q = self.compressor.embed_tokens(question_ids)
            return compress_tensor(self.compressor, e_q, e_v, self.lookup, rng=rng)
        if self.spec.method == "avgpool":
            return avgpool_tensor(e_v, self.C)
        return truncate_tensor(e_v, self.C)

    def compress_frames(self, question_ids, frames: np.ndarray, start_index: int = 0) -> list[ContextEmbedding]:
        """Compress each frame of a (T, G, G) stream under one question; no gradient."""
        frames = np.asarray(frames)
        T = frames.shape[0]
        q = np.broadcast_to(np.asarray(question_ids, dtype=np.int64), (T, len(question_ids)))
        with ad.no_grad():
            out = self.context_tensor(q, frames).data
        h = question_digest(question_ids)
        return [ContextEmbedding(out[t], start_index + t, h) for t in range(T)]

    # training support ---------------------------------------------------------

    def compressor_side(self) -> dict[str, Tensor]:
        params = {f"projector.{k}": v for k, v in self.projector.params.items()}
        if self.compressor is not None:
            params.update({f"compressor.{k}": v for k, v in self.compressor.params.items()})
            params["lookup.table"] = self.lookup.table
        return params

    def decoder_side(self) -> dict[str, Tensor]:
        return {f"decoder.{k}": v for k, v in self.decoder.params.items()}

    def freeze_for_step(self, step: int) -> None:
        if step == 1:
            self.decoder.freeze_all()
            self.projector.set_trainable(True)
            if self.compressor is not None:
                self.compressor.freeze_base()
                self.lookup.table.requires_grad = True
        elif step == 2:
            self.projector.set_trainable(False)
            if self.compressor is not None:
                self.compressor.freeze_all()
                self.lookup.table.requires_grad = False
            self.decoder.freeze_base()
        else:
            raise ConfigError(f"training step must be 1 or 2, got {step}")

    # persistence --------------------------------------------------------------

    def save(self, directory: str | Path, parts: tuple[str, ...] = ("compressor", "decoder")) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "pipeline.json").write_text(json.dumps(asdict(self.spec), indent=1, sort_keys=True) + "\n")
        if "compressor" in parts:
            arrays = {k: v.data for k, v in self.compressor_side().items()}
            save_arrays(directory / "compressor_side.ckpt", arrays, {"kind": "compressor_side"})
        if "decoder" in parts:
            arrays = {k: v.data for k, v in self.decoder_side().items()}
            save_arrays(directory / "decoder.ckpt", arrays, {"kind": "decoder"})

    @classmethod
    def load(cls, directory: str | Path, require: tuple[str, ...] = ("compressor", "decoder"),
             parts: tuple[str, ...] = ("compressor", "decoder")) -> Pipeline:
        """Parts not listed in ``parts`` keep their seeded initialisation."""
        directory = Path(directory)
        spec_path = directory / "pipeline.json"
        if not spec_path.exists():
            raise FileNotFoundError(f"no pipeline checkpoint in {directory}")
        pipe = cls(PipelineSpec(**json.loads(spec_path.read_text())))
        files = {"compressor": "compressor_side.ckpt", "decoder": "decoder.ckpt"}
        for part, fname in files.items():
            if part not in parts:
                continue
            path = directory / fname
            if not path.exists():
                if part in require:
                    raise FileNotFoundError(f"missing checkpoint {path}")
                continue
            _, arrays = load_arrays(path)
            params = pipe.compressor_side() if part == "compressor" else pipe.decoder_side()
            for k, t in params.items():
                if k not in arrays:
                    raise ConfigError(f"{path} lacks array {k}")
                t.data = np.array(arrays[k])
        return pipe
