"""Exact-match evaluation of trained pipelines and the report gates."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

from ..compressor import compression_ratio, format_ratio
from ..decoder import DEFAULT_MAX_NEW, run_stream
from ..pipeline import Pipeline
from .tasks import QASample


@dataclass(frozen=True)
class BenchRow:
    method: str
    C: int
    L: int
    P: int
    memory_tokens: int
    compression_ratio: float
    accuracy: float
    mean_score: float  # placeholder: 5 x exact-match rate
    n_eval: int
    n_frames: int

    @property
    def ratio_text(self) -> str:
        return format_ratio(self.compression_ratio)


@dataclass
class BenchReport:
    rows: list[BenchRow]
    seed: int
    config_digest: str
    gates: list[tuple[str, bool, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(ok for _, ok, _ in self.gates)

    def as_dict(self) -> dict:
        return {"seed": self.seed, "config_digest": self.config_digest,
                "rows": [asdict(r) for r in self.rows],
                "gates": [{"name": n, "passed": ok, "detail": d} for n, ok, d in self.gates]}


def accounting_row(method: str, C: int, L: int, P: int, accuracy: float = 0.0,
                   n_eval: int = 0, n_frames: int = 0) -> BenchRow:
    if not 0.0 <= accuracy <= 100.0:
        raise ValueError(f"accuracy {accuracy} outside [0, 100]")
    return BenchRow(method, C, L, P, L * C, compression_ratio(C, P), accuracy, 5.0 * accuracy / 100.0,
                    n_eval, n_frames)


def score_answers(predicted: Sequence[Sequence[int]], gold: Sequence[Sequence[int]]) -> float:
    """Percentage of exact token-sequence matches."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predictions for {len(gold)} gold answers")
    if not gold:
        return 0.0
    hits = sum(list(p) == list(g) for p, g in zip(predicted, gold))
    return 100.0 * hits / len(gold)


def predict(pipe: Pipeline, samples: Sequence[QASample], max_new: int = DEFAULT_MAX_NEW,
            workers: int = 1) -> list[list[int]]:
    """Answers in sample order regardless of worker count."""
    def one(s: QASample) -> list[int]:
        return run_stream(pipe, s.frames, s.question, max_new=max_new).answer.tokens

    if workers <= 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, samples))


def evaluate(pipe: Pipeline, samples: Sequence[QASample], name: str | None = None,
             max_new: int = DEFAULT_MAX_NEW, workers: int = 1) -> BenchRow:
    preds = predict(pipe, samples, max_new, workers)
    acc = score_answers(preds, [s.gold_answer for s in samples])
    spec = pipe.spec
    T = samples[0].n_frames if samples else 0
    return accounting_row(name or f"{spec.method}-c{spec.C}", spec.C, spec.L, spec.P, acc, len(samples), T)


# gates ----------------------------------------------------------------------------

def gate_accounting(rows: Sequence[BenchRow]) -> tuple[str, bool, str]:
    bad = [r.method for r in rows
           if r.memory_tokens != r.L * r.C or r.compression_ratio != 100.0 * r.C / r.P]
    return ("accounting", not bad, "all rows consistent" if not bad else f"inconsistent: {', '.join(bad)}")


def gate_margin(rows: Sequence[BenchRow], margin: float) -> list[tuple[str, bool, str]]:
    """IQViC beats avgpool by ``margin`` points at every shared C."""
    out = []
    by = {(r.method.split("-")[0], r.C): r for r in rows}
    for (method, C), r in sorted(by.items()):
        if method != "iqvic" or ("avgpool", C) not in by:
            continue
        base = by[("avgpool", C)]
        gap = r.accuracy - base.accuracy
        out.append((f"margin-c{C}", gap >= margin,
                    f"iqvic {r.accuracy:.1f} vs avgpool {base.accuracy:.1f} (gap {gap:+.1f}, need {margin:+.1f})"))
    return out


def gate_monotone(rows: Sequence[BenchRow], slack: float) -> list[tuple[str, bool, str]]:
    """Accuracy may not rise by more than ``slack`` when C shrinks."""
    out = []
    iq = sorted((r for r in rows if r.method.startswith("iqvic")), key=lambda r: -r.C)
    for hi, lo in zip(iq, iq[1:]):
        ok = hi.accuracy >= lo.accuracy - slack
        out.append((f"monotone-c{hi.C}-c{lo.C}", ok,
                    f"C={hi.C}: {hi.accuracy:.1f} vs C={lo.C}: {lo.accuracy:.1f} (slack {slack})"))
    return out


def build_report(rows: Sequence[BenchRow], seed: int, digest: str, margin: float, slack: float) -> BenchReport:
    rows = list(rows)
    gates = [gate_accounting(rows), *gate_margin(rows, margin), *gate_monotone(rows, slack)]
    return BenchReport(rows, seed, digest, gates)
