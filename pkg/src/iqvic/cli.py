"""Command-line entry point: gen, train, eval, ask."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError
from .bench.evaluate import BenchReport, accounting_row, build_report, evaluate
from .bench.report import render_table, write_report
from .bench.tasks import QASample, generate, read_jsonl, write_jsonl
from .compressor import format_ratio
from .config import RunConfig, load_config
from .decoder import run_stream
from .memory import ConsistencyError
from .pipeline import Pipeline, PipelineSpec, parse_method
from .training import (OptimizerState, TrainConfig, TrainingAbort, build_memories, load_state, save_state,
                       train_step1, train_step2)
from .transformer import CapacityError, ConfigError
from .vocab import Vocab, VocabularyError

log = logging.getLogger("iqvic")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4, 5
QUESTION_LEN = 4  # "what is k<i> ?"

SPLITS = {"step1_train": 1, "step2_train": 2, "eval": 3}


class DataError(Exception):
    """Malformed or missing input files."""


def split_seed(seed: int, split: str) -> int:
    return seed * 1000 + SPLITS[split]


# config -> components ---------------------------------------------------------------

def vocab_from(cfg: RunConfig) -> Vocab:
    d = cfg["data"]
    return Vocab(d["n_keys"], d["n_values"], d["n_fill"])


def pipeline_spec(cfg: RunConfig, vocab: Vocab, method: str | None = None) -> PipelineSpec:
    p = cfg["pipeline"]
    base, C = parse_method(method or p["method"], p["context_tokens"])
    model = dict(cfg["model"])
    if model["max_positions"] == 0:
        P = p["grid"] ** 2
        model["max_positions"] = max(QUESTION_LEN + P + C,
                                     QUESTION_LEN + p["memory_capacity"] * C + cfg["bench"]["max_new"])
    return PipelineSpec(method=base, C=C, L=p["memory_capacity"], grid=p["grid"], feature_dim=p["feature_dim"],
                        seed=cfg.seed, memory_order=p["memory_order"], vocab=vocab.to_dict(), model=model)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(batch_size=t["batch_size"], grad_accum_steps=t["grad_accum_steps"],
                       learning_rate=t["learning_rate"], weight_decay=t["weight_decay"],
                       lr_schedule=t["lr_schedule"], step1_epochs=t["step1_epochs"],
                       step2_epochs=t["step2_epochs"], seed=cfg.seed, checkpoint_every=t["checkpoint_every"])


def read_split(data_dir: Path, split: str) -> list[QASample]:
    path = data_dir / f"{split}.jsonl"
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    try:
        samples = read_jsonl(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed record: {exc}") from exc
    if not samples:
        raise DataError(f"{path} is empty")
    return samples


def read_vocab(data_dir: Path) -> Vocab:
    path = data_dir / "vocab.json"
    if not path.exists():
        raise DataError(f"missing vocabulary file {path}")
    return Vocab.load(path)


# commands -------------------------------------------------------------------------

def cmd_gen(cfg: RunConfig, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocab_from(cfg)
    d, grid = cfg["data"], cfg["pipeline"]["grid"]
    plan = {"step1_train": ("single_frame", d["step1_train"], 1),
            "step2_train": ("kv_retrieval", d["step2_train"], d["n_frames"]),
            "eval": ("kv_retrieval", d["eval"], d["n_frames"])}
    written = {}
    for split, (task, n, T) in plan.items():
        path = out / f"{split}.jsonl"
        write_jsonl(path, generate(task, n, vocab, split_seed(cfg.seed, split), n_frames=T, grid=grid))
        written[split] = path
    vocab.save(out / "vocab.json")
    cfg.write(out / "resolved_config.ini")
    return written


def cmd_train(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path, step: str = "all",
              resume: bool = False, method: str | None = None, max_steps: int | None = None) -> list[dict]:
    """Runs Step 1, Step 2 or both; returns the optimizer-step records of this invocation.

    ``max_steps`` stops a stage early without marking it complete, leaving the
    directory exactly as an interrupted run would (last periodic checkpoint).
    """
    data, out = Path(data_dir), Path(out_dir)
    vocab = read_vocab(data)
    spec = pipeline_spec(cfg, vocab, method)
    tcfg = train_config(cfg)
    stages = {"1": (1,), "2": (2,), "all": (1, 2)}.get(str(step))
    if stages is None:
        raise ConfigError(f"--step must be 1, 2 or all, got {step!r}")
    out.mkdir(parents=True, exist_ok=True)
    progress_path, log_path, opt_path = out / "progress.json", out / "train_log.jsonl", out / "optimizer.ckpt"

    progress = {"stage": stages[0], "step": 0, "complete": False}
    state: OptimizerState | None = None
    if resume and progress_path.exists():
        progress = json.loads(progress_path.read_text())
        pipe = Pipeline.load(out, require=())
        if pipe.spec != spec:
            raise ConfigError(f"checkpoint in {out} was trained with a different configuration")
        if not progress["complete"] and progress["step"] > 0:
            state = load_state(opt_path)
        _truncate_log(log_path, progress)
    elif stages == (2,):
        pipe = Pipeline.load(out, require=("compressor",), parts=("compressor",))
        if pipe.spec != spec:
            raise ConfigError(f"Step-1 checkpoint in {out} was trained with a different configuration")
    else:
        pipe = Pipeline(spec)
        for stale in (log_path, progress_path, opt_path):
            stale.unlink(missing_ok=True)

    cfg["pipeline"]["method"], cfg["pipeline"]["context_tokens"] = spec.method, spec.C
    cfg.write(out / "resolved_config.ini")
    part = {1: "compressor", 2: "decoder"}
    records: list[dict] = []

    for stage in stages:
        if stage < progress["stage"] or (stage == progress["stage"] and progress["complete"]):
            continue
        if stage > progress["stage"]:
            state = None
        state = state or OptimizerState(tcfg.learning_rate, tcfg.weight_decay, (tcfg.beta1, tcfg.beta2), tcfg.eps)

        def on_step(rec, stage=stage, st=state):
            records.append(rec)
            with open(log_path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if tcfg.checkpoint_every and rec["step"] % tcfg.checkpoint_every == 0:
                pipe.save(out, parts=(part[stage],))
                save_state(opt_path, st)
                _write_progress(progress_path, stage, rec["step"], False)

        if stage == 1:
            samples = read_split(data, "step1_train")
            train_step1(pipe, samples, tcfg, state=state, on_step=on_step, max_steps=max_steps)
        else:
            samples = read_split(data, "step2_train")
            memories = build_memories(pipe, samples)
            train_step2(pipe, samples, tcfg, memories=memories, state=state, on_step=on_step,
                        max_steps=max_steps)
        epochs = tcfg.step1_epochs if stage == 1 else tcfg.step2_epochs
        if state.step < len(samples) // (tcfg.batch_size * tcfg.grad_accum_steps) * epochs:
            return records
        pipe.save(out, parts=(part[stage],))
        _write_progress(progress_path, stage, state.step, True)
        progress = {"stage": stage, "step": state.step, "complete": True}
        opt_path.unlink(missing_ok=True)
        log.info("stage %d finished after %d optimizer steps", stage, state.step)
    return records


def _write_progress(path: Path, stage: int, step: int, complete: bool) -> None:
    path.write_text(json.dumps({"stage": stage, "step": step, "complete": complete}, sort_keys=True) + "\n")


def _truncate_log(path: Path, progress: dict) -> None:
    """Drops records written after the checkpoint being resumed."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines()
            if (r := json.loads(line))["stage"] < progress["stage"]
            or (r["stage"] == progress["stage"] and r["step"] <= progress["step"])]
    path.write_text("".join(line + "\n" for line in keep))


def paper_accounting(P: int = 576, L: int = 10, budgets: Sequence[int] = (64, 32, 1)) -> str:
    lines = ["method\tC\tL\tP\tmemory_tokens\tcompression_ratio"]
    for C in budgets:
        r = accounting_row(f"iqvic-c{C}", C, L, P)
        lines.append(f"{r.method}\t{C}\t{L}\t{P}\t{r.memory_tokens}\t{format_ratio(r.compression_ratio)}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, data_dir: str | Path, runs_dir: str | Path, out_dir: str | Path,
             methods: Sequence[str] | None = None, plots: bool = True) -> tuple[BenchReport, str]:
    data, runs = Path(data_dir), Path(runs_dir)
    b = cfg["bench"]
    methods = list(methods or [m for m in b["methods"].split(",") if m.strip()])
    if not methods:
        raise ConfigError("no methods requested")
    samples = read_split(data, "eval")
    pipes = {}
    for name in methods:
        parse_method(name, cfg["pipeline"]["context_tokens"])
        pipes[name] = Pipeline.load(runs / name)
    rows = [evaluate(pipes[name], samples, name, b["max_new"], b["workers"]) for name in methods]
    sweep = []
    for T in [int(t) for t in b["t_sweep"].split(",") if t.strip()]:
        vocab = read_vocab(data)
        ev = generate("kv_retrieval", cfg["data"]["eval"], vocab, split_seed(cfg.seed, "eval") + 100 * T,
                      n_frames=T, grid=cfg["pipeline"]["grid"])
        sweep += [(name, T, evaluate(pipes[name], ev, name, b["max_new"], b["workers"]).accuracy)
                  for name in methods]
    report = build_report(rows, cfg.seed, cfg.digest(), b["min_margin"], b["noise_slack"])
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "resolved_config.ini")
    return report, write_report(report, out, sweep, plots)


def load_frames(path: str | Path) -> np.ndarray:
    """A JSON list of grids, an object with ``frames``, or the first record of a dataset file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing frames file {path}")
    text = path.read_text().strip()
    try:
        obj = json.loads(text.splitlines()[0] if text.startswith("{") else text)
    except (json.JSONDecodeError, IndexError) as exc:
        raise DataError(f"{path}: not a frames file: {exc}") from exc
    frames = np.asarray(obj["frames"] if isinstance(obj, dict) else obj, dtype=np.int64)
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1] != frames.shape[2] or frames.shape[0] == 0:
        raise DataError(f"{path}: expected a non-empty stream of square grids, got shape {frames.shape}")
    return frames


def cmd_ask(run_dir: str | Path, frames_path: str | Path, question: str, incremental: bool = False,
            max_new: int | None = None) -> list[str]:
    """``max_new`` defaults to the position headroom left after question and full memory."""
    pipe = Pipeline.load(run_dir)
    frames = load_frames(frames_path)
    if frames.shape[1] != pipe.spec.grid:
        raise DataError(f"frames are {frames.shape[1]}x{frames.shape[1]}, model expects {pipe.spec.grid}")
    if frames.max() >= pipe.vocab.frame_alphabet or frames.min() < 0:
        raise DataError(f"frame symbols must lie in [0, {pipe.vocab.frame_alphabet})")
    ids = pipe.vocab.encode(question)
    if max_new is None:
        max_new = max(0, pipe.decoder.config.max_positions - len(ids) - pipe.L * pipe.C)
    res = run_stream(pipe, frames, ids, incremental=incremental, max_new=max_new)
    lines = [f"frame {t + 1}: {a.text}" for t, a in enumerate(res.snapshots)]
    mem = res.memory
    lines.append(f"answer: {res.answer.text}")
    lines.append(f"stats: entries={len(mem)} token_count={mem.token_count()} merges={mem.n_merges}")
    return lines


# argument parsing ---------------------------------------------------------------------

def _overrides(args) -> dict:
    out = {("run", "seed"): args.seed}
    for item in args.set or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[(section.strip(), name.strip())] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iqvic", description="Question-conditioned frame compression with a bounded memory.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file or packaged profile name (desk); overrides the defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")

    p = sub.add_parser("gen", help="write train/eval datasets")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="two-step training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", help="iqvic, avgpool or truncate with optional -c<N>")
    p.add_argument("--step", default="all", choices=("1", "2", "all"))
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("eval", help="benchmark trained runs")
    common(p)
    p.add_argument("--data")
    p.add_argument("--runs", help="directory holding one run per method name")
    p.add_argument("--methods", help="comma-separated, e.g. iqvic-c8,avgpool-c8")
    p.add_argument("--out", default="report")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--paper-accounting", action="store_true",
                   help="print memory tokens and ratios for C=64/32/1 at P=576, L=10")

    p = sub.add_parser("ask", help="answer one question over a frame stream")
    p.add_argument("--run", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--incremental", action="store_true")
    p.add_argument("--max-new", type=int, help="answer token budget (default: all remaining positions)")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, CapacityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, VocabularyError, ConsistencyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def _dispatch(args) -> int:
    if args.command == "ask":
        for line in cmd_ask(args.run, args.frames, args.question, args.incremental, args.max_new):
            print(line)
        return EXIT_OK
    cfg = load_config(args.config, _overrides(args))
    if args.command == "gen":
        for split, path in cmd_gen(cfg, args.out).items():
            print(f"{split}\t{path}")
        return EXIT_OK
    if args.command == "train":
        recs = cmd_train(cfg, args.data, args.out, args.step, args.resume, args.method)
        last = recs[-1] if recs else None
        print(f"trained {args.out}: {len(recs)} optimizer steps"
              + (f", final loss {last['loss']:.4f}" if last else ""))
        return EXIT_OK
    if args.paper_accounting:
        sys.stdout.write(paper_accounting())
        if not args.runs:
            return EXIT_OK
    if not (args.runs and args.data):
        raise ConfigError("eval needs --data and --runs")
    methods = args.methods.split(",") if args.methods else None
    report, dig = cmd_eval(cfg, args.data, args.runs, args.out, methods, plots=not args.no_plots)
    sys.stdout.write(render_table(report))
    print(f"digest\t{dig}")
    return EXIT_OK if report.passed else EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
