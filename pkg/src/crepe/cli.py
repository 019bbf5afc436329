"""Command-line entry point: synth, pretrain, finetune, infer, eval, render, gradcheck.

Exit codes: 0 success, 1 validation failure (bad input, missing file, schema
mismatch, failed gradient check), 2 invariant violation or NaN abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
import torch

from . import inference
from .metrics import evaluate
from .model import CrepeConfig, TruncationError, load_checkpoint
from .nnkernel import TrainingError
from .render import render_svg
from .synthgen import GenConfig, derive_seed, generate, read_corpus, read_ppm, write_corpus
from .token_schema import SchemaError, Vocabulary
from .training import (SampleStream, TrainConfig, finetune, jsonl_logger, load_train_state, make_sample,
                       new_state, pretrain_ocr, save_train_state)

TASKS = ("ocr", "parse", "multi", "layout", "class", "scene")


class CliError(Exception):
    """Error with an exit code and a stable message prefix."""

    def __init__(self, prefix: str, message: str, code: int = 1):
        super().__init__(f"{prefix}: {message}")
        self.code = code


def missing(path) -> CliError:
    return CliError("missing-file", str(path))


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """``a.b=v`` sets ``cfg["a"]["b"]``; values are JSON where they parse, else strings."""
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise CliError("invalid-config", f"override {item!r} is not key=value")
        node = cfg
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CliError("invalid-config", f"override {item!r} descends into a non-table")
        node[leaf] = parse_value(raw)
    return cfg


def load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise missing(path)
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise CliError("invalid-config", f"{path}: {e}") from None
    cfg = apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    return cfg


def _subconfig(cls, d: dict | None, what: str):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise CliError("invalid-config", f"unknown {what} keys {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise CliError("invalid-config", f"{what}: {e}") from None


def train_config(cfg: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cfg) - known - {"model", "gen", "schema"}
    if unknown:
        raise CliError("invalid-config", f"unknown training keys {sorted(unknown)}")
    return TrainConfig.from_dict(cfg)


def load_vocab(cfg: dict) -> Vocabulary:
    path = cfg.get("schema")
    if path and not Path(path).exists():
        raise missing(path)
    return Vocabulary.load(path)


def load_docs(index) -> list:
    if not index:
        raise CliError("invalid-config", "no corpus given")
    path = Path(index)
    if path.is_dir():
        path = path / "train.jsonl"
    if not path.exists():
        raise missing(path)
    return read_corpus(path)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, cfg: dict) -> int:
    seed = cfg.get("seed", 0)
    out = Path(cfg.get("out_dir") or "corpus")
    gen = _subconfig(GenConfig, cfg.get("gen"), "gen")
    vocab = load_vocab(cfg)
    docs = []
    for i in range(args.n):
        doc = generate(args.task, derive_seed(seed, f"synth/{args.task}/{i}"), gen, vocab,
                       n_multi=args.docs_per_image)
        docs.append((f"{args.task}_{i:05d}", doc))
    index = write_corpus(docs, out, args.split, weak=args.weak)
    print(f"wrote {len(docs)} documents to {index}")
    return 0


def _model_config(cfg: dict, vocab: Vocabulary) -> CrepeConfig:
    m = dict(cfg.get("model") or {})
    m.setdefault("vocab_size", len(vocab))
    if m["vocab_size"] != len(vocab):
        raise CliError("schema-mismatch", f"model vocab_size {m['vocab_size']} != vocabulary size {len(vocab)}")
    return _subconfig(CrepeConfig, m, "model")


def _start_state(tcfg: TrainConfig, mcfg: CrepeConfig, vocab: Vocabulary, out: Path):
    """Resume from ``out/last`` if present, else start from ``init_checkpoint`` or fresh weights."""
    last = out / "last"
    if (out / "last.crpe").exists() and (out / "last.opt").exists():
        state, saved_cfg, saved_vocab, streams = load_train_state(last)
        if saved_vocab != vocab or saved_cfg != mcfg:
            raise CliError("schema-mismatch", f"{last}.crpe was written with a different model or schema")
        return state, streams, True
    if tcfg.init_checkpoint:
        path = Path(tcfg.init_checkpoint)
        if not path.exists():
            raise missing(path)
        params, saved_cfg, saved_vocab = load_checkpoint(path)
        if saved_vocab != vocab or saved_cfg != mcfg:
            raise CliError("schema-mismatch", f"{path} does not match the configured model or schema")
        for p in params.values():
            p.requires_grad_(True)
        return new_state(mcfg, tcfg.seed, params), {}, False
    return new_state(mcfg, tcfg.seed), {}, False


def _train(cfg: dict, mode: str) -> int:
    tcfg = train_config(cfg)
    vocab = load_vocab(cfg)
    mcfg = _model_config(cfg, vocab)
    out = Path(tcfg.out_dir or mode)
    out.mkdir(parents=True, exist_ok=True)
    state, positions, resumed = _start_state(tcfg, mcfg, vocab, out)
    log_path = out / "loss.jsonl"
    if not resumed and log_path.exists():
        log_path.unlink()
    log = jsonl_logger(log_path)
    (out / "config.json").write_text(json.dumps(
        {**asdict(tcfg), "model": asdict(mcfg)}, indent=2, sort_keys=True) + "\n")
    if mode == "pretrain":
        docs = load_docs(tcfg.corpus or tcfg.ocr_corpus)
        samples = [make_sample(d, vocab, "ocr", doc_id=i) for i, d in docs]
        if "ocr" in positions:
            state.streams["ocr"] = SampleStream(samples, tcfg.seed, "ocr", positions["ocr"])
        state = pretrain_ocr(samples, vocab, mcfg, tcfg, state, log, str(out / "ckpt"))
    else:
        docs = load_docs(tcfg.corpus)
        task = tcfg.task
        samples = [make_sample(d, vocab, task, weak=tcfg.weak, doc_id=i) for i, d in docs]
        ocr_samples = []
        if tcfg.weak:
            if not tcfg.ocr_corpus:
                raise CliError("invalid-config", "weak finetuning needs ocr_corpus")
            ocr_samples = [make_sample(d, vocab, "ocr", doc_id=i) for i, d in load_docs(tcfg.ocr_corpus)]
            if any(s.has_coords for s in samples):
                raise CliError("invariant", "weak-mode parse samples must be coordinate-free", 2)
        if "main" in positions:
            state.streams["main"] = SampleStream(samples, tcfg.seed, "main", positions["main"])
        if "ocr" in positions:
            state.streams["ocr"] = SampleStream(ocr_samples, tcfg.seed, "ocr", positions["ocr"])
        state = finetune(samples, vocab, mcfg, tcfg, ocr_samples, state, log, str(out / "ckpt"))
    save_train_state(out / "last", state, mcfg, vocab)
    print(f"{mode}: {state.step} steps, checkpoint {out / 'last.crpe'}")
    return 0


def cmd_pretrain(args, cfg: dict) -> int:
    return _train(cfg, "pretrain")


def cmd_finetune(args, cfg: dict) -> int:
    if args.weak:
        cfg["weak"] = True
    return _train(cfg, "finetune")


def _images_from_args(args) -> list[tuple[str, np.ndarray]]:
    if args.corpus:
        return [(i, d.image) for i, d in load_docs(args.corpus)]
    out = []
    for p in args.images:
        path = Path(p)
        if not path.exists():
            raise missing(path)
        out.append((path.stem, read_ppm(path)))
    return out


def cmd_infer(args, cfg: dict) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise missing(ckpt)
    params, mcfg, vocab = load_checkpoint(ckpt)
    if args.task not in vocab.triggers:
        raise CliError("schema-mismatch", f"checkpoint vocabulary has no task {args.task!r}")
    items = _images_from_args(args)
    out = Path(cfg.get("out_dir") or "predictions")
    out.mkdir(parents=True, exist_ok=True)
    bs = int(cfg.get("batch", 8))
    for doc_id, img in items:
        if img.shape != (mcfg.image_size, mcfg.image_size):
            raise CliError("schema-mismatch", f"{doc_id}: image {img.shape} vs model input {mcfg.image_size}")
    for k in range(0, len(items), bs):
        chunk = items[k:k + bs]
        for (doc_id, _), res in zip(chunk, inference.run(np.stack([im for _, im in chunk]),
                                                         args.task, params, mcfg, vocab)):
            (out / f"{doc_id}.json").write_text(json.dumps(res.to_json(doc_id), sort_keys=True) + "\n")
    print(f"wrote {len(items)} results to {out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise missing(pred_dir)
    docs = load_docs(args.gt)
    results = {}
    for p in sorted(pred_dir.glob("*.json")):
        rec = json.loads(p.read_text())
        if "id" in rec and "spans" in rec:
            results[rec["id"]] = rec
    report = evaluate(results, docs, args.task)
    out = Path(cfg.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.json", out / "per_document.csv")
    print(json.dumps(report.scores, sort_keys=True))
    return 0


def cmd_render(args, cfg: dict) -> int:
    rp = Path(args.result)
    if not rp.exists():
        raise missing(rp)
    image = None
    if args.image:
        if not Path(args.image).exists():
            raise missing(args.image)
        image = read_ppm(Path(args.image))
    svg = render_svg(json.loads(rp.read_text()), image)
    out = Path(args.svg or cfg.get("out_dir") or rp.with_suffix(".svg"))
    out.write_text(svg)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args, cfg: dict) -> int:
    from .gradsuite import run_suites
    results = run_suites(seed=cfg.get("seed", 0), samples_per_tensor=int(cfg.get("samples", 3)))
    failed = [r for r in results if not r.ok]
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:20s} max_rel_err={r.max_rel_error:.3e} at {r.where}")
    if failed:
        raise CliError("gradcheck-failed", ", ".join(r.name for r in failed))
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory or file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")

    p = argparse.ArgumentParser(prog="crepe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--task", choices=TASKS, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--weak", action="store_true", help="omit word quads from parse records")
    s.add_argument("--docs-per-image", type=int, default=None, help="multi: receipts per canvas")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="OCR pretraining")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="supervised or weakly-supervised finetuning")
    s.add_argument("--weak", action="store_true")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("infer", parents=[common], help="decode images to result JSON")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--task", choices=TASKS, required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--corpus", help="corpus index (.jsonl) or directory")
    g.add_argument("--images", nargs="+", help="PPM files")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", parents=[common], help="score predictions against a corpus")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--task", choices=TASKS, required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("render", parents=[common], help="SVG overlay of a result")
    s.add_argument("--result", required=True)
    s.add_argument("--image")
    s.add_argument("--svg", help="output path (defaults to --out, then result path with .svg)")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(max(1, int(os.environ.get("CREPE_THREADS", "1"))))
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        return args.fn(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except SchemaError as e:
        print(f"error: schema-mismatch: {e}", file=sys.stderr)
        return 1
    except TrainingError as e:
        print(f"error: nan-abort: {e}", file=sys.stderr)
        return 2
    except (inference.AlignmentError, TruncationError) as e:
        print(f"error: invariant: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {e.filename or e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: invalid-input: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
