"""Command line entry point.

Subcommands: synth, train, eval, predict, gradcheck, attn-export.
Exit codes: 0 success, 1 verification failure, 2 usage/config/IO error,
3 numeric failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError, atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import ConfigError, load_config, model_config, train_config
from .encoder import EncoderConfig, count_params
from .gradcheck import check_gradients
from .metrics import DecodeThresholds, aggregate_attention, combine_maps, evaluate
from .model import (LossWeights, ModelConfig, MultiNER, cross_attention_param_count,
                    head_param_count, joint_loss, uses_cross_attention)
from .rng import stream
from .synth import ConfigError as SynthConfigError
from .synth import SynthSpec, synth_generate, synth_questions
from .synth import question_texts
from .text import (ContextDocument, ParseError, TypeInventory, ValidationError, Vocab,
                   collate, load_nested, load_question_file, make_questions, write_nested_corpus)
from .train import NonFiniteLossError, predict_corpus, train

log = logging.getLogger("multiner.cli")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        return f"level={record.levelname.lower()} logger={record.name} {record.getMessage()}"


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger("multiner")
    if not any(isinstance(h.formatter, _KeyValueFormatter) for h in root.handlers):
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(_KeyValueFormatter())
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _threads() -> int:
    raw = os.environ.get("MNER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MNER_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("MNER_THREADS must be >= 1")
    return n


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_corpus(path, docs: Sequence[ContextDocument]) -> None:
    buf = io.StringIO()
    write_nested_corpus(docs, buf)
    write_text(path, buf.getvalue())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_version() -> Dict[str, str]:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return {"package": __version__, "source_sha256": h.hexdigest()}


def _ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {p}: {exc}") from None
    if not os.access(p, os.W_OK):
        raise UsageError(f"output directory {p} is not writable")
    return p


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed})
    spec = SynthSpec.from_dict(cfg["synth"])
    out = _ensure_dir(args.out or cfg["out_dir"])
    corpus = synth_generate(spec, cfg["seed"])
    for name in ("train", "dev", "test"):
        write_corpus(out / f"{name}.jsonl", getattr(corpus, name))
    write_text(out / "questions.json", _dumps(synth_questions(spec)))
    write_text(out / "report.json", _dumps(corpus.report))
    # a ready-to-train config pointing at the generated files
    run_cfg = {"profile": "toy", "seed": cfg["seed"], "types": list(spec.types),
               "questions": "questions.json",
               "data": {"train": "train.jsonl", "dev": "dev.jsonl", "test": "test.jsonl"},
               "synth": spec.to_dict()}
    write_text(out / "config.json", _dumps(run_cfg))
    r = corpus.report["train"]
    log.info("event=synth out=%s seed=%d train=%d dev=%d test=%d ambiguous_fraction=%.4f",
             out, cfg["seed"], spec.n_train, spec.n_dev, spec.n_test, r["ambiguous_fraction"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# shared data/model plumbing
# ---------------------------------------------------------------------------

def resolve_data(cfg: dict) -> Dict[str, List[ContextDocument]]:
    """Load the configured splits, or generate them from the synth block."""
    data = cfg.get("data") or {}
    if data.get("train"):
        out = {k: load_nested(v) for k, v in data.items() if v}
        if "dev" not in out:
            raise UsageError("config names a train set but no dev set")
        return out
    c = synth_generate(SynthSpec.from_dict(cfg["synth"]), cfg["seed"])
    return {"train": c.train, "dev": c.dev, "test": c.test}


def resolve_questions(cfg: dict, types: Sequence[str]) -> Dict[str, str]:
    q = cfg.get("questions")
    if isinstance(q, str):
        q = load_question_file(q)
    if q is None:
        q = question_texts(types)
    missing = [t for t in types if t not in q]
    if missing:
        raise UsageError(f"no question text for types {missing}")
    return {t: q[t] for t in types}


def param_accounting(mc: ModelConfig) -> Dict[str, int]:
    d = mc.encoder.d_model
    cross = cross_attention_param_count(d) if uses_cross_attention(mc.mode) else 0
    heads = head_param_count(d, len(mc.types), mc.mode)
    enc = count_params(mc.encoder)
    return {"encoder": enc, "cross_attention": cross, "heads": heads,
            "total": enc + cross + heads}


def run_training(cfg: dict, out_dir) -> dict:
    """Train from a resolved config; write checkpoint and manifest; return the manifest."""
    out = _ensure_dir(out_dir)
    t0 = time.time()
    splits = resolve_data(cfg)
    types = list(cfg["types"]) if cfg.get("types") else TypeInventory.from_documents(
        splits["train"]).names
    inv = TypeInventory(types)
    qtexts = resolve_questions(cfg, types)
    qs = make_questions(inv, qtexts)
    vocab = Vocab.build(splits["train"], qs, min_freq=cfg["min_freq"])
    mc = model_config(cfg, len(vocab), types)
    tc = train_config(cfg)
    log.info("event=train_start mode=%s seed=%d types=%s vocab=%d params=%d", mc.mode,
             cfg["seed"], ",".join(types), len(vocab), param_accounting(mc)["total"])
    result = train(splits["train"], splits["dev"], qs, vocab, mc, tc)
    model = result.model
    for rec in result.history:
        log.info("event=epoch_parts epoch=%d %s", rec["epoch"],
                 " ".join(f"{k}={v:.6f}" for k, v in sorted(rec["parts"].items())))

    ckpt_path = out / "checkpoint.mner"
    save_checkpoint(Checkpoint.from_model(model, step=result.step, rng_state=result.rng_state,
                                          vocab=vocab.tokens(), questions=qtexts,
                                          max_len=cfg["max_len"]), ckpt_path)
    th = DecodeThresholds(**cfg["thresholds"])
    final = {}
    for name, docs in splits.items():
        preds = predict_corpus(model, docs, vocab, qs, cfg["max_len"], 16, th, _threads())
        final[name] = evaluate(preds, [d.entities for d in docs], types,
                               [d.doc_id for d in docs]).to_dict()
        log.info("event=final split=%s precision=%.4f recall=%.4f f1=%.4f", name,
                 final[name]["micro"]["precision"], final[name]["micro"]["recall"],
                 final[name]["micro"]["f1"])
    artifacts = {"checkpoint": {"path": str(ckpt_path), "sha256": sha256_file(ckpt_path)}}
    for k, p in (cfg.get("data") or {}).items():
        if p:
            artifacts[f"data.{k}"] = {"path": p, "sha256": sha256_file(p)}
    if isinstance(cfg.get("questions"), str):
        artifacts["questions"] = {"path": cfg["questions"],
                                  "sha256": sha256_file(cfg["questions"])}
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "config": cfg,
        "code_version": code_version(),
        "artifacts": artifacts,
        "param_counts": param_accounting(mc),
        "history": result.history,
        "best_epoch": result.best_epoch,
        "best_dev_f1": result.best_dev_f1,
        "final": final,
        "timing": {"finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                   "seconds": round(time.time() - t0, 3)},
    }
    write_text(out / "manifest.json", _dumps(manifest))
    return manifest


def cmd_train(args) -> int:
    cfg = load_config(args.config, {"mode": args.mode, "seed": args.seed})
    out = args.out or cfg["out_dir"]
    try:
        run_training(cfg, out)
    except NonFiniteLossError as exc:
        path = _ensure_dir(out) / "nonfinite_batch.json"
        write_text(path, _dumps(exc.dump))
        log.error("event=nonfinite_loss msg=%s dump=%s", exc, path)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / predict
# ---------------------------------------------------------------------------

def _load_model(path):
    ckpt = load_checkpoint(path)
    model = ckpt.model()
    vocab = Vocab(ckpt.vocab)
    inv = TypeInventory(model.types)
    qs = make_questions(inv, ckpt.questions)
    return ckpt, model, vocab, qs


def _thresholds(args) -> DecodeThresholds:
    t = getattr(args, "threshold", None)
    if t is None:
        return DecodeThresholds()
    try:
        return DecodeThresholds(t, t, t)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    if not args.data:
        raise UsageError("eval needs --data (gold records)")
    gold = load_nested(args.data)
    golds = [d.entities for d in gold]
    if args.gold_as_pred:
        preds, types = golds, None
    elif args.pred:
        pdocs = load_nested(args.pred)
        if len(pdocs) != len(gold):
            raise UsageError(f"{len(pdocs)} prediction records vs {len(gold)} gold records")
        preds, types = [d.entities for d in pdocs], None
    elif args.checkpoint:
        ckpt, model, vocab, qs = _load_model(args.checkpoint)
        extra = sorted({s.type for d in gold for s in d.entities} - set(model.types))
        if extra:
            raise UsageError(f"inventory mismatch: data has types {extra} unknown to the "
                             f"checkpoint ({model.types})")
        preds = predict_corpus(model, gold, vocab, qs, ckpt.max_len, 16, _thresholds(args),
                               _threads())
        types = model.types
    else:
        raise UsageError("eval needs one of --checkpoint, --pred or --gold-as-pred")
    rep = evaluate(preds, golds, types, [d.doc_id for d in gold])
    text = _dumps(rep.to_dict())
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    log.info("event=eval precision=%.6f recall=%.6f f1=%.6f tp=%d fp=%d fn=%d", rep.precision,
             rep.recall, rep.f1, rep.micro.tp, rep.micro.fp, rep.micro.fn)
    return EXIT_OK


def cmd_predict(args) -> int:
    if not (args.checkpoint and args.data and args.out):
        raise UsageError("predict needs --checkpoint, --data and --out")
    ckpt, model, vocab, qs = _load_model(args.checkpoint)
    docs = load_nested(args.data)
    budget = ckpt.max_len - 2 - max(len(q.tokens) for q in qs)
    truncated = sum(len(d.tokens) > budget for d in docs)
    if truncated:
        log.warning("event=truncation docs=%d max_len=%d", truncated, ckpt.max_len)
    preds = predict_corpus(model, docs, vocab, qs, ckpt.max_len, 16, _thresholds(args),
                           _threads())
    out = [ContextDocument(d.tokens, sorted(p), d.doc_id) for d, p in zip(docs, preds)]
    write_corpus(args.out, out)
    log.info("event=predict docs=%d spans=%d truncated=%d", len(out),
             sum(len(d.entities) for d in out), truncated)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_TYPES = ("PER", "ORG")


def toy_gradcheck(mode: str = "full", seed: int = 0, min_coords: int = 200,
                  fault: Optional[str] = None, encoder: Optional[dict] = None):
    """Finite-difference check of the joint loss on a small 2-type model.

    Dropout is off and parameters are float64.  Returns the GradCheckResult.
    """
    enc = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, max_positions=64)
    enc.update(encoder or {})
    enc["dropout"] = 0.0
    spec = SynthSpec(types=GRADCHECK_TYPES, n_train=4, n_dev=0, n_test=0, min_len=5,
                     max_len=9, ambiguity_rate=0.0, max_mentions=2)
    docs = synth_generate(spec, seed).train
    inv = TypeInventory(GRADCHECK_TYPES)
    qs = make_questions(inv, synth_questions(spec))
    vocab = Vocab.build(docs, qs)
    mc = ModelConfig(EncoderConfig(len(vocab), **enc), list(GRADCHECK_TYPES), mode,
                     cross_heads=2, seed=seed, dtype="float64")
    model = MultiNER(mc)
    b = collate(docs, qs, vocab, enc["max_positions"])
    loss_fn = lambda: joint_loss(model.forward(b), b, LossWeights()).total
    k = max(6, math.ceil(min_coords / len(model.params)) + 1)
    with T.inject_fault(fault):
        return check_gradients(model.params, loss_fn, h=1e-5, coords_per_param=k,
                               rng=stream(seed, "gradcheck"))


def cmd_gradcheck(args) -> int:
    overrides = {"seed": args.seed if args.seed is not None else 0, "mode": args.mode,
                 "precision": args.precision}
    cfg = load_config(args.config, overrides)
    if cfg["precision"] != "float64":
        raise UsageError("gradient checking requires double precision")
    t0 = time.time()
    res = toy_gradcheck(cfg["mode"], cfg["seed"], fault=args.inject_fault)
    ok = res.passed() and len(res.covered()) == len(res.counts) and res.n_coords >= 200
    report = {"passed": ok, "max_rel_error": res.max_rel_error, "n_coords": res.n_coords,
              "n_small": res.n_small, "max_abs_error_small": res.max_abs_error_small,
              "tensors": len(res.counts), "tensors_covered": len(res.covered()),
              "worst": list(res.worst) if res.worst else None, "per_param": res.per_param,
              "seconds": round(time.time() - t0, 3)}
    if args.out:
        write_text(args.out, _dumps(report))
    log.info("event=gradcheck passed=%s max_rel_error=%.3e coords=%d tensors=%d/%d",
             ok, res.max_rel_error, res.n_coords, len(res.covered()), len(res.counts))
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# attention export
# ---------------------------------------------------------------------------

def export_attention(model: MultiNER, docs: Sequence[ContextDocument], vocab: Vocab, qs,
                     max_len: int):
    """Per-example cross-task attention (head-averaged) and its type maps."""
    if not uses_cross_attention(model.mode):
        raise UsageError(f"no cross-task attention in this mode ({model.mode})")
    raw, maps = [], []
    for d in docs:
        b = collate([d], qs, vocab, max_len)
        with T.no_grad():
            out = model.forward(b, keep_attention=True)
        w = out.attention[0]
        Tn, L = b.n_tasks, b.seq_len
        valid = b.attention_mask.reshape(Tn * L)
        raw.append((w, valid, [L] * Tn))
        maps.append(aggregate_attention(w, [L] * Tn, valid, model.types))
    return raw, maps


def cmd_attn_export(args) -> int:
    if not (args.checkpoint and args.data and args.out):
        raise UsageError("attn-export needs --checkpoint, --data and --out")
    ckpt, model, vocab, qs = _load_model(args.checkpoint)
    if not uses_cross_attention(model.mode):
        raise UsageError(f"no cross-task attention in this mode ({model.mode})")
    docs = load_nested(args.data)
    if not docs:
        raise UsageError("no documents to export")
    out = _ensure_dir(args.out)
    raw, maps = export_attention(model, docs, vocab, qs, ckpt.max_len)
    if args.scope in ("per-example", "both"):
        for i, m in enumerate(maps):
            write_text(out / f"example-{i:05d}.csv", m.to_csv())
    if args.scope in ("corpus", "both"):
        write_text(out / "corpus.csv", combine_maps(maps).to_csv())
    if args.dump_raw:
        buf = io.BytesIO()
        arrays = {}
        for i, (w, valid, lengths) in enumerate(raw):
            arrays[f"weights_{i:05d}"] = w
            arrays[f"valid_{i:05d}"] = valid
            arrays[f"lengths_{i:05d}"] = np.asarray(lengths)
        np.savez(buf, types=np.asarray(model.types), **arrays)
        atomic_write_bytes(out / "raw_attention.npz", buf.getvalue())
    log.info("event=attn_export examples=%d scope=%s out=%s", len(maps), args.scope, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiner", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mode=False):
        sp.add_argument("--config", help="JSON run config (or a run manifest)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if mode:
            sp.add_argument("--mode", choices=["full", "no_att", "no_diff",
                                               "single_task_baseline"])

    sp = sub.add_parser("synth", help="generate the synthetic dependency benchmark")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train and write checkpoint + manifest")
    common(sp, mode=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score predictions or a checkpoint against gold records")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data", help="gold records (nested JSONL)")
    sp.add_argument("--pred", help="prediction records (nested JSONL)")
    sp.add_argument("--gold-as-pred", action="store_true",
                    help="score the gold records against themselves")
    sp.add_argument("--threshold", type=float, help="one decode threshold for all gates")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="decode spans for every input record")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--threshold", type=float)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("gradcheck", help="finite-difference check on the 2-type toy model")
    common(sp, mode=True)
    sp.add_argument("--precision", choices=["float64", "float32"])
    sp.add_argument("--inject-fault", metavar="OP", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("attn-export", help="write cross-task attention type maps as CSV")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.add_argument("--scope", choices=["per-example", "corpus", "both"], default="both")
    sp.add_argument("--dump-raw", action="store_true",
                    help="also write raw head-averaged weights to raw_attention.npz")
    sp.set_defaults(func=cmd_attn_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (UsageError, ConfigError, SynthConfigError, ValidationError, ParseError,
            CheckpointError, OSError) as exc:
        log.error("event=error kind=%s msg=%s", type(exc).__name__, str(exc).replace("\n", " "))
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        log.error("event=numeric_failure msg=%s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
