"""Command-line pipeline: vocabulary building, data preparation, training,
finetuning, translation, BLEU evaluation, and robustness tables.

Exit code 0 on success; failures print a single ``error: ...`` line on
stderr and exit nonzero. SIMCUT_LOG={quiet|info|debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import data as dt
from .config import RunConfig, seeded_rng
from .data import (FWD_ID, REV_ID, build_vocab, encode, encode_pairs, decode,
                   load_merges, load_vocab, read_parallel, read_tsv,
                   save_merges, save_vocab, tag_sources, train_bpe)
from .decoding import DecodeConfig, corpus_bleu, robustness_eval, translate_ids
from .model import load_checkpoint
from .trainer import train as run_train

log = logging.getLogger("simcut")

DEFAULT_PROBS = (0.0, 0.01, 0.05, 0.1)


def _read_pairs(src, tgt, tsv):
    if tsv is not None:
        return read_tsv(tsv)
    if src is None or tgt is None:
        raise ValueError("need either --tsv or both --src and --tgt")
    return read_parallel(src, tgt)


def _overrides(rest: list[str]) -> dict[str, str]:
    out = {}
    for item in rest:
        if not item.startswith("--") or "=" not in item:
            raise ValueError(f"expected --key=value override, got {item!r}")
        key, val = item[2:].split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _load_model(checkpoint: str, vocab_path: str):
    params, meta = load_checkpoint(checkpoint)
    vocab = load_vocab(vocab_path)
    if params.config.vocab_size != vocab.size:
        raise ValueError(f"checkpoint/vocab mismatch: model has "
                         f"{params.config.vocab_size} types, vocabulary file "
                         f"has {vocab.size}")
    return params, meta, vocab


def _maybe_tag(pairs, meta):
    run_cfg = meta.get("run_config", {})
    if run_cfg.get("direction_tag"):
        tag = FWD_ID if run_cfg.get("direction", "forward") == "forward" else REV_ID
        return tag_sources(pairs, tag)
    return pairs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_build_vocab(args) -> int:
    pairs = _read_pairs(args.src, args.tgt, args.tsv)
    words = [w for s, t in pairs for w in (s + " " + t).split()]
    merges = train_bpe(words, args.num_merges)
    vocab = build_vocab(words, merges)
    save_merges(merges, args.merges_out)
    save_vocab(vocab, args.vocab_out)
    print(f"vocabulary size: {vocab.size} ({len(merges)} merges)")
    return 0


def cmd_prepare_bidi(args) -> int:
    pairs = _read_pairs(args.src, args.tgt, args.tsv)
    doubled = pairs + [(t, s) for s, t in pairs]
    with open(args.out_src, "w", encoding="utf-8") as f:
        f.writelines(s + "\n" for s, _ in doubled)
    with open(args.out_tgt, "w", encoding="utf-8") as f:
        f.writelines(t + "\n" for _, t in doubled)
    print(f"wrote {len(doubled)} pairs ({len(pairs)} per direction)")
    return 0


def cmd_train(args, rest: list[str]) -> int:
    cfg = RunConfig.resolve(args.config, _overrides(rest))
    state = run_train(cfg)
    print(f"done: best epoch {state.best_epoch} "
          f"val_score {state.best_score:.4f} ({cfg.val_metric})")
    return 0


def cmd_finetune(args, rest: list[str]) -> int:
    overrides = _overrides(rest)
    overrides["phase"] = "finetune"
    if args.init is not None:
        overrides["init_checkpoint"] = args.init
    cfg = RunConfig.resolve(args.config, overrides)
    state = run_train(cfg)
    print(f"done: best epoch {state.best_epoch} "
          f"val_score {state.best_score:.4f} ({cfg.val_metric})")
    return 0


def cmd_translate(args) -> int:
    params, meta, vocab = _load_model(args.checkpoint, args.vocab)
    merges = load_merges(args.merges)
    with open(args.input, encoding="utf-8") as f:
        lines = [ln.strip().lower() for ln in f.read().splitlines()]
    ids = [encode(ln, merges, vocab) for ln in lines]
    run_cfg = meta.get("run_config", {})
    if run_cfg.get("direction_tag"):
        tag = FWD_ID if run_cfg.get("direction", "forward") == "forward" else REV_ID
        ids = [[tag] + s for s in ids]
    beam = 1 if args.greedy else args.beam
    cfg = DecodeConfig(beam_size=beam, length_penalty=args.length_penalty)
    out = [""] * len(ids)
    live = [(i, s) for i, s in enumerate(ids) if s]
    hyps = translate_ids(params, [s for _, s in live], cfg)
    for (i, _), h in zip(live, hyps):
        out[i] = decode(h, vocab)
    with open(args.output, "w", encoding="utf-8") as f:
        f.writelines(h + "\n" for h in out)
    print(f"translated {len(lines)} sentences -> {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.hyp, encoding="utf-8") as f:
        hyps = [ln.strip().lower().split() for ln in f.read().splitlines()]
    with open(args.ref, encoding="utf-8") as f:
        refs = [ln.strip().lower().split() for ln in f.read().splitlines()]
    report = corpus_bleu(hyps, refs)
    print(report)
    return 0


def cmd_perturb_eval(args) -> int:
    params, meta, vocab = _load_model(args.checkpoint, args.vocab)
    merges = load_merges(args.merges)
    pairs = encode_pairs(_read_pairs(args.src, args.ref, None), merges, vocab)
    pairs = _maybe_tag(pairs, meta)
    probs = [float(p) for p in args.probs.split(",")]
    cfg = DecodeConfig(beam_size=args.beam, length_penalty=args.length_penalty)
    table = robustness_eval(params, pairs, probs, cfg, vocab,
                            seeded_rng(args.seed, "perturb-eval"))
    header = (f"# checkpoint={args.checkpoint} beam={args.beam} "
              f"length_penalty={args.length_penalty} seed={args.seed}")
    lines = [header] + [f"{p}\t{b!r}" for p, b in table]
    body = "\n".join(lines) + "\n"
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(body)
    sys.stdout.write(body)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simcut",
                                description="desk-scale consistency-regularized "
                                            "translation lab")
    sub = p.add_subparsers(dest="command", required=True)

    def add_corpus(sp):
        sp.add_argument("--src")
        sp.add_argument("--tgt")
        sp.add_argument("--tsv")

    sp = sub.add_parser("build-vocab", help="learn BPE merges and vocabulary")
    add_corpus(sp)
    sp.add_argument("--num-merges", type=int, required=True)
    sp.add_argument("--vocab-out", required=True)
    sp.add_argument("--merges-out", required=True)

    sp = sub.add_parser("prepare-bidi", help="materialize the doubled corpus")
    add_corpus(sp)
    sp.add_argument("--out-src", required=True)
    sp.add_argument("--out-tgt", required=True)

    sp = sub.add_parser("train", help="train a model (config + overrides)")
    sp.add_argument("--config")

    sp = sub.add_parser("finetune", help="finetune from a checkpoint")
    sp.add_argument("--config")
    sp.add_argument("--init", help="checkpoint to initialize from")

    sp = sub.add_parser("translate", help="decode a file of sentences")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--merges", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--length-penalty", type=float, default=1.0)
    sp.add_argument("--greedy", action="store_true")

    sp = sub.add_parser("evaluate", help="corpus BLEU of hypotheses vs references")
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--ref", required=True)

    sp = sub.add_parser("perturb-eval", help="BLEU under source perturbation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--merges", required=True)
    sp.add_argument("--src", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out")
    sp.add_argument("--probs", default=",".join(str(p) for p in DEFAULT_PROBS))
    sp.add_argument("--beam", type=int, default=5)
    sp.add_argument("--length-penalty", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=1)

    return p


def main(argv: list[str] | None = None) -> int:
    level = {"quiet": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("SIMCUT_LOG", "info"),
                                         logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    known_rest = ("train", "finetune")
    try:
        if argv and argv[0] in known_rest:
            args, rest = parser.parse_known_args(argv)
            return {"train": cmd_train, "finetune": cmd_finetune}[args.command](args, rest)
        args = parser.parse_args(argv)
        handler = {"build-vocab": cmd_build_vocab,
                   "prepare-bidi": cmd_prepare_bidi,
                   "translate": cmd_translate,
                   "evaluate": cmd_evaluate,
                   "perturb-eval": cmd_perturb_eval}[args.command]
        return handler(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
