"""Optimization loop: Adam with inverse-sqrt warmup, validation-based
checkpoint selection, and bidirectional-pretrain / unidirectional-finetune
orchestration."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .config import RunConfig, seeded_rng
from .data import (FWD_ID, REV_ID, SentencePair, UniRepSchedule, Vocabulary,
                   batch_by_tokens, decode, encode_pairs, load_merges,
                   load_vocab, make_batch, make_bidirectional, read_parallel,
                   read_tsv, swap_direction, tag_sources, unirep_probability)
from .decoding import corpus_bleu, greedy_decode
from .losses import (BaselinePerturbation, LossBreakdown, LossWeights, VatSpec,
                     ce_label_smoothed, loss_baseline_perturbed, loss_ce,
                     loss_rdrop, loss_simcut, loss_token_cutoff, loss_vat)
from .model import (ModelParams, forward, init_params, load_checkpoint,
                    save_checkpoint)

log = logging.getLogger("simcut")


def lr_inverse_sqrt(step: int, warmup: int, base: float) -> float:
    """Linear warmup to `base`, then decay with the inverse square root."""
    if step < 1 or warmup < 1:
        raise ValueError(f"lr_inverse_sqrt: step and warmup must be >= 1, "
                         f"got {step}, {warmup}")
    return base * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class OptimizerState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    base_lr: float
    warmup: int
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, base_lr: float, warmup: int
              ) -> "OptimizerState":
        return cls(step=0,
                   m={n: np.zeros_like(t.data) for n, t in params.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.items()},
                   base_lr=base_lr, warmup=warmup)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              opt: OptimizerState) -> float:
    """Bias-corrected Adam update in place; returns the learning rate used."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"adam_step: non-finite gradient in {name!r}")
    opt.step += 1
    lr = lr_inverse_sqrt(opt.step, opt.warmup, opt.base_lr)
    c1 = 1.0 - opt.beta1 ** opt.step
    c2 = 1.0 - opt.beta2 ** opt.step
    for name, t in params.items():
        g = grads[name]
        m = opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        v = opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        t.data -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps_adam)
    return lr


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    components: dict[str, float]
    lr: float
    val_score: float
    wall_seconds: float


@dataclass
class TrainState:
    params: ModelParams
    opt: OptimizerState
    phase: str
    seed: int
    epoch: int = 0
    best_score: float = -math.inf
    best_epoch: int = -1
    best_params: ModelParams | None = None
    best_path: str | None = None
    history: list[EpochRecord] = field(default_factory=list)


def validate(params: ModelParams, val_pairs: list[SentencePair], mode: str,
             vocab: Vocabulary, label_smoothing: float = 0.1,
             max_tokens: int = 4096) -> float:
    """Higher-is-better validation score: corpus BLEU of greedy decodes, or
    negated mean label-smoothed CE in loss mode."""
    if not val_pairs:
        raise ValueError("validate: empty validation set")
    if mode == "bleu":
        with tc.no_grad():
            hyp_ids = greedy_decode(params, [p.src_ids for p in val_pairs])
        hyps = [decode(ids, vocab).split() for ids in hyp_ids]
        refs = [decode(p.tgt_ids, vocab).split() for p in val_pairs]
        return corpus_bleu(hyps, refs).bleu
    if mode == "loss":
        total = tokens = 0.0
        with tc.no_grad():
            for batch in batch_by_tokens(val_pairs, max_tokens,
                                         np.random.default_rng(0)):
                ce = ce_label_smoothed(forward(params, batch), batch,
                                       label_smoothing)
                total += ce.item() * batch.token_count
                tokens += batch.token_count
        return -total / tokens
    raise ValueError(f"validate: unknown mode {mode!r}")


def make_objective(cfg: RunConfig, vocab: Vocabulary):
    """Bind the configured training objective to a (params, batch, rng, epoch)
    callable returning a LossBreakdown."""
    w = LossWeights(alpha=cfg.alpha, beta=cfg.beta, p_cut=cfg.p_cut,
                    n_cutoff=cfg.n_cutoff, label_smoothing=cfg.label_smoothing)
    name = cfg.objective
    if name == "ce":
        return lambda params, batch, rng, epoch: loss_ce(params, batch, w, rng)
    if name == "simcut":
        return lambda params, batch, rng, epoch: loss_simcut(params, batch, w, rng)
    if name == "token_cutoff":
        return lambda params, batch, rng, epoch: loss_token_cutoff(params, batch, w, rng)
    if name == "rdrop":
        return lambda params, batch, rng, epoch: loss_rdrop(
            params, batch, cfg.alpha, rng, label_smoothing=cfg.label_smoothing)
    if name == "vat":
        spec = VatSpec(epsilon=cfg.vat_epsilon, bidirectional=cfg.vat_bidirectional)
        return lambda params, batch, rng, epoch: loss_vat(
            params, batch, cfg.alpha, spec, rng, label_smoothing=cfg.label_smoothing)
    if name == "unirep":
        sched = UniRepSchedule(q=cfg.unirep_q, k=cfg.unirep_k)
        def unirep(params, batch, rng, epoch):
            keep = unirep_probability(epoch, sched)
            pert = BaselinePerturbation("unirep", keep)
            return loss_baseline_perturbed(params, batch, pert, rng, vocab=vocab,
                                           label_smoothing=cfg.label_smoothing)
        return unirep
    if name == "worddrop":
        pert = BaselinePerturbation("worddrop", cfg.worddrop_keep)
        return lambda params, batch, rng, epoch: loss_baseline_perturbed(
            params, batch, pert, rng, label_smoothing=cfg.label_smoothing)
    raise ValueError(f"make_objective: unknown objective {name!r}")


def _prepare_pairs(cfg: RunConfig, pairs: list[SentencePair], phase: str
                   ) -> list[SentencePair]:
    if phase == "pretrain":
        return make_bidirectional(pairs, add_tags=cfg.direction_tag)
    if cfg.direction == "reversed":
        pairs = swap_direction(pairs)
    if cfg.direction_tag:
        tag = FWD_ID if cfg.direction == "forward" else REV_ID
        pairs = tag_sources(pairs, tag)
    return pairs


def _metrics_header(component_names: list[str]) -> str:
    cols = ["epoch", "phase", "train_loss", *component_names, "lr",
            "val_score", "wall_seconds"]
    return "# " + "\t".join(cols)


def _metrics_row(rec: EpochRecord, component_names: list[str]) -> str:
    cols = [str(rec.epoch), rec.phase, repr(rec.train_loss),
            *[repr(rec.components[n]) for n in component_names],
            repr(rec.lr), repr(rec.val_score), f"{rec.wall_seconds:.3f}"]
    return "\t".join(cols)


def run_training(cfg: RunConfig, train_pairs: list[SentencePair],
                 val_pairs: list[SentencePair], vocab: Vocabulary,
                 out_dir: str | None = None,
                 initial: ModelParams | None = None,
                 phase: str | None = None) -> TrainState:
    """Epoch loop over the selected objective with best-checkpoint tracking.

    In the pretrain phase both the training and validation pairs are doubled
    with their swapped counterparts. File outputs (checkpoints, metrics log)
    are written only when out_dir is given.
    """
    phase = phase or cfg.phase
    master = cfg.seed
    pairs = _prepare_pairs(cfg, train_pairs, phase)
    vpairs = _prepare_pairs(cfg, val_pairs, phase)
    if not pairs or not vpairs:
        raise ValueError("run_training: empty training or validation set")

    if initial is None:
        params = init_params(cfg.model_config(vocab.size), seeded_rng(master, "init"))
    else:
        params = initial
        if params.config.vocab_size != vocab.size:
            raise ValueError(f"run_training: checkpoint vocabulary size "
                             f"{params.config.vocab_size} != {vocab.size}")
    opt = OptimizerState.fresh(params, cfg.base_lr, cfg.warmup)
    objective = make_objective(cfg, vocab)
    state = TrainState(params=params, opt=opt, phase=phase, seed=master)

    metrics_path = best_path = last_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.tsv")
        best_path = os.path.join(out_dir, "best.ckpt")
        last_path = os.path.join(out_dir, "last.ckpt")
        with open(metrics_path, "w", encoding="utf-8") as fh:
            pass  # truncate; header written once component names are known

    component_names: list[str] | None = None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order_rng = seeded_rng(master, f"order:{phase}:{epoch}")
        loss_sum = 0.0
        comp_sum: dict[str, float] = {}
        token_sum = 0
        lr = float("nan")
        for si, batch in enumerate(batch_by_tokens(pairs, cfg.max_tokens, order_rng)):
            tc.new_tape()
            step_rng = seeded_rng(master, f"step:{phase}:{epoch}:{si}")
            bd = objective(params, batch, step_rng, epoch)
            params.zero_grad()
            tc.backward(bd.total)
            lr = adam_step(params, {n: t.grad for n, t in params.items()}, opt)
            loss_sum += bd.total.item() * batch.token_count
            token_sum += batch.token_count
            for name, val in bd.components.items():
                comp_sum[name] = comp_sum.get(name, 0.0) + val * batch.token_count
        tc.new_tape()  # release the last step's graph before decoding

        if component_names is None:
            component_names = sorted(comp_sum)
        val_score = validate(params, vpairs, cfg.val_metric, vocab,
                             cfg.label_smoothing, cfg.max_tokens)
        rec = EpochRecord(epoch=epoch, phase=phase,
                          train_loss=loss_sum / token_sum,
                          components={n: comp_sum[n] / token_sum
                                      for n in component_names},
                          lr=lr, val_score=val_score,
                          wall_seconds=time.perf_counter() - t0)
        state.history.append(rec)
        state.epoch = epoch + 1
        log.info("epoch %d [%s] loss %.4f val %.4f", epoch, phase,
                 rec.train_loss, val_score)

        improved = val_score > state.best_score
        if improved:
            state.best_score = val_score
            state.best_epoch = epoch
            state.best_params = params.copy()
        if out_dir is not None:
            meta = {"epoch": epoch, "val_score": val_score, "phase": phase,
                    "objective": cfg.objective, "run_config": cfg.as_dict()}
            save_checkpoint(params, meta, last_path)
            if improved:
                save_checkpoint(params, meta, best_path)
                state.best_path = best_path
                with open(os.path.join(out_dir, "best.txt"), "w",
                          encoding="utf-8") as fh:
                    fh.write(f"{best_path}\t{epoch}\t{val_score!r}\n")
            with open(metrics_path, "a", encoding="utf-8") as fh:
                if epoch == 0:
                    fh.write(_metrics_header(component_names) + "\n")
                fh.write(_metrics_row(rec, component_names) + "\n")
    return state


# ---------------------------------------------------------------------------
# file-driven entry points
# ---------------------------------------------------------------------------

def _load_split(cfg: RunConfig, split: str) -> list[tuple[str, str]]:
    tsv = getattr(cfg, f"{split}_tsv")
    if tsv is not None:
        return read_tsv(tsv)
    cfg.require(f"{split}_src", f"{split}_tgt")
    return read_parallel(getattr(cfg, f"{split}_src"), getattr(cfg, f"{split}_tgt"))


def load_dataset(cfg: RunConfig):
    """Vocabulary, merges, and encoded train/valid pairs from config paths."""
    cfg.require("vocab", "merges")
    vocab = load_vocab(cfg.vocab)
    merges = load_merges(cfg.merges)
    train_pairs = encode_pairs(_load_split(cfg, "train"), merges, vocab)
    val_pairs = encode_pairs(_load_split(cfg, "valid"), merges, vocab)
    return vocab, merges, train_pairs, val_pairs


def train(cfg: RunConfig) -> TrainState:
    """Config-driven training; writes checkpoints, metrics, and config echo."""
    cfg.require("out_dir")
    vocab, _, train_pairs, val_pairs = load_dataset(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.save(os.path.join(cfg.out_dir, "config.txt"))
    if cfg.phase == "finetune":
        cfg.require("init_checkpoint")
        return finetune(cfg.init_checkpoint, cfg, train_pairs, val_pairs, vocab,
                        out_dir=cfg.out_dir)
    return run_training(cfg, train_pairs, val_pairs, vocab, out_dir=cfg.out_dir)


def finetune(checkpoint: str, cfg: RunConfig,
             train_pairs: list[SentencePair], val_pairs: list[SentencePair],
             vocab: Vocabulary, out_dir: str | None = None) -> TrainState:
    """Load a checkpoint, reset the optimizer, train one direction only."""
    params, meta = load_checkpoint(checkpoint)
    if params.config.vocab_size != vocab.size:
        raise ValueError(f"finetune: checkpoint vocabulary size "
                         f"{params.config.vocab_size} does not match "
                         f"{vocab.size}")
    log.info("finetune from %s (epoch %s, val %s)", checkpoint,
             meta.get("epoch"), meta.get("val_score"))
    return run_training(cfg, train_pairs, val_pairs, vocab, out_dir=out_dir,
                        initial=params, phase="finetune")
