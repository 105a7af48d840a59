"""Beam-search decoding, corpus BLEU, and perturbed-input evaluation."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import math

import numpy as np

from . import tensor as tc
from .data import (BOS_ID, EOS_ID, N_RESERVED, SentencePair, Vocabulary,
                   _replace_tokens, decode)
from .model import ModelParams, decode_logits, encode_source
from .tensor import Tensor


@dataclass
class DecodeConfig:
    beam_size: int = 5
    length_penalty: float = 1.0
    max_len: int | None = None  # None: 2 * source length + 10

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError(f"DecodeConfig: beam_size must be >= 1, got {self.beam_size}")

    def cap(self, src_len: int) -> int:
        return self.max_len if self.max_len is not None else 2 * src_len + 10


@dataclass
class Hypothesis:
    ids: list[int]     # generated tokens, eos-terminated unless cut at max_len
    logprob: float
    score: float       # logprob / len(ids) ** length_penalty

    @staticmethod
    def make(ids: list[int], logprob: float, length_penalty: float) -> "Hypothesis":
        return Hypothesis(ids, logprob, logprob / max(1, len(ids)) ** length_penalty)


def _next_log_probs(params: ModelParams, memory_data: np.ndarray,
                    src_real: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
    """Log-probabilities of the next token for equal-length prefixes."""
    n = prefixes.shape[0]
    dec_in = np.concatenate([np.full((n, 1), BOS_ID, dtype=np.int64), prefixes], axis=1)
    dec_real = np.ones(dec_in.shape, dtype=bool)
    logits, _ = decode_logits(params, Tensor(memory_data), src_real, dec_in, dec_real)
    last = logits.data[:, -1]
    z = last - last.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_search(params: ModelParams, src_ids: Sequence[int],
                cfg: DecodeConfig) -> list[Hypothesis]:
    """Ranked hypotheses for one source sentence.

    Candidate pruning uses raw cumulative log-probability; final ranking
    divides by length ** length_penalty. Ties break on token ids so decoding
    is fully deterministic.
    """
    src_ids = list(src_ids)
    if not src_ids:
        raise ValueError("beam_search: empty source")
    with tc.no_grad():
        src = np.asarray([src_ids], dtype=np.int64)
        src_real = np.ones(src.shape, dtype=bool)
        memory, _ = encode_source(params, src, src_real)
        step = _memory_step(params, memory.data, src_real)
        return beam_search_steps(step, beam_size=cfg.beam_size,
                                 length_penalty=cfg.length_penalty,
                                 max_len=cfg.cap(len(src_ids)))


def _memory_step(params, memory_data, src_real) -> Callable:
    def step(prefixes: np.ndarray) -> np.ndarray:
        n = prefixes.shape[0]
        mem = np.repeat(memory_data, n, axis=0)
        real = np.repeat(src_real, n, axis=0)
        return _next_log_probs(params, mem, real, prefixes)
    return step


def beam_search_steps(step_fn: Callable[[np.ndarray], np.ndarray], *,
                      beam_size: int, length_penalty: float, max_len: int,
                      eos_id: int = EOS_ID) -> list[Hypothesis]:
    """Beam expansion over an arbitrary next-token log-probability function.

    step_fn receives an (n, t) array of equal-length prefixes (without bos)
    and returns (n, V) log-probabilities for the next token.
    """
    live_ids: list[list[int]] = [[]]
    live_logp = np.zeros(1)
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = step_fn(np.asarray(live_ids, dtype=np.int64).reshape(len(live_ids), -1))
        totals = live_logp[:, None] + lp  # (n, V)
        n, v = totals.shape
        flat = totals.ravel()
        hyp_idx = np.repeat(np.arange(n), v)
        tok_idx = np.tile(np.arange(v), n)
        order = np.lexsort((hyp_idx, tok_idx, -flat))[:beam_size]
        new_ids, new_logp = [], []
        for j in order:
            ids = live_ids[hyp_idx[j]] + [int(tok_idx[j])]
            score = float(flat[j])
            if tok_idx[j] == eos_id:
                finished.append(Hypothesis.make(ids, score, length_penalty))
            else:
                new_ids.append(ids)
                new_logp.append(score)
        live_ids, live_logp = new_ids, np.asarray(new_logp)
        if not live_ids or len(finished) >= beam_size:
            break
    for ids, logp in zip(live_ids, live_logp):
        finished.append(Hypothesis.make(ids, float(logp), length_penalty))
    finished.sort(key=lambda h: (-h.score, tuple(h.ids)))
    return finished[:beam_size]


def greedy_decode(params: ModelParams, sources: Sequence[Sequence[int]],
                  max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; each sentence stops at eos or 2*len+10."""
    if not sources:
        return []
    caps = [max_len if max_len is not None else 2 * len(s) + 10 for s in sources]
    n = len(sources)
    ls = max(len(s) for s in sources)
    src = np.zeros((n, ls), dtype=np.int64)
    src_real = np.zeros((n, ls), dtype=bool)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
        src_real[i, : len(s)] = True
    with tc.no_grad():
        memory, _ = encode_source(params, src, src_real)
        out = np.zeros((n, 0), dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        for t in range(max(caps)):
            lp = _next_log_probs(params, memory.data, src_real, out)
            nxt = lp.argmax(axis=-1)
            nxt[done] = EOS_ID
            out = np.concatenate([out, nxt[:, None]], axis=1)
            done |= nxt == EOS_ID
            done |= np.array([t + 1 >= c for c in caps])
            if done.all():
                break
    result = []
    for i in range(n):
        ids = out[i].tolist()[: caps[i]]
        if EOS_ID in ids:
            ids = ids[: ids.index(EOS_ID) + 1]
        result.append(ids)
    return result


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]   # modified n-gram precisions, orders 1..4
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self):
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.bleu:.2f}, {ps} "
                f"(BP={self.brevity_penalty:.3f}, hyp_len={self.hyp_len}, "
                f"ref_len={self.ref_len})")


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]
                ) -> BleuReport:
    """Corpus-level BLEU with modified 4-gram precision and brevity penalty.

    Orders with no n-grams anywhere in the corpus count as precision 1, so
    a corpus compared against itself scores 100 even when every sentence is
    shorter than four tokens.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"corpus_bleu: {len(hypotheses)} hypotheses vs "
                         f"{len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu: empty input")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            ref_counts = _ngrams(ref, n)
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in counts.items())
    if hyp_len == 0:
        return BleuReport(0.0, [0.0] * 4, 0.0, 0, ref_len)
    precisions = [m / t if t > 0 else 1.0 for m, t in zip(matched, total)]
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


# ---------------------------------------------------------------------------
# perturbed-input evaluation
# ---------------------------------------------------------------------------

def perturb_source(sentences: Sequence[Sequence[int]], prob: float,
                   vocab: Vocabulary, rng: np.random.Generator
                   ) -> list[list[int]]:
    """Independently replace non-special tokens with uniform vocabulary draws."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"perturb_source: prob {prob} outside [0, 1]")
    return [_replace_tokens(s, 1.0 - prob, rng, vocab.size) for s in sentences]


def translate_ids(params: ModelParams, sources: Sequence[Sequence[int]],
                  cfg: DecodeConfig) -> list[list[int]]:
    """Best beam hypothesis per source (greedy fast path for beam_size=1)."""
    if cfg.beam_size == 1:
        return greedy_decode(params, sources, cfg.max_len)
    return [beam_search(params, s, cfg)[0].ids for s in sources]


def robustness_eval(params: ModelParams, test_pairs: Sequence[SentencePair],
                    probs: Sequence[float], cfg: DecodeConfig,
                    vocab: Vocabulary, rng: np.random.Generator
                    ) -> list[tuple[float, float]]:
    """BLEU against original references after source perturbation at each prob."""
    refs = [decode(p.tgt_ids, vocab).split() for p in test_pairs]
    sources = [p.src_ids for p in test_pairs]
    children = rng.spawn(len(list(probs)))
    table = []
    for prob, child in zip(probs, children):
        noisy = perturb_source(sources, prob, vocab, child)
        hyp_ids = translate_ids(params, noisy, cfg)
        hyps = [decode(ids, vocab).split() for ids in hyp_ids]
        table.append((float(prob), corpus_bleu(hyps, refs).bleu))
    return table
