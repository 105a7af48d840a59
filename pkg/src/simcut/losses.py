"""Training objectives: label-smoothed CE plus the consistency regularizers.

Every objective returns a LossBreakdown whose total is a graph tensor and
whose components are plain floats satisfying
total == sum(weight * component) exactly up to float addition.

Stochastic objectives split their generator with rng.spawn() in a fixed,
documented order so tests can replay individual passes:
  simcut        [clean pass, src mask, tgt mask, cutoff pass]
  token_cutoff  [clean pass] + N * [src mask, tgt mask, cutoff pass]
  rdrop         [pass 1, pass 2]
  vat           [clean pass, perturbed pass]
  unirep        [replacement draws, pass]
  worddrop      [src mask, tgt mask, pass]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .data import (Batch, SentencePair, Vocabulary, ZeroMaskSpec, apply_unirep,
                   make_batch, sample_zero_mask)
from .model import ModelParams, ProbSequence, forward
from .tensor import Tensor


@dataclass
class LossWeights:
    alpha: float = 3.0
    beta: float = 1.0
    p_cut: float = 0.05
    n_cutoff: int = 1
    label_smoothing: float = 0.1

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("LossWeights: alpha and beta must be >= 0")
        if not 0.0 <= self.p_cut <= 1.0:
            raise ValueError(f"LossWeights: p_cut {self.p_cut} outside [0, 1]")
        if self.n_cutoff < 1:
            raise ValueError(f"LossWeights: n_cutoff must be >= 1, got {self.n_cutoff}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"LossWeights: label_smoothing {self.label_smoothing} "
                             "outside [0, 1)")


@dataclass
class VatSpec:
    epsilon: float = 1.0   # L2 radius, per sentence
    bidirectional: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"VatSpec: epsilon must be > 0, got {self.epsilon}")


@dataclass
class BaselinePerturbation:
    kind: str               # "unirep" | "worddrop"
    keep_probability: float

    def __post_init__(self):
        if self.kind not in ("unirep", "worddrop"):
            raise ValueError(f"BaselinePerturbation: unknown kind {self.kind!r}")
        if not 0.0 <= self.keep_probability <= 1.0:
            raise ValueError("BaselinePerturbation: keep_probability outside [0, 1]")


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float]
    weights: dict[str, float]
    token_count: int
    tensors: dict[str, Tensor] = field(default_factory=dict, repr=False)
    extras: dict = field(default_factory=dict, repr=False)


def ce_label_smoothed(probs: ProbSequence, batch: Batch, eps: float) -> Tensor:
    """Mean label-smoothed cross-entropy over non-pad target positions."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"ce_label_smoothed: eps {eps} outside [0, 1)")
    v = probs.log_probs.data.shape[-1]
    if v < 2:
        raise ValueError("ce_label_smoothed: vocabulary must have at least 2 types")
    off = eps / (v - 1)
    lp_tgt = tc.gather_last(probs.log_probs, batch.tgt)
    lp_sum = tc.reduce_sum(probs.log_probs, axis=-1)
    per_tok = tc.add(tc.scale(lp_tgt, 1.0 - eps - off), tc.scale(lp_sum, off))
    masked = tc.mul(per_tok, Tensor(batch.tgt_mask.astype(np.float64)))
    return tc.scale(tc.reduce_sum(masked), -1.0 / max(1, batch.token_count))


def kl_seq(p: ProbSequence, q: ProbSequence,
           mask: np.ndarray | None = None) -> Tensor:
    """Token-level KL(p || q) averaged over non-pad positions.

    Gradients flow into both arguments; callers wanting one-sided
    backpropagation pass a detached() ProbSequence.
    """
    if p.probs.data.shape != q.probs.data.shape:
        raise ValueError(f"kl_seq: shape mismatch {p.probs.data.shape} vs "
                         f"{q.probs.data.shape}")
    if mask is None:
        mask = p.mask
    per_pos = tc.reduce_sum(tc.mul(p.probs, tc.sub(p.log_probs, q.log_probs)), axis=-1)
    masked = tc.mul(per_pos, Tensor(mask.astype(np.float64)))
    return tc.scale(tc.reduce_sum(masked), 1.0 / max(1, int(mask.sum())))


def _breakdown(parts: list[tuple[str, Tensor, float]], token_count: int,
               extras: dict | None = None) -> LossBreakdown:
    total = None
    for _, t, w in parts:
        term = t if w == 1.0 else tc.scale(t, w)
        total = term if total is None else tc.add(total, term)
    return LossBreakdown(
        total=total,
        components={n: t.item() for n, t, _ in parts},
        weights={n: w for n, _, w in parts},
        token_count=token_count,
        tensors={n: t for n, t, _ in parts},
        extras=extras or {},
    )


def loss_ce(params: ModelParams, batch: Batch, weights: LossWeights,
            rng: np.random.Generator) -> LossBreakdown:
    """Plain label-smoothed cross-entropy on the clean batch."""
    ps = forward(params, batch, mode="train", rng=rng)
    ce = ce_label_smoothed(ps, batch, weights.label_smoothing)
    return _breakdown([("ce", ce, 1.0)], batch.token_count)


def loss_simcut(params: ModelParams, batch: Batch, weights: LossWeights,
                rng: np.random.Generator, *,
                src_mask: np.ndarray | None = None,
                tgt_mask: np.ndarray | None = None) -> LossBreakdown:
    """CE on the clean pass plus alpha * KL(clean || cutoff).

    One cutoff sample per step; fresh zero masks and independent dropout
    per pass; gradients flow through both KL branches.
    """
    r_clean, r_ms, r_mt, r_cut = rng.spawn(4)
    spec = ZeroMaskSpec("cutoff", weights.p_cut)
    if src_mask is None:
        src_mask = sample_zero_mask(batch.src, spec, r_ms)
    if tgt_mask is None:
        tgt_mask = sample_zero_mask(batch.dec_in, spec, r_mt)
    clean = forward(params, batch, mode="train", rng=r_clean)
    cut = forward(params, batch, mode="train", rng=r_cut,
                  src_cutoff=src_mask, tgt_cutoff=tgt_mask)
    ce = ce_label_smoothed(clean, batch, weights.label_smoothing)
    simkl = kl_seq(clean, cut)
    bd = _breakdown([("ce", ce, 1.0), ("simkl", simkl, weights.alpha)],
                    batch.token_count)
    bd.extras["prob_sequences"] = (clean, cut)
    return bd


def loss_token_cutoff(params: ModelParams, batch: Batch, weights: LossWeights,
                      rng: np.random.Generator, *,
                      masks: list[tuple[np.ndarray, np.ndarray]] | None = None
                      ) -> LossBreakdown:
    """CE + alpha * mean cutoff CE + beta * mean-anchored KL over N samples."""
    n = weights.n_cutoff
    children = rng.spawn(1 + 3 * n)
    spec = ZeroMaskSpec("cutoff", weights.p_cut)
    clean = forward(params, batch, mode="train", rng=children[0])
    cuts: list[ProbSequence] = []
    cut_ces: list[Tensor] = []
    for i in range(n):
        r_ms, r_mt, r_pass = children[1 + 3 * i: 4 + 3 * i]
        if masks is not None:
            ms, mt = masks[i]
        else:
            ms = sample_zero_mask(batch.src, spec, r_ms)
            mt = sample_zero_mask(batch.dec_in, spec, r_mt)
        ps = forward(params, batch, mode="train", rng=r_pass,
                     src_cutoff=ms, tgt_cutoff=mt)
        cuts.append(ps)
        cut_ces.append(ce_label_smoothed(ps, batch, weights.label_smoothing))

    ce = ce_label_smoothed(clean, batch, weights.label_smoothing)
    cut_term = tc.scale(_sum(cut_ces), 1.0 / n)

    avg_probs = tc.scale(_sum([clean.probs] + [c.probs for c in cuts]), 1.0 / (n + 1))
    p_avg = ProbSequence.from_probs(avg_probs, clean.mask)
    kls = [kl_seq(c, p_avg) for c in cuts] + [kl_seq(clean, p_avg)]
    kl_term = tc.scale(_sum(kls), 1.0 / (n + 1))

    return _breakdown([("ce", ce, 1.0), ("cut", cut_term, weights.alpha),
                       ("kl", kl_term, weights.beta)], batch.token_count)


def _sum(tensors: list[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = tc.add(total, t)
    return total


def loss_rdrop(params: ModelParams, batch: Batch, alpha: float,
               rng: np.random.Generator,
               label_smoothing: float = 0.1) -> LossBreakdown:
    """Two independent-dropout passes; symmetric KL keeps them consistent."""
    r1, r2 = rng.spawn(2)
    p1 = forward(params, batch, mode="train", rng=r1)
    p2 = forward(params, batch, mode="train", rng=r2)
    ce = tc.scale(tc.add(ce_label_smoothed(p1, batch, label_smoothing),
                         ce_label_smoothed(p2, batch, label_smoothing)), 0.5)
    sym = tc.scale(tc.add(kl_seq(p1, p2), kl_seq(p2, p1)), 0.5)
    bd = _breakdown([("ce", ce, 1.0), ("rdrop_kl", sym, alpha)], batch.token_count)
    bd.extras["prob_sequences"] = (p1, p2)
    return bd


def loss_vat(params: ModelParams, batch: Batch, alpha: float, spec: VatSpec,
             rng: np.random.Generator, *,
             label_smoothing: float = 0.1,
             delta: tuple[np.ndarray, np.ndarray] | None = None) -> LossBreakdown:
    """CE plus alpha * KL(clean || adversarially perturbed).

    The perturbation is one normalized gradient step of the clean CE with
    respect to the token embeddings (treated as a constant thereafter).
    Unless spec.bidirectional, the clean branch of the KL is wrapped in
    stop_gradient, mirroring classic VAT.
    """
    r_clean, r_pert = rng.spawn(2)
    clean, (src_emb, tgt_emb) = forward(params, batch, mode="train", rng=r_clean,
                                        want_embeddings=True)
    ce = ce_label_smoothed(clean, batch, label_smoothing)
    if delta is None:
        g_src, g_tgt = tc.grad(ce, [src_emb, tgt_emb])
        delta = (_scaled_noise(g_src, batch.src_mask, spec.epsilon),
                 _scaled_noise(g_tgt, batch.tgt_mask, spec.epsilon))
    pert = forward(params, batch, mode="train", rng=r_pert,
                   src_offset=delta[0], tgt_offset=delta[1])
    left = clean if spec.bidirectional else clean.detached()
    vat_kl = kl_seq(left, pert, mask=batch.tgt_mask)
    bd = _breakdown([("ce", ce, 1.0), ("vat_kl", vat_kl, alpha)], batch.token_count)
    bd.extras["delta"] = delta
    bd.extras["clean_embeddings"] = (src_emb, tgt_emb)
    bd.extras["prob_sequences"] = (clean, pert)
    return bd


def _scaled_noise(g: np.ndarray, real: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-sentence L2 normalization of an embedding gradient; zero norm -> zero."""
    g = g * real[..., None]
    norms = np.sqrt((g ** 2).sum(axis=(1, 2), keepdims=True))
    return np.where(norms > 0, epsilon * g / np.where(norms > 0, norms, 1.0), 0.0)


def loss_baseline_perturbed(params: ModelParams, batch: Batch,
                            perturbation: BaselinePerturbation,
                            rng: np.random.Generator,
                            vocab: Vocabulary | None = None,
                            label_smoothing: float = 0.1) -> LossBreakdown:
    """Plain CE over a perturbed input batch (UniRep replacement or WordDrop).

    Inputs are perturbed (source and decoder input); the CE target stays
    the original target sequence.
    """
    if perturbation.kind == "unirep":
        if vocab is None:
            raise ValueError("loss_baseline_perturbed: unirep needs the vocabulary")
        r_rep, r_pass = rng.spawn(2)
        perturbed_pairs = [apply_unirep(p, perturbation.keep_probability, r_rep, vocab)
                           for p in batch.pairs]
        pbatch = make_batch(perturbed_pairs)
        pbatch.tgt = batch.tgt  # labels stay clean; only inputs are replaced
        ps = forward(params, pbatch, mode="train", rng=r_pass)
        ce = ce_label_smoothed(ps, pbatch, label_smoothing)
        return _breakdown([("ce", ce, 1.0)], batch.token_count)

    r_ms, r_mt, r_pass = rng.spawn(3)
    spec = ZeroMaskSpec("worddrop", 1.0 - perturbation.keep_probability)
    ms = sample_zero_mask(batch.src, spec, r_ms)
    mt = sample_zero_mask(batch.dec_in, spec, r_mt)
    ps = forward(params, batch, mode="train", rng=r_pass,
                 src_cutoff=ms, tgt_cutoff=mt)
    ce = ce_label_smoothed(ps, batch, label_smoothing)
    return _breakdown([("ce", ce, 1.0)], batch.token_count)
