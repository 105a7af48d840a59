"""scikit-learn style estimator: fit on parallel sentences, predict translations.

Wraps vocabulary building, optional bidirectional pretraining, cutoff-
regularized training, and beam-search decoding behind the familiar
fit / predict / score surface so the model composes with sklearn tooling
(get_params, set_params, clone, grid search).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig, seeded_rng
from .data import build_vocab, decode, encode, encode_pairs, train_bpe
from .decoding import DecodeConfig, corpus_bleu, translate_ids
from .trainer import run_training


def _check_corpus(X, y) -> list[tuple[str, str]]:
    """Validate aligned string corpora, returning cleaned text pairs."""
    if y is None:
        raise ValueError("fit requires target sentences (y)")
    X, y = list(X), list(y)
    if len(X) != len(y):
        raise ValueError(f"X and y must be aligned, got {len(X)} vs {len(y)} sentences")
    if not X:
        raise ValueError("empty training corpus")
    for side, name in ((X, "X"), (y, "y")):
        bad = next((s for s in side if not isinstance(s, str)), None)
        if bad is not None:
            raise ValueError(f"{name} must contain strings, found {type(bad).__name__}")
    pairs = [(s.strip().lower(), t.strip().lower()) for s, t in zip(X, y)]
    pairs = [(s, t) for s, t in pairs if s and t]
    if not pairs:
        raise ValueError("no non-blank sentence pairs in the corpus")
    return pairs


def _check_sentences(X) -> list[str]:
    X = list(X)
    bad = next((s for s in X if not isinstance(s, str)), None)
    if bad is not None:
        raise ValueError(f"expected strings, found {type(bad).__name__}")
    return [s.strip().lower() for s in X]


class SimCutTranslator(BaseEstimator):
    """Tiny transformer translator trained with consistency regularization.

    objective selects the training loss: "ce", "simcut", "token_cutoff",
    "rdrop", "vat", "unirep", or "worddrop". With pretrain_epochs > 0 the
    model is first pretrained on the doubled bidirectional corpus and then
    finetuned on the forward direction.
    """

    def __init__(self, objective="simcut", alpha=3.0, beta=1.0, p_cut=0.05,
                 n_cutoff=1, label_smoothing=0.1, vat_epsilon=1.0,
                 vat_bidirectional=False, unirep_q=0.9, unirep_k=25.0,
                 worddrop_keep=0.9, layers=2, heads=2, d_model=64, d_ffn=128,
                 dropout=0.3, share_embeddings=True, max_len=256,
                 num_merges=200, base_lr=5e-4, warmup=4000, epochs=20,
                 pretrain_epochs=0, max_tokens=4096, beam_size=5,
                 length_penalty=1.0, validation_fraction=0.1,
                 val_metric="bleu", seed=1):
        self.objective = objective
        self.alpha = alpha
        self.beta = beta
        self.p_cut = p_cut
        self.n_cutoff = n_cutoff
        self.label_smoothing = label_smoothing
        self.vat_epsilon = vat_epsilon
        self.vat_bidirectional = vat_bidirectional
        self.unirep_q = unirep_q
        self.unirep_k = unirep_k
        self.worddrop_keep = worddrop_keep
        self.layers = layers
        self.heads = heads
        self.d_model = d_model
        self.d_ffn = d_ffn
        self.dropout = dropout
        self.share_embeddings = share_embeddings
        self.max_len = max_len
        self.num_merges = num_merges
        self.base_lr = base_lr
        self.warmup = warmup
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.max_tokens = max_tokens
        self.beam_size = beam_size
        self.length_penalty = length_penalty
        self.validation_fraction = validation_fraction
        self.val_metric = val_metric
        self.seed = seed

    # -- sklearn surface ----------------------------------------------------

    def fit(self, X, y, validation_data=None):
        """Build subwords from the training corpus and train the model.

        validation_data optionally supplies (X_val, y_val); otherwise
        validation_fraction of the corpus is held out for checkpoint
        selection.
        """
        pairs = _check_corpus(X, y)
        cfg = self._run_config()
        words = [w for s, t in pairs for w in (s + " " + t).split()]
        self.merges_ = train_bpe(words, self.num_merges)
        self.vocab_ = build_vocab(words, self.merges_)

        if validation_data is not None:
            train_text = pairs
            val_text = _check_corpus(*validation_data)
        else:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must be in (0, 1) when "
                                 "validation_data is not given")
            n_val = max(1, int(round(len(pairs) * self.validation_fraction)))
            if n_val >= len(pairs):
                raise ValueError("validation split would consume the whole corpus")
            order = seeded_rng(self.seed, "holdout").permutation(len(pairs))
            val_idx = set(int(i) for i in order[:n_val])
            train_text = [p for i, p in enumerate(pairs) if i not in val_idx]
            val_text = [pairs[i] for i in sorted(val_idx)]

        train_pairs = encode_pairs(train_text, self.merges_, self.vocab_)
        val_pairs = encode_pairs(val_text, self.merges_, self.vocab_)

        if self.pretrain_epochs > 0:
            pre_cfg = RunConfig(**{**cfg.as_dict(), "phase": "pretrain",
                                   "epochs": self.pretrain_epochs})
            pre = run_training(pre_cfg, train_pairs, val_pairs, self.vocab_)
            state = run_training(cfg, train_pairs, val_pairs, self.vocab_,
                                 initial=pre.best_params.copy(),
                                 phase="finetune")
        else:
            state = run_training(cfg, train_pairs, val_pairs, self.vocab_)
        self.params_ = state.best_params
        self.history_ = state.history
        self.best_score_ = state.best_score
        return self

    def predict(self, X) -> list[str]:
        """Translate sentences with beam search (best hypothesis per input)."""
        self._require_fitted()
        sentences = _check_sentences(X)
        ids = [encode(s, self.merges_, self.vocab_) for s in sentences]
        cfg = DecodeConfig(beam_size=self.beam_size,
                           length_penalty=self.length_penalty)
        out = [""] * len(ids)
        live = [(i, s) for i, s in enumerate(ids) if s]
        hyp = translate_ids(self.params_, [s for _, s in live], cfg)
        for (i, _), h in zip(live, hyp):
            out[i] = decode(h, self.vocab_)
        return out

    def score(self, X, y) -> float:
        """Corpus BLEU (0..100) of beam decodes against reference sentences."""
        self._require_fitted()
        refs = [s.strip().lower().split() for s in _check_sentences(y)]
        hyps = [h.split() for h in self.predict(X)]
        return corpus_bleu(hyps, refs).bleu

    # -- helpers --------------------------------------------------------------

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this SimCutTranslator is not fitted; call fit first")

    def _run_config(self) -> RunConfig:
        return RunConfig(objective=self.objective, alpha=self.alpha,
                         beta=self.beta, p_cut=self.p_cut,
                         n_cutoff=self.n_cutoff,
                         label_smoothing=self.label_smoothing,
                         vat_epsilon=self.vat_epsilon,
                         vat_bidirectional=self.vat_bidirectional,
                         unirep_q=self.unirep_q, unirep_k=self.unirep_k,
                         worddrop_keep=self.worddrop_keep, layers=self.layers,
                         heads=self.heads, d_model=self.d_model,
                         d_ffn=self.d_ffn, dropout=self.dropout,
                         share_embeddings=self.share_embeddings,
                         max_len=self.max_len, base_lr=self.base_lr,
                         warmup=self.warmup, epochs=self.epochs,
                         max_tokens=self.max_tokens, seed=self.seed,
                         val_metric=self.val_metric, beam=self.beam_size,
                         length_penalty=self.length_penalty)
