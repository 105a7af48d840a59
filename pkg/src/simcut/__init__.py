"""Desk-scale seq2seq training lab with cutoff consistency regularization."""

from .config import RunConfig, derive_seed, seeded_rng
from .data import (MergeTable, SentencePair, UniRepSchedule, Vocabulary,
                   ZeroMaskSpec, apply_unirep, batch_by_tokens, build_vocab,
                   decode, encode, encode_pairs, make_batch,
                   make_bidirectional, sample_zero_mask, train_bpe,
                   unirep_probability)
from .decoding import (BleuReport, DecodeConfig, Hypothesis, beam_search,
                       corpus_bleu, greedy_decode, perturb_source,
                       robustness_eval, translate_ids)
from .estimator import SimCutTranslator
from .losses import (BaselinePerturbation, LossBreakdown, LossWeights, VatSpec,
                     ce_label_smoothed, kl_seq, loss_baseline_perturbed,
                     loss_ce, loss_rdrop, loss_simcut, loss_token_cutoff,
                     loss_vat)
from .model import (ModelParams, ProbSequence, TransformerConfig, count_params,
                    embed, forward, init_params, load_checkpoint,
                    save_checkpoint)
from .tensor import Tensor, backward, finite_difference_check, grad, new_tape, \
    no_grad, stop_gradient
from .trainer import (OptimizerState, TrainState, adam_step, finetune,
                      lr_inverse_sqrt, make_objective, run_training, train,
                      validate)

__version__ = "0.1.0"
