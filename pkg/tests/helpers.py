"""Shared test oracles: sampled finite differences and a dense-q CE."""

import numpy as np

from simcut import tensor as tc
from simcut.model import ProbSequence
from simcut.tensor import Tensor


def label_smoothed_ce_dense(ps: ProbSequence, batch, eps: float) -> Tensor:
    """Independent cross-entropy oracle built from a dense smoothed target."""
    v = ps.log_probs.data.shape[-1]
    q = np.full(batch.tgt.shape + (v,), eps / (v - 1))
    np.put_along_axis(q, batch.tgt[..., None], 1.0 - eps, axis=-1)
    q *= batch.tgt_mask[..., None]
    return tc.scale(tc.reduce_sum(tc.mul(Tensor(q), ps.log_probs)),
                    -1.0 / batch.token_count)


def sampled_grad_check(loss_fn, params, n_coords=50, step=1e-5, seed=13):
    """Max relative error of backward() against central differences.

    loss_fn must be deterministic in the parameters (reseed any generators
    inside it). Coordinates are sampled uniformly across parameter tensors.
    """
    tc.new_tape()
    params.zero_grad()
    tc.backward(loss_fn())
    rng = np.random.default_rng(seed)
    names = sorted(dict(params.items()))
    worst = 0.0
    with tc.no_grad():
        for _ in range(n_coords):
            t = params[names[int(rng.integers(len(names)))]]
            idx = tuple(int(rng.integers(s)) for s in t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + step
            fp = loss_fn().item()
            t.data[idx] = orig - step
            fm = loss_fn().item()
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * step)
            analytic = t.grad[idx]
            if abs(analytic - numeric) < 1e-8:
                continue  # absolute agreement; relative error is meaningless at 0
            err = abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    tc.new_tape()
    return worst
