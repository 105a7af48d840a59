"""Encoder-decoder transformer over the autodiff tensor core.

Pre-layer-norm variant with sinusoidal positions. The embedding stage can
zero out token embeddings (cutoff / word drop) and add perturbations, and
optionally exposes the raw embedding tensors so adversarial objectives can
take gradients with respect to them.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import tensor as tc
from .data import Batch, ZeroMaskSpec, sample_zero_mask
from .tensor import Tensor

NEG_INF = -1e9  # additive attention block value; exp underflows to exactly 0


@dataclass
class TransformerConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ffn: int = 128
    dropout: float = 0.3
    share_embeddings: bool = True
    max_len: int = 256

    def __post_init__(self):
        if min(self.vocab_size, self.layers, self.heads, self.d_model,
               self.d_ffn, self.max_len) < 1:
            raise ValueError(f"TransformerConfig: non-positive dimension in {self}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"TransformerConfig: d_model {self.d_model} not divisible "
                             f"by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"TransformerConfig: dropout {self.dropout} outside [0, 1)")


class ModelParams:
    """Named map of trainable tensors plus the architecture that shaped them."""

    def __init__(self, config: TransformerConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(sorted(self.tensors.items()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        """Deep parameter snapshot (fresh leaf tensors, values copied)."""
        return ModelParams(self.config,
                           {n: Tensor(t.data.copy(), requires_grad=True)
                            for n, t in self.tensors.items()})


def _param_shapes(cfg: TransformerConfig) -> list[tuple[str, tuple, str]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes: list[tuple[str, tuple, str]] = []
    if cfg.share_embeddings:
        shapes.append(("embed", (cfg.vocab_size, d), "embed"))
    else:
        shapes.append(("src_embed", (cfg.vocab_size, d), "embed"))
        shapes.append(("tgt_embed", (cfg.vocab_size, d), "embed"))
        shapes.append(("out_proj", (cfg.vocab_size, d), "embed"))

    def block(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            shapes.append((f"{prefix}.{w}", (d, d), "linear"))
        # no key bias: softmax is invariant to a constant shift per query,
        # so a key bias could never receive gradient
        for b in ("bq", "bv", "bo"):
            shapes.append((f"{prefix}.{b}", (d,), "zero"))

    def norm(prefix):
        shapes.append((f"{prefix}.gain", (d,), "one"))
        shapes.append((f"{prefix}.bias", (d,), "zero"))

    def ffn(prefix):
        shapes.append((f"{prefix}.w1", (d, f), "linear"))
        shapes.append((f"{prefix}.b1", (f,), "zero"))
        shapes.append((f"{prefix}.w2", (f, d), "linear"))
        shapes.append((f"{prefix}.b2", (d,), "zero"))

    for i in range(cfg.layers):
        norm(f"enc{i}.ln1")
        block(f"enc{i}.attn")
        norm(f"enc{i}.ln2")
        ffn(f"enc{i}.ffn")
    norm("enc.ln")
    for i in range(cfg.layers):
        norm(f"dec{i}.ln1")
        block(f"dec{i}.self")
        norm(f"dec{i}.ln2")
        block(f"dec{i}.cross")
        norm(f"dec{i}.ln3")
        ffn(f"dec{i}.ffn")
    norm("dec.ln")
    return shapes


def init_params(cfg: TransformerConfig, rng: np.random.Generator) -> ModelParams:
    """Deterministic initialization: embeddings normal, weights Glorot-uniform."""
    tensors: dict[str, Tensor] = {}
    emb_std = cfg.d_model ** -0.5
    for name, shape, kind in _param_shapes(cfg):
        if kind == "embed":
            data = rng.normal(0.0, emb_std, size=shape)
        elif kind == "linear":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors)


def count_params(params) -> int:
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return sum(t.data.size for t in tensors.values())


@lru_cache(maxsize=8)
def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def embed(tokens: np.ndarray, table: Tensor, zero_mask: np.ndarray | None = None,
          positions: bool = True) -> Tensor:
    """Token embeddings, optionally zero-masked, scaled by sqrt(d), plus positions."""
    x, _ = _token_embed(tokens, table, zero_mask, None, positions)
    return x


def _token_embed(ids: np.ndarray, table: Tensor, zero_mask, offset,
                 positions: bool) -> tuple[Tensor, Tensor]:
    d = table.data.shape[1]
    raw = tc.embedding(table, ids)
    if zero_mask is not None:
        keep = (~np.asarray(zero_mask, dtype=bool)).astype(np.float64)
        raw = tc.mul(raw, Tensor(keep[..., None]))
    if offset is not None:
        raw = tc.add(raw, offset if isinstance(offset, Tensor) else Tensor(offset))
    x = tc.scale(raw, math.sqrt(d))
    if positions:
        pe = sinusoidal_positions(max(256, ids.shape[-1]), d)
        x = tc.add(x, Tensor(pe[: ids.shape[-1]]))
    return x, raw


class ProbSequence:
    """Per-position distributions over the vocabulary, with prob and log views."""

    def __init__(self, probs: Tensor, log_probs: Tensor, mask: np.ndarray):
        self.probs = probs
        self.log_probs = log_probs
        self.mask = np.asarray(mask, dtype=bool)

    @classmethod
    def from_logits(cls, logits: Tensor, mask: np.ndarray) -> "ProbSequence":
        return cls(tc.softmax(logits), tc.log_softmax(logits), mask)

    @classmethod
    def from_probs(cls, probs, mask: np.ndarray | None = None) -> "ProbSequence":
        t = probs if isinstance(probs, Tensor) else Tensor(probs)
        if mask is None:
            mask = np.ones(t.data.shape[:-1], dtype=bool)
        return cls(t, tc.log(t), mask)

    def detached(self) -> "ProbSequence":
        return ProbSequence(tc.stop_gradient(self.probs),
                            tc.stop_gradient(self.log_probs), self.mask)


def _mha(params: ModelParams, prefix: str, x_q: Tensor, x_kv: Tensor | None,
         block: np.ndarray) -> Tensor:
    """Multi-head attention; x_kv=None means self-attention on x_q."""
    if x_kv is None:
        x_kv = x_q
    cfg = params.config
    h, d = cfg.heads, cfg.d_model
    dh = d // h
    b, lq = x_q.data.shape[0], x_q.data.shape[1]
    lk = x_kv.data.shape[1]

    def proj(w, bias, src, length):
        y = tc.matmul(src, params[f"{prefix}.{w}"])
        if bias is not None:
            y = tc.add(y, params[f"{prefix}.{bias}"])
        return tc.transpose(tc.reshape(y, (b, length, h, dh)), (0, 2, 1, 3))

    q = proj("wq", "bq", x_q, lq)
    k = proj("wk", None, x_kv, lk)
    v = proj("wv", "bv", x_kv, lk)
    scores = tc.scale(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = tc.masked_fill(scores, block, NEG_INF)
    ctx = tc.matmul(tc.softmax(scores), v)
    ctx = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (b, lq, d))
    return tc.add(tc.matmul(ctx, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    y = tc.relu(tc.add(tc.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return tc.add(tc.matmul(y, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _ln(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return tc.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"])


def _resolve_mask(spec, ids: np.ndarray, rng) -> np.ndarray | None:
    if spec is None:
        return None
    if isinstance(spec, ZeroMaskSpec):
        if rng is None:
            raise ValueError("forward: sampling a zero mask requires an rng")
        return sample_zero_mask(ids, spec, rng)
    return np.asarray(spec, dtype=bool)


def encode_source(params: ModelParams, src: np.ndarray, src_real: np.ndarray, *,
                  drop: float = 0.0, rng=None, zero_mask=None, offset=None):
    """Encoder stack only; returns (memory, raw source embeddings)."""
    cfg = params.config
    table = params["embed" if cfg.share_embeddings else "src_embed"]
    x, src_emb = _token_embed(src, table, zero_mask, offset, True)
    train = drop > 0.0
    x = tc.dropout(x, drop, rng, train)
    pad_block = ~src_real[:, None, None, :]  # (B,1,1,Ls) True = blocked
    for i in range(cfg.layers):
        a = _mha(params, f"enc{i}.attn", _ln(params, f"enc{i}.ln1", x), None, pad_block)
        x = tc.add(x, tc.dropout(a, drop, rng, train))
        f = _ffn(params, f"enc{i}.ffn", _ln(params, f"enc{i}.ln2", x))
        x = tc.add(x, tc.dropout(f, drop, rng, train))
    return _ln(params, "enc.ln", x), src_emb


def decode_logits(params: ModelParams, memory, src_real: np.ndarray,
                  dec_in: np.ndarray, dec_real: np.ndarray, *,
                  drop: float = 0.0, rng=None, zero_mask=None, offset=None):
    """Decoder stack over a (possibly partial) target prefix; returns logits."""
    cfg = params.config
    table = params["embed" if cfg.share_embeddings else "tgt_embed"]
    out_table = params["embed" if cfg.share_embeddings else "out_proj"]
    lt = dec_in.shape[1]
    y, tgt_emb = _token_embed(dec_in, table, zero_mask, offset, True)
    train = drop > 0.0
    y = tc.dropout(y, drop, rng, train)
    causal = np.triu(np.ones((lt, lt), dtype=bool), k=1)[None, None]
    self_block = causal | ~dec_real[:, None, None, :]
    cross_block = ~src_real[:, None, None, :]
    for i in range(cfg.layers):
        a = _mha(params, f"dec{i}.self", _ln(params, f"dec{i}.ln1", y), None, self_block)
        y = tc.add(y, tc.dropout(a, drop, rng, train))
        h = _ln(params, f"dec{i}.ln2", y)
        c = _mha(params, f"dec{i}.cross", h, memory, cross_block)
        y = tc.add(y, tc.dropout(c, drop, rng, train))
        f = _ffn(params, f"dec{i}.ffn", _ln(params, f"dec{i}.ln3", y))
        y = tc.add(y, tc.dropout(f, drop, rng, train))
    hdec = _ln(params, "dec.ln", y)
    return tc.matmul(hdec, tc.transpose(out_table, (1, 0))), tgt_emb


def forward(params: ModelParams, batch: Batch, *, mode: str = "eval",
            rng: np.random.Generator | None = None,
            src_cutoff=None, tgt_cutoff=None,
            src_offset=None, tgt_offset=None,
            want_embeddings: bool = False):
    """Run the full encoder-decoder, returning per-position distributions.

    src_cutoff / tgt_cutoff accept either a ZeroMaskSpec (sampled fresh with
    rng) or a precomputed boolean mask. Offsets are added to the raw token
    embeddings (adversarial perturbations). With want_embeddings the raw
    embedding tensors are returned alongside the distributions.
    """
    cfg = params.config
    if mode not in ("train", "eval"):
        raise ValueError(f"forward: mode must be train or eval, got {mode!r}")
    train = mode == "train"
    drop = cfg.dropout if train else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("forward: train mode with dropout needs an rng")
    ls, lt = batch.src.shape[1], batch.tgt.shape[1]
    if max(ls, lt) > cfg.max_len:
        raise ValueError(f"forward: sequence length {max(ls, lt)} exceeds "
                         f"max_len {cfg.max_len}")

    src_mask = _resolve_mask(src_cutoff, batch.src, rng)
    tgt_mask = _resolve_mask(tgt_cutoff, batch.dec_in, rng)

    memory, src_emb = encode_source(params, batch.src, batch.src_mask,
                                    drop=drop, rng=rng, zero_mask=src_mask,
                                    offset=src_offset)
    logits, tgt_emb = decode_logits(params, memory, batch.src_mask,
                                    batch.dec_in, batch.tgt_mask,
                                    drop=drop, rng=rng, zero_mask=tgt_mask,
                                    offset=tgt_offset)
    probs = ProbSequence.from_logits(logits, batch.tgt_mask)
    if want_embeddings:
        return probs, (src_emb, tgt_emb)
    return probs


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"SIMCUT1"


def save_checkpoint(params: ModelParams, meta: dict, path: str) -> None:
    """Write magic, length-prefixed JSON metadata, then named float64 tensors."""
    meta = dict(meta)
    meta["config"] = asdict(params.config)
    blob = json.dumps(meta, sort_keys=True, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, t in params.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<I", len(enc)))
            f.write(enc)
            arr = np.ascontiguousarray(t.data, dtype="<f8")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple[ModelParams, dict]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"load_checkpoint: {path} is not a SIMCUT1 container")
        (meta_len,) = struct.unpack("<Q", f.read(8))
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        tensors: dict[str, Tensor] = {}
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            tensors[name] = Tensor(data.copy(), requires_grad=True)
    cfg = TransformerConfig(**meta["config"])
    return ModelParams(cfg, tensors), meta
