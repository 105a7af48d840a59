"""Corpus ingestion, BPE-lite subwords, batching, and token perturbations.

Tokens are whitespace words split into byte-pair symbols. Merge rules are
learned on bare characters; inside a sentence, non-final pieces of a word
carry an ``@@`` suffix so decoding can restore word boundaries exactly.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
FWD_ID, REV_ID = 4, 5
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>"]
TAG_TOKENS = ["<fwd>", "<rev>"]  # reserved for the optional direction-tag mode
N_RESERVED = len(SPECIAL_TOKENS) + len(TAG_TOKENS)
CONT = "@@"

# ids never zeroed by cutoff/worddrop masks (pad is always excluded on top)
MASK_PROTECTED = frozenset([BOS_ID, EOS_ID, FWD_ID, REV_ID])
# ids never replaced by token-level perturbations, and never sampled as
# replacements
REPLACE_PROTECTED = frozenset([PAD_ID, BOS_ID, EOS_ID, UNK_ID, FWD_ID, REV_ID])


class MergeTable:
    """Ordered byte-pair merge rules; rank order reproduces training segmentation."""

    def __init__(self, rules: Sequence[tuple[str, str]]):
        self.rules = [tuple(r) for r in rules]
        self._cache: dict[str, tuple[str, ...]] = {}

    def __len__(self):
        return len(self.rules)

    def segment(self, word: str) -> tuple[str, ...]:
        """Split a word into merged symbols by applying rules in rank order."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        syms = list(word)
        for pair in self.rules:
            if len(syms) < 2:
                break
            syms = _merge_once(syms, pair)
        out = tuple(syms)
        self._cache[word] = out
        return out


def _merge_once(syms: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    n = len(syms)
    while i < n:
        if i + 1 < n and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return out


def train_bpe(words: Iterable[str], num_merges: int) -> MergeTable:
    """Learn merge rules by greedy most-frequent-pair counting.

    Ties are broken lexicographically on the pair so builds are
    deterministic across platforms.
    """
    counts = Counter(w for w in words if w)
    if not counts:
        raise ValueError("train_bpe: empty corpus")
    if num_merges < 0:
        raise ValueError(f"train_bpe: num_merges must be >= 0, got {num_merges}")
    pieces = {w: list(w) for w in counts}
    rules: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pair_counts: Counter = Counter()
        for w, syms in pieces.items():
            c = counts[w]
            for p in zip(syms, syms[1:]):
                pair_counts[p] += c
        if not pair_counts:
            break
        top = max(pair_counts.values())
        best = min(p for p, c in pair_counts.items() if c == top)
        rules.append(best)
        pieces = {w: _merge_once(syms, best) for w, syms in pieces.items()}
    return MergeTable(rules)


class Vocabulary:
    """Token/id maps with pad, bos, eos, unk first, then reserved tags."""

    def __init__(self, tokens: Sequence[str]):
        expected = SPECIAL_TOKENS + TAG_TOKENS
        if list(tokens[:N_RESERVED]) != expected:
            raise ValueError(f"vocabulary must start with {expected}")
        self.token_of = list(tokens)
        self.id_of = {t: i for i, t in enumerate(self.token_of)}
        if len(self.id_of) != len(self.token_of):
            raise ValueError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.token_of)

    def __len__(self):
        return len(self.token_of)

    pad_id, bos_id, eos_id, unk_id = PAD_ID, BOS_ID, EOS_ID, UNK_ID


def word_tokens(word: str, merges: MergeTable) -> list[str]:
    """Decorated subword tokens for one word (``@@`` on non-final pieces)."""
    syms = merges.segment(word)
    return [s + CONT for s in syms[:-1]] + [syms[-1]]


def build_vocab(words: Iterable[str], merges: MergeTable) -> Vocabulary:
    """Collect decorated subword types from a corpus, most frequent first."""
    counts: Counter = Counter()
    for w in words:
        if w:
            counts.update(word_tokens(w, merges))
    if not counts:
        raise ValueError("build_vocab: empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(SPECIAL_TOKENS + TAG_TOKENS + [t for t, _ in ordered])


def encode(text: str, merges: MergeTable, vocab: Vocabulary) -> list[int]:
    """Deterministic text -> ids; unknown residual symbols map to unk."""
    ids = []
    unk = vocab.unk_id
    for word in text.split():
        for tok in word_tokens(word, merges):
            ids.append(vocab.id_of.get(tok, unk))
    return ids


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    """ids -> text; drops pad/bos/eos and tag tokens, keeps unk literally."""
    words: list[str] = []
    cur = ""
    for i in ids:
        if i in (PAD_ID, BOS_ID, EOS_ID, FWD_ID, REV_ID):
            continue
        tok = vocab.token_of[i]
        if tok.endswith(CONT):
            cur += tok[: -len(CONT)]
        else:
            words.append(cur + tok)
            cur = ""
    if cur:
        words.append(cur)
    return " ".join(words)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def read_parallel(src_path: str, tgt_path: str) -> list[tuple[str, str]]:
    """Aligned line pairs from two files; lowercased, blank pairs dropped."""
    with open(src_path, encoding="utf-8") as f:
        src_lines = f.read().splitlines()
    with open(tgt_path, encoding="utf-8") as f:
        tgt_lines = f.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(f"read_parallel: {src_path} has {len(src_lines)} lines "
                         f"but {tgt_path} has {len(tgt_lines)}")
    return _clean_pairs(zip(src_lines, tgt_lines))


def read_tsv(path: str) -> list[tuple[str, str]]:
    """Tab-separated source/target pairs from one file."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f.read().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"read_tsv: line {lineno} of {path} has "
                                 f"{len(parts)} fields, expected 2")
            out.append(parts)
    return _clean_pairs(out)


def _clean_pairs(raw) -> list[tuple[str, str]]:
    out = []
    for s, t in raw:
        s, t = s.strip().lower(), t.strip().lower()
        if s and t:
            out.append((s, t))
    return out


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.token_of:
            f.write(tok + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        return Vocabulary(f.read().splitlines())


def save_merges(merges: MergeTable, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for a, b in merges.rules:
            f.write(f"{a} {b}\n")


def load_merges(path: str) -> MergeTable:
    rules = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f.read().splitlines(), start=1):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"load_merges: bad rule on line {lineno} of {path}")
            rules.append((parts[0], parts[1]))
    return MergeTable(rules)


# ---------------------------------------------------------------------------
# sentence pairs and batches
# ---------------------------------------------------------------------------

@dataclass
class SentencePair:
    """Token-id pair; target always ends with eos, source carries no eos."""

    src_ids: list[int]
    tgt_ids: list[int]
    direction: str = "forward"  # provenance only

    def __post_init__(self):
        if not self.src_ids:
            raise ValueError("SentencePair: empty source")
        if not self.tgt_ids or self.tgt_ids[-1] != EOS_ID:
            raise ValueError("SentencePair: target must end with eos")
        if PAD_ID in self.src_ids or PAD_ID in self.tgt_ids:
            raise ValueError("SentencePair: pad id inside a sequence")

    @property
    def length(self) -> int:
        return len(self.src_ids) + len(self.tgt_ids)


def encode_pairs(text_pairs: Sequence[tuple[str, str]], merges: MergeTable,
                 vocab: Vocabulary) -> list[SentencePair]:
    return [SentencePair(encode(s, merges, vocab),
                         encode(t, merges, vocab) + [EOS_ID])
            for s, t in text_pairs]


def make_bidirectional(pairs: Sequence[SentencePair],
                       add_tags: bool = False) -> list[SentencePair]:
    """Forward pairs plus content-swapped pairs; output is exactly doubled.

    Swapping strips the eos from the old target to form the new source and
    appends eos to the old source to form the new target. With add_tags,
    sources get the reserved <fwd>/<rev> token prepended.
    """
    out = []
    for p in pairs:
        src = list(p.src_ids)
        tgt_core = list(p.tgt_ids[:-1])
        fwd_src = [FWD_ID] + src if add_tags else src
        out.append(SentencePair(fwd_src, tgt_core + [EOS_ID], "forward"))
    for p in pairs:
        src = list(p.src_ids)
        tgt_core = list(p.tgt_ids[:-1])
        rev_src = [REV_ID] + tgt_core if add_tags else tgt_core
        out.append(SentencePair(rev_src, src + [EOS_ID], "reversed"))
    return out


def swap_direction(pairs: Sequence[SentencePair]) -> list[SentencePair]:
    """Content-swapped copies only (the reversed half of make_bidirectional)."""
    return [SentencePair(list(p.tgt_ids[:-1]), list(p.src_ids) + [EOS_ID], "reversed")
            for p in pairs]


def tag_sources(pairs: Sequence[SentencePair], tag_id: int) -> list[SentencePair]:
    return [SentencePair([tag_id] + list(p.src_ids), list(p.tgt_ids), p.direction)
            for p in pairs]


@dataclass
class Batch:
    """Padded id matrices with masks; masks are True on real tokens."""

    src: np.ndarray        # (B, Ls) int64
    src_mask: np.ndarray   # (B, Ls) bool
    dec_in: np.ndarray     # (B, Lt) int64, bos-shifted targets
    tgt: np.ndarray        # (B, Lt) int64
    tgt_mask: np.ndarray   # (B, Lt) bool
    token_count: int       # real target tokens
    pairs: list[SentencePair] = field(repr=False, default_factory=list)

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(pairs: Sequence[SentencePair]) -> Batch:
    if not pairs:
        raise ValueError("make_batch: empty pair list")
    b = len(pairs)
    ls = max(len(p.src_ids) for p in pairs)
    lt = max(len(p.tgt_ids) for p in pairs)
    src = np.full((b, ls), PAD_ID, dtype=np.int64)
    dec_in = np.full((b, lt), PAD_ID, dtype=np.int64)
    tgt = np.full((b, lt), PAD_ID, dtype=np.int64)
    src_mask = np.zeros((b, ls), dtype=bool)
    tgt_mask = np.zeros((b, lt), dtype=bool)
    for i, p in enumerate(pairs):
        si, ti = len(p.src_ids), len(p.tgt_ids)
        src[i, :si] = p.src_ids
        src_mask[i, :si] = True
        dec_in[i, 0] = BOS_ID
        dec_in[i, 1:ti] = p.tgt_ids[:-1]
        tgt[i, :ti] = p.tgt_ids
        tgt_mask[i, :ti] = True
    return Batch(src, src_mask, dec_in, tgt, tgt_mask,
                 int(tgt_mask.sum()), list(pairs))


def batch_by_tokens(pairs: Sequence[SentencePair], max_tokens: int,
                    rng: np.random.Generator) -> Iterator[Batch]:
    """Length-bucketed batches whose padded token count stays <= max_tokens.

    Pairs are sorted by length, chunked greedily, and the chunk order is
    shuffled with the given generator; every pair appears exactly once.
    """
    order = sorted(range(len(pairs)),
                   key=lambda i: (pairs[i].length, len(pairs[i].src_ids), i))
    chunks: list[list[SentencePair]] = []
    cur: list[SentencePair] = []
    max_s = max_t = 0
    for i in order:
        p = pairs[i]
        if p.length > max_tokens:
            raise ValueError(f"batch_by_tokens: pair #{i} has {p.length} tokens, "
                             f"over the {max_tokens} budget")
        ns = max(max_s, len(p.src_ids))
        nt = max(max_t, len(p.tgt_ids))
        if cur and (len(cur) + 1) * (ns + nt) > max_tokens:
            chunks.append(cur)
            cur, ns, nt = [], len(p.src_ids), len(p.tgt_ids)
        cur.append(p)
        max_s, max_t = ns, nt
    if cur:
        chunks.append(cur)
    for j in rng.permutation(len(chunks)):
        yield make_batch(chunks[j])


# ---------------------------------------------------------------------------
# perturbation sampling
# ---------------------------------------------------------------------------

@dataclass
class ZeroMaskSpec:
    """Embedding zero-out spec; worddrop stores 1 - keep probability."""

    kind: str  # "cutoff" | "worddrop"
    zero_probability: float
    exclude_special: bool = True

    def __post_init__(self):
        if self.kind not in ("cutoff", "worddrop"):
            raise ValueError(f"ZeroMaskSpec: unknown kind {self.kind!r}")
        if not 0.0 <= self.zero_probability <= 1.0:
            raise ValueError(f"ZeroMaskSpec: zero_probability {self.zero_probability} "
                             "outside [0, 1]")


def sample_zero_mask(ids: np.ndarray, spec: ZeroMaskSpec,
                     rng: np.random.Generator) -> np.ndarray:
    """Boolean mask (True = zero the embedding); pads are never marked."""
    ids = np.asarray(ids)
    eligible = ids != PAD_ID
    if spec.exclude_special:
        for sid in MASK_PROTECTED:
            eligible &= ids != sid
    if spec.zero_probability == 0.0:
        return np.zeros(ids.shape, dtype=bool)
    draw = rng.random(ids.shape) < spec.zero_probability
    return draw & eligible


@dataclass
class UniRepSchedule:
    """Inverse-sigmoid keep-probability decay: floor q, time scale k."""

    q: float = 0.9
    k: float = 25.0

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"UniRepSchedule: q {self.q} outside (0, 1]")
        if self.k <= 0:
            raise ValueError(f"UniRepSchedule: k must be positive, got {self.k}")


def unirep_probability(t: int, sched: UniRepSchedule) -> float:
    """Keep probability at epoch t: max(q, k / (k + exp(t / k)))."""
    if t < 0:
        raise ValueError(f"unirep_probability: t must be >= 0, got {t}")
    x = t / sched.k
    decayed = 0.0 if x > 500 else sched.k / (sched.k + math.exp(x))
    return max(sched.q, decayed)


def _replace_tokens(ids: Sequence[int], p_keep: float, rng: np.random.Generator,
                    vocab_size: int) -> list[int]:
    lo = N_RESERVED
    if vocab_size <= lo:
        return list(ids)
    out = []
    for i in ids:
        if i in REPLACE_PROTECTED or rng.random() < p_keep:
            out.append(i)
        else:
            out.append(int(rng.integers(lo, vocab_size)))
    return out


def apply_unirep(pair: SentencePair, p_keep: float, rng: np.random.Generator,
                 vocab: Vocabulary) -> SentencePair:
    """Independently resample each non-special token with probability 1 - p_keep."""
    if not 0.0 <= p_keep <= 1.0:
        raise ValueError(f"apply_unirep: p_keep {p_keep} outside [0, 1]")
    return SentencePair(_replace_tokens(pair.src_ids, p_keep, rng, vocab.size),
                        _replace_tokens(pair.tgt_ids, p_keep, rng, vocab.size),
                        pair.direction)
