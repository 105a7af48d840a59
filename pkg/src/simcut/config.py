"""Flat run configuration: schema, key=value files, overrides, derived seeds.

Config files are line-oriented UTF-8 ``key = value`` with ``#`` comments.
Every key is validated against the schema below; unknown keys are rejected.
One master seed lives in the config and all consumers derive their own
generator by hashing (master, purpose label), so adding a consumer never
shifts the streams of existing ones.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from .model import TransformerConfig

_PATH_KEYS = ("train_src", "train_tgt", "train_tsv", "valid_src", "valid_tgt",
              "valid_tsv", "vocab", "merges", "out_dir", "init_checkpoint")

CHOICES = {
    "objective": ("ce", "simcut", "token_cutoff", "rdrop", "vat", "unirep",
                  "worddrop"),
    "phase": ("train", "pretrain", "finetune"),
    "direction": ("forward", "reversed"),
    "val_metric": ("bleu", "loss"),
    "perturb_unit": ("subword",),
}


@dataclass
class RunConfig:
    # data and artifacts
    train_src: str | None = None
    train_tgt: str | None = None
    train_tsv: str | None = None
    valid_src: str | None = None
    valid_tgt: str | None = None
    valid_tsv: str | None = None
    vocab: str | None = None
    merges: str | None = None
    out_dir: str | None = None
    init_checkpoint: str | None = None
    # model
    layers: int = 2
    heads: int = 2
    d_model: int = 64
    d_ffn: int = 128
    dropout: float = 0.3
    share_embeddings: bool = True
    max_len: int = 256
    # objective
    objective: str = "simcut"
    alpha: float = 3.0
    beta: float = 1.0
    p_cut: float = 0.05
    n_cutoff: int = 1
    label_smoothing: float = 0.1
    vat_epsilon: float = 1.0
    vat_bidirectional: bool = False
    unirep_q: float = 0.9
    unirep_k: float = 25.0
    worddrop_keep: float = 0.9
    # optimization
    base_lr: float = 5e-4
    warmup: int = 4000
    epochs: int = 20
    max_tokens: int = 4096
    seed: int = 1
    phase: str = "train"
    direction: str = "forward"
    direction_tag: bool = False
    val_metric: str = "bleu"
    perturb_unit: str = "subword"
    # decoding
    beam: int = 5
    length_penalty: float = 1.0

    def __post_init__(self):
        for key, allowed in CHOICES.items():
            val = getattr(self, key)
            if val not in allowed:
                raise ValueError(f"config: {key} must be one of {allowed}, got {val!r}")

    # -- construction ------------------------------------------------------

    @classmethod
    def resolve(cls, config_path: str | None = None,
                overrides: dict[str, str] | None = None) -> "RunConfig":
        """Defaults, then config file, then command-line overrides."""
        raw: dict[str, str] = {}
        if config_path is not None:
            raw.update(parse_kv_file(config_path))
        raw.update(overrides or {})
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ValueError(f"config: unknown keys: {', '.join(unknown)}")
        kwargs = {k: _parse_value(known[k], v) for k, v in raw.items()}
        return cls(**kwargs)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            raise ValueError(f"config: missing required keys: {', '.join(missing)}")

    # -- views -------------------------------------------------------------

    def model_config(self, vocab_size: int) -> TransformerConfig:
        return TransformerConfig(vocab_size=vocab_size, layers=self.layers,
                                 heads=self.heads, d_model=self.d_model,
                                 d_ffn=self.d_ffn, dropout=self.dropout,
                                 share_embeddings=self.share_embeddings,
                                 max_len=self.max_len)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def echo(self) -> str:
        """Round-trippable key = value text; None-valued keys are omitted."""
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            if isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, float):
                text = repr(val)
            else:
                text = str(val)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.echo())


def _parse_value(fld, text: str):
    text = text.strip()
    if fld.name in _PATH_KEYS:
        return text or None
    kind = fld.type if isinstance(fld.type, type) else None
    default = fld.default
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config: {fld.name} expects true/false, got {text!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"config: {fld.name} expects an integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"config: {fld.name} expects a number, got {text!r}") from None
    return text


def parse_kv_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"config: malformed line {lineno} in {path}: {line.rstrip()!r}")
            key, val = body.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit sub-seed for (master seed, purpose label)."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def seeded_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
