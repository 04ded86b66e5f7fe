"""Frozen word-embedding extractors and token-id encoders.

Both come in two flavours: a dependency-free hashed variant that works
offline, and a wrapper around a pretrained Hugging Face checkpoint.
"""
from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np
import torch

PAD_ID, UNK_ID, CLS_ID, SEP_ID = 0, 1, 2, 3
N_SPECIAL = 4


def _stable_hash(token: str) -> int:
    return zlib.crc32(token.encode("utf-8"))


class HashingEmbedder:
    """Deterministic pseudo-random vector per lowercased token."""

    def __init__(self, d: int, seed: int = 0):
        self.d = d
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, token: str) -> np.ndarray:
        key = token.lower()
        vec = self._cache.get(key)
        if vec is None:
            rng = np.random.default_rng([_stable_hash(key), self.seed])
            vec = (rng.standard_normal(self.d) / np.sqrt(self.d)).astype(np.float32)
            self._cache[key] = vec
        return vec

    def embed(self, tokens: Sequence[str]) -> torch.Tensor:
        if not tokens:
            raise ValueError("cannot embed an empty token sequence")
        return torch.from_numpy(np.stack([self._vector(t) for t in tokens]))


class PretrainedEmbedder:
    """Contextual word vectors from a frozen pretrained encoder.

    Each word's vector is the mean of its sub-word states from the last layer.
    Long inputs are embedded in independent windows of ``window`` words.
    """

    def __init__(self, path: str, window: int = 128):
        from transformers import AutoModel, AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(path)
        self.model = AutoModel.from_pretrained(path).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.d = self.model.config.hidden_size
        self.window = window

    @torch.no_grad()
    def embed(self, tokens: Sequence[str]) -> torch.Tensor:
        if not tokens:
            raise ValueError("cannot embed an empty token sequence")
        rows = []
        for start in range(0, len(tokens), self.window):
            words = list(tokens[start:start + self.window])
            enc = self.tokenizer(words, is_split_into_words=True, return_tensors="pt", truncation=True)
            states = self.model(**enc).last_hidden_state[0]
            word_ids = enc.word_ids(0)
            for w in range(len(words)):
                idx = [i for i, wid in enumerate(word_ids) if wid == w]
                rows.append(states[idx].mean(0) if idx else torch.zeros(self.d))
        return torch.stack(rows)


class HashTokenizer:
    """Word-level ids by hashing into a fixed vocabulary."""

    def __init__(self, vocab_size: int):
        if vocab_size <= N_SPECIAL:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size

    def token_id(self, word: str) -> int:
        if word == "[SEP]":
            return SEP_ID
        return N_SPECIAL + _stable_hash(word.lower()) % (self.vocab_size - N_SPECIAL)

    def encode(self, words: Sequence[str], max_len: int) -> list[int]:
        body = [self.token_id(w) for w in words][: max_len - 2]
        return [CLS_ID, *body, SEP_ID]

    pad_id = PAD_ID


class PretrainedTokenizer:
    def __init__(self, path: str):
        from transformers import AutoTokenizer

        self.tokenizer = AutoTokenizer.from_pretrained(path)
        self.pad_id = self.tokenizer.pad_token_id or 0

    def encode(self, words: Sequence[str], max_len: int) -> list[int]:
        sep = self.tokenizer.sep_token or "[SEP]"
        words = [sep if w == "[SEP]" else w for w in words]
        enc = self.tokenizer(words, is_split_into_words=True, truncation=True, max_length=max_len)
        return list(enc["input_ids"])


def make_embedder(config):
    if config.embedder == "hash":
        return HashingEmbedder(config.d, seed=config.seed)
    emb = PretrainedEmbedder(config.embedder)
    if emb.d != config.d:
        raise ValueError(f"embedder width {emb.d} != d={config.d}")
    return emb


def make_tokenizer(config):
    if config.bert_path:
        return PretrainedTokenizer(config.bert_path)
    return HashTokenizer(config.vocab_size)
