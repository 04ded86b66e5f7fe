"""Dual-branch triplet classifier.

A convolutional branch reads frozen word embeddings of the context (plus the
three triplet element rows); a transformer branch reads the triplet-prefixed
token sequence. Their outputs feed a classification head and, separately, an
attention projection used by the contrastive loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..context import Example, build_input_sequence
from .config import ModelConfig


@dataclass
class Representations:
    h_cnn: torch.Tensor
    h_bert: torch.Tensor
    h_ce: torch.Tensor
    logits: torch.Tensor
    y_pred: torch.Tensor
    h_scl: torch.Tensor


def pad_rows(x: torch.Tensor, rows: int) -> torch.Tensor:
    """Truncate or zero-pad a (n, d) matrix to exactly ``rows`` rows."""
    if x.shape[0] >= rows:
        return x[:rows]
    pad = x.new_zeros(rows - x.shape[0], x.shape[1])
    return torch.cat([x, pad], dim=0)


def embed_context(embedder, context: Sequence[str], k1: int) -> tuple[torch.Tensor, torch.Tensor]:
    x_c = embedder.embed(list(context))
    return x_c, pad_rows(x_c, k1)


def build_triplet_rows(x_c: torch.Tensor, positions: Sequence[tuple[int, int]]) -> torch.Tensor:
    """Rows for person, time and location: mean of each element's token rows."""
    rows = []
    for start, end in positions:
        if not 0 <= start < end <= x_c.shape[0]:
            raise ValueError(f"element span [{start}, {end}) outside context of {x_c.shape[0]} tokens")
        rows.append(x_c[start:end].mean(0))
    return torch.stack(rows)


class CNNBranch(nn.Module):
    def __init__(self, d: int, channels: int, kernel_heights: Sequence[int], out_dim: int):
        super().__init__()
        self.context_convs = nn.ModuleList(nn.Conv2d(1, channels, (h, d)) for h in kernel_heights)
        self.triplet_conv = nn.Conv2d(1, channels, (3, d))
        self.linear = nn.Linear(channels * (len(kernel_heights) + 1), out_dim)

    @staticmethod
    def _conv_pool(conv: nn.Conv2d, x: torch.Tensor) -> torch.Tensor:
        # x: (B, rows, d) -> (B, channels). A full-width kernel is a linear map
        # over windows of consecutive rows; computing it that way sidesteps
        # sporadic NaN weight gradients seen from the CPU conv backward.
        h = conv.kernel_size[0]
        windows = x.unfold(1, h, 1).transpose(2, 3).reshape(x.shape[0], -1, h * x.shape[2])
        z = F.relu(F.linear(windows, conv.weight.reshape(conv.out_channels, -1), conv.bias))
        return z.max(dim=1).values

    def features(self, h_c: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
        parts = [self._conv_pool(conv, h_c) for conv in self.context_convs]
        parts.append(self._conv_pool(self.triplet_conv, h_t))
        return torch.cat(parts, dim=1)

    def forward(self, h_c: torch.Tensor, h_t: torch.Tensor) -> torch.Tensor:
        return self.linear(self.features(h_c, h_t))


class TransformerBranch(nn.Module):
    """Pooled [CLS] representation of a BERT-style encoder, fine-tuned end to end."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        from transformers import BertConfig, BertModel

        if config.bert_path:
            self.bert = BertModel.from_pretrained(config.bert_path)
        else:
            self.bert = BertModel(BertConfig(
                vocab_size=config.vocab_size,
                hidden_size=config.d,
                num_hidden_layers=config.bert_layers,
                num_attention_heads=config.bert_heads,
                intermediate_size=config.bert_intermediate,
                hidden_dropout_prob=config.dropout,
                attention_probs_dropout_prob=config.dropout,
                max_position_embeddings=max(config.max_seq_len, 8),
            ))
        self.hidden_size = self.bert.config.hidden_size

    def forward(self, input_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.bert(input_ids=input_ids, attention_mask=attention_mask).pooler_output


class FusionHead(nn.Module):
    """Project both branches to k2 dims, concatenate, then a 2k2 -> 2 softmax layer."""

    def __init__(self, cnn_dim: int, bert_dim: int, k2: int):
        super().__init__()
        self.cnn_proj = nn.Linear(cnn_dim, k2)
        self.bert_proj = nn.Linear(bert_dim, k2)
        self.classifier = nn.Linear(2 * k2, 2)

    def forward(self, h_cnn, h_bert):
        h_ce = torch.cat([self.cnn_proj(h_cnn), self.bert_proj(h_bert)], dim=-1)
        logits = self.classifier(h_ce)
        return h_ce, logits, logits.softmax(dim=-1)


class AttentionProjection(nn.Module):
    """Single-head self-attention over the two projected branch vectors.

    Values are the projected vectors themselves, so two identical inputs pass
    through unchanged. The two attended outputs are mean-pooled and
    L2-normalised.
    """

    def __init__(self, cnn_dim: int, bert_dim: int, k3: int):
        super().__init__()
        self.cnn_proj = nn.Linear(cnn_dim, k3)
        self.bert_proj = nn.Linear(bert_dim, k3)
        self.query = nn.Linear(k3, k3, bias=False)
        self.key = nn.Linear(k3, k3, bias=False)
        self.scale = 1.0 / math.sqrt(k3)

    def attend(self, h_cnn, h_bert) -> torch.Tensor:
        x = torch.stack([self.cnn_proj(h_cnn), self.bert_proj(h_bert)], dim=1)
        scores = self.query(x) @ self.key(x).transpose(1, 2) * self.scale
        return (scores.softmax(dim=-1) @ x).mean(dim=1)

    def forward(self, h_cnn, h_bert) -> torch.Tensor:
        return F.normalize(self.attend(h_cnn, h_bert), dim=-1)


class TripletClassifier(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.cnn = CNNBranch(config.d, config.conv_channels, config.kernel_heights, config.cnn_dim)
        self.bert = TransformerBranch(config)
        self.head = FusionHead(config.cnn_dim, self.bert.hidden_size, config.k2)
        self.projection = AttentionProjection(config.cnn_dim, self.bert.hidden_size, config.k3)

    def forward(self, batch: dict) -> Representations:
        cfg = self.config
        h_c, h_t = batch["H_c"], batch["H_t"]
        assert h_c.shape[1:] == (cfg.k1, cfg.d), h_c.shape
        assert h_t.shape[1:] == (3, cfg.d), h_t.shape
        h_cnn = self.cnn(h_c, h_t)
        h_bert = self.bert(batch["input_ids"], batch["attention_mask"])
        h_ce, logits, y_pred = self.head(h_cnn, h_bert)
        h_scl = self.projection(h_cnn, h_bert)
        assert h_ce.shape[-1] == 2 * cfg.k2 and h_scl.shape[-1] == cfg.k3
        return Representations(h_cnn, h_bert, h_ce, logits, y_pred, h_scl)


class Featurizer:
    """Turns examples into model inputs; features are cached per example."""

    def __init__(self, config: ModelConfig, embedder, tokenizer):
        self.config = config
        self.embedder = embedder
        self.tokenizer = tokenizer
        self._cache: dict[Example, dict] = {}

    def features(self, example: Example) -> dict:
        feat = self._cache.get(example)
        if feat is None:
            feat = self._compute(example)
            self._cache[example] = feat
        return feat

    def _compute(self, example: Example) -> dict:
        cfg = self.config
        x_c, h_c = embed_context(self.embedder, example.context, cfg.k1)
        h_t = build_triplet_rows(x_c, example.element_positions)
        seq = build_input_sequence(example.triplet, example.context, cfg.max_seq_len)
        ids = self.tokenizer.encode(seq, cfg.max_seq_len)
        return {"H_c": h_c.float(), "H_t": h_t.float(), "input_ids": ids}

    def collate(self, examples: Sequence[Example]) -> dict:
        feats = [self.features(e) for e in examples]
        width = max(len(f["input_ids"]) for f in feats)
        ids = torch.full((len(feats), width), self.tokenizer.pad_id, dtype=torch.long)
        mask = torch.zeros((len(feats), width), dtype=torch.long)
        for i, f in enumerate(feats):
            ids[i, : len(f["input_ids"])] = torch.tensor(f["input_ids"])
            mask[i, : len(f["input_ids"])] = 1
        batch = {
            "H_c": torch.stack([f["H_c"] for f in feats]),
            "H_t": torch.stack([f["H_t"] for f in feats]),
            "input_ids": ids,
            "attention_mask": mask,
        }
        labels = [e.label for e in examples]
        if all(lbl is not None for lbl in labels):
            batch["labels"] = torch.tensor(labels, dtype=torch.long)
        return batch
