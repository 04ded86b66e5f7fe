from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    """Architecture, loss and optimisation hyperparameters.

    Defaults describe the full-size model; ``conv_channels``, ``cnn_out`` and
    the training-loop knobs below ``seed`` are this package's own choices.
    """

    d: int = 768
    k1: int = 100
    k2: int = 2
    k3: int = 32
    conv_channels: int = 100
    kernel_heights: tuple[int, ...] = (2, 3, 4)
    cnn_out: int | None = None

    lam: float = 0.2
    tau: float = 0.1
    c1: float = 0.1
    c2: float = 0.9
    gamma: float = 0.8

    lr: float = 5e-5
    seed: int = 42
    use_scl: bool = True
    use_ssl: bool = True

    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 5
    max_seq_len: int = 512

    # Transformer branch. ``bert_path`` loads pretrained weights and tokenizer;
    # otherwise a randomly initialised encoder of the given shape is built.
    bert_path: str | None = None
    bert_layers: int = 12
    bert_heads: int = 12
    bert_intermediate: int = 3072
    vocab_size: int = 30522
    dropout: float = 0.1

    # Frozen embedder for the convolutional branch: "hash" or a pretrained path.
    embedder: str = "hash"

    def __post_init__(self):
        self.kernel_heights = tuple(int(h) for h in self.kernel_heights)
        self.validate()

    @property
    def cnn_dim(self) -> int:
        return self.cnn_out or self.d

    def validate(self):
        for name in ("d", "k1", "k2", "k3", "conv_channels", "batch_size", "max_epochs", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.kernel_heights or min(self.kernel_heights) <= 0:
            raise ValueError("kernel_heights must be positive")
        if max(self.kernel_heights) > self.k1:
            raise ValueError("kernel height exceeds k1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.c1 < self.c2 <= 1.0:
            raise ValueError("need 0 <= c1 < c2 <= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.bert_path is None and self.d % self.bert_heads:
            raise ValueError("d must be divisible by bert_heads")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["kernel_heights"] = list(self.kernel_heights)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "ModelConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        data = data or {}
        return cls.from_dict(data.get("model", data))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)
