"""Dataset splitting, stratified batching, the semi-supervised training loop and grid search."""
from __future__ import annotations

import copy
import io
import itertools
import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch

from .context import Example
from .evaluation import compute_metrics, to_predictions
from .losses import alpha_schedule, objective
from .model import TripletClassifier, Featurizer, ModelConfig
from .model.embedding import make_embedder, make_tokenizer

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.3
VAL_FRACTION = 0.2


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Splits:
    train: list[Example]
    val: list[Example]
    test: list[Example]


def split_dataset(pool: Sequence[Example], seed: int = 42) -> Splits:
    """Shuffle, hold out 30% as test, then carve 20% of the rest off as validation."""
    if not pool:
        raise ValueError("empty labeled pool")
    if any(ex.label is None for ex in pool):
        raise ValueError("split_dataset needs labeled examples")
    order = list(pool)
    random.Random(seed).shuffle(order)
    n_test = round(len(order) * TEST_FRACTION)
    test, rest = order[:n_test], order[n_test:]
    n_val = round(len(rest) * VAL_FRACTION)
    val, train = rest[:n_val], rest[n_val:]
    if len({ex.label for ex in train}) < 2:
        raise ValueError("training split does not contain both classes")
    return Splits(train, val, test)


def stratified_batches(examples: Sequence[Example], batch_size: int, rng: random.Random) -> list[list[Example]]:
    """One epoch of labeled batches, each holding at least one example of each class.

    Both classes are dealt round-robin across the batches so their ratio is
    roughly constant; a class too small to reach every batch is resampled.
    """
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2 to hold both classes")
    pos = [ex for ex in examples if ex.label == 1]
    neg = [ex for ex in examples if ex.label == 0]
    if not pos or not neg:
        raise ValueError("stratified batching needs both classes")
    n_batches = math.ceil(len(examples) / batch_size)
    rng.shuffle(pos)
    rng.shuffle(neg)
    for group in (pos, neg):
        group.extend([rng.choice(group) for _ in range(n_batches - len(group))])
    batches: list[list[Example]] = [[] for _ in range(n_batches)]
    for i, ex in enumerate(pos + neg):
        batches[i % n_batches].append(ex)
    for batch in batches:
        rng.shuffle(batch)
    return batches


class UnlabeledCycler:
    """Uniform draws from the unlabeled pool without replacement, reshuffling on wrap."""

    def __init__(self, pool: Sequence[Example], rng: random.Random):
        if not pool:
            raise ValueError("unlabeled pool is empty")
        self.pool = list(pool)
        self.rng = rng
        self._order: list[Example] = []

    def take(self, k: int) -> list[Example]:
        out = []
        while len(out) < k:
            if not self._order:
                self._order = self.pool[:]
                self.rng.shuffle(self._order)
            out.append(self._order.pop())
        return out


def make_batches(
    train: Sequence[Example],
    unlabeled: Sequence[Example] | UnlabeledCycler | None,
    batch_size: int,
    rng: random.Random,
) -> Iterator[tuple[list[Example], list[Example] | None]]:
    """Pairs each stratified labeled batch with an equally sized unlabeled batch."""
    if isinstance(unlabeled, UnlabeledCycler) or unlabeled is None:
        cycler = unlabeled
    else:
        cycler = UnlabeledCycler(unlabeled, rng)
    for batch in stratified_batches(train, batch_size, rng):
        yield batch, (cycler.take(len(batch)) if cycler is not None else None)


@dataclass
class TrainResult:
    model: TripletClassifier
    config: ModelConfig
    best_f1: float
    best_epoch: int
    log: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)


def predict_proba(model: TripletClassifier, featurizer: Featurizer, examples: Sequence[Example], batch_size: int = 32) -> list[float]:
    """Positive-class probability for each example."""
    was_training = model.training
    model.eval()
    out: list[float] = []
    with torch.no_grad():
        for i in range(0, len(examples), batch_size):
            batch = featurizer.collate(examples[i:i + batch_size])
            out.extend(model(batch).y_pred[:, 1].tolist())
    model.train(was_training)
    return out


def monitor_f1(model, featurizer, examples: Sequence[Example], batch_size: int) -> float:
    preds = to_predictions(predict_proba(model, featurizer, examples, batch_size))
    f1 = compute_metrics(preds, [ex.label for ex in examples]).f1
    return 0.0 if f1 is None else f1


def _finite(row: dict) -> bool:
    return all(math.isfinite(v) for v in row.values())


def _num(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


def _log_row(epoch: int, batch: int, terms: dict) -> dict:
    row = {"epoch": epoch, "batch": batch}
    row.update({k: _num(terms[k]) for k in ("L_CE", "L_SCL", "L_U", "alpha", "L")})
    return row


def train(
    config: ModelConfig,
    splits: Splits,
    unlabeled: Sequence[Example] = (),
    *,
    featurizer: Featurizer | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train with early stopping on validation F1 and return the best-F1 weights.

    When the validation split is empty the training split is monitored instead.
    """
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)
    if featurizer is None:
        featurizer = Featurizer(config, make_embedder(config), make_tokenizer(config))
    model = TripletClassifier(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    cycler = None
    if config.use_ssl:
        if not unlabeled:
            raise ValueError("use_ssl is on but the unlabeled pool is empty")
        cycler = UnlabeledCycler(unlabeled, rng)
    monitor = splits.val or splits.train

    log: list[dict] = []
    history: list[dict] = []
    best_f1, best_epoch, best_state, stale = -1.0, -1, None, 0
    log_fh = Path(log_path).open("w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.max_epochs):
            model.train()
            batches = list(make_batches(splits.train, cycler, config.batch_size, rng))
            n_batches = len(batches)
            for b, (lab, unlab) in enumerate(batches, start=1):
                alpha = alpha_schedule(b, epoch, n_batches, config.c1, config.c2, config.gamma) if config.use_ssl else 0.0
                out = model(featurizer.collate(lab))
                pseudo = model(featurizer.collate(unlab)).y_pred if unlab else None
                terms = objective(
                    out.y_pred,
                    torch.tensor([ex.label for ex in lab]),
                    out.h_scl,
                    lam=config.lam,
                    tau=config.tau,
                    alpha=alpha,
                    pseudo_pred=pseudo,
                    use_scl=config.use_scl,
                    use_ssl=config.use_ssl,
                )
                row = _log_row(epoch, b, terms)
                if not _finite(row):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} batch {b}: {row}")
                optimizer.zero_grad()
                terms["L"].backward()
                optimizer.step()
                log.append(row)
                if log_fh:
                    log_fh.write(json.dumps(row) + "\n")

            f1 = monitor_f1(model, featurizer, monitor, config.batch_size)
            history.append({"epoch": epoch, "val_f1": f1})
            logger.info("epoch %d: validation F1 %.4f", epoch, f1)
            if f1 > best_f1:
                best_f1, best_epoch, stale = f1, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, config, best_f1, best_epoch, log, history)


@dataclass
class GridResult:
    best_config: ModelConfig
    best_f1: float
    table: list[dict]


def grid_search(
    base: ModelConfig,
    grid: dict[str, Iterable],
    splits: Splits,
    unlabeled: Sequence[Example] = (),
    featurizer: Featurizer | None = None,
) -> GridResult:
    """Exhaustive search; the first configuration in grid order wins ties."""
    names = list(grid)
    table, best = [], None
    for values in itertools.product(*(list(grid[n]) for n in names)):
        params = dict(zip(names, values))
        cfg = base.replace(**params)
        result = train(cfg, splits, unlabeled, featurizer=featurizer)
        table.append({**params, "val_f1": result.best_f1, "best_epoch": result.best_epoch})
        if best is None or result.best_f1 > best[1]:
            best = (cfg, result.best_f1)
    if best is None:
        raise ValueError("empty grid")
    return GridResult(best[0], best[1], table)


def save_checkpoint(path, model: TripletClassifier, config: ModelConfig):
    # Serialise in memory first: torch.save embeds the target file's name in
    # the archive, which would make the bytes depend on a temp file name.
    buf = io.BytesIO()
    torch.save({"config": config.to_dict(), "state_dict": model.state_dict()}, buf)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[TripletClassifier, ModelConfig]:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    config = ModelConfig.from_dict(blob["config"])
    model = TripletClassifier(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, config
