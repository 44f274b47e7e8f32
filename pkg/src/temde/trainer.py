"""Mini-batch training loop with periodic retrieval evaluation and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from temde.data import PairedDataset
from temde.errors import ContractError, DivergenceError
from temde.metrics import RetrievalMetrics, format_metric_line, paired_retrieval
from temde.model import RetrievalModel, batch_triplet_loss, save_model
from temde.optim import SGD, Adam
from temde.tensor import Tensor

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 2e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_dir: str | None = None
    eval_every: int = 0  # 0: evaluate at the end of every epoch only
    eval_split: str = "val"
    max_steps: int | None = None
    # epochs summing over every violating negative before switching to the hardest one
    warmup_epochs: int = 1

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")
        if self.optimizer not in OPTIMIZERS:
            raise ContractError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class MetricRow:
    step: int
    loss: float
    metrics: RetrievalMetrics  # mean over both retrieval directions
    directions: dict[str, RetrievalMetrics]

    def line(self) -> str:
        return format_metric_line(self.step, self.loss, self.metrics)


@dataclass
class TrainResult:
    model: RetrievalModel
    losses: list[float] = field(default_factory=list)
    history: list[MetricRow] = field(default_factory=list)
    best: MetricRow | None = None
    step: int = 0


def make_optimizer(model: RetrievalModel, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SGD(model.parameters(), cfg.learning_rate)
    return Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)


def epoch_batches(train_idx: np.ndarray, epoch: int, cfg: TrainConfig) -> list[np.ndarray]:
    """Seeded shuffle of the training items, cut into batches; a trailing single item is dropped."""
    order = np.random.default_rng([cfg.seed, epoch]).permutation(train_idx)
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def train_step(model: RetrievalModel, optimizer, dataset: PairedDataset, batch: np.ndarray, hardest: bool = True) -> float:
    model.train()
    model.zero_grad()
    captions = [dataset.captions[i] for i in batch]
    images = [dataset.segments[i] for i in batch]
    scores = model.score_matrix(model.encode_text(captions), model.encode_images(images))
    loss = batch_triplet_loss(scores, model.cfg.margin, hardest=hardest)
    value = loss.item()
    if math.isfinite(value):
        loss.backward()
        optimizer.step()
    return value


def evaluate(model: RetrievalModel, dataset: PairedDataset, split: str = "val") -> tuple[float, dict[str, RetrievalMetrics]]:
    captions, images = dataset.split(split)
    if not captions:
        raise ContractError(f"split {split!r} is empty")
    scores = model.similarity(captions, images)
    loss = batch_triplet_loss(Tensor(scores), model.cfg.margin).item() / len(captions)
    return loss, paired_retrieval(scores)


def _rsum(row: MetricRow) -> float:
    return sum(m.r1 + m.r5 + m.r10 for m in row.directions.values())


def save_checkpoint(path: str | Path, model: RetrievalModel, optimizer, step: int, epoch: int, batch_pos: int) -> None:
    arrays = {f"model.{name}": arr for name, arr in model.state_arrays()}
    arrays.update(optimizer.state_arrays())
    arrays["progress"] = np.array([step, epoch, batch_pos], dtype=np.int64)
    np.savez(path, **arrays)


def load_checkpoint(path: str | Path, model: RetrievalModel, optimizer) -> tuple[int, int, int]:
    with np.load(path) as blob:
        arrays = {k: blob[k] for k in blob.files}
    for name, arr in model.state_arrays():
        arr[...] = arrays[f"model.{name}"]
    optimizer.load_state_arrays(arrays)
    step, epoch, batch_pos = (int(x) for x in arrays["progress"])
    return step, epoch, batch_pos


def train(
    model: RetrievalModel,
    dataset: PairedDataset,
    cfg: TrainConfig,
    resume: str | Path | None = None,
    on_metrics: Callable[[MetricRow], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of hardest-negative triplet training.

    Raises :class:`DivergenceError` naming the step when the loss goes NaN/inf.
    With a ``checkpoint_dir`` the best-validation model is written to
    ``best.temd`` and the resumable state to ``state.npz`` after every evaluation.
    """
    train_idx = dataset.splits["train"]
    if len(train_idx) < 2:
        raise ContractError("training split needs at least two items")
    optimizer = make_optimizer(model, cfg)
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    result = TrainResult(model)
    step, start_epoch, start_pos = 0, 0, 0
    if resume is not None:
        step, start_epoch, start_pos = load_checkpoint(resume, model, optimizer)
    result.step = step
    last_loss = float("nan")

    def run_eval(epoch: int, pos: int) -> None:
        _, directions = evaluate(model, dataset, cfg.eval_split)
        row = MetricRow(step, last_loss, RetrievalMetrics.mean(list(directions.values())), directions)
        result.history.append(row)
        logger.info("eval %s", row.line())
        if on_metrics:
            on_metrics(row)
        if result.best is None or _rsum(row) > _rsum(result.best):
            result.best = row
            if ckpt_dir:
                save_model(model, ckpt_dir / "best.temd")
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "state.npz", model, optimizer, step, epoch, pos)

    for epoch in range(start_epoch, cfg.epochs):
        batches = epoch_batches(train_idx, epoch, cfg)
        first = start_pos if epoch == start_epoch else 0
        for pos in range(first, len(batches)):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            last_loss = train_step(model, optimizer, dataset, batches[pos], hardest=epoch >= cfg.warmup_epochs)
            step += 1
            result.step = step
            result.losses.append(last_loss)
            if not math.isfinite(last_loss):
                raise DivergenceError(step, last_loss)
            logger.debug("step %d loss %.6f", step, last_loss)
            at_end = pos == len(batches) - 1
            if (cfg.eval_every and step % cfg.eval_every == 0) or (at_end and not cfg.eval_every):
                next_epoch, next_pos = (epoch + 1, 0) if at_end else (epoch, pos + 1)
                run_eval(next_epoch, next_pos)
        else:
            continue
        # max_steps reached inside the epoch
        if ckpt_dir:
            save_checkpoint(ckpt_dir / "state.npz", model, optimizer, step, epoch, pos)
        break

    if ckpt_dir and result.best is None:
        save_model(model, ckpt_dir / "best.temd")
    if ckpt_dir:
        save_model(model, ckpt_dir / "last.temd")
    return result


def format_history(result: TrainResult) -> str:
    header = "# step\tloss\tr@1\tr@5\tr@10\tmrr\n"
    return header + "".join(row.line() + "\n" for row in result.history)
