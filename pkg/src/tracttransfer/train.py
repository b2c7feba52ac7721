"""Adamax training loop with best-selection-epoch model recovery.

Full-batch by default (few-shot cohorts are smaller than one conventional
minibatch); an optional ``batch`` size splits larger cohorts into seeded
minibatches.  Model selection keeps the epoch with the best mean Dice on the
validation split, or on the training split when no validation subject exists.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationGraph, Tensor, backward
from .errors import ConvergenceWarning, DataError, DivergenceError, ParameterError, ShapeError
from .model import SegModel, model_logits
from .rng import RngState
from .synthdata import FewShotSplit, SyntheticSubject


class SelectionMetric(Enum):
    VALIDATION_DICE = "ValidationDice"
    TRAINING_DICE = "TrainingDice"


@dataclass
class TrainOptions:
    learning_rate: float = 0.001
    epochs: int = 200
    dropout_rate: float = 0.4
    batch: int | None = None  # None: one full-batch step per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    select_on: SelectionMetric = SelectionMetric.VALIDATION_DICE
    warmup_epochs: int = 100
    warmup_patience: int = 20

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ParameterError("epoch counts must be non-negative")
        if self.batch is not None and self.batch < 1:
            raise ParameterError(f"batch must be >= 1, got {self.batch}")


def replace_select_on(opts: TrainOptions, select_on: SelectionMetric) -> TrainOptions:
    return replace(opts, select_on=select_on)


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    dice: list[float] = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_dice(self) -> float | None:
        return None if self.best_epoch is None else self.dice[self.best_epoch]


class AdamaxState:
    """First-moment EMA and infinity-norm second moment per parameter."""

    def __init__(self, params: dict[str, Tensor]):
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.u = {name: np.zeros_like(p.data) for name, p in params.items()}


def adamax_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                state: AdamaxState, opts: TrainOptions) -> None:
    """One Adamax update, in place, over the given named parameters."""
    state.t += 1
    correction = 1.0 - opts.beta1 ** state.t
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.data.shape or state.m[name].shape != grad.shape:
            raise ShapeError(
                f"adamax_step: gradient shape {grad.shape} does not match "
                f"parameter {name} of shape {param.data.shape}")
        m = state.m[name]
        u = state.u[name]
        m *= opts.beta1
        m += (1.0 - opts.beta1) * grad
        np.maximum(opts.beta2 * u, np.abs(grad), out=u)
        param.data -= (opts.learning_rate / correction) * m / (u + opts.epsilon)


def subject_labels(subject: SyntheticSubject, task: str) -> np.ndarray:
    return subject.existing_labels if task == "existing" else subject.novel_labels


def _stacked_batch(subjects: list[SyntheticSubject], task: str):
    inputs = np.stack([s.input for s in subjects])
    labels = np.stack([subject_labels(s, task) for s in subjects])
    return Tensor(inputs), Tensor(labels)


def mean_selection_dice(model: SegModel, subjects: list[SyntheticSubject],
                        threshold: float = 0.5) -> float:
    """Mean over subjects and tracts of Dice at the given threshold, eval mode."""
    from .metrics import dice  # local import to keep module dependencies acyclic

    probs = model.predict_probs(np.stack([s.input for s in subjects]))
    scores = []
    for s, subject in enumerate(subjects):
        refs = subject_labels(subject, model.task)
        for t in range(refs.shape[0]):
            scores.append(dice(probs[s, t] > threshold, refs[t] > 0.5))
    return float(np.mean(scores))


def _epoch_batches(subjects: list[SyntheticSubject], batch: int | None,
                   rng: RngState) -> list[list[SyntheticSubject]]:
    if batch is None or batch >= len(subjects):
        return [subjects]
    order = rng.generator.permutation(len(subjects))
    return [[subjects[i] for i in order[k:k + batch]]
            for k in range(0, len(subjects), batch)]


def train(model: SegModel, split: FewShotSplit, opts: TrainOptions,
          trainable=None, rng: RngState | None = None) -> tuple[SegModel, TrainHistory]:
    """Optimize the parameters selected by ``trainable`` and return the model
    from the best selection epoch together with the training history.

    The input model is treated as the initialization and is not mutated.
    """
    opts.validate()
    if not split.train:
        raise DataError("training split is empty")
    if opts.select_on is SelectionMetric.VALIDATION_DICE and not split.val:
        raise DataError("validation-based selection requires a non-empty validation split")
    if rng is None:
        rng = RngState(0)

    work = model.copy()
    named = work.named_params()
    trainable_names = [n for n in named if trainable is None or trainable(n)]
    for name, param in named.items():
        param.requires_grad = name in trainable_names

    history = TrainHistory()
    if opts.epochs == 0:
        return work, history

    state = AdamaxState({n: named[n] for n in trainable_names})
    select_subjects = (split.val if opts.select_on is SelectionMetric.VALIDATION_DICE
                       else split.train)
    best_model: SegModel | None = None
    best_dice = -np.inf
    warned = False

    for epoch in range(opts.epochs):
        batches = _epoch_batches(split.train, opts.batch, rng.child("batches", epoch))
        total_loss = 0.0
        for step, subjects in enumerate(batches):
            x, y = _stacked_batch(subjects, work.task)
            for name in trainable_names:
                named[name].zero_grad()
            with ComputationGraph() as graph:
                logits = model_logits(work, x, training=True,
                                      rng=rng.child("dropout", epoch, step),
                                      dropout_rate=opts.dropout_rate)
                loss = ad.bce_loss(logits, y)
            if not np.isfinite(loss.data):
                raise DivergenceError(epoch)
            backward(graph, loss)
            grads = {n: named[n].grad for n in trainable_names if named[n].grad is not None}
            adamax_step(named, grads, state, opts)
            total_loss += loss.item() * len(subjects)
        epoch_loss = total_loss / len(split.train)

        epoch_dice = mean_selection_dice(work, select_subjects)
        history.loss.append(epoch_loss)
        history.dice.append(epoch_dice)
        if epoch_dice > best_dice:
            best_dice = epoch_dice
            best_model = work.copy()
            history.best_epoch = epoch
        if (not warned and epoch > 0 and opts.batch is None
                and epoch_loss > history.loss[epoch - 1] * 1.05):
            warnings.warn(f"training loss rose by more than 5% at epoch {epoch}",
                          ConvergenceWarning)
            warned = True

    result = best_model if best_model is not None else work.copy()
    return result, history
