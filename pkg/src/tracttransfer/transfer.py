"""Knowledge transfer from an existing-tract model to novel tracts.

Three pieces:

* logistic regression from the existing head's per-voxel logits to the novel
  labels, fitted by full-batch gradient descent on binary cross-entropy;
* composition of those regression parameters with the existing head into an
  initialization for the novel head (a better start than a random head);
* warmup fine-tuning, the equivalent-but-more-adaptive variant: train a
  randomly initialized novel head against frozen backbone features first,
  then fine-tune everything.

``run_strategy`` dispatches the five benchmark strategies over one few-shot
split and returns the trained model with its history.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ComputationGraph, Tensor, backward, sigmoid_np
from .errors import ConfigurationError, DataError, DegenerateTractWarning, ShapeError, StateError
from .model import (BackboneParams, HeadParams, SegModel, default_arch,
                    extract_features, head_logits, model_logits)
from .rng import RngState
from .synthdata import FewShotSplit, SyntheticSubject
from .train import (AdamaxState, SelectionMetric, TrainHistory, TrainOptions,
                    adamax_step, subject_labels, train)


class TransferStrategy(Enum):
    SCRATCH = "Scratch"
    CLASSIC_FT = "ClassicFT"
    COMPOSED_INIT = "ComposedInit"
    WARMUP_FT = "WarmupFT"
    UPPER_BOUND = "UpperBound"

    @classmethod
    def parse(cls, name: str) -> "TransferStrategy":
        for member in cls:
            if member.value == name:
                return member
        raise ConfigurationError(
            f"unknown strategy {name!r}; expected one of "
            f"{[m.value for m in cls]}")


_NEEDS_PRETRAINED = {TransferStrategy.CLASSIC_FT, TransferStrategy.COMPOSED_INIT,
                     TransferStrategy.WARMUP_FT}


@dataclass
class RegressionParams:
    """Logit-regression weights [N, M] and bias [N] from existing to novel."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"regression weight must be [N, M] with bias [N], got "
                f"{self.weight.shape} and {self.bias.shape}")


@dataclass
class FitOptions:
    iterations: int = 2000
    step: float = 0.1
    logit_cap: float = 15.0
    include_validation: bool = False  # fit on train voxels only by default


class VoxelPairs(NamedTuple):
    """Stacked per-voxel (existing-head logit vector, novel label vector) pairs."""

    logits: np.ndarray  # [P, M]
    labels: np.ndarray  # [P, N]


def collect_logits(subjects: list[SyntheticSubject], backbone: BackboneParams,
                   existing_head: HeadParams) -> VoxelPairs:
    """Evaluation-mode existing-head logits paired with novel labels, per voxel."""
    if backbone is None or existing_head is None:
        raise StateError("collect_logits needs a trained backbone and existing head")
    if not subjects:
        raise DataError("collect_logits needs at least one subject")
    logit_blocks, label_blocks = [], []
    for subject in subjects:
        feats = extract_features(Tensor(subject.input), backbone, training=False, rng=None)
        logits = head_logits(feats, existing_head).data
        m = logits.shape[0]
        n = subject.novel_labels.shape[0]
        logit_blocks.append(logits.reshape(m, -1).T)
        label_blocks.append(subject.novel_labels.reshape(n, -1).T)
    return VoxelPairs(np.concatenate(logit_blocks), np.concatenate(label_blocks))


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    elem = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(elem.mean())


def fit_logit_regression(pairs: VoxelPairs, opts: FitOptions | None = None) -> RegressionParams:
    """Minimize mean BCE of sigmoid(W h + b) against the novel labels.

    Full-batch gradient descent from zero initialization; the step size is
    halved whenever a proposed update would increase the loss, so the
    training loss is non-increasing.  A tract whose labels are all identical
    gets a capped bias and zero weights instead of a divergent fit.
    """
    opts = opts or FitOptions()
    h, y = pairs.logits, pairs.labels
    if h.ndim != 2 or y.ndim != 2 or h.shape[0] != y.shape[0]:
        raise ShapeError(f"voxel pairs disagree: logits {h.shape} vs labels {y.shape}")
    n_pairs, m = h.shape
    n = y.shape[1]

    weight = np.zeros((n, m))
    bias = np.zeros(n)
    positives = y.sum(axis=0)
    degenerate = (positives == 0) | (positives == n_pairs)
    if degenerate.any():
        warnings.warn(
            f"tracts {np.nonzero(degenerate)[0].tolist()} have identical labels "
            "on every voxel; fixing their bias at the logit cap",
            DegenerateTractWarning)
        bias[degenerate] = np.where(positives[degenerate] > 0, opts.logit_cap,
                                    -opts.logit_cap)
    active = ~degenerate
    if active.any():
        ya = y[:, active]
        w = np.zeros((int(active.sum()), m))
        b = np.zeros(int(active.sum()))
        step = opts.step
        z = h @ w.T + b
        loss = _bce_from_logits(z, ya)
        for _ in range(opts.iterations):
            residual = (sigmoid_np(z) - ya) / n_pairs
            grad_w = residual.T @ h
            grad_b = residual.sum(axis=0)
            while True:
                w_new = w - step * grad_w
                b_new = b - step * grad_b
                z_new = h @ w_new.T + b_new
                loss_new = _bce_from_logits(z_new, ya)
                if loss_new <= loss or step < 1e-12:
                    break
                step *= 0.5
            w, b, z, loss = w_new, b_new, z_new, loss_new
        weight[active] = w
        bias[active] = b
    return RegressionParams(weight=weight, bias=bias)


def compose_head_init(reg: RegressionParams, existing_head: HeadParams) -> HeadParams:
    """Fold the logit regression through the existing head into a novel head.

    The returned head computes W (W_e f + b_e) + b at every voxel, i.e. its
    weight is ``W @ W_e`` and its bias ``W @ b_e + b``.
    """
    m = existing_head.n_tracts
    if reg.weight.shape[1] != m:
        raise ShapeError(
            f"regression expects {reg.weight.shape[1]} existing tracts, "
            f"head has {m}")
    weight = reg.weight @ existing_head.weight.data
    bias = reg.weight @ existing_head.bias.data + reg.bias
    return HeadParams(weight=Tensor(weight), bias=Tensor(bias))


def _stacked_features(subjects: list[SyntheticSubject], backbone: BackboneParams):
    """Evaluation-mode feature and label matrices, voxels stacked over subjects."""
    feats, labels = [], []
    for subject in subjects:
        f = extract_features(Tensor(subject.input), backbone, training=False, rng=None).data
        feats.append(f.reshape(f.shape[0], -1))
        n = subject.novel_labels.shape[0]
        labels.append(subject.novel_labels.reshape(n, -1))
    return np.concatenate(feats, axis=1), np.concatenate(labels, axis=1)


def _head_dice(weight: np.ndarray, bias: np.ndarray, feats: np.ndarray,
               labels: np.ndarray, threshold: float = 0.5) -> float:
    from .metrics import dice

    probs = sigmoid_np(weight @ feats + bias[:, None])
    scores = [dice(probs[t] > threshold, labels[t] > 0.5)
              for t in range(labels.shape[0])]
    return float(np.mean(scores))


def warmup_fit(backbone: BackboneParams, data: FewShotSplit, opts: TrainOptions,
               rng: RngState) -> tuple[HeadParams, TrainHistory]:
    """Stage-one head training against the frozen backbone.

    Backbone features are deterministic while frozen, so they are computed
    once in evaluation mode and the head is optimized against the cached
    feature matrix.  The backbone is never touched.  Returns the head from
    the best-Dice epoch (training stops early after ``opts.warmup_patience``
    epochs without improvement) together with the post-update loss and Dice
    trajectory of the stage.
    """
    if not data.train:
        raise DataError("warmup_fit needs a non-empty training split")
    n_novel = data.train[0].novel_labels.shape[0]
    feats_train, labels_train = _stacked_features(data.train, backbone)
    use_val = bool(data.val) and opts.select_on is SelectionMetric.VALIDATION_DICE
    if use_val:
        feats_sel, labels_sel = _stacked_features(data.val, backbone)
    else:
        feats_sel, labels_sel = feats_train, labels_train

    head = HeadParams.init_random(n_novel, backbone.arch.feature_channels,
                                  rng.child("init"))
    params = {"head.weight": head.weight, "head.bias": head.bias}
    for tensor in params.values():
        tensor.requires_grad = True
    state = AdamaxState(params)
    feats_tensor = Tensor(feats_train)
    labels_tensor = Tensor(labels_train)

    history = TrainHistory()
    best = head.copy()
    best_dice = -np.inf
    stale = 0
    for epoch in range(opts.warmup_epochs):
        for tensor in params.values():
            tensor.zero_grad()
        with ComputationGraph() as graph:
            logits = ad.add_row_bias(ad.matmul(head.weight, feats_tensor), head.bias)
            loss = ad.bce_loss(logits, labels_tensor)
        backward(graph, loss)
        adamax_step(params, {n: p.grad for n, p in params.items()}, state, opts)
        post_loss = _bce_from_logits(
            head.weight.data @ feats_train + head.bias.data[:, None], labels_train)
        epoch_dice = _head_dice(head.weight.data, head.bias.data, feats_sel, labels_sel)
        history.loss.append(post_loss)
        history.dice.append(epoch_dice)
        if epoch_dice > best_dice:
            best_dice = epoch_dice
            best = head.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= opts.warmup_patience:
                break
    return best, history


def evaluation_loss(model: SegModel, subjects: list[SyntheticSubject]) -> float:
    """Evaluation-mode mean BCE of the model on the subjects' task labels."""
    if not subjects:
        raise DataError("evaluation_loss needs at least one subject")
    x = Tensor(np.stack([s.input for s in subjects]))
    y = np.stack([subject_labels(s, model.task) for s in subjects])
    logits = model_logits(model, x, training=False, rng=None)
    return _bce_from_logits(logits.data, y)


def run_strategy(strategy: TransferStrategy, pretrained: SegModel | None,
                 data: FewShotSplit, opts: TrainOptions, rng: RngState,
                 fit_opts: FitOptions | None = None) -> tuple[SegModel, TrainHistory]:
    """Build the strategy's initialization and fine-tune it on the split.

    ``pretrained`` is the existing-tract model (backbone plus existing head);
    it is required for every strategy except Scratch and UpperBound.  For
    UpperBound the caller passes the abundant-annotation split as ``data``.
    """
    if strategy in _NEEDS_PRETRAINED and pretrained is None:
        raise ConfigurationError(f"{strategy.value} requires a pretrained existing-tract model")
    if not data.train:
        raise DataError("run_strategy needs a non-empty training split")
    fit_opts = fit_opts or FitOptions()
    n_novel = data.train[0].novel_labels.shape[0]
    arch = pretrained.backbone.arch if pretrained is not None else default_arch()

    if strategy in (TransferStrategy.SCRATCH, TransferStrategy.UPPER_BOUND):
        backbone = BackboneParams.init_random(arch, rng.child("backbone"))
        head = HeadParams.init_random(n_novel, arch.feature_channels, rng.child("head"))
    elif strategy is TransferStrategy.CLASSIC_FT:
        backbone = pretrained.backbone.copy()
        head = HeadParams.init_random(n_novel, arch.feature_channels, rng.child("head"))
    elif strategy is TransferStrategy.COMPOSED_INIT:
        backbone = pretrained.backbone.copy()
        subjects = data.train + (data.val if fit_opts.include_validation else [])
        pairs = collect_logits(subjects, pretrained.backbone, pretrained.head)
        reg = fit_logit_regression(pairs, fit_opts)
        head = compose_head_init(reg, pretrained.head)
    elif strategy is TransferStrategy.WARMUP_FT:
        backbone = pretrained.backbone.copy()
        head, _ = warmup_fit(pretrained.backbone, data, opts, rng.child("warmup"))
    else:  # pragma: no cover - enum is exhaustive
        raise ConfigurationError(f"unhandled strategy {strategy}")

    model = SegModel(backbone=backbone, head=head, task="novel")
    return train(model, data, opts, trainable=None, rng=rng.child("train"))
