"""Training loops: per-stage epochs and the two-stage procedure.

Stage 1 trains from scratch with binary activations and real-valued
weights.  Stage 2 inherits the stage-1 parameters and binarizes both sides;
its forward runs through the packed kernels.  Weight decay switches from
1e-5 to 0 between stages.  Every batch loss and every epoch's parameters
are checked for non-finite values so divergence aborts with a location
instead of propagating.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from bitbranch.nnengine.layers import Model, softmax_cross_entropy
from bitbranch.nnengine.optim import Adam, TrainConfig, linear_lr
from bitbranch.nnengine.rng import make_rng
from bitbranch.nnengine.tensor import EngineError, NanError, check_finite


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    accuracy: float | None = None


@dataclass
class StageResult:
    stats: list[EpochStats] = field(default_factory=list)
    state: dict[str, np.ndarray] = field(default_factory=dict)


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start: start + batch_size]


def train_stage(model: Model, images: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, epochs: int, weight_decay: float,
                rng: np.random.Generator, loss_fn: LossFn = softmax_cross_entropy,
                log: Callable[[str], None] | None = None,
                augment: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
                ) -> StageResult:
    if len(images) == 0:
        raise EngineError("dataset is empty")
    if len(images) != len(labels):
        raise EngineError("image and label counts differ")
    opt = Adam(model.params(), cfg, weight_decay)
    result = StageResult()
    for epoch in range(epochs):
        lr = linear_lr(cfg.lr0, epoch, epochs)
        losses = []
        for idx in iterate_batches(len(images), cfg.batch_size, rng):
            x = images[idx]
            if augment is not None:
                x = augment(x, rng)
            model.zero_grad()
            out, tape = model.forward(x, train=True)
            loss, dlogits = loss_fn(out, labels[idx])
            if not np.isfinite(loss):
                raise NanError(f"loss at epoch {epoch}")
            model.backward(tape, dlogits)
            opt.step(lr)
            # catch optimizer blow-ups before the next forward quantizes them
            for name, p in model.named_params():
                check_finite(p.data, f"parameter {name} at epoch {epoch}")
            losses.append(loss)
        stat = EpochStats(epoch, lr, float(np.mean(losses)))
        result.stats.append(stat)
        if log:
            log(f"epoch {epoch}: lr {lr:.6g} loss {stat.mean_loss:.4f}")
    result.state = model.state_dict()
    return result


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in inference mode."""
    hits = 0
    for start in range(0, len(images), batch_size):
        x = images[start: start + batch_size]
        out, _ = model.forward(x, train=False)
        hits += int((out.argmax(axis=1) == labels[start: start + batch_size]).sum())
    return hits / len(images)


def two_stage_train(build_model: Callable[[str], Model],
                    images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                    loss_fn: LossFn = softmax_cross_entropy,
                    log: Callable[[str], None] | None = None,
                    augment=None,
                    ) -> tuple[Model, StageResult, StageResult]:
    """Run both stages and return (final model, stage-1 result, stage-2 result).

    ``build_model("stage1")`` must produce binary activations with real
    weights; ``build_model("stage2")`` the fully binary variant with an
    identical parameter tree.  Stage 2 starts from the stage-1 state,
    verified key for key.
    """
    if len(images) == 0:
        raise EngineError("dataset is empty")
    rng1 = make_rng(cfg.seed, "stage1")
    model1 = build_model("stage1")
    if log:
        log("stage 1: binary activations, real weights")
    res1 = train_stage(model1, images, labels, cfg, cfg.epochs_stage1,
                       cfg.weight_decay_stage1, rng1, loss_fn, log, augment)

    model2 = build_model("stage2")
    model2.load_state_dict(res1.state)
    model2.set_packed(True)
    rng2 = make_rng(cfg.seed, "stage2")
    if log:
        log("stage 2: binary activations and binary weights")
    res2 = train_stage(model2, images, labels, cfg, cfg.epochs_stage2,
                       cfg.weight_decay_stage2, rng2, loss_fn, log, augment)
    return model2, res1, res2
