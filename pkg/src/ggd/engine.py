"""Greedy de-bias training: pseudo-labels, schedules, batch steps, run loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import evalkit
from .datakit import BiasedDataset, LabeledBatch
from .diffcore import (
    ContractError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    cross_entropy_soft,
    per_sample_cross_entropy,
    softmax_array,
    sub_scaled,
)
from .modelzoo import Model
from .seeding import derive_seed

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


# ------------------------------------------------------------------ pseudo-labels


def _check_pair(H, Y):
    H, Y = np.asarray(H, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if H.shape != Y.shape:
        raise ShapeError(f"logits {H.shape} and labels {Y.shape} differ in shape")
    return H, Y


def negative_gradient(H, Y) -> np.ndarray:
    """Y - softmax(H): the descent direction of CE at the ensemble logits."""
    H, Y = _check_pair(H, Y)
    return Y - softmax_array(H)


def clip_pseudo(raw, Y) -> np.ndarray:
    """Keep the true-class entries of the negative gradient, floored at 0."""
    raw, Y = _check_pair(raw, Y)
    return np.where(Y > 0, np.clip(raw, 0.0, 1.0), 0.0)


def pseudo_labels(H, Y) -> np.ndarray:
    return clip_pseudo(negative_gradient(H, Y), Y)


def reference_prediction(H, Y) -> np.ndarray:
    H, Y = _check_pair(H, Y)
    return Y * softmax_array(H)


def regularized_base_loss(f_logits: Tensor, Y, sigma_hat, lam: float, tape: Tape | None = None) -> Tensor:
    """CE(f, Y) - lam * CE(f, sigma_hat)."""
    if not 0 <= lam <= 1:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    sigma_hat = np.asarray(sigma_hat, dtype=np.float64)
    if sigma_hat.min(initial=0) < 0 or sigma_hat.max(initial=0) > 1:
        raise ContractError("reference prediction entries must lie in [0, 1]")
    main = cross_entropy_soft(f_logits, Y, tape)
    reg = cross_entropy_soft(f_logits, sigma_hat, tape)
    return sub_scaled(main, reg, lam, tape)


# ------------------------------------------------------------------ lambda schedule


@dataclass(frozen=True)
class LambdaSchedule:
    kind: str = "sin"  # "sin" or "constant"
    value: float = 1.0
    horizon: int = 1
    granularity: str = "epoch"  # "epoch" or "batch"

    def __post_init__(self):
        if self.kind not in ("sin", "constant"):
            raise ContractError(f"unknown lambda schedule {self.kind!r}")
        if self.granularity not in ("epoch", "batch"):
            raise ContractError(f"unknown lambda granularity {self.granularity!r}")
        if self.kind == "constant" and not 0 <= self.value <= 1:
            raise ContractError("constant lambda must lie in [0, 1]")
        if self.horizon < 0:
            raise ContractError("horizon must be non-negative")


def lambda_value(schedule: LambdaSchedule, t: float) -> float:
    T = schedule.horizon
    if not 0 <= t <= T:
        raise ContractError(f"t={t} outside [0, {T}]")
    if schedule.kind == "constant":
        return float(schedule.value)
    if T == 0:
        return 1.0
    if t == T:
        return 1.0
    return math.sin(math.pi * t / (2 * T))


# ------------------------------------------------------------------ optimizers


@dataclass
class OptimizerConfig:
    name: str = "sgd"  # "sgd" or "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.name!r}")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")


class Optimizer:
    """Plain SGD or Adam over a fixed parameter list."""

    def __init__(self, params: list[Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        cfg = self.cfg
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if cfg.name == "sgd":
                p.data -= cfg.lr * g
                continue
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * g * g
            mhat = self.m[i] / (1 - cfg.beta1**self.t)
            vhat = self.v[i] / (1 - cfg.beta2**self.t)
            p.data -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


# ------------------------------------------------------------------ batch steps


@dataclass
class EnsembleState:
    """Ordered biased models and the logits accumulated on the current batch."""

    models: list[Model]
    optimizers: list[Optimizer | None] = field(default_factory=list)
    H: list[np.ndarray] = field(default_factory=list)
    index: int = 0

    def __post_init__(self):
        if not self.optimizers:
            self.optimizers = [None] * len(self.models)

    @classmethod
    def create(cls, models: list[Model], cfg: OptimizerConfig) -> "EnsembleState":
        opts = [Optimizer(m.parameters(), cfg) if m.trainable else None for m in models]
        return cls(list(models), opts)


def _guard(value: float, step: int, who: str) -> float:
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise TrainingDiverged(f"loss {value!r} from {who} at step {step}")
    return value


def _update_biased(state: EnsembleState, batch: LabeledBatch, Y: np.ndarray, step: int) -> dict:
    """Greedy pass over the biased models; leaves H_0..H_M on the state."""
    H = np.zeros((len(batch), batch.num_classes))
    state.H = [H.copy()]
    losses = {}
    for m, (model, opt) in enumerate(zip(state.models, state.optimizers), start=1):
        state.index = m
        target = pseudo_labels(H, Y)
        if opt is not None:
            tape = Tape()
            opt.zero_grad()
            loss = cross_entropy_soft(model.forward(batch, tape), target, tape)
            backward(tape, loss)
            opt.step()
            losses[f"biased_{m}"] = _guard(loss.item(), step, f"biased model {m}")
        else:
            losses[f"biased_{m}"] = float(cross_entropy_soft(Tensor(model.logits(batch)), target).item())
        H = H + model.logits(batch)
        state.H.append(H.copy())
    return losses


def _check_batch(batch: LabeledBatch):
    if len(batch) == 0:
        raise ContractError("empty batch")


def gs_batch_step(state: EnsembleState, base: Model, batch: LabeledBatch, optimizer: Optimizer,
                  step: int = 0) -> dict:
    """Gradient-supervision step: biased models in order, then the base
    model on the clipped negative gradient of the full ensemble."""
    _check_batch(batch)
    Y = batch.onehot
    losses = _update_biased(state, batch, Y, step)
    target = pseudo_labels(state.H[-1], Y)
    tape = Tape()
    optimizer.zero_grad()
    logits = base.forward(batch, tape)
    loss = cross_entropy_soft(logits, target, tape)
    backward(tape, loss)
    optimizer.step()
    losses["base"] = _guard(loss.item(), step, "base model")
    losses["_base_logits"] = logits.data
    return losses


def cr_batch_step(state: EnsembleState, base: Model, batch: LabeledBatch, lam: float,
                  optimizer: Optimizer, step: int = 0) -> dict:
    """Curriculum-regularized step: CE(f, Y) - lam * CE(f, Y * softmax(H_M))."""
    _check_batch(batch)
    if not 0 <= lam <= 1:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    Y = batch.onehot
    losses = _update_biased(state, batch, Y, step)
    sigma_hat = reference_prediction(state.H[-1], Y)
    tape = Tape()
    optimizer.zero_grad()
    logits = base.forward(batch, tape)
    loss = regularized_base_loss(logits, Y, sigma_hat, lam, tape)
    backward(tape, loss)
    optimizer.step()
    losses["base"] = _guard(loss.item(), step, "base model")
    losses["_base_logits"] = logits.data
    return losses


# ------------------------------------------------------------------ run loop


@dataclass
class RunConfig:
    base: dict
    biased: list[dict] = field(default_factory=list)
    scheme: str = "cr"  # "gs" or "cr"
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0
    hard_window: int = 100
    name: str = "run"

    def __post_init__(self):
        if self.scheme not in ("gs", "cr"):
            raise ContractError(f"scheme must be 'gs' or 'cr', got {self.scheme!r}")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class TrainResult:
    base: Model
    log: evalkit.MetricLog
    biased: list[Model]
    lambdas: list[float]


def train(config: RunConfig, train_set: BiasedDataset, eval_sets: dict[str, BiasedDataset] | None = None,
          model_factory=None) -> TrainResult:
    """Run the configured scheme and return the base model with its metric log.

    ``model_factory(spec, seed, train_set, base=None)`` turns model specs into models;
    it defaults to :func:`ggd.presets.build_model`.
    """
    from .presets import build_model

    factory = model_factory or build_model
    eval_sets = eval_sets or {}
    seed = config.seed
    base = factory(config.base, derive_seed(seed, "init/base"), train_set)
    biased = [factory(spec, derive_seed(seed, f"init/biased{m}"), train_set, base=base)
              for m, spec in enumerate(config.biased, start=1)]
    state = EnsembleState.create(biased, config.optimizer)
    opt = Optimizer(base.parameters(), config.optimizer)

    metrics = evalkit.MetricLog(seed=seed, run=config.name)
    n = len(train_set)
    batches_per_epoch = math.ceil(n / config.batch_size)
    total_steps = batches_per_epoch * config.epochs
    sched = config.schedule
    if sched.granularity == "epoch":
        sched = LambdaSchedule(sched.kind, sched.value, config.epochs - 1, "epoch")
    else:
        sched = LambdaSchedule(sched.kind, sched.value, total_steps - 1, "batch")
    shuffle = np.random.default_rng(derive_seed(seed, "shuffle"))
    hard_all = train_set.bias_attr != train_set.labels
    window = evalkit.HardRatioAccumulator(config.hard_window)
    lambdas: list[float] = []

    step = 0
    for epoch in range(config.epochs):
        order = shuffle.permutation(n)
        epoch_loss: dict[str, float] = {}
        epoch_acc = evalkit.HardRatioAccumulator(0)
        for b in range(batches_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            batch = train_set.batch(idx)
            t = epoch if sched.granularity == "epoch" else step
            lam = lambda_value(sched, t)
            if config.scheme == "gs":
                out = gs_batch_step(state, base, batch, opt, step)
            else:
                out = cr_batch_step(state, base, batch, lam, opt, step)
            lambdas.append(lam if config.scheme == "cr" else 1.0)
            logits = out.pop("_base_logits")
            per_sample = per_sample_cross_entropy(logits, batch.onehot)
            epoch_acc.add(per_sample, hard_all[idx])
            ratio = window.add(per_sample, hard_all[idx])
            if ratio is not None:
                metrics.add(epoch, "train", "hard_ratio_window", ratio, step=step)
            for k, v in out.items():
                epoch_loss[k] = epoch_loss.get(k, 0.0) + v * len(idx) / n
            step += 1
        for k in sorted(epoch_loss):
            metrics.add(epoch, "train", f"loss_{k}", epoch_loss[k])
        metrics.add(epoch, "train", "lambda", lambdas[-1])
        metrics.add(epoch, "train", "hard_ratio", epoch_acc.ratio())
        for name in sorted(eval_sets):
            evalkit.record_eval(metrics, epoch, name, base, eval_sets[name])
        log.info("epoch %d/%d done: %s", epoch + 1, config.epochs,
                 ", ".join(f"{k}={v:.4f}" for k, v in sorted(epoch_loss.items())))
    return TrainResult(base, metrics, biased, lambdas)
