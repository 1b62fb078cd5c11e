"""Losses, Adam, and the minibatch training loop."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidArgumentError
from ..features import FeatureSet
from .model import AcousticNet, ModelConfig

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 10.0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    epochs: int = 150
    seed: int = 0
    time_roll: bool = True

    def __post_init__(self):
        if not self.alpha > 0 or not self.lr > 0:
            raise InvalidArgumentError("alpha and lr must be positive")
        if self.batch < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch and epochs must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


def loss(pred: np.ndarray, target: np.ndarray, alpha: float) -> tuple[float, np.ndarray]:
    """Batch-mean of ``alpha * |X - X_hat|**2 + |SPL - SPL_hat|``.

    ``pred`` and ``target`` are ``(N, 3)`` rows of ``(x, y, spl)``.  Returns the
    scalar and its gradient with respect to ``pred``.
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.ndim != 2 or pred.shape[1] != 3 or pred.shape != target.shape or len(pred) < 1:
        raise InvalidArgumentError(f"expected matching (N>=1, 3) arrays, got {pred.shape} and {target.shape}")
    n = len(pred)
    d_loc = pred[:, :2] - target[:, :2]
    d_spl = pred[:, 2] - target[:, 2]
    value = float(np.sum(alpha * np.sum(d_loc * d_loc, axis=1) + np.abs(d_spl)) / n)
    grad = np.empty_like(pred)
    grad[:, :2] = (2.0 * alpha / n) * d_loc
    grad[:, 2] = np.sign(d_spl) / n
    return value, grad


def adam_step(param, grad, state: dict, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Bias-corrected Adam update of ``param`` in place.

    ``state`` holds ``m``, ``v`` (same shape as ``param``) and ``t``; an empty
    dict is initialized to zeros.
    """
    if not state:
        state.update(m=np.zeros_like(param, dtype=np.float64), v=np.zeros_like(param, dtype=np.float64), t=0)
    state["t"] += 1
    t = state["t"]
    g = np.asarray(grad, dtype=np.float64)
    state["m"] = beta1 * state["m"] + (1 - beta1) * g
    state["v"] = beta2 * state["v"] + (1 - beta2) * g * g
    m_hat = state["m"] / (1 - beta1**t)
    v_hat = state["v"] / (1 - beta2**t)
    param -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(self, model, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.model = model
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self) -> None:
        grads = dict(self.model.named_grads())
        for name, p in self.model.named_params():
            adam_step(p, grads[name], self.state.setdefault(name, {}), self.lr, self.beta1, self.beta2, self.eps)


def evaluate(model: AcousticNet, data: FeatureSet, alpha: float = 10.0, batch: int = 32) -> dict:
    """Inference-mode loss in meters and dB, MDE and MAE of SPL over ``data``."""
    preds = predict(model, data, batch)
    value, _ = loss(preds, data.targets, alpha)
    err = np.linalg.norm(preds[:, :2] - data.targets[:, :2], axis=1)
    return {
        "loss": value,
        "mde": float(err.mean()),
        "mae_spl": float(np.abs(preds[:, 2] - data.targets[:, 2]).mean()),
    }


def predict(model: AcousticNet, data: FeatureSet, batch: int = 32) -> np.ndarray:
    out = [model.predict(data.stacks[i : i + batch], data.raws[i : i + batch]) for i in range(0, len(data), batch)]
    return np.concatenate(out, axis=0)


@dataclass
class TrainResult:
    model: AcousticNet
    history: list[dict]
    best_state: dict = field(repr=False, default_factory=dict)
    best_epoch: int = 0
    best_metrics: dict = field(default_factory=dict)

    def best_model(self) -> AcousticNet:
        net = copy.deepcopy(self.model)
        net.load_state_dict(self.best_state)
        return net


def train(
    train_set: FeatureSet,
    val_set: FeatureSet | None,
    cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    on_epoch=None,
) -> TrainResult:
    """Seeded minibatch Adam on the weighted location + SPL loss.

    With ``cfg.time_roll`` every batch is circularly shifted in time by a random
    amount: stacks along the frame axis, raw waveforms along samples.

    Gradients are taken on normalized targets (positions and SPL divided by the
    model's scales); every reported loss and metric is in meters / dB.
    ``on_epoch(record, model)`` is called after each epoch.
    """
    if len(train_set) == 0:
        raise InvalidArgumentError("training split is empty")
    model = AcousticNet(model_cfg, seed=cfg.seed)
    opt = Adam(model, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 1])
    targets_n = model.normalize_targets(train_set.targets)
    history: list[dict] = []
    best_mde, best_state, best_epoch, best_metrics = np.inf, {}, 0, {}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        batch_losses, batch_sizes = [], []
        for start in range(0, len(order), cfg.batch):
            idx = np.sort(order[start : start + cfg.batch])
            if len(idx) < 2 and len(order) > 1:
                continue  # batch statistics need at least two samples
            stacks, raws = train_set.stacks[idx], train_set.raws[idx]
            if cfg.time_roll:
                # the sources are stationary, so circular shifts along time give
                # other valid observations of the same scene
                stacks = np.roll(stacks, int(rng.integers(0, stacks.shape[-1])), axis=-1)
                raws = np.roll(raws, int(rng.integers(0, raws.shape[-1])), axis=-1)
            model.zero_grad()
            out = model.forward(stacks, raws, train=True)
            _, grad = loss(out, targets_n[idx], cfg.alpha)
            model.backward(grad)
            opt.step()
            report_loss, _ = loss(model.denormalize(out), train_set.targets[idx], cfg.alpha)
            batch_losses.append(report_loss)
            batch_sizes.append(len(idx))
        record = {"epoch": epoch, "train_loss": float(np.average(batch_losses, weights=batch_sizes))}
        if val_set is not None and len(val_set):
            metrics = evaluate(model, val_set, cfg.alpha)
            record.update(val_loss=metrics["loss"], val_mde=metrics["mde"], val_mae_spl=metrics["mae_spl"])
            if metrics["mde"] < best_mde:
                best_mde, best_epoch, best_metrics = metrics["mde"], epoch, metrics
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
        history.append(record)
        log.info("epoch %d %s", epoch, {k: round(v, 5) for k, v in record.items() if k != "epoch"})
        if on_epoch is not None:
            on_epoch(record, model)
    if not best_state:
        best_state = {k: v.copy() for k, v in model.state_dict().items()}
        best_epoch = cfg.epochs
    return TrainResult(model, history, best_state, best_epoch, best_metrics)
