"""Loss assembly, the AdamW optimizer, and the training loop.

The loop is single-threaded and fully deterministic for a given seed:
batch order comes from one seeded generator, parameters update in sorted
name order, and both kernel paths are sequential.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import rng
from . import tensor as T
from .dlora import N_MODULES, RoutingStats, load_balance_loss
from .tensor import Tape, Tensor


class NumericError(RuntimeError):
    """Training produced a non-finite loss; carries a diagnostic dump."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 20
    lambda_lb: float = 0.01
    loss_kind: str = "mse"  # or "smape"
    seed: int = 0
    patience: int = 3  # early stop on val mse; inactive without a val split
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.lambda_lb < 0:
            raise ValueError(f"lambda_lb must be >= 0, got {self.lambda_lb}")
        if self.loss_kind not in ("mse", "smape"):
            raise ValueError(f"loss_kind must be mse or smape, got '{self.loss_kind}'")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    return T.mean(T.square(T.sub(pred, Tensor(target))))


def smape_loss(pred: Tensor, target: np.ndarray, floor: float = 1e-8) -> Tensor:
    """Differentiable symmetric error, 0 on a perfect fit, bounded by 200."""
    y = Tensor(target)
    num = T.absolute(T.sub(pred, y))
    den = T.clamp_min(T.add(T.absolute(pred), T.absolute(y)), floor)
    return T.scale(T.mean(T.div(num, den)), 200.0)


def task_loss(kind: str, pred: Tensor, target: np.ndarray) -> Tensor:
    return mse_loss(pred, target) if kind == "mse" else smape_loss(pred, target)


def total_loss(task: Tensor, stats: RoutingStats | None, lambda_lb: float) -> Tensor:
    if stats is None or lambda_lb == 0.0:
        return task
    return T.add(task, T.scale(load_balance_loss(stats), lambda_lb))


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = {name: p for name, p in sorted(params.items()) if p.requires_grad}
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros(p.size) for name, p in self.params.items()}
        self._v = {name: np.zeros(p.size) for name, p in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
            kernels.adamw_update(
                p.data.reshape(-1), np.ascontiguousarray(g),
                self._m[name], self._v[name], self.step_count,
                self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    sq = 0.0
    for p in params.values():
        if p.grad is not None:
            sq += float((p.grad * p.grad).sum())
    norm = np.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return float(norm)


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val: float | None = None
    best_epoch: int | None = None
    stopped_early: bool = False
    epochs_run: int = 0
    steps_run: int = 0
    rng_state: dict | None = None  # batch-order generator state at exit


def evaluate_mse(model, windows, batch_size: int = 64) -> float:
    """Mean squared forecast error over every window, no gradient tape."""
    if windows.count < 1:
        raise ValueError("no windows to evaluate")
    total_se = 0.0
    count = 0
    for lo in range(0, windows.count, batch_size):
        idx = np.arange(lo, min(lo + batch_size, windows.count))
        batch = windows.batch(idx)
        pred = model.predict(batch.x)
        total_se += float(((pred - batch.y) ** 2).sum())
        count += batch.y.size
    return total_se / count


def naive_repeat_last_mse(windows, batch_size: int = 64) -> float:
    """Baseline that repeats each window's final observation across the horizon."""
    total_se = 0.0
    count = 0
    for lo in range(0, windows.count, batch_size):
        idx = np.arange(lo, min(lo + batch_size, windows.count))
        batch = windows.batch(idx)
        pred = np.repeat(batch.x[:, :, -1:], batch.y.shape[2], axis=2)
        total_se += float(((pred - batch.y) ** 2).sum())
        count += batch.y.size
    return total_se / count


def train(model, train_windows, val_windows, cfg: TrainConfig) -> TrainResult:
    """Fit the model's trainable parameters; returns per-epoch history.

    Early stopping watches val MSE with the configured patience and restores
    the best-epoch parameters before returning. With no val windows the
    loop always runs the full epoch budget.
    """
    if train_windows.count < 1:
        raise ValueError("training split has no usable windows")
    params = model.trainable()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = rng.generator(cfg.seed, "batch_order")
    layers = model.routed_layers()
    result = TrainResult()
    has_val = val_windows is not None and val_windows.count > 0
    best_snapshot = None
    bad_epochs = 0

    for epoch in range(cfg.epochs):
        order = gen.permutation(train_windows.count)
        epoch_loss = 0.0
        epoch_lb = 0.0
        steps = 0
        phat_sums = np.zeros((layers, 7)) if layers else None
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch = train_windows.batch(idx)
            with Tape() as tape:
                pred, stats = model.forward_batch(batch, want_stats=True)
                task = task_loss(cfg.loss_kind, pred, batch.y)
                loss = total_loss(task, stats, cfg.lambda_lb)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} step {steps}",
                        diagnostics={
                            "epoch": epoch,
                            "step": steps,
                            "loss": loss_val,
                            "task_loss": task.item(),
                            "x_min": float(batch.x.min()),
                            "x_max": float(batch.x.max()),
                            "y_min": float(batch.y.min()),
                            "y_max": float(batch.y.max()),
                            "pred_min": float(pred.data.min()),
                            "pred_max": float(pred.data.max()),
                            "lr": cfg.lr,
                        },
                    )
                tape.backward(loss)
            clip_gradients(params, cfg.clip_norm)
            opt.step()
            opt.zero_grad()
            epoch_loss += task.item()
            if stats is not None:
                epoch_lb += float(N_MODULES * (stats.f * stats.phat).sum())
                phat_sums += stats.phat
            steps += 1

        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / steps,
            "val_loss": None,
            "lb_loss": epoch_lb / steps if layers else 0.0,
        }
        if layers:
            mean_phat = np.clip(phat_sums / steps, 1e-300, 1.0)
            ent = -(mean_phat * np.log2(mean_phat)).sum(axis=1)
        else:
            ent = np.zeros(model.layer_count())
        row["entropy"] = [float(e) for e in ent]

        if has_val:
            val_mse = evaluate_mse(model, val_windows, batch_size=cfg.batch_size)
            row["val_loss"] = val_mse
            if result.best_val is None or val_mse < result.best_val:
                result.best_val = val_mse
                result.best_epoch = epoch
                best_snapshot = {n: p.data.copy() for n, p in params.items()}
                bad_epochs = 0
            else:
                bad_epochs += 1
        result.history.append(row)
        result.epochs_run = epoch + 1
        if has_val and cfg.patience > 0 and bad_epochs >= cfg.patience:
            result.stopped_early = True
            break

    if best_snapshot is not None:
        for name, p in params.items():
            p.data[...] = best_snapshot[name]
    result.steps_run = opt.step_count
    result.rng_state = rng.state_dict(gen)
    return result


def write_history_csv(result: TrainResult, path, layers: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "train_loss", "val_loss", "lb_loss"]
            + [f"entropy_layer_{i}" for i in range(layers)]
        )
        for row in result.history:
            val = "" if row["val_loss"] is None else repr(row["val_loss"])
            writer.writerow(
                [row["epoch"], repr(row["train_loss"]), val, repr(row["lb_loss"])]
                + [repr(e) for e in row["entropy"]]
            )
