"""Baseline training: SGD with momentum on softmax cross entropy.

Produces the per-epoch metrics table behind the ``train`` CLI verb. Rows are
formatted with fixed precision so identical runs serialize byte-identically.
"""

import numpy as np

from . import autodiff as ad
from .compress import evaluate_accuracy
from .config import TrainConfig
from .errors import ConfigError, NumericError
from .graph import build_small_resnet, build_small_vgg
from .optim import SgdOptimizer

__all__ = ["build_model", "train_baseline", "METRICS_HEADER", "metrics_csv"]

METRICS_HEADER = "epoch,train_loss,train_accuracy,eval_accuracy,lr"

_DIVERGENCE_LIMIT = 1e6


def build_model(cfg: TrainConfig):
    if cfg.model_family == "small_vgg":
        return build_small_vgg(
            width_multiplier=cfg.width_multiplier,
            num_classes=cfg.num_classes,
            seed=cfg.model_seed,
        )
    if cfg.model_family == "small_resnet":
        return build_small_resnet(
            cfg.model_depth, num_classes=cfg.num_classes, seed=cfg.model_seed
        )
    raise ConfigError(f"unknown model family {cfg.model_family!r}")


def train_baseline(net, dataset, epochs, lr, momentum=0.9):
    """Train in place; returns one metrics row per epoch.

    Each row is (epoch, train_loss, train_accuracy, eval_accuracy, lr) where
    the training numbers average the forward passes actually used for the
    updates, and eval_accuracy is measured after the epoch.
    """
    opt = SgdOptimizer(net.parameters(), lr=lr, momentum=momentum)
    rows = []
    for epoch in range(epochs):
        loss_sum = 0.0
        correct = 0
        seen = 0
        for x, y in dataset.train_batches(epoch):
            opt.zero_grad()
            with ad.Tape() as tape:
                out, _ = net.forward(x)
                loss = ad.softmax_cross_entropy(out, y)
            value = loss.item()
            if not np.isfinite(value) or value > _DIVERGENCE_LIMIT:
                raise NumericError(
                    f"baseline training diverged at epoch {epoch}: {value:.6e}"
                )
            tape.backward(loss)
            opt.step()
            loss_sum += value * len(y)
            correct += int(np.sum(np.argmax(out.data, axis=1) == np.asarray(y)))
            seen += len(y)
        eval_acc = evaluate_accuracy(net, dataset.eval_batches())
        rows.append((epoch, loss_sum / seen, correct / seen, eval_acc, lr))
    return rows


def metrics_csv(rows):
    """Render metrics rows with the pinned header and fixed precision."""
    lines = [METRICS_HEADER]
    for epoch, train_loss, train_acc, eval_acc, lr in rows:
        lines.append(
            f"{epoch},{train_loss:.6f},{train_acc:.6f},{eval_acc:.6f},{lr:.6f}"
        )
    return "\n".join(lines) + "\n"
