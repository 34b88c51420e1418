"""Deterministic SGD training loop hosting ordinary and interpretable layers.

Per batch: forward (with masking at active interp layers), task-loss backward
with per-sample filter-loss gradients injected at the pre-mask maps, parameter
update, then the end-of-batch running-stat commit.  Target categories are
reassigned at the end of every epoch; epoch 0 is a warm-up that trains with
zero filter-loss weight while the Z / p(x) / lambda estimates fill in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, NumericalError
from ..interp import filter_loss_exact
from .losses import logistic_log_loss, softmax_log_loss
from .network import Network, NetworkConfig, build_network
from .optim import SGD


@dataclass
class TrainConfig:
    epochs: int
    seed: int
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    lambda_coeff: float = 5e-6
    ema_rate: float = 0.1
    warmup_epochs: int = 1
    px_mode: str = "mean"              # "mean" (dataset-mean p(x)) | "exact"
    lambda_per_filter: bool = False
    lr_decay_epochs: int = 0
    lr_decay_factor: float = 0.1
    log_subset: int = 128              # maps used for per-epoch filter-loss logging


@dataclass
class EpochStats:
    epoch: int
    task_loss: float
    train_accuracy: float
    lr: float
    lambdas: dict[int, float] = field(default_factory=dict)             # layer idx -> lam
    filter_losses: dict[int, list[float]] = field(default_factory=dict)  # layer idx -> per filter
    categories: dict[int, list[int]] = field(default_factory=dict)       # layer idx -> per filter


def _prepare_loss_labels(labels: np.ndarray, loss_kind: str, num_scores: int) -> np.ndarray:
    if loss_kind == "softmax":
        return labels
    if loss_kind == "logistic":
        if num_scores == 1:
            return np.where(labels == 1, 1.0, -1.0)
        y = -np.ones((labels.shape[0], num_scores), dtype=np.float64)
        y[np.arange(labels.shape[0]), labels] = 1.0
        return y
    raise ConfigError(f"unknown loss kind {loss_kind!r}")


def task_loss_and_grad(
    scores: np.ndarray, labels: np.ndarray, loss_kind: str
) -> tuple[float, np.ndarray]:
    y = _prepare_loss_labels(labels, loss_kind, scores.shape[1])
    if loss_kind == "softmax":
        return softmax_log_loss(scores, y)
    return logistic_log_loss(scores, y)


def _batch_correct(scores: np.ndarray, labels: np.ndarray) -> int:
    if scores.shape[1] == 1:
        pred = (scores[:, 0] > 0).astype(np.int64)
    else:
        pred = np.argmax(scores, axis=1)
    return int(np.sum(pred == labels))


def train_epoch(
    network: Network,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    opt: SGD,
    rng: np.random.Generator,
    epoch: int,
) -> EpochStats:
    n = images.shape[0]
    active = cfg.lambda_coeff > 0.0
    inject = active and epoch >= cfg.warmup_epochs
    for il in network.interp_layers:
        il.inject_enabled = inject
    perm = rng.permutation(n)
    loss_sum = 0.0
    batches = 0
    correct = 0
    for lo in range(0, n, cfg.batch_size):
        idx = perm[lo : lo + cfg.batch_size]
        xb, yb = images[idx], labels[idx]
        network.begin_batch(yb)
        scores = network.forward(xb, train=True)
        loss, dscores = task_loss_and_grad(scores, yb, network.loss_kind)
        if not np.isfinite(loss):
            raise NumericalError(
                f"non-finite task loss {loss} at epoch {epoch}, batch {batches} "
                f"(labels {np.unique(yb).tolist()})"
            )
        loss_sum += loss
        batches += 1
        correct += _batch_correct(scores, yb)
        network.backward(dscores)
        opt.step(network.parameters(), network.gradients())
        if active:
            for il in network.interp_layers:
                il.commit_batch_stats()
                il.accumulate_category_stats(yb, network.num_classes)
    if active:
        for il in network.interp_layers:
            il.assign_categories()
    return EpochStats(
        epoch=epoch,
        task_loss=loss_sum / max(batches, 1),
        train_accuracy=correct / n,
        lr=opt.lr,
    )


def _log_filter_losses(network: Network, images: np.ndarray, subset: int, stats: EpochStats) -> None:
    """Per-filter mutual-information loss on a fixed in-order map subset."""
    if subset <= 0 or not network.interp_layers:
        return
    sub = images[:subset]
    x = sub
    maps_by_layer: dict[int, np.ndarray] = {}
    for i, layer in enumerate(network.layers):
        x = layer.forward(x, False)
        if layer in network.interp_layers:
            maps_by_layer[i] = layer.pre_mask_maps
    for i, layer in enumerate(network.layers):
        if i not in maps_by_layer:
            continue
        maps = maps_by_layer[i]                                      # (S, n, n, M)
        stats.filter_losses[i] = [
            filter_loss_exact(maps[:, :, :, fm], layer.bank) for fm in range(maps.shape[3])
        ]
        stats.lambdas[i] = float(layer.states[0].lam) if layer.states else 0.0
        stats.categories[i] = [
            -1 if s.assigned_category is None else int(s.assigned_category)
            for s in layer.states
        ]


def fit(
    net_config: NetworkConfig,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
) -> tuple[Network, list[EpochStats]]:
    """Build the network from the seed's RNG stream and train it end to end."""
    rng = np.random.default_rng(cfg.seed)
    network = build_network(net_config, rng)
    active = cfg.lambda_coeff > 0.0
    for il in network.interp_layers:
        il.configure(
            active=active,
            lambda_coeff=cfg.lambda_coeff,
            ema_rate=cfg.ema_rate,
            n_ref=images.shape[0],
            px_mode=cfg.px_mode,
            lambda_per_filter=cfg.lambda_per_filter,
        )
    opt = SGD(cfg.lr, cfg.momentum)
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        if cfg.lr_decay_epochs > 0 and epoch > 0 and epoch % cfg.lr_decay_epochs == 0:
            opt.lr *= cfg.lr_decay_factor
        stats = train_epoch(network, images, labels, cfg, opt, rng, epoch)
        if active:
            _log_filter_losses(network, images, cfg.log_subset, stats)
        history.append(stats)
    return network, history
