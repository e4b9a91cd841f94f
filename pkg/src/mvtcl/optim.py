"""SGD with momentum and weight decay over two parameter groups, the dedicated
center-update rule with element-wise clipping, and the training loop.

The pre-pool group (view encoders) and the post-pool group (embedding head and
classifier) carry separate learning rates. Centers are excluded from momentum
and weight decay: they move by their own clipped, additively applied rule.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import model as M
from .errors import ContractViolation, DegenerateBatchError, NumericError


@dataclass
class SgdConfig:
    lr_pre_pool: float = 1e-4
    lr_post_pool: float = 1e-3  # embedding head and classifier
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def __post_init__(self):
        for name in ("lr_pre_pool", "lr_post_pool", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be non-negative")


@dataclass
class CenterUpdateConfig:
    lr_centers: float = 0.1
    clip: float = 0.01  # element-wise clamp on the update direction

    def __post_init__(self):
        if self.lr_centers < 0:
            raise ContractViolation("lr_centers must be non-negative")
        if self.clip <= 0:
            raise ContractViolation("clip must be positive")


@dataclass
class OptimizerState:
    """Velocity buffers mirroring every parameter array, initialized to zero."""

    velocities: list[np.ndarray]

    @classmethod
    def for_params(cls, params: M.NetworkParams) -> "OptimizerState":
        return cls([np.zeros_like(a) for a in params.arrays()])


@dataclass
class TrainRunStats:
    """Per-epoch training statistics; wall time is informational only and is
    never written into run artifacts."""

    total_loss: list[float] = field(default_factory=list)
    softmax_loss: list[float] = field(default_factory=list)
    metric_loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    skipped_batches: int = 0
    wall_time_s: float = 0.0

    def loss_curve_rows(self):
        """Rows for the loss-curve CSV: epoch,total,softmax,metric_component,accuracy."""
        for e in range(len(self.total_loss)):
            yield (e, self.total_loss[e], self.softmax_loss[e],
                   self.metric_loss[e], self.accuracy[e])


def _param_groups(params: M.NetworkParams):
    """(array, group) pairs in the fixed arrays() order; 'pre' before the pool."""
    groups = []
    for enc in params.view_encoders:
        groups.extend(["pre"] * (len(enc.weights) + len(enc.biases)))
    groups.extend(["post"] * (len(params.embed_head.weights)
                              + len(params.embed_head.biases) + 2))
    return list(zip(params.arrays(), groups))


def sgd_step(params: M.NetworkParams, grads: M.NetworkParams,
             state: OptimizerState, cfg: SgdConfig) -> None:
    """In-place momentum SGD: g' = g + wd * theta; v <- mu * v + g'; theta -= lr * v."""
    grad_arrays = grads.arrays()
    pairs = _param_groups(params)
    if len(grad_arrays) != len(pairs) or len(state.velocities) != len(pairs):
        raise ContractViolation("params, grads and state shapes do not align")
    for (theta, group), g, v in zip(pairs, grad_arrays, state.velocities):
        if theta.shape != g.shape or theta.shape != v.shape:
            raise ContractViolation("parameter/gradient/velocity shape mismatch")
        lr = cfg.lr_pre_pool if group == "pre" else cfg.lr_post_pool
        g_eff = g + cfg.weight_decay * theta
        v *= cfg.momentum
        v += g_eff
        theta -= lr * v


def apply_center_update(centers: L.CenterBank, delta: np.ndarray,
                        cfg: CenterUpdateConfig) -> None:
    """c <- c + lr * clamp(delta, -clip, +clip), element-wise and in place."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != centers.centers.shape:
        raise ContractViolation("center update shape mismatch")
    centers.centers += cfg.lr_centers * np.clip(delta, -cfg.clip, cfg.clip)


def _check_finite(value: float, params: M.NetworkParams, centers: L.CenterBank,
                  epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
    for a in params.arrays():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite parameters at epoch {epoch} step {step}")
    if not np.all(np.isfinite(centers.centers)):
        raise NumericError(f"non-finite centers at epoch {epoch} step {step}")


def train(params: M.NetworkParams, centers: L.CenterBank, objects,
          loss_cfg: L.LossConfig, sgd_cfg: SgdConfig,
          center_cfg: CenterUpdateConfig, epochs: int, batch_size: int = 16,
          seed: int = 0) -> TrainRunStats:
    """Trains `params` (and `centers`, when the loss owns them) in place.

    Each epoch reshuffles deterministically from (seed, epoch), then runs
    forward -> combined loss -> backward -> SGD step -> center update per
    batch. Batches that cannot form a valid triple are skipped and counted.
    Fully deterministic given (seed, configs); epochs=0 is a no-op.
    """
    from .data import batches as make_batches  # local import to avoid a cycle

    if not objects:
        raise ContractViolation("training requires a non-empty object list")
    if batch_size < 2 and loss_cfg.kind != "softmax":
        raise ContractViolation("metric losses need batch_size >= 2")

    stats = TrainRunStats()
    state = OptimizerState.for_params(params)
    t0 = time.perf_counter()
    for epoch in range(epochs):
        ep_total = ep_softmax = ep_metric = 0.0
        correct = 0
        seen = 0
        for step, batch_objs in enumerate(make_batches(objects, batch_size, seed, epoch)):
            views = [o.views for o in batch_objs]
            domains = [o.domain for o in batch_objs]
            labels = np.asarray([o.label for o in batch_objs], dtype=np.int64)
            ids = [o.id for o in batch_objs]
            embeddings, logits, traces = M.forward_batch(views, params, domains)
            batch = L.EmbeddingBatch(embeddings, labels, ids)
            try:
                result = L.combined_loss(batch, logits, centers, loss_cfg)
            except DegenerateBatchError:
                stats.skipped_batches += 1
                continue
            _check_finite(result.loss, params, centers, epoch, step)

            gf = result.grad_features
            if gf is None:
                gf = np.zeros_like(embeddings)
            gl = result.grad_logits
            if gl is None:
                gl = np.zeros_like(logits)
            grads = M.backward_batch(traces, gf, gl, params)
            sgd_step(params, grads, state, sgd_cfg)
            if loss_cfg.uses_centers and result.center_update is not None:
                apply_center_update(centers, result.center_update, center_cfg)

            ep_total += result.loss
            ep_softmax += result.components.get("softmax", 0.0)
            ep_metric += (result.components.get("tcl", 0.0)
                          + result.components.get("center", 0.0)
                          + result.components.get("triplet", 0.0))
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += len(batch_objs)
        stats.total_loss.append(ep_total)
        stats.softmax_loss.append(ep_softmax)
        stats.metric_loss.append(ep_metric)
        stats.accuracy.append(correct / seen if seen else 0.0)
    stats.wall_time_s = time.perf_counter() - t0
    return stats
