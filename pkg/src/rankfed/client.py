"""Client side of the protocol: local fine-tuning with the combined objective.

Each round a client copies the distributed global adapters, runs E epochs of
mini-batch SGD on its shard with the supervised loss plus the stability and
plasticity regularizers, and returns the updated adapters. All randomness
(mini-batch order) comes from a labeled sub-stream of the client's RNG keyed
by round and epoch, so results are independent of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ParameterError
from .lora import AdapterSet, DenseDelta
from .model import (CLConfig, FrozenBase, ImportanceEstimate, OpCounter,
                    estimate_fim, estimate_mas_importance, sgd_step,
                    total_local_loss)
from .numerics import Rng


@dataclass
class ClientState:
    """One client's shard, regularizer configuration, and cached importances."""

    client_id: int
    base: FrozenBase
    features: np.ndarray
    labels: np.ndarray
    cl: CLConfig
    rng: Rng
    task: str = "multiclass"
    importance: ImportanceEstimate | None = None
    importance_phase: int | None = None

    def __post_init__(self):
        if len(self.features) == 0:
            raise InputError(f"client {self.client_id} has an empty shard")

    @property
    def shard_size(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int
    eta: float
    batch_size: int
    round_index: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.eta < 0:
            raise ParameterError(f"learning rate must be >= 0, got {self.eta}")


def refresh_importances(state: ClientState, base: FrozenBase,
                        anchor_configuration, phase: int) -> ClientState:
    """Estimate and cache importance matrices once per (client, phase).

    ``anchor_configuration`` is the adapter configuration (AdapterSet or dense
    per-layer update) the estimates are evaluated at. Repeat calls within the
    same phase return the cached values unchanged. Distillation needs no
    importance matrices, so only the quadratic methods populate the cache.
    """
    if state.importance_phase == phase:
        return state
    if state.cl.method == "ewc":
        state.importance = estimate_fim(base, anchor_configuration,
                                        state.features, state.labels, state.task)
    elif state.cl.method == "mas":
        state.importance = estimate_mas_importance(base, anchor_configuration,
                                                   state.features)
    else:
        state.importance = None
    state.importance_phase = phase
    return state


def local_train(state: ClientState, global_adapters: AdapterSet,
                stability_anchor: DenseDelta | None, config: LocalTrainConfig,
                counter: OpCounter | None = None):
    """Run E local epochs from the distributed adapters; return the result.

    The plasticity anchor is the dense form of the incoming global adapters,
    held fixed for the whole round. Returns ``(adapters, epoch_losses)`` where
    the trace holds the mean total loss per epoch.
    """
    adapters = global_adapters.clone()
    plasticity_anchor = global_adapters.dense() if state.cl.active else None
    n = state.shard_size
    epoch_losses = []
    for epoch in range(config.epochs):
        order = state.rng.substream(
            "round", config.round_index, "epoch", epoch, "shuffle"
        ).permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = total_local_loss(
                state.base, adapters, state.features[idx], state.labels[idx],
                stability_anchor, plasticity_anchor, state.importance,
                state.cl, state.task, counter,
            )
            if not np.isfinite(loss):
                raise NumericError(
                    f"client {state.client_id}: non-finite loss at round "
                    f"{config.round_index}, epoch {epoch}"
                )
            adapters = sgd_step(adapters, grads, config.eta)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))
    return adapters, epoch_losses
