"""Server side of the protocol: weighted aggregation, sensitivity-weighted
bilateral gradient pooling, the EMA-smoothed gradient-consistency signal, and
the stepwise rank-dropout decision.

Round flow: collect client updates, pool their dense displacement from the
distributed global adapters into positive/negative components weighted by
normalized sensitivity, smooth both with an EMA, and reduce them to a single
consistency score in [0, 1]. Consistency rising (or flat) between rounds
signals stagnation: the rank drops by a fixed subtractor, the phase-final
global adapters are folded into a decay-averaged accumulator, and the next
round's adapters are re-initialized from that accumulator at the lower rank.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InputError, InvariantError, ParameterError, ProtocolError, ShapeError
from .lora import (AdapterSet, DenseDelta, LoRAAdapter, RankSchedule, accumulate,
                   reinit_at_rank)
from .numerics import Rng, relu


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    adapters: AdapterSet
    shard_size: int

    def __post_init__(self):
        if self.shard_size <= 0:
            raise InputError(f"shard size must be positive, got {self.shard_size}")


@dataclass(frozen=True)
class ServerState:
    """Global adapters plus dropout bookkeeping; all fields are values."""

    adapters: AdapterSet
    schedule: RankSchedule
    theta: float = 0.9            # EMA decay for pooled gradient components
    lam: float = 0.5              # accumulator decay at phase boundaries
    cooldown: float = 5           # min completed rounds in a phase before a drop
    aggregation: str = "factor"   # "factor" or "dense" (ablation)
    reinit_method: str = "svd"    # "svd" or "gaussian" (ablation)
    reinit_sigma: float = 0.02
    reinit_rng: Rng | None = None
    accumulated: DenseDelta | None = None
    ema_pos: list | None = None
    ema_neg: list | None = None
    consistency_prev: float | None = None
    rounds_in_phase: int = 0

    def __post_init__(self):
        if not 0.0 <= self.theta < 1.0:
            raise ParameterError(f"theta must lie in [0, 1), got {self.theta}")
        if not 0.0 <= self.lam <= 1.0:
            raise ParameterError(f"lam must lie in [0, 1], got {self.lam}")


@dataclass(frozen=True)
class RoundOutcome:
    consistency: float
    rank: int        # rank the round's updates were trained at
    dropped: bool
    global_adapters: AdapterSet  # this round's aggregate (pre re-initialization)


def aggregate(updates, mode: str = "factor") -> AdapterSet:
    """Shard-size weighted average of client adapters.

    Factors are averaged factor-wise (the transmitted objects); the "dense"
    ablation averages the dense products and re-factorizes by truncated SVD.
    Updates are summed in client_id order so the result is bit-exact under any
    input permutation.
    """
    if not updates:
        raise InputError("no client updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    first = updates[0].adapters
    for u in updates:
        if u.adapters.nominal_rank != first.nominal_rank:
            raise ProtocolError(
                f"client {u.client_id} rank {u.adapters.nominal_rank} != "
                f"{first.nominal_rank}"
            )
        if u.adapters.shapes() != first.shapes():
            raise ProtocolError(f"client {u.client_id} sent mismatched layer shapes")
    sizes = np.array([u.shard_size for u in updates], dtype=np.float64)
    weights = sizes / sizes.sum()

    if mode == "factor":
        layers = []
        for l, ref in enumerate(first.adapters):
            B = np.zeros_like(ref.B)
            A = np.zeros_like(ref.A)
            for w, u in zip(weights, updates):
                a = u.adapters.adapters[l]
                B += w * a.B
                A += w * a.A
            layers.append(LoRAAdapter(ref.layer_id, B, A))
        return AdapterSet(tuple(layers), first.nominal_rank)
    if mode == "dense":
        dense_mean = None
        for w, u in zip(weights, updates):
            d = u.adapters.dense()
            if dense_mean is None:
                dense_mean = [w * m for m in d]
            else:
                dense_mean = [acc + w * m for acc, m in zip(dense_mean, d)]
        return reinit_at_rank(dense_mean, first.nominal_rank)
    raise ParameterError(f"unknown aggregation mode: {mode}")


def accumulated_gradient(local: AdapterSet, global_prev: AdapterSet) -> list:
    """Per-layer dense displacement of a client from the distributed global."""
    if local.shapes() != global_prev.shapes():
        raise ShapeError("adapter layer shapes differ between local and global")
    return [dl - dg for dl, dg in zip(local.dense(), global_prev.dense())]


def sensitivity(local_dense, grad) -> float:
    """Magnitude-sum of the elementwise weight-gradient product."""
    if len(local_dense) != len(grad):
        raise ShapeError("layer count mismatch")
    total = 0.0
    for d, g in zip(local_dense, grad):
        if d.shape != g.shape:
            raise ShapeError(f"layer shape mismatch: {d.shape} vs {g.shape}")
        total += float(np.sum(np.abs(d * g)))
    return total


def normalize_sensitivities(values) -> np.ndarray:
    """Sensitivities to weights summing to 1; all-zero input falls back to uniform."""
    u = np.asarray(values, dtype=np.float64)
    if np.any(u < 0):
        raise InvariantError("sensitivities must be nonnegative")
    total = u.sum()
    if total == 0:
        return np.full(len(u), 1.0 / len(u))
    return u / total


def pool_gradients(grads_by_client, alpha):
    """Sensitivity-weighted positive and negative pooled components per layer.

    Each client's gradient splits exactly as relu(g) - relu(-g) = g; pooling
    keeps the two signs separate so later cancellation is observable.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if abs(alpha.sum() - 1.0) > 1e-12:
        raise InvariantError(f"weights must sum to 1, got {alpha.sum()!r}")
    if len(alpha) != len(grads_by_client):
        raise InputError("one weight per client required")
    n_layers = len(grads_by_client[0])
    pos = [np.zeros_like(g) for g in grads_by_client[0]]
    neg = [np.zeros_like(g) for g in grads_by_client[0]]
    for a, grads in zip(alpha, grads_by_client):
        if len(grads) != n_layers:
            raise ShapeError("layer count mismatch across clients")
        for l, g in enumerate(grads):
            pos[l] += a * relu(g)
            neg[l] -= a * relu(-g)
    return pos, neg


def ema_update(prev, current, theta: float):
    """EMA with first-observation initialization: absent prev passes current through."""
    if not 0.0 <= theta < 1.0:
        raise ParameterError(f"theta must lie in [0, 1), got {theta}")
    current = np.asarray(current, dtype=np.float64)
    if prev is None:
        return current.copy()
    prev = np.asarray(prev, dtype=np.float64)
    if prev.shape != current.shape:
        raise ShapeError(f"shape mismatch: {prev.shape} vs {current.shape}")
    return theta * prev + (1.0 - theta) * current


def gradient_consistency(ema_pos, ema_neg) -> float:
    """Consistency score |P + N| / (|P| + |N|) over all layers, in [0, 1].

    1 means the pooled components never cancel (one-sided gradients); 0 means
    exact cancellation. A zero denominator (no gradient signal at all) is
    defined as full consistency, 1.
    """
    pos_list = ema_pos if isinstance(ema_pos, (list, tuple)) else [ema_pos]
    neg_list = ema_neg if isinstance(ema_neg, (list, tuple)) else [ema_neg]
    if len(pos_list) != len(neg_list):
        raise ShapeError("layer count mismatch")
    num_sq = 0.0
    pos_sq = 0.0
    neg_sq = 0.0
    for p, n in zip(pos_list, neg_list):
        p = np.asarray(p, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        if np.any(p < 0):
            raise InvariantError("positive component has negative entries")
        if np.any(n > 0):
            raise InvariantError("negative component has positive entries")
        num_sq += float(np.sum((p + n) ** 2))
        pos_sq += float(np.sum(p ** 2))
        neg_sq += float(np.sum(n ** 2))
    denom = np.sqrt(pos_sq) + np.sqrt(neg_sq)
    if denom == 0.0:
        return 1.0
    return min(float(np.sqrt(num_sq) / denom), 1.0)


def maybe_dropout(state: ServerState, consistency: float):
    """Apply the stepwise dropout rule given this round's consistency score.

    Drops when the score stopped decreasing, provided a previous score exists,
    the rank floor allows a full subtractor step, and the phase has outlived
    the cooldown. On a drop: fold the phase-final global adapters into the
    accumulator, lower the rank, re-initialize the global adapters from the
    accumulator, and reset the EMA and consistency history.
    """
    fire = (
        state.consistency_prev is not None
        and consistency >= state.consistency_prev
        and state.schedule.can_drop
        and state.rounds_in_phase >= state.cooldown
    )
    if not fire:
        return replace(state,
                       consistency_prev=consistency,
                       rounds_in_phase=state.rounds_in_phase + 1), False
    acc = accumulate(state.accumulated, state.adapters, state.lam)
    schedule = state.schedule.dropped()
    adapters = reinit_at_rank(acc, schedule.current_rank,
                              method=state.reinit_method,
                              sigma=state.reinit_sigma,
                              rng=state.reinit_rng)
    return replace(state, adapters=adapters, schedule=schedule, accumulated=acc,
                   ema_pos=None, ema_neg=None, consistency_prev=None,
                   rounds_in_phase=0), True


def server_round(state: ServerState, updates):
    """One full server round over the collected client updates.

    Pipeline: displacement gradients -> sensitivities -> normalized weights ->
    bilateral pooling -> EMA -> consistency -> aggregation -> dropout decision.
    The aggregate of this round's updates is the phase-final global fed to the
    accumulator if a drop fires; on a drop the adapters distributed next round
    are the re-initialization rather than the aggregate.
    """
    if not updates:
        raise InputError("no client updates")
    rank = state.schedule.current_rank
    for u in updates:
        if u.adapters.nominal_rank != rank:
            raise ProtocolError(
                f"client {u.client_id} trained at rank {u.adapters.nominal_rank}, "
                f"server expects {rank}"
            )
    updates = sorted(updates, key=lambda u: u.client_id)
    grads = [accumulated_gradient(u.adapters, state.adapters) for u in updates]
    sens = [sensitivity(u.adapters.dense(), g) for u, g in zip(updates, grads)]
    alpha = normalize_sensitivities(sens)
    pos, neg = pool_gradients(grads, alpha)
    ema_pos = [ema_update(p, c, state.theta)
               for p, c in zip(state.ema_pos or [None] * len(pos), pos)]
    ema_neg = [ema_update(p, c, state.theta)
               for p, c in zip(state.ema_neg or [None] * len(neg), neg)]
    consistency = gradient_consistency(ema_pos, ema_neg)
    global_adapters = aggregate(updates, state.aggregation)
    new_state = replace(state, adapters=global_adapters,
                        ema_pos=ema_pos, ema_neg=ema_neg)
    new_state, dropped = maybe_dropout(new_state, consistency)
    return new_state, RoundOutcome(consistency, rank, dropped, global_adapters)
