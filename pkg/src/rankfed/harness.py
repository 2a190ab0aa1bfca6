"""Run orchestration: base pretraining, the federated round loop for every
mode, per-round logging, evaluation, and the operation-count budget.

A run is fully determined by (RunConfig, seed): every random draw comes from
a labeled sub-stream of the root seed, client results are collected in
client-id order, and worker-pool size only changes scheduling, never values.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .client import ClientState, LocalTrainConfig, local_train, refresh_importances
from .config import RunConfig
from .data import (Dataset, PartitionPlan, dataset_from_arrays,
                   generate_multilabel, generate_synthetic, load_csv,
                   partition, partition_multilabel, relabeled)
from .errors import InputError, ParameterError, UndefinedMetricError
from .lora import AdapterSet, RankSchedule, init_adapter_set
from .metrics import (CommLedger, accuracy_score, auc, communication_cost,
                      layer_averaged_cka, weight_distance)
from .model import (CLConfig, FrozenBase, OpCounter, forward,
                    full_loss_and_grads)
from .numerics import Rng, softmax
from .server import ClientUpdate, ServerState, server_round

SCHEMA_VERSION = 1

RECORD_FIELDS = (
    "schema_version", "round", "phase", "rank", "consistency", "global_loss",
    "val_metric", "test_metric", "wd_stability", "wd_plasticity",
    "cka_stability", "cka_plasticity", "cumulative_params", "dropped",
)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    phase: int | None
    rank: int | None
    consistency: float | None
    global_loss: float | None
    val_metric: float | None
    test_metric: float | None
    wd_stability: list | None
    wd_plasticity: list | None
    cka_stability: list | None
    cka_plasticity: list | None
    cumulative_params: int
    dropped: bool

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION}
        for name in RECORD_FIELDS[1:]:
            d[name] = getattr(self, name)
        return d


@dataclass
class RunResult:
    config: RunConfig
    records: list
    dataset: Dataset
    plan: PartitionPlan
    base: FrozenBase
    base_checksum: str
    final_adapters: AdapterSet | None
    ledger: CommLedger
    best_val_round: int
    cost_at_best: tuple
    final_metrics: dict
    op_count: int | None = None


def _worker_pool_size() -> int:
    raw = os.environ.get("RANKFED_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _run_client_tasks(task, client_ids):
    workers = _worker_pool_size()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, client_ids))
    else:
        results = [task(cid) for cid in client_ids]
    return sorted(results, key=lambda r: r[0])


# ---------------------------------------------------------------------------
# Data and base construction
# ---------------------------------------------------------------------------

def build_dataset(config: RunConfig, rng: Rng) -> Dataset:
    if config.csv_path:
        x, y, _ = load_csv(config.csv_path, config.label_column)
        return dataset_from_arrays(x, y, rng)
    if config.task == "multiclass":
        return generate_synthetic(config.classes, config.dim, config.n_per_class,
                                  config.separation, rng)
    return generate_multilabel(config.n_samples, config.dim, config.num_labels, rng)


def build_partition(config: RunConfig, dataset: Dataset, rng: Rng) -> PartitionPlan:
    if config.task == "multiclass":
        return partition(dataset, config.num_clients, config.scheme, rng,
                         config.classes_per_client, config.shared_classes)
    return partition_multilabel(dataset, config.num_clients, rng,
                                config.multilabel_skew)


def build_pretrain_dataset(config: RunConfig, dataset: Dataset, rng: Rng) -> Dataset:
    """A sibling task from the same generator family for base pretraining.

    For multiclass data: the same cluster geometry with fresh sample noise and
    a cyclic label shift, so the base learns the domain's structure while the
    federated task still has to relearn the readout. For multilabel data: a
    fresh draw of the same generator. External CSV data has no generator to
    resample, so its pretraining split is the training features themselves
    under the shifted labels.
    """
    if config.csv_path:
        return relabeled(dataset, shift=1)
    if config.task == "multiclass":
        sibling = generate_synthetic(config.classes, config.dim,
                                     config.n_per_class, config.separation,
                                     rng, class_means=dataset.class_means)
        return relabeled(sibling, shift=1)
    return generate_multilabel(config.n_samples, config.dim, config.num_labels, rng)


def pretrain_base(dataset: Dataset, epochs: int, rng: Rng,
                  eta: float = 0.05, batch_size: int = 32,
                  hidden=(32,)) -> FrozenBase:
    """Train all base weights on the given dataset, then freeze them.

    With epochs=0 the base is the frozen random initialization.
    """
    if len(dataset.train_x) == 0:
        raise InputError("pretraining dataset is empty")
    dims = [dataset.dim, *hidden, dataset.num_classes]
    weights, biases = [], []
    for l in range(len(dims) - 1):
        h2, h1 = dims[l], dims[l + 1]
        weights.append(rng.substream("base-init", l).normal(h1, h2, 1.0 / np.sqrt(h2)))
        biases.append(np.zeros(h1))
    x, y = dataset.train_x, dataset.train_y
    n = len(x)
    for epoch in range(epochs):
        order = rng.substream("pretrain-shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, w_grads, b_grads = full_loss_and_grads(weights, biases,
                                                      x[idx], y[idx], dataset.task)
            for l in range(len(weights)):
                weights[l] -= eta * w_grads[l]
                biases[l] -= eta * b_grads[l]
    return FrozenBase(tuple(weights), tuple(biases))


def linear_probe_accuracy(train_x, train_y, test_x, test_y, num_classes: int,
                          epochs: int = 300, eta: float = 0.1) -> float:
    """Accuracy of a full-batch softmax-regression probe on fixed features."""
    d = train_x.shape[1]
    w = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    n = len(train_x)
    for _ in range(epochs):
        logits = train_x @ w.T + b
        p = softmax(logits)
        p[np.arange(n), train_y] -= 1.0
        p /= n
        w -= eta * (p.T @ train_x)
        b -= eta * p.sum(axis=0)
    pred = np.argmax(test_x @ w.T + b, axis=1)
    return accuracy_score(pred, test_y)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate(base: FrozenBase, adapters, split, task_mode: str = "multiclass") -> dict:
    """Metrics of the adapted model on a (features, labels) split.

    Multiclass: accuracy of argmax predictions. Multilabel: per-label ROC AUC
    of the raw logits plus the macro mean; labels whose split contains a
    single class are reported as undefined (None) rather than failing the
    whole evaluation.
    """
    x, y = split
    if len(x) == 0:
        raise InputError("empty evaluation split")
    logits, _ = forward(base, adapters, x)
    if task_mode == "multiclass":
        return {"accuracy": accuracy_score(np.argmax(logits, axis=1), y)}
    if task_mode != "multilabel":
        raise ParameterError(f"unknown task mode: {task_mode}")
    per_label, undefined = [], []
    for l in range(logits.shape[1]):
        try:
            per_label.append(auc(logits[:, l], y[:, l]))
        except UndefinedMetricError:
            per_label.append(None)
            undefined.append(l)
    defined = [v for v in per_label if v is not None]
    return {
        "auc_per_label": per_label,
        "auc_mean": float(np.mean(defined)) if defined else None,
        "undefined_labels": undefined,
    }


def _metric_scalar(metrics: dict) -> float | None:
    return metrics.get("accuracy", metrics.get("auc_mean"))


# ---------------------------------------------------------------------------
# Federated loop
# ---------------------------------------------------------------------------

def _participants(config: RunConfig, rng: Rng, round_index: int):
    s = config.num_clients
    k = max(1, math.ceil(config.participation * s))
    if k >= s:
        return list(range(s))
    perm = rng.substream("participation", round_index).permutation(s)
    return sorted(int(c) for c in perm[:k])


def _adapter_mode_run(config: RunConfig, root: Rng, dataset: Dataset,
                      plan: PartitionPlan, base: FrozenBase, probe_x) -> RunResult:
    if config.mode == "fixed-rank-lora":
        schedule = RankSchedule(config.r_init, config.r_init, config.subtractor)
        cl = CLConfig("none")
    else:
        schedule = RankSchedule(config.r_init, config.r_min, config.subtractor)
        cl = CLConfig(config.cl_method, config.mu1, config.mu2,
                      config.lwf_temperature)
    adapters0 = init_adapter_set(base.layer_shapes(), schedule.current_rank,
                                 config.sigma_init, root.substream("adapters"))
    server = ServerState(
        adapters=adapters0, schedule=schedule, theta=config.theta,
        lam=config.lam, cooldown=config.cooldown,
        aggregation=config.aggregation, reinit_method=config.reinit,
        reinit_sigma=config.sigma_init,
        reinit_rng=root.substream("reinit") if config.reinit == "gaussian" else None,
    )
    clients = [
        ClientState(
            client_id=cid, base=base,
            features=dataset.train_x[idx], labels=dataset.train_y[idx],
            cl=cl, rng=root.substream("client", cid), task=dataset.task,
        )
        for cid, idx in enumerate(plan.client_indices)
    ]

    n_participants = max(1, math.ceil(config.participation * config.num_clients))
    ledger = CommLedger(n_participants, config.bytes_per_param)
    records = []
    op_total = 0 if config.count_ops else None

    for t in range(1, config.rounds + 1):
        incoming = server.adapters
        stability = server.accumulated
        phase = server.schedule.phase
        participant_ids = _participants(config, root, t)

        def client_task(cid):
            state = clients[cid]
            if state.cl.active and state.cl.method in ("ewc", "mas"):
                anchor_cfg = stability if stability is not None else incoming
                refresh_importances(state, base, anchor_cfg, phase)
            counter = OpCounter() if config.count_ops else None
            adapters, losses = local_train(
                state, incoming, stability,
                LocalTrainConfig(config.local_epochs,
                                 config.eta * config.eta_decay ** (t - 1),
                                 config.batch_size, round_index=t),
                counter,
            )
            ops = counter.multiplies if counter is not None else 0
            return cid, adapters, losses, ops

        results = _run_client_tasks(client_task, participant_ids)
        updates = [ClientUpdate(cid, adp, clients[cid].shard_size)
                   for cid, adp, _, _ in results]
        if op_total is not None:
            op_total += sum(r[3] for r in results)

        ledger.add_round(incoming.param_count())
        server, outcome = server_round(server, updates)

        sizes = np.array([clients[cid].shard_size for cid, *_ in results],
                         dtype=np.float64)
        w = sizes / sizes.sum()
        last_losses = [r[2][-1] if r[2] else None for r in results]
        global_loss = (float(np.dot(w, [l for l in last_losses]))
                       if all(l is not None for l in last_losses) else None)

        val = evaluate(base, outcome.global_adapters,
                       (dataset.val_x, dataset.val_y), dataset.task)
        test = evaluate(base, outcome.global_adapters,
                        (dataset.test_x, dataset.test_y), dataset.task)

        incoming_dense = incoming.dense()
        reps_incoming = forward(base, incoming, probe_x)[1]
        reps_stability = forward(base, stability, probe_x)[1] if stability is not None else None
        wd_sta, wd_pla, cka_sta, cka_pla = [], [], [], []
        for cid, adp, _, _ in results:
            local_dense = adp.dense()
            wd_pla.append(weight_distance(local_dense, incoming_dense))
            reps_local = forward(base, adp, probe_x)[1]
            cka_pla.append(layer_averaged_cka(reps_local, reps_incoming))
            if stability is not None:
                wd_sta.append(weight_distance(local_dense, stability))
                cka_sta.append(layer_averaged_cka(reps_local, reps_stability))

        records.append(RoundRecord(
            round=t, phase=phase, rank=outcome.rank,
            consistency=outcome.consistency, global_loss=global_loss,
            val_metric=_metric_scalar(val), test_metric=_metric_scalar(test),
            wd_stability=wd_sta or None, wd_plasticity=wd_pla,
            cka_stability=cka_sta or None, cka_plasticity=cka_pla,
            cumulative_params=ledger.cumulative_transmitted()[-1],
            dropped=outcome.dropped,
        ))
        final_adapters = outcome.global_adapters
        final_metrics = test

    best = max(range(len(records)),
               key=lambda i: (records[i].val_metric
                              if records[i].val_metric is not None else -np.inf))
    return RunResult(
        config=config, records=records, dataset=dataset, plan=plan, base=base,
        base_checksum=base.checksum(), final_adapters=final_adapters,
        ledger=ledger, best_val_round=best + 1,
        cost_at_best=communication_cost(ledger, best + 1),
        final_metrics=final_metrics, op_count=op_total,
    )


def _forward_raw(weights, biases, x):
    h = x
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w.T + b
        h = np.tanh(z) if l < len(weights) - 1 else z
    return h


def _fedavg_run(config: RunConfig, root: Rng, dataset: Dataset,
                plan: PartitionPlan, base: FrozenBase, probe_x) -> RunResult:
    global_w = [w.copy() for w in base.weights]
    global_b = [b.copy() for b in base.biases]
    param_count = sum(w.size + b.size for w, b in zip(global_w, global_b))
    shards = [(dataset.train_x[idx], dataset.train_y[idx])
              for idx in plan.client_indices]
    client_rngs = [root.substream("client", cid)
                   for cid in range(config.num_clients)]

    n_participants = max(1, math.ceil(config.participation * config.num_clients))
    ledger = CommLedger(n_participants, config.bytes_per_param)
    records = []
    op_total = 0 if config.count_ops else None

    for t in range(1, config.rounds + 1):
        participant_ids = _participants(config, root, t)

        def client_task(cid):
            x, y = shards[cid]
            w = [m.copy() for m in global_w]
            b = [v.copy() for v in global_b]
            eta = config.eta * config.eta_decay ** (t - 1)
            counter = OpCounter() if config.count_ops else None
            losses = []
            for epoch in range(config.local_epochs):
                order = client_rngs[cid].substream(
                    "round", t, "epoch", epoch, "shuffle").permutation(len(x))
                batch_losses = []
                for start in range(0, len(x), config.batch_size):
                    idx = order[start:start + config.batch_size]
                    loss, wg, bg = full_loss_and_grads(w, b, x[idx], y[idx],
                                                       dataset.task, counter)
                    for l in range(len(w)):
                        w[l] -= eta * wg[l]
                        b[l] -= eta * bg[l]
                    batch_losses.append(loss)
                losses.append(float(np.mean(batch_losses)))
            ops = counter.multiplies if counter is not None else 0
            return cid, (w, b), losses, ops

        results = _run_client_tasks(client_task, participant_ids)
        if op_total is not None:
            op_total += sum(r[3] for r in results)
        sizes = np.array([len(shards[cid][0]) for cid, *_ in results],
                         dtype=np.float64)
        weights = sizes / sizes.sum()
        global_w = [np.zeros_like(m) for m in global_w]
        global_b = [np.zeros_like(v) for v in global_b]
        for wt, (_, (w, b), _, _) in zip(weights, results):
            for l in range(len(global_w)):
                global_w[l] += wt * w[l]
                global_b[l] += wt * b[l]

        ledger.add_round(param_count)
        last_losses = [r[2][-1] if r[2] else None for r in results]
        global_loss = (float(np.dot(weights, [l for l in last_losses]))
                       if all(l is not None for l in last_losses) else None)

        def _eval(split):
            logits = _forward_raw(global_w, global_b, split[0])
            if dataset.task == "multiclass":
                return accuracy_score(np.argmax(logits, axis=1), split[1])
            vals = []
            for l in range(logits.shape[1]):
                try:
                    vals.append(auc(logits[:, l], split[1][:, l]))
                except UndefinedMetricError:
                    pass
            return float(np.mean(vals)) if vals else None

        records.append(RoundRecord(
            round=t, phase=None, rank=None, consistency=None,
            global_loss=global_loss,
            val_metric=_eval((dataset.val_x, dataset.val_y)),
            test_metric=_eval((dataset.test_x, dataset.test_y)),
            wd_stability=None, wd_plasticity=None,
            cka_stability=None, cka_plasticity=None,
            cumulative_params=ledger.cumulative_transmitted()[-1],
            dropped=False,
        ))

    best = max(range(len(records)),
               key=lambda i: (records[i].val_metric
                              if records[i].val_metric is not None else -np.inf))
    metric_key = "accuracy" if dataset.task == "multiclass" else "auc_mean"
    return RunResult(
        config=config, records=records, dataset=dataset, plan=plan, base=base,
        base_checksum=base.checksum(), final_adapters=None, ledger=ledger,
        best_val_round=best + 1,
        cost_at_best=communication_cost(ledger, best + 1),
        final_metrics={metric_key: records[-1].test_metric}, op_count=op_total,
    )


def run_federated(config: RunConfig) -> RunResult:
    """Execute a full federated run for the configured mode.

    The frozen base's checksum is verified after the round loop; a mutated
    base aborts the run.
    """
    config.validate()
    root = Rng(config.seed)
    dataset = build_dataset(config, root.substream("data"))
    plan = build_partition(config, dataset, root.substream("partition"))
    pretrain_ds = build_pretrain_dataset(config, dataset,
                                         root.substream("pretrain-data"))
    base = pretrain_base(pretrain_ds, config.pretrain_epochs,
                         root.substream("pretrain"), config.pretrain_eta,
                         config.pretrain_batch, config.hidden)
    checksum_before = base.checksum()

    n_val = len(dataset.val_x)
    k = min(config.probe_samples, n_val)
    probe_idx = root.substream("probe").permutation(n_val)[:k]
    probe_x = dataset.val_x[probe_idx]

    if config.mode == "fedavg-full":
        result = _fedavg_run(config, root, dataset, plan, base, probe_x)
    else:
        result = _adapter_mode_run(config, root, dataset, plan, base, probe_x)

    if base.checksum() != checksum_before:
        raise InputError("frozen base was mutated during the run")
    return result


# ---------------------------------------------------------------------------
# Operation-count budget
# ---------------------------------------------------------------------------

def op_count_budget(config: RunConfig) -> int:
    """Closed-form multiply estimate T * S * E * psi * batch.

    ``psi`` counts per-sample forward+backward multiplies from the layer
    dimensions and the initial rank (capped per layer). The formula models one
    representative mini-batch per epoch, so instrumented comparisons are made
    on runs whose shards are within a small factor of the batch size.
    """
    config.validate()
    out_dim = config.classes if config.task == "multiclass" else config.num_labels
    dims = [config.dim, *config.hidden, out_dim]
    psi = 0
    for l in range(len(dims) - 1):
        h2, h1 = dims[l], dims[l + 1]
        if config.mode == "fedavg-full":
            psi += 3 * h1 * h2
        else:
            r = min(config.r_init, h1, h2)
            psi += 2 * h1 * h2 + 3 * r * (h1 + h2)
    participants = max(1, math.ceil(config.participation * config.num_clients))
    return (config.rounds * participants * config.local_epochs
            * psi * config.batch_size)


# ---------------------------------------------------------------------------
# Record serialization
# ---------------------------------------------------------------------------

def records_jsonl(records) -> str:
    return "".join(json.dumps(r.to_dict(), sort_keys=False) + "\n" for r in records)


def write_records_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        fh.write(records_jsonl(records))


def write_summary_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            d = r.to_dict()
            row = []
            for name in RECORD_FIELDS:
                v = d[name]
                if v is None:
                    row.append("")
                elif isinstance(v, list):
                    row.append(json.dumps(v))
                else:
                    row.append(v)
            writer.writerow(row)
