"""Shared test helpers: random model construction and finite-difference oracles."""

import numpy as np
import pytest

from rankfed.lora import AdapterSet, LoRAAdapter, init_adapter_set
from rankfed.model import random_base
from rankfed.numerics import Rng


@pytest.fixture
def rng():
    return Rng(12345)


def make_model(rng, dims=(5, 7, 4), rank=3, batch=6, sigma=0.05, warm=True):
    """Small base + adapter set + batch; warm adapters have nonzero B."""
    base = random_base(list(dims), rng.substream("base"))
    adapters = init_adapter_set(base.layer_shapes(), rank, sigma,
                                rng.substream("adapters"))
    if warm:
        warmed = []
        for a in adapters:
            warmed.append(LoRAAdapter(
                a.layer_id,
                a.B + rng.substream("warm-b", a.layer_id).normal(*a.B.shape, sigma),
                a.A + rng.substream("warm-a", a.layer_id).normal(*a.A.shape, sigma),
            ))
        adapters = AdapterSet(tuple(warmed), adapters.nominal_rank)
    x = rng.substream("x").normal(batch, dims[0])
    y = rng.substream("y").integers(0, dims[-1], batch)
    return base, adapters, x, np.asarray(y)


def perturbed(adapters, layer, which, idx, eps):
    """Copy of the adapter set with one factor entry shifted by eps."""
    out = []
    for a in adapters:
        if a.layer_id == layer:
            B, A = a.B.copy(), a.A.copy()
            if which == "B":
                B[idx] += eps
            else:
                A[idx] += eps
            out.append(LoRAAdapter(a.layer_id, B, A))
        else:
            out.append(a)
    return AdapterSet(tuple(out), adapters.nominal_rank)


def fd_factor_grads(loss_fn, adapters, step=1e-5):
    """Central finite differences of loss_fn w.r.t. every adapter factor entry."""
    grads = []
    for a in adapters:
        gB = np.zeros_like(a.B)
        gA = np.zeros_like(a.A)
        for which, g in (("B", gB), ("A", gA)):
            for idx in np.ndindex(g.shape):
                up = loss_fn(perturbed(adapters, a.layer_id, which, idx, step))
                dn = loss_fn(perturbed(adapters, a.layer_id, which, idx, -step))
                g[idx] = (up - dn) / (2 * step)
        grads.append((gB, gA))
    return grads


def max_rel_err(analytic, fd, floor=1e-6):
    """Worst-entry relative error between analytic and FD gradient lists."""
    worst = 0.0
    for (aB, aA), (fB, fA) in zip(analytic, fd):
        for a, f in ((aB, fB), (aA, fA)):
            denom = np.maximum(np.abs(f), floor)
            worst = max(worst, float(np.max(np.abs(a - f) / denom)))
    return worst
