"""Dense float64 kernels and the deterministic random stream.

Everything downstream (adapters, models, the federated loop) is built on the
handful of operations in this module. All values are 2-D float64 numpy arrays
("matrices"); operations never mutate their inputs.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import InputError, NumericError, ParameterError, ShapeError

Matrix = np.ndarray


def as_matrix(values, name: str = "matrix") -> Matrix:
    """Coerce to a 2-D float64 array, rejecting other ranks."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def ensure_finite(m: np.ndarray, name: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} contains non-finite entries")
    return m


class Rng:
    """Counter-based deterministic random stream with labeled sub-streams.

    Built on Philox so that a (seed, label-path) pair always yields the same
    stream, independent of platform, draw order elsewhere, or thread
    scheduling. Sub-streams are derived by hashing the label path into a new
    Philox key, so e.g. ``root.substream("client", 3, "round", 17)`` is
    reproducible without ever touching the root stream's state.
    """

    def __init__(self, seed: int, _key: bytes | None = None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        if _key is None:
            _key = hashlib.blake2b(
                self.seed.to_bytes(8, "little"), digest_size=16
            ).digest()
        self._key = _key
        self._gen = np.random.Generator(
            np.random.Philox(key=int.from_bytes(_key, "little"))
        )

    def substream(self, *labels) -> "Rng":
        """Derive an independent stream for the given label path."""
        tag = "/".join(str(l) for l in labels).encode("utf-8")
        key = hashlib.blake2b(tag, key=self._key, digest_size=16).digest()
        return Rng(self.seed, _key=key)

    def normal(self, rows: int, cols: int, sigma: float = 1.0) -> Matrix:
        return self._gen.standard_normal((rows, cols)) * sigma

    def normal_vector(self, n: int, sigma: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(n) * sigma

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, size=None):
        return self._gen.random(size)


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def gaussian_matrix(rows: int, cols: int, sigma: float, rng: Rng) -> Matrix:
    """i.i.d. N(0, sigma^2) matrix drawn from the given stream."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if rows < 1 or cols < 1:
        raise ParameterError(f"matrix dimensions must be positive, got {rows}x{cols}")
    return rng.normal(rows, cols, sigma)


def relu(m: Matrix) -> Matrix:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def frobenius_norm(m: Matrix) -> float:
    return float(np.sqrt(np.sum(np.square(np.asarray(m, dtype=np.float64)))))


def softmax(logits: Matrix) -> Matrix:
    """Row-wise softmax, stabilized by max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Matrix, labels: np.ndarray):
    """Mean cross-entropy over the batch and its exact logit gradient.

    Returns ``(loss, grad)`` where ``grad[i] = (softmax(logits)[i] - onehot[i]) / batch``.
    """
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if n == 0:
        raise InputError("empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


def svd_truncate(m: Matrix, r: int):
    """Top-r singular triplets (U_r, S_r, V_r) with m ~= U_r @ diag(S_r) @ V_r.T.

    The reconstruction is the best Frobenius rank-r approximation of ``m``.
    """
    m = as_matrix(m)
    if r < 1 or r > min(m.shape):
        raise ParameterError(f"rank {r} out of range for shape {m.shape}")
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    return u[:, :r].copy(), s[:r].copy(), vh[:r].T.copy()
