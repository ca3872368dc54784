"""Dense Laplace-Beltrami eigenbasis and heat kernel signatures."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

MAX_DENSE_VERTICES = 5000


@dataclass(frozen=True)
class Eigenbasis:
    values: np.ndarray
    vectors: np.ndarray

    @property
    def k(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class HKSTarget:
    times: np.ndarray
    fields: np.ndarray
    raw: np.ndarray
    k: int


def hks_times(n: int = 16, lo: float = 0.01, hi: float = 1.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def compute_eigenbasis(ops, k: int | None = None) -> Eigenbasis:
    """Smallest ``k`` solutions of ``L phi = lambda M phi``, M-orthonormal, ascending.

    Solved densely through the symmetric form ``M^-1/2 L M^-1/2``.
    """
    n = ops.n_vertices
    if n > MAX_DENSE_VERTICES:
        raise ValueError(f"mesh too large for the dense eigensolver ({n} > {MAX_DENSE_VERTICES})")
    k = n if k is None else int(k)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    inv_sqrt = 1.0 / np.sqrt(ops.mass_vertex)
    A = ops.laplacian.toarray() * inv_sqrt[:, None] * inv_sqrt[None, :]
    A = 0.5 * (A + A.T)
    vals, vecs = linalg.eigh(A, subset_by_index=(0, k - 1))
    vecs = vecs * inv_sqrt[:, None]
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[idx, np.arange(k)])
    return Eigenbasis(vals, vecs)


def heat_kernel_signature(eigen: Eigenbasis, times) -> np.ndarray:
    """Raw ``sum_k exp(-lambda_k t) phi_k(x)^2``, shape ``(V, len(times))``."""
    times = np.asarray(times, dtype=np.float64)
    decay = np.exp(-np.outer(np.maximum(eigen.values, 0.0), times))
    return (eigen.vectors ** 2) @ decay


def normalize_channels(x) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    return np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.0)


def compute_hks(ops, eigen: Eigenbasis | None = None, times=None) -> HKSTarget:
    """Heat kernel signatures, each channel min-max normalized to [0, 1]."""
    if times is None:
        times = hks_times()
    if eigen is None:
        eigen = compute_eigenbasis(ops)
    raw = heat_kernel_signature(eigen, times)
    return HKSTarget(np.asarray(times, dtype=np.float64), normalize_channels(raw), raw, eigen.k)
