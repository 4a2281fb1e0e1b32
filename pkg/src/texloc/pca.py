"""PCA basis for compressing 128-d descriptors to ``k`` dimensions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import DESCRIPTOR_DIM


@dataclass(frozen=True)
class DescriptorBasis:
    mean: np.ndarray
    components: np.ndarray  # (k, 128), orthonormal rows
    eigenvalues: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def __eq__(self, other):
        if not isinstance(other, DescriptorBasis):
            return NotImplemented
        return (np.array_equal(self.mean, other.mean)
                and np.array_equal(self.components, other.components)
                and np.array_equal(self.eigenvalues, other.eigenvalues))

    __hash__ = None


def fit_basis(descriptors, k: int) -> DescriptorBasis:
    """Top-``k`` principal directions of ``descriptors``, largest variance first.

    Each component's sign is fixed so that its largest-magnitude entry is
    positive, which makes the basis reproducible across LAPACK builds.
    """
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != DESCRIPTOR_DIM:
        raise ValueError(f"descriptors must be (n, {DESCRIPTOR_DIM})")
    if not 1 <= k <= DESCRIPTOR_DIM:
        raise ValueError(f"k must be in 1..{DESCRIPTOR_DIM}")
    if len(X) < k:
        raise ValueError(f"need at least k={k} descriptors, got {len(X)}")
    mean = X.mean(axis=0)
    Xc = X - mean
    scatter = Xc.T @ Xc / max(len(X) - 1, 1)
    evals, evecs = np.linalg.eigh(scatter)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T.copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivot])
    comps *= signs[:, None]
    return DescriptorBasis(mean, comps, np.clip(evals[order], 0.0, None))


def project(basis: DescriptorBasis, d) -> np.ndarray:
    """``components @ (d - mean)`` for one descriptor or a stack of them."""
    d = np.asarray(d, dtype=np.float64)
    if d.shape[-1] != basis.mean.shape[0]:
        raise ValueError(f"descriptor dim {d.shape[-1]} != basis input dim {basis.mean.shape[0]}")
    return ((d - basis.mean) @ basis.components.T).astype(np.float32)


def unproject(basis: DescriptorBasis, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z @ basis.components + basis.mean
