"""Numerical substrate: float64 arrays, seeded Gaussian streams, symmetric eigensolvers.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here enforce shapes and finiteness at the boundaries where the estimators
depend on them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

#: Relative floor below which PSD eigenvalues are treated as zero.
EPS_PSD = 1e-9
#: Absolute total-variance floor below which a spectrum is degenerate.
EPS_VAR = 1e-12


def as_tensor(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise DimensionError("tensors must have at least one dimension")
    arr = np.ascontiguousarray(arr)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tensor contains NaN or Inf")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def derive_stream(*parts) -> int:
    """Map a tuple of labels (ints/strings) to a stable 63-bit stream id.

    Uses BLAKE2b over the ``repr`` of the parts so the id is identical
    across processes, platforms and Python hash seeds.
    """
    digest = hashlib.blake2b(repr(parts).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class SeededRng:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Backed by the counter-based Philox4x64 generator keyed through
    ``numpy.random.SeedSequence(seed, spawn_key=(stream_id,))``. Each call to
    :meth:`generator` restarts the stream from its beginning.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *parts) -> "SeededRng":
        return SeededRng(self.seed, derive_stream(self.stream_id, *parts))


def sample_gaussian(rng: SeededRng, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise DimensionError(f"invalid sample shape ({rows}, {cols})")
    return rng.generator().standard_normal((rows, cols))


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigenvalues sorted non-increasing, tiny negatives clamped to zero."""

    eigenvalues: np.ndarray
    source_dim: int
    degenerate: bool = field(default=False, compare=False)

    @property
    def total(self) -> float:
        return float(np.sum(self.eigenvalues))

    def cumulative_ratio(self) -> np.ndarray:
        total = self.total
        if total <= 0:
            return np.zeros_like(self.eigenvalues)
        return np.cumsum(self.eigenvalues) / total

    def count_to_mass(self, tau: float, eps_var: float = EPS_VAR) -> int:
        """Smallest r whose leading r eigenvalues hold at least ``tau`` of the mass.

        Returns 0 when the total mass is at most ``eps_var``.
        """
        if not 0.0 < tau < 1.0:
            raise ContractError(f"tau must lie in (0, 1), got {tau}")
        if self.total <= eps_var:
            return 0
        ratio = self.cumulative_ratio()
        hits = np.nonzero(ratio >= tau)[0]
        # rounding can leave the last partial sum a hair under tau
        return int(hits[0]) + 1 if hits.size else len(ratio)


def _check_symmetric(m: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionError(f"expected a non-empty square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix contains NaN or Inf")
    scale = float(np.max(np.abs(m))) if m.size else 0.0
    asym = float(np.max(np.abs(m - m.T)))
    if asym > tol * max(scale, np.finfo(float).tiny):
        raise ContractError(f"matrix is not symmetric (max |m - m^T| = {asym:.3e})")
    return 0.5 * (m + m.T)


def jacobi_eigenvalues(a: np.ndarray, max_sweeps: int = 60, tol: float = 1e-15) -> np.ndarray:
    """Cyclic Jacobi rotations on a symmetric matrix; returns unsorted eigenvalues.

    Sweeps over all off-diagonal pairs until the off-diagonal Frobenius norm
    falls below ``tol`` times the matrix norm.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0.0:
        return np.diag(a).copy()
    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            return np.diag(a).copy()
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                # after a few sweeps, drop elements that no longer change the diagonal
                if sweep > 3 and abs(a[p, p]) + g == abs(a[p, p]) and abs(a[q, q]) + g == abs(a[q, q]):
                    a[p, q] = a[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
    raise NumericalError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps (n={n})")


def eig_symmetric(m: np.ndarray, method: str = "lapack") -> EigenSpectrum:
    """Eigenvalues of a symmetric matrix, sorted descending.

    ``method`` is ``"lapack"`` (``numpy.linalg.eigvalsh``) or ``"jacobi"``.
    Negative eigenvalues within ``EPS_PSD * max|lambda|`` of zero are clamped.
    """
    sym = _check_symmetric(m)
    if method == "lapack":
        vals = np.linalg.eigvalsh(sym)
    elif method == "jacobi":
        vals = jacobi_eigenvalues(sym)
    else:
        raise ContractError(f"unknown eigensolver {method!r}")
    vals = np.sort(vals)[::-1].copy()
    floor = EPS_PSD * float(np.max(np.abs(vals)))
    vals[(vals < 0) & (vals >= -floor)] = 0.0
    return EigenSpectrum(eigenvalues=vals, source_dim=sym.shape[0])
