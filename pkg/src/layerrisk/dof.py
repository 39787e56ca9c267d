"""Per-layer Degrees of Freedom from batch activations.

The activations of one probe layer over a batch form ``H`` (k_l x m). After
removing the per-feature batch mean, ``H`` is compressed with a Gaussian
matrix ``R`` (k_l x r_l), the r_l x r_l covariance of the projection is
eigendecomposed, and the DoF is the number of leading eigenvalues needed to
reach a fraction ``tau`` of the total variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import EPS_VAR, EigenSpectrum, SeededRng, eig_symmetric, sample_gaussian

DEFAULT_TAU = 0.95
DEFAULT_PROJECTION_FACTOR = 0.1


def projection_size(k_l: int, factor: float = DEFAULT_PROJECTION_FACTOR) -> int:
    """``max(2, ceil(factor * k_l))``; rounded first so 0.1 * 200 gives 20, not 21."""
    return max(2, math.ceil(round(factor * k_l, 9)))


@dataclass(frozen=True)
class LayerActivationMatrix:
    layer_id: str
    H: np.ndarray   # (k_l, m), one column per sample
    epoch: int = 0


@dataclass(frozen=True)
class DoFEstimate:
    layer_id: str
    epoch: int
    dof: int
    spectrum: EigenSpectrum
    tau: float
    r_l: int
    degenerate: bool = False


def centralize(H: np.ndarray) -> np.ndarray:
    """Subtract the mean column from every column of ``H``."""
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise DimensionError(f"expected a k_l x m matrix, got shape {H.shape}")
    if H.shape[1] < 2:
        raise ContractError("centralization needs at least two samples (m >= 2)")
    return H - H.mean(axis=1, keepdims=True)


def estimate_dof(H, tau: float, rng: SeededRng, *, layer_id: str = "", epoch: int = 0,
                 projection_factor: float = DEFAULT_PROJECTION_FACTOR,
                 eig_method: str = "lapack") -> DoFEstimate:
    if isinstance(H, LayerActivationMatrix):
        layer_id, epoch, H = H.layer_id, H.epoch, H.H
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    centered = centralize(H)
    k_l, m = centered.shape
    r_l = projection_size(k_l, projection_factor)
    R = sample_gaussian(rng, k_l, r_l)
    projected = R.T @ centered
    cov = projected @ projected.T / m
    spectrum = eig_symmetric(cov, method=eig_method)
    degenerate = spectrum.total <= EPS_VAR
    spectrum = EigenSpectrum(spectrum.eigenvalues, spectrum.source_dim, degenerate)
    return DoFEstimate(layer_id=layer_id, epoch=epoch, dof=spectrum.count_to_mass(tau),
                       spectrum=spectrum, tau=tau, r_l=r_l, degenerate=degenerate)


def dof_stream(seed: int, layer_id: str, epoch: int) -> SeededRng:
    return SeededRng(seed).child("dof", layer_id, epoch)


def layer_activations(model, probe_batch: np.ndarray, layers, epoch: int = 0) -> dict[str, LayerActivationMatrix]:
    """One forward pass collecting each requested probe as a k_l x m matrix."""
    if not layers:
        return {}
    deepest = max(layers, key=lambda name: model._probe_index(name))
    fp = model.forward(probe_batch, stop_at=deepest, track_params=False)
    m = probe_batch.shape[0]
    return {name: LayerActivationMatrix(name, fp.activations[name].value.reshape(m, -1).T, epoch)
            for name in layers}


def run_dof_schedule(model, probe_batch: np.ndarray, layers, tau: float, epoch: int, *,
                     seed: int = 0, tau_overrides: dict | None = None,
                     projection_factor: float = DEFAULT_PROJECTION_FACTOR) -> list[DoFEstimate]:
    """DoF of every requested probe layer on a fixed probe batch for one epoch."""
    tau_overrides = tau_overrides or {}
    acts = layer_activations(model, probe_batch, list(dict.fromkeys(layers)), epoch)
    return [estimate_dof(acts[name], tau_overrides.get(name, tau), dof_stream(seed, name, epoch),
                         projection_factor=projection_factor)
            for name in layers]
