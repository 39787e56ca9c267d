"""Jacobian rank of a probe layer with respect to the network input.

For ``k`` Gaussian directions ``v_j`` in the layer's output space the input
gradients of ``s_j = <h, v_j>`` are summed over the batch and stacked into
``U`` (D x k). The rank estimate is the number of leading eigenvalues of the
Gram matrix ``U^T U`` that hold a fraction ``tau`` of its trace.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .dof import DEFAULT_PROJECTION_FACTOR, projection_size
from .errors import ContractError, DimensionError
from .tensor import EPS_VAR, EigenSpectrum, SeededRng, eig_symmetric, sample_gaussian

# rough cap (in float64 elements) on the stacked cotangents of one parallel chunk
PARALLEL_BUDGET = 2 ** 23


@dataclass(frozen=True)
class ProbeSet:
    layer_id: str
    vectors: np.ndarray   # (k_l, k)

    @property
    def k(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class RankEstimate:
    layer_id: str
    epoch: int
    rank: int
    spectrum: EigenSpectrum
    tau: float
    k: int
    degenerate: bool = False


def make_probes(layer_id: str, k_l: int, rng: SeededRng,
                projection_factor: float = DEFAULT_PROJECTION_FACTOR, k: int | None = None) -> ProbeSet:
    k = projection_size(k_l, projection_factor) if k is None else k
    return ProbeSet(layer_id, sample_gaussian(rng, k_l, k))


def _is_model(model) -> bool:
    return hasattr(model, "forward")


def probe_gradients(model, batch: np.ndarray, layer_id: str, probes: ProbeSet, *,
                    mode: str = "parallel") -> np.ndarray:
    """Batch-summed input gradients of the probe projections, shape (D, k).

    ``model`` is a :class:`~layerrisk.nn.Model` or any callable mapping an
    input :class:`Variable` of shape (m, ...) to the layer output (m, ...).
    Samples must not interact before the probe layer.

    Column ``j`` is the gradient of ``sum_i <h_i, v_j>`` with respect to the
    batch, summed over the batch axis. ``mode="sequential"`` runs one
    backward pass per column with a per-sample input leaf and serves as the
    reference. ``mode="parallel"`` pushes a stack of columns through a single
    backward sweep; for a ``Model`` it differentiates with respect to an
    offset shared by all samples, which yields the batch sum directly.
    """
    batch = np.asarray(batch, dtype=np.float64)
    m = batch.shape[0]
    d = int(np.prod(batch.shape[1:]))
    if mode not in ("sequential", "parallel"):
        raise ContractError(f"unknown probe mode {mode!r}")
    shared = mode == "parallel" and _is_model(model)
    if shared:
        leaf = Variable(np.zeros((1,) + batch.shape[1:]), requires_grad=True)
        h = model.forward(batch, stop_at=layer_id, track_params=False,
                          shared_offset=leaf).activations[layer_id]
    else:
        leaf = Variable(batch, requires_grad=True)
        if _is_model(model):
            h = model.forward(leaf, stop_at=layer_id, track_params=False).activations[layer_id]
        else:
            h = model(leaf)
    if not isinstance(h, Variable) or not h.requires_grad:
        raise ContractError(f"layer {layer_id or '<fn>'} has no gradient path to the input")
    if h.shape[0] != m:
        raise DimensionError(f"layer output batch {h.shape[0]} != input batch {m}")
    flat = ad.reshape(h, (m, -1))
    V = np.asarray(probes.vectors, dtype=np.float64)
    k_l, k = V.shape
    if flat.shape[1] != k_l:
        raise DimensionError(f"probe vectors have length {k_l}, layer has {flat.shape[1]}")
    U = np.empty((d, k))
    if mode == "sequential":
        for j in range(k):
            s_j = ad.vsum(ad.matmul(flat, V[:, j:j + 1]))
            leaf.grad = None
            s_j.backward(retain_intermediate=False)
            U[:, j] = leaf.grad.reshape(m, d).sum(axis=0)
        return U
    per_column = m * max(k_l, d, _widest(flat))
    chunk = max(1, min(k, PARALLEL_BUDGET // per_column))
    for start in range(0, k, chunk):
        Vc = V[:, start:start + chunk]
        c = Vc.shape[1]
        seeds = np.broadcast_to(Vc.T[:, None, :], (c, m, k_l))
        leaf.grad = None
        flat.backward(seeds, batched=True, retain_intermediate=False)
        U[:, start:start + c] = leaf.grad.reshape(c, -1, d).sum(axis=1).T
    return U


def _widest(out: Variable) -> int:
    """Largest per-sample intermediate size on the path back to the input."""
    widest = 0
    for node in ad._reachable(out):
        if node.ndim >= 1 and node.shape[0]:
            widest = max(widest, node.value.size // node.shape[0])
    return widest


def estimate_rank(U: np.ndarray, tau: float, *, layer_id: str = "", epoch: int = 0,
                  eig_method: str = "lapack") -> RankEstimate:
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2:
        raise DimensionError(f"U must be D x k, got shape {U.shape}")
    G = U.T @ U
    spectrum = eig_symmetric(G, method=eig_method)
    degenerate = float(np.trace(G)) <= EPS_VAR
    spectrum = EigenSpectrum(spectrum.eigenvalues, spectrum.source_dim, degenerate)
    rank = 0 if degenerate else spectrum.count_to_mass(tau)
    return RankEstimate(layer_id=layer_id, epoch=epoch, rank=rank, spectrum=spectrum,
                        tau=tau, k=U.shape[1], degenerate=degenerate)


def rank_stream(seed: int, layer_id: str, epoch: int) -> SeededRng:
    return SeededRng(seed).child("rank", layer_id, epoch)


def run_rank_schedule(model, probe_batch: np.ndarray, layers, tau: float, epoch: int, *,
                      seed: int = 0, tau_overrides: dict | None = None,
                      projection_factor: float = DEFAULT_PROJECTION_FACTOR,
                      mode: str = "parallel") -> list[RankEstimate]:
    tau_overrides = tau_overrides or {}
    out = []
    for name in layers:
        k_l = model.activation_dim(name)
        probes = make_probes(name, k_l, rank_stream(seed, name, epoch), projection_factor)
        U = probe_gradients(model, probe_batch, name, probes, mode=mode)
        out.append(estimate_rank(U, tau_overrides.get(name, tau), layer_id=name, epoch=epoch))
    return out
