"""Activation-based membership inference against a trained target model.

Members are drawn from the target's training split, non-members from its test
split, in equal numbers. Each sample's feature vector is the flattened output
of one probe layer. A one-hidden-layer classifier is trained to tell the two
apart; the reported accuracy is that of the epoch with the best attack-test
accuracy. Selecting on test accuracy is optimistic, but it is the protocol
being reproduced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .autodiff import Variable
from .data import Dataset
from .errors import ConfigError, ContractError, NumericalError
from .nn import Model, OptimizerState, optimizer_step
from .tensor import SeededRng

TRAIN_FRACTION = 0.7


@dataclass(frozen=True)
class AttackDataset:
    layer_id: str
    features: np.ndarray    # (N_a, k_l)
    labels: np.ndarray      # (N_a,), 1 = member
    split: str              # "attack-train" or "attack-test"

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AttackConfig:
    hidden: int = 128
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    standardize: bool = True


@dataclass(frozen=True)
class AttackResult:
    layer_id: str
    accuracy_percent: float
    epochs_trained: int
    best_epoch: int
    history: list = field(default_factory=list, compare=False, repr=False)


def probe_features(model: Model, images: np.ndarray, layer_id: str, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        fp = model.forward(chunk, stop_at=layer_id, track_params=False)
        out.append(fp.activations[layer_id].value.reshape(len(chunk), -1))
    return np.concatenate(out)


def build_attack_dataset(target: Model, ds_train: Dataset, ds_test: Dataset, layer_id: str,
                         n_per_class: int, seed: int) -> tuple[AttackDataset, AttackDataset]:
    """Balanced member/non-member features split 70/30 per class."""
    if n_per_class < 2:
        raise ConfigError(f"n_per_class must be at least 2, got {n_per_class}")
    if n_per_class > min(len(ds_train), len(ds_test)):
        raise ConfigError(f"n_per_class={n_per_class} exceeds available samples "
                          f"(train {len(ds_train)}, test {len(ds_test)})")
    gen = SeededRng(seed).child("mia-select", layer_id).generator()
    members = np.sort(gen.choice(len(ds_train), n_per_class, replace=False))
    outsiders = np.sort(gen.choice(len(ds_test), n_per_class, replace=False))
    feats = [probe_features(target, ds_train.images[members], layer_id),
             probe_features(target, ds_test.images[outsiders], layer_id)]
    n_train = int(round(TRAIN_FRACTION * n_per_class))
    parts = {"attack-train": ([], []), "attack-test": ([], [])}
    for label, block in ((1, feats[0]), (0, feats[1])):
        order = gen.permutation(n_per_class)
        for split, idx in (("attack-train", order[:n_train]), ("attack-test", order[n_train:])):
            parts[split][0].append(block[idx])
            parts[split][1].append(np.full(len(idx), label, dtype=np.int64))
    out = []
    for split, (xs, ys) in parts.items():
        x, y = np.concatenate(xs), np.concatenate(ys)
        perm = gen.permutation(len(y))
        out.append(AttackDataset(layer_id, x[perm], y[perm], split))
    return out[0], out[1]


class AttackModel:
    """Dense(k_l -> hidden) -> ReLU -> Dense(hidden -> 1) producing a logit."""

    def __init__(self, in_features: int, hidden: int, seed: int):
        self.params: dict[str, Variable] = {}
        shapes = {"hidden.weight": (in_features, hidden), "hidden.bias": (hidden,),
                  "out.weight": (hidden, 1), "out.bias": (1,)}
        for key, shape in shapes.items():
            if key.endswith("bias"):
                value = np.zeros(shape)
            else:
                gain = 6.0 if key.startswith("hidden") else 3.0
                bound = math.sqrt(gain / shape[0])
                value = SeededRng(seed).child("attack-init", key).generator().uniform(-bound, bound, shape)
            self.params[key] = Variable(value, requires_grad=True, name=key)

    def logits(self, x, track: bool = True) -> Variable:
        p = self.params if track else {k: Variable(v.value) for k, v in self.params.items()}
        h = ad.relu(ad.linear(Variable(x), p["hidden.weight"], p["hidden.bias"]))
        return ad.reshape(ad.linear(h, p["out.weight"], p["out.bias"]), (len(x),))

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean((self.logits(x, track=False).value > 0).astype(np.int64) == y))

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.zero_grad()


def train_attack(train: AttackDataset, test: AttackDataset, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Adam-trained attack classifier; returns the best attack-test accuracy over epochs."""
    if len(train) == 0 or len(test) == 0:
        raise ContractError("attack splits must be non-empty")
    xtr, xte = train.features.astype(np.float64), test.features.astype(np.float64)
    if cfg.standardize:
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0)
        sd = np.where(sd > 1e-8, sd, 1.0)
        xtr, xte = (xtr - mu) / sd, (xte - mu) / sd
    model = AttackModel(xtr.shape[1], cfg.hidden, cfg.seed)
    opt = OptimizerState("adam", cfg.learning_rate)
    n = len(train)
    best_acc, best_epoch, history = -1.0, 0, []
    for epoch in range(1, cfg.epochs + 1):
        order = SeededRng(cfg.seed).child("attack-order", epoch).generator().permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = ad.sigmoid_binary_cross_entropy(model.logits(xtr[idx]), train.labels[idx])
            if not np.isfinite(loss.value):
                raise NumericalError(f"attack loss became non-finite at epoch {epoch}")
            loss.backward()
            optimizer_step(opt, model)
        acc = model.accuracy(xte, test.labels)
        history.append(acc)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
    return AttackResult(train.layer_id, 100.0 * best_acc, cfg.epochs, best_epoch, history)


def correlate(rows) -> dict[str, float | None]:
    """Spearman rho of attack accuracy against each per-layer risk metric.

    ``rows`` are :class:`~layerrisk.metrics.SummaryRow` objects of both kinds.
    Returns ``None`` for a metric whose values are undefined or constant.
    """
    acc: dict[str, float] = {}
    by_kind: dict[str, dict[str, object]] = {"dof": {}, "rank": {}}
    for r in rows:
        if r.attack_accuracy_percent is not None:
            acc[r.layer_id] = r.attack_accuracy_percent
        by_kind.setdefault(r.kind, {})[r.layer_id] = r
    layers = sorted(acc)
    if len(layers) < 3:
        raise ContractError(f"correlation needs at least 3 layers with attack accuracy, got {len(layers)}")
    out: dict[str, float | None] = {}
    for kind in ("dof", "rank"):
        rows_k = by_kind.get(kind, {})
        if not all(layer in rows_k for layer in layers):
            continue
        for field_name, label in (("final_mcr_percent", f"final_mcr_{kind}"),
                                  ("max_cv_minus_final", f"max_cv_minus_final_{kind}")):
            xs = [getattr(rows_k[layer], field_name) for layer in layers]
            out[label] = spearman(xs, [acc[layer] for layer in layers])
    return out


def spearman(xs, ys) -> float | None:
    if any(v is None for v in xs) or len(set(xs)) < 2 or len(set(ys)) < 2:
        return None
    rho = spearmanr(xs, ys).statistic
    return None if not np.isfinite(rho) else float(rho)


def write_attack_results(path, results) -> None:
    payload = [{"layer": r.layer_id, "accuracy_percent": r.accuracy_percent, "best_epoch": r.best_epoch}
               for r in results]
    _write_json(path, payload)


def write_correlation(path, report: dict) -> None:
    _write_json(path, report)


def _write_json(path, payload) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)

