"""End-to-end experiment: train, estimate per epoch, persist, optionally attack.

A run directory holds:

``config.yaml``          the validated configuration snapshot
``metrics.csv``          one row per (epoch, layer, kind)
``summary.json``         one SummaryRow per (layer, kind)
``model.ckpt``           final parameters
``attack_results.json``  / ``correlation.json`` when the attack is run
``manifest.json``        status, per-epoch training stats, artifact names, timings

Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mx
from .config import ExperimentConfig, dump_config, load_config
from .data import BatchPlan, Dataset, batches, load_dataset
from .dof import run_dof_schedule
from .errors import ContractError, LayerRiskError, NumericalError
from .mia import AttackConfig, build_attack_dataset, correlate, train_attack, write_attack_results, \
    write_correlation
from .nn import Model, OptimizerState, build_model, load_checkpoint, optimizer_step, save_checkpoint
from .rank import run_rank_schedule
from .tensor import SeededRng, derive_stream

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CONFIG = "config.yaml"
METRICS = "metrics.csv"
SUMMARY = "summary.json"
CHECKPOINT = "model.ckpt"
ATTACK = "attack_results.json"
CORRELATION = "correlation.json"


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    train_seconds: float
    estimate_seconds: float


@dataclass
class RunManifest:
    run_dir: str
    config: dict
    status: str = "running"
    phase: str = "setup"
    error: str | None = None
    epochs: list[EpochStats] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def path(self, artifact: str) -> Path:
        return Path(self.run_dir) / self.artifacts[artifact]

    def to_json(self) -> dict:
        return {"config": self.config, "status": self.status, "phase": self.phase, "error": self.error,
                "epochs": [vars(e) for e in self.epochs], "artifacts": self.artifacts,
                "timings": self.timings, "notes": self.notes}

    def write(self) -> None:
        missing = [name for name in self.artifacts.values() if not (Path(self.run_dir) / name).exists()]
        if missing:
            raise ContractError(f"manifest references missing artifacts: {', '.join(missing)}")
        _atomic_text(Path(self.run_dir) / MANIFEST, json.dumps(self.to_json(), indent=2) + "\n")


def load_manifest(run_dir) -> RunManifest:
    run_dir = Path(run_dir)
    try:
        data = json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ContractError(f"{run_dir}: no {MANIFEST}; not a run directory") from None
    return RunManifest(run_dir=str(run_dir), config=data["config"], status=data["status"],
                       phase=data["phase"], error=data.get("error"),
                       epochs=[EpochStats(**e) for e in data["epochs"]],
                       artifacts=data["artifacts"], timings=data["timings"], notes=data.get("notes", []))


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def probe_batch(cfg: ExperimentConfig, test: Dataset) -> np.ndarray:
    """The fixed held-out batch every estimator sees, drawn from the test split."""
    if len(test) < cfg.probe_batch_size:
        raise ContractError(f"test split has {len(test)} samples, probe batch needs {cfg.probe_batch_size}")
    idx = SeededRng(cfg.seed).child("probe-batch").generator().choice(len(test), cfg.probe_batch_size,
                                                                        replace=False)
    return test.images[np.sort(idx)]


def _evaluate(model: Model, ds: Dataset) -> float:
    return float(np.mean(model.predict(ds.images) == ds.labels)) if len(ds) else float("nan")


def train_epoch(model: Model, opt: OptimizerState, train: Dataset, batch_size: int,
                seed: int, epoch: int) -> tuple[float, float]:
    """Mean loss and running accuracy over the epoch's minibatches (pre-update predictions)."""
    plan = BatchPlan.shuffled(len(train), batch_size, derive_stream(seed, "epoch", epoch))
    losses, correct, seen = [], 0, 0
    for images, labels in batches(train, plan):
        fp = model.forward(images, labels)
        correct += int(np.sum(fp.logits.value.argmax(axis=1) == labels))
        seen += len(labels)
        fp.loss.backward()
        optimizer_step(opt, model)
        losses.append(float(fp.loss.value))
    return float(np.mean(losses)), correct / seen


def _series_list(series: dict) -> list[mx.MetricSeries]:
    return list(series.values())


def _summary_rows(model: Model, series: dict, epochs: int, attack: dict | None = None) -> list[mx.SummaryRow]:
    attack = attack or {}
    return [mx.summarize(s, model.parameter_count(s.layer_id), attack.get(s.layer_id), epochs=epochs)
            for s in _series_list(series)]


def _phase_error(exc: Exception, phase: str) -> Exception:
    if isinstance(exc, LayerRiskError):
        wrapped = type(exc)(f"{phase}: {exc}")
        wrapped.__cause__ = exc
        return wrapped
    return exc


def run_experiment(cfg: ExperimentConfig, out_dir) -> RunManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / CONFIG, dump_config(cfg))
    manifest = RunManifest(run_dir=str(out), config=cfg.to_dict(), artifacts={"config": CONFIG})
    manifest.write()
    t_start = time.perf_counter()
    try:
        manifest.phase = "data"
        train, test = load_dataset(cfg.dataset, cfg.data_dir, cfg.limit_train, cfg.limit_test)
        model = build_model(cfg.model, cfg.num_classes, seed=cfg.seed)
        layers = list(cfg.layers) if cfg.layers is not None else model.probe_points
        probes = probe_batch(cfg, test)
        opt = OptimizerState(cfg.optimizer.kind, cfg.effective_learning_rate, cfg.optimizer.momentum,
                             cfg.optimizer.beta2, cfg.optimizer.eps)
        series = {(layer, kind): mx.MetricSeries(layer, kind)
                  for layer in layers for kind in ("dof", "rank") if kind in cfg.estimators}
        for epoch in range(1, cfg.epochs + 1):
            manifest.phase = f"train epoch {epoch}"
            t0 = time.perf_counter()
            loss, train_acc = train_epoch(model, opt, train, cfg.effective_batch_size, cfg.seed, epoch)
            if not np.isfinite(loss):
                raise NumericalError(f"training loss is {loss}")
            t1 = time.perf_counter()
            manifest.phase = f"estimate epoch {epoch}"
            if "dof" in cfg.estimators:
                for est in run_dof_schedule(model, probes, layers, cfg.tau, epoch, seed=cfg.seed,
                                            tau_overrides=cfg.tau_overrides,
                                            projection_factor=cfg.projection_factor):
                    series[(est.layer_id, "dof")].append(est.dof)
            if "rank" in cfg.estimators:
                for est in run_rank_schedule(model, probes, layers, cfg.tau, epoch, seed=cfg.seed,
                                             tau_overrides=cfg.tau_overrides,
                                             projection_factor=cfg.projection_factor, mode=cfg.rank_mode):
                    series[(est.layer_id, "rank")].append(est.rank)
            t2 = time.perf_counter()
            stats = EpochStats(epoch, loss, train_acc, _evaluate(model, test), t1 - t0, t2 - t1)
            manifest.epochs.append(stats)
            mx.write_metrics_csv(out / METRICS, _series_list(series))
            manifest.artifacts["metrics"] = METRICS
            manifest.write()
            log.info("epoch %d loss %.4f train %.3f test %.3f (%.1fs train, %.1fs estimate)", epoch, loss,
                     stats.train_accuracy, stats.test_accuracy, stats.train_seconds, stats.estimate_seconds)
        manifest.phase = "summary"
        save_checkpoint(model, out / CHECKPOINT)
        manifest.artifacts["checkpoint"] = CHECKPOINT
        mx.write_summary_json(out / SUMMARY, _summary_rows(model, series, cfg.epochs))
        manifest.artifacts["summary"] = SUMMARY
        if cfg.mia.enabled:
            manifest.phase = "mia"
            _attack_phase(cfg, model, train, test, layers, series, manifest)
        manifest.phase = "done"
        manifest.status = "complete"
    except Exception as exc:
        manifest.status = "incomplete"
        manifest.error = f"{type(exc).__name__}: {exc}"
        manifest.timings["total_seconds"] = time.perf_counter() - t_start
        manifest.write()
        raise _phase_error(exc, manifest.phase) from exc
    manifest.timings["total_seconds"] = time.perf_counter() - t_start
    manifest.write()
    return manifest


def attack_config(cfg: ExperimentConfig) -> AttackConfig:
    m = cfg.mia
    return AttackConfig(hidden=m.hidden, epochs=m.epochs, learning_rate=m.learning_rate,
                        batch_size=m.batch_size, seed=cfg.seed, standardize=m.standardize)


def run_attacks(cfg: ExperimentConfig, model: Model, train: Dataset, test: Dataset, layers):
    acfg = attack_config(cfg)
    results = []
    for layer in layers:
        tr, te = build_attack_dataset(model, train, test, layer, cfg.mia.n_per_class, cfg.seed)
        results.append(train_attack(tr, te, acfg))
        log.info("attack %s: %.2f%% (best epoch %d)", layer, results[-1].accuracy_percent,
                 results[-1].best_epoch)
    return results


def _attack_phase(cfg, model, train, test, layers, series, manifest: RunManifest) -> None:
    t0 = time.perf_counter()
    out = Path(manifest.run_dir)
    results = run_attacks(cfg, model, train, test, layers)
    write_attack_results(out / ATTACK, results)
    manifest.artifacts["attack_results"] = ATTACK
    rows = _summary_rows(model, series, cfg.epochs, {r.layer_id: r.accuracy_percent for r in results})
    mx.write_summary_json(out / SUMMARY, rows)
    if len(layers) >= 3:
        write_correlation(out / CORRELATION, correlate(rows))
        manifest.artifacts["correlation"] = CORRELATION
    else:
        manifest.notes.append(f"correlation skipped: {len(layers)} probe layer(s), need at least 3")
    manifest.timings["mia_seconds"] = time.perf_counter() - t0


def run_mia(run_dir) -> RunManifest:
    """Attack the final model of a finished run and refresh its summary."""
    manifest = load_manifest(run_dir)
    if "checkpoint" not in manifest.artifacts:
        raise ContractError(f"{run_dir}: run has no checkpoint (status {manifest.status})")
    cfg = load_config(Path(run_dir) / CONFIG)
    model = load_checkpoint(manifest.path("checkpoint"))
    train, test = load_dataset(cfg.dataset, cfg.data_dir, cfg.limit_train, cfg.limit_test)
    series = {(s.layer_id, s.kind): s for s in mx.read_metrics_csv(manifest.path("metrics"))}
    layers = list(dict.fromkeys(s.layer_id for s in series.values())) or \
        (list(cfg.layers) if cfg.layers else model.probe_points)
    _attack_phase(cfg, model, train, test, layers, series, manifest)
    manifest.write()
    return manifest
