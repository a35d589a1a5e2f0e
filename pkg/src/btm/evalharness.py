"""Train-from-scratch evaluation of condensed sets, and the ranking metrics it reports."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from ._io import atomic_write_text
from .data import DEFAULT_ETA_S, SyntheticDataset, TabularDataset, _balanced_labels
from .net import Batch, MlpSpec, forward_logits, init_params, loss_and_grad, sgd_step

log = logging.getLogger(__name__)


def _binary(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores/labels length mismatch: {s.shape} vs {y.shape}")
    return s, y == 1


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of P(score+ > score-), ties counted as one half."""
    s, pos = _binary(scores, labels)
    n_pos = int(pos.sum())
    n_neg = len(s) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum of precision times recall increment over descending thresholds.

    Tied scores form a single threshold.
    """
    s, pos = _binary(scores, labels)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, pos = s[order], pos[order]
    tp = np.cumsum(pos)
    # last index of each block of tied scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class EvalConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 100
    n_seeds: int = 10
    batch_size: int = 256

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.n_seeds < 1 or self.batch_size < 1:
            raise ValueError("EvalConfig values must be positive")


@dataclass
class MetricSummary:
    auroc_mean: float
    auroc_std: float
    auprc_mean: float
    auprc_std: float
    per_seed: list[dict] = field(default_factory=list)
    warning: str | None = None

    def row(self) -> dict:
        return {
            "auroc_mean": self.auroc_mean, "auroc_std": self.auroc_std,
            "auprc_mean": self.auprc_mean, "auprc_std": self.auprc_std,
        }


class TrainingDiverged(RuntimeError):
    pass


def train_from_scratch(X, y, spec: MlpSpec, cfg: EvalConfig, seed: int) -> np.ndarray:
    """Momentum SGD from a fresh initialisation; dropout off."""
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    vel = np.zeros_like(params)
    n = len(y)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.batch_size < n else np.arange(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g = loss_and_grad(spec, params, Batch(X[idx], y[idx]))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            params, vel = sgd_step(params, g, cfg.lr, vel, cfg.momentum)
    if not np.all(np.isfinite(params)):
        raise TrainingDiverged("non-finite parameters after training")
    return params


def evaluate_training_set(
    X, y, spec: MlpSpec, test_set: tuple[np.ndarray, np.ndarray], cfg: EvalConfig, seeds=None
) -> MetricSummary:
    seeds = list(range(cfg.n_seeds)) if seeds is None else list(seeds)
    X_test, y_test = test_set
    rows = []
    for seed in seeds:
        try:
            params = train_from_scratch(X, y, spec, cfg, seed)
            scores = forward_logits(spec, params, X_test)
            if not np.all(np.isfinite(scores)):
                raise TrainingDiverged("non-finite test scores")
            rows.append({"seed": seed, "auroc": auroc(scores, y_test), "auprc": auprc(scores, y_test), "error": None})
        except TrainingDiverged as exc:
            rows.append({"seed": seed, "auroc": np.nan, "auprc": np.nan, "error": str(exc)})
    ok = [r for r in rows if r["error"] is None]
    failed = len(rows) - len(ok)
    if failed * 2 >= len(rows):
        raise TrainingDiverged(f"{failed}/{len(rows)} evaluation seeds diverged")
    warning = None
    if failed:
        warning = f"{failed} seed(s) diverged and were excluded"
        log.warning(warning)
    aur = np.array([r["auroc"] for r in ok])
    aup = np.array([r["auprc"] for r in ok])
    return MetricSummary(
        float(aur.mean()), float(aur.std()), float(aup.mean()), float(aup.std()), rows, warning
    )


def evaluate_synthetic(
    synth: SyntheticDataset, spec: MlpSpec, test_set, cfg: EvalConfig = EvalConfig(), seeds=None
) -> MetricSummary:
    """Mean and std of test AUROC/AUPRC over freshly initialised networks trained on ``synth``."""
    if synth.inputs.shape[1] != spec.input_dim:
        raise ValueError("synthetic inputs do not match the network input width")
    return evaluate_training_set(synth.inputs, synth.labels, spec, test_set, cfg, seeds)


def random_coreset(ds: TabularDataset, ipc: int, seed: int = 0) -> SyntheticDataset:
    rng = np.random.default_rng(seed)
    rows = []
    for cls in (0, 1):
        members = np.flatnonzero(ds.y_train == cls)
        if len(members) < ipc:
            raise ValueError(f"class {cls} has only {len(members)} training rows, need {ipc}")
        rows.append(ds.X_train[np.sort(rng.choice(members, size=ipc, replace=False))])
    return SyntheticDataset(np.vstack(rows), _balanced_labels(ipc), DEFAULT_ETA_S, ipc)


RESULT_FIELDS = ["method", "ipc", "auroc_mean", "auroc_std", "auprc_mean", "auprc_std"]


def append_results(path: str | Path, method: str, ipc, summary: MetricSummary) -> None:
    """Add a results row; an existing row for the same (method, ipc) is replaced, so reruns are idempotent."""
    path = Path(path)
    rows = []
    if path.exists():
        with path.open(newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if (r["method"], r["ipc"]) != (method, str(ipc))]
    rows.append({"method": method, "ipc": str(ipc), **{k: f"{v:.6f}" for k, v in summary.row().items()}})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_per_seed(path: str | Path, summary: MetricSummary) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "auroc", "auprc", "error"])
    for r in summary.per_seed:
        w.writerow([r["seed"], repr(float(r["auroc"])), repr(float(r["auprc"])), r["error"] or ""])
    atomic_write_text(path, buf.getvalue())
