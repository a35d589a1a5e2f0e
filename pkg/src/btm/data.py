"""Tabular dataset loading, preprocessing and the synthetic clinical-like generator.

Preprocessing follows a fixed recipe: stratified 70/15/15 split, median
imputation and z-scoring, both fitted on the training split only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import atomic_write_text, sidecar, write_json

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
STD_FLOOR = 1e-12


class CsvFormatError(ValueError):
    """Malformed CSV input; the message carries the row/column location."""


@dataclass
class RawTable:
    features: np.ndarray  # float matrix, NaN marks a missing cell
    labels: np.ndarray
    feature_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TabularDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    feature_names: list[str]
    mean: np.ndarray
    std: np.ndarray
    medians: np.ndarray
    split_indices: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        return getattr(self, f"X_{name}"), getattr(self, f"y_{name}")

    @property
    def prevalence(self) -> dict[str, float]:
        return {s: float(np.mean(self.split(s)[1])) for s in ("train", "val", "test")}

    def manifest(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "medians": self.medians.tolist(),
            "sizes": {s: int(len(self.split(s)[1])) for s in ("train", "val", "test")},
            "prevalence": self.prevalence,
            **self.meta,
        }


@dataclass(frozen=True)
class GenConfig:
    n_samples: int = 10_000
    n_features: int = 20
    prevalence: float = 0.05
    class_separation: float = 2.0
    noise_scale: float = 1.0
    missing_rate: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.n_samples < 1 or self.n_features < 1:
            raise ValueError("n_samples and n_features must be positive")


def load_csv(path: str | Path, label_column: str = "label") -> RawTable:
    """Parse a headed CSV; empty cells become NaN, labels must be 0/1."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: missing header row") from None
        if label_column not in header:
            raise CsvFormatError(f"{path}: no label column {label_column!r} in header")
        li = header.index(label_column)
        names = [h for i, h in enumerate(header) if i != li]
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            lab = row[li].strip()
            if lab not in ("0", "1", "0.0", "1.0"):
                raise CsvFormatError(f"{path}: row {r}, column {label_column!r}: non-binary label {lab!r}")
            labels.append(int(float(lab)))
            vals = []
            for c, cell in enumerate(row):
                if c == li:
                    continue
                cell = cell.strip()
                if cell == "":
                    vals.append(math.nan)
                    continue
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvFormatError(f"{path}: row {r}, column {header[c]!r}: cannot parse {cell!r}") from None
            rows.append(vals)
    features = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return RawTable(features, np.array(labels, dtype=np.int64), names)


def stratified_split(labels: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    parts: tuple[list, list, list] = ([], [], [])
    for cls in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_train = int(round(SPLIT_FRACTIONS[0] * len(idx)))
        n_val = int(round(SPLIT_FRACTIONS[1] * len(idx)))
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def apply_preprocessing(raw: RawTable, train_idx, val_idx, test_idx) -> TabularDataset:
    """Impute and normalise with statistics taken from ``train_idx`` rows only."""
    Xtr = raw.features[train_idx]
    medians = np.zeros(Xtr.shape[1])
    for j in range(Xtr.shape[1]):
        col = Xtr[:, j]
        col = col[~np.isnan(col)]
        if col.size:
            medians[j] = np.median(col)

    def impute(X):
        X = X.copy()
        rows, cols = np.nonzero(np.isnan(X))
        X[rows, cols] = medians[cols]
        return X

    Xtr = impute(Xtr)
    mean = Xtr.mean(axis=0)
    std = Xtr.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)

    def norm(idx):
        return (impute(raw.features[idx]) - mean) / std

    y = raw.labels.astype(np.float64)
    return TabularDataset(
        X_train=norm(train_idx), y_train=y[train_idx],
        X_val=norm(val_idx), y_val=y[val_idx],
        X_test=norm(test_idx), y_test=y[test_idx],
        feature_names=list(raw.feature_names),
        mean=mean, std=std, medians=medians,
        split_indices={"train": np.asarray(train_idx), "val": np.asarray(val_idx), "test": np.asarray(test_idx)},
    )


def preprocess(raw: RawTable, split_seed: int = 0) -> TabularDataset:
    counts = np.bincount(raw.labels, minlength=2)
    if counts.min() < 10:
        raise ValueError(f"each class needs at least 10 rows, got counts {counts.tolist()}")
    ds = apply_preprocessing(raw, *stratified_split(raw.labels, split_seed))
    ds.meta["split_seed"] = split_seed
    return ds


def generate_raw(cfg: GenConfig) -> tuple[RawTable, np.ndarray]:
    """Raw two-class isotropic Gaussian mixture; also returns the mean shift."""
    rng = np.random.default_rng(cfg.seed)
    n_pos = int(round(cfg.prevalence * cfg.n_samples))
    labels = np.zeros(cfg.n_samples, dtype=np.int64)
    labels[:n_pos] = 1
    labels = rng.permutation(labels)
    direction = rng.normal(size=cfg.n_features)
    direction /= np.linalg.norm(direction)
    mu = cfg.class_separation * direction
    X = rng.normal(scale=cfg.noise_scale, size=(cfg.n_samples, cfg.n_features))
    X += labels[:, None] * mu
    if cfg.missing_rate > 0:
        X[rng.random(X.shape) < cfg.missing_rate] = np.nan
    names = [f"x{j:02d}" for j in range(cfg.n_features)]
    return RawTable(X, labels, names), mu


def generate_synthetic_clinical(cfg: GenConfig = GenConfig()) -> TabularDataset:
    raw, mu = generate_raw(cfg)
    ds = preprocess(raw, split_seed=cfg.seed)
    ds.meta.update({"generator": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}, "mu": mu.tolist()})
    return ds


def balance_train_split(ds: TabularDataset, seed: int = 0) -> TabularDataset:
    """Undersample the majority class of the training split to the minority count."""
    y = ds.y_train
    pos, neg = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes must be present in the training split")
    if len(pos) == len(neg):
        return ds
    rng = np.random.default_rng(seed)
    minority, majority = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    keep = np.sort(np.concatenate([minority, rng.choice(majority, size=len(minority), replace=False)]))
    split_indices = dict(ds.split_indices)
    if "train" in split_indices:
        split_indices["train"] = split_indices["train"][keep]
    return replace(ds, X_train=ds.X_train[keep], y_train=y[keep], split_indices=split_indices)


# -- on-disk layout: one CSV per split plus a JSON manifest ------------------

def _csv_text(X: np.ndarray, y: np.ndarray, names: list[str]) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*names, "label"])
    for row, lab in zip(X, y):
        w.writerow([repr(float(v)) for v in row] + [int(lab)])
    return buf.getvalue()


def save_dataset(ds: TabularDataset, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for s in ("train", "val", "test"):
        p = directory / f"{s}.csv"
        atomic_write_text(p, _csv_text(*ds.split(s), ds.feature_names))
        out.append(p)
    m = directory / "manifest.json"
    write_json(m, ds.manifest())
    out.append(m)
    return out


def load_dataset(directory: str | Path) -> TabularDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    splits = {}
    for s in ("train", "val", "test"):
        t = load_csv(directory / f"{s}.csv", "label")
        if np.isnan(t.features).any():
            raise CsvFormatError(f"{directory / (s + '.csv')}: preprocessed split contains missing cells")
        splits[s] = t
    return TabularDataset(
        X_train=splits["train"].features, y_train=splits["train"].labels.astype(np.float64),
        X_val=splits["val"].features, y_val=splits["val"].labels.astype(np.float64),
        X_test=splits["test"].features, y_test=splits["test"].labels.astype(np.float64),
        feature_names=splits["train"].feature_names,
        mean=np.array(manifest["mean"]), std=np.array(manifest["std"]),
        medians=np.array(manifest["medians"]),
        meta={k: v for k, v in manifest.items() if k in ("generator", "split_seed", "mu")},
    )


# -- condensed sets ----------------------------------------------------------

DEFAULT_ETA_S = 0.01


@dataclass
class SyntheticDataset:
    """Learnable inputs with fixed, class-balanced hard labels and a student step size."""

    inputs: np.ndarray
    labels: np.ndarray
    eta_s: float = DEFAULT_ETA_S
    ipc: int = 0

    def __post_init__(self):
        self.inputs = np.array(self.inputs, dtype=np.float64)
        self.labels = np.array(self.labels, dtype=np.float64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("inputs must be (n, d) with one label per row")
        if not self.ipc:
            self.ipc = int(np.sum(self.labels == 1))
        if len(self.labels) != 2 * self.ipc or int(np.sum(self.labels == 1)) != self.ipc:
            raise ValueError(f"expected exactly {self.ipc} examples per class")
        if not self.eta_s > 0:
            raise ValueError("eta_s must be positive")

    def copy(self) -> "SyntheticDataset":
        return SyntheticDataset(self.inputs.copy(), self.labels.copy(), self.eta_s, self.ipc)


def _balanced_labels(ipc: int) -> np.ndarray:
    return np.concatenate([np.zeros(ipc), np.ones(ipc)])


def init_synthetic(ds: TabularDataset, ipc: int, strategy: str = "real", seed: int = 0) -> SyntheticDataset:
    """Seed a condensed set with real training rows or class-conditional Gaussian draws."""
    rng = np.random.default_rng(seed)
    rows = []
    for cls in (0, 1):
        members = np.flatnonzero(ds.y_train == cls)
        if strategy == "real":
            if len(members) < ipc:
                raise ValueError(f"class {cls} has {len(members)} training rows, need {ipc}")
            rows.append(ds.X_train[np.sort(rng.choice(members, size=ipc, replace=False))])
        elif strategy == "random":
            Xc = ds.X_train[members]
            rows.append(rng.normal(Xc.mean(axis=0), Xc.std(axis=0), size=(ipc, Xc.shape[1])))
        else:
            raise ValueError(f"unknown init strategy {strategy!r}")
    return SyntheticDataset(np.vstack(rows), _balanced_labels(ipc), DEFAULT_ETA_S, ipc)


def save_synthetic(synth: SyntheticDataset, path: str | Path, feature_names: list[str], meta: dict | None = None) -> None:
    """CSV of the condensed rows plus a JSON sidecar holding ipc, eta_s and ``meta``."""
    path = Path(path)
    atomic_write_text(path, _csv_text(synth.inputs, synth.labels, feature_names))
    write_json(sidecar(path), {"ipc": synth.ipc, "eta_s": synth.eta_s, **(meta or {})})


def load_synthetic(path: str | Path) -> SyntheticDataset:
    path = Path(path)
    t = load_csv(path, "label")
    if np.isnan(t.features).any():
        raise CsvFormatError(f"{path}: synthetic set contains missing cells")
    info = json.loads(sidecar(path).read_text()) if sidecar(path).exists() else {}
    return SyntheticDataset(t.features, t.labels, float(info.get("eta_s", DEFAULT_ETA_S)), int(info.get("ipc", 0)))
