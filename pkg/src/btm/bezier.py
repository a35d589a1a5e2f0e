"""Quadratic Bezier surrogates of SGD trajectories.

A path is ``Phi(t) = (1-t)^2 theta0 + 2t(1-t) phi + t^2 thetaT``.  The control
point ``phi`` is fitted by stochastic gradient descent on the training loss at
uniformly sampled ``t``; endpoints stay fixed.

Losses are supplied through an *objective*: any object with ``loss(theta)``
(full-data loss) and ``minibatch_grad(theta, rng) -> (loss, grad)``.
:class:`MlpObjective` is the one used for real networks.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import FormatError, atomic_write_bytes, atomic_write_text, check_crc, f32le, pack_container, sidecar, unpack_container, write_json
from .net import Batch, MlpSpec, batch_loss, loss_and_grad

MAGIC = b"BTMB"
VERSION = 1
_TAIL = "<Q"
HEADER_BYTES = 8 + struct.calcsize(_TAIL)


class ControlPointDiverged(RuntimeError):
    def __init__(self, iteration: int):
        super().__init__(f"control point optimisation diverged at iteration {iteration}")
        self.iteration = iteration


@dataclass
class BezierPath:
    theta0: np.ndarray
    phi: np.ndarray
    thetaT: np.ndarray

    def __post_init__(self):
        self.theta0 = np.asarray(self.theta0, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.thetaT = np.asarray(self.thetaT, dtype=np.float64)
        if not (self.theta0.shape == self.phi.shape == self.thetaT.shape) or self.theta0.ndim != 1:
            raise ValueError("theta0, phi and thetaT must be vectors of equal length")
        if not all(np.all(np.isfinite(a)) for a in (self.theta0, self.phi, self.thetaT)):
            raise ValueError("path points must be finite")

    @classmethod
    def straight(cls, theta0, thetaT) -> "BezierPath":
        theta0 = np.asarray(theta0, dtype=np.float64)
        thetaT = np.asarray(thetaT, dtype=np.float64)
        return cls(theta0, 0.5 * (theta0 + thetaT), thetaT)

    @property
    def n_params(self) -> int:
        return self.theta0.shape[0]

    @property
    def payload_nbytes(self) -> int:
        return 3 * self.n_params * 4


def eval_path(path: BezierPath, t: float) -> np.ndarray:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return path.theta0.copy()
    if t == 1.0:
        return path.thetaT.copy()
    s = 1.0 - t
    return s * s * path.theta0 + 2.0 * t * s * path.phi + t * t * path.thetaT


def second_derivative(path: BezierPath) -> np.ndarray:
    """``Phi''``, which does not depend on t."""
    return 2.0 * (path.theta0 - 2.0 * path.phi + path.thetaT)


def path_curvature(path: BezierPath) -> float:
    return float(np.linalg.norm(second_derivative(path)))


class MlpObjective:
    """Training loss of an MLP on a fixed labelled set."""

    def __init__(self, spec: MlpSpec, X: np.ndarray, y: np.ndarray, batch_size: int = 256, full_batch: bool = False):
        if X.shape[1] != spec.input_dim:
            raise ValueError(f"dataset has {X.shape[1]} features, network expects {spec.input_dim}")
        self.spec = spec
        self.full = Batch(X, y)
        self.batch_size = batch_size
        self.full_batch = full_batch or batch_size >= len(y)

    @classmethod
    def from_dataset(cls, spec, ds, batch_size: int = 256, full_batch: bool = False) -> "MlpObjective":
        return cls(spec, ds.X_train, ds.y_train, batch_size, full_batch)

    def loss(self, theta: np.ndarray) -> float:
        return batch_loss(self.spec, theta, self.full)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return loss_and_grad(self.spec, theta, self.full)[1]

    def minibatch_grad(self, theta: np.ndarray, rng: np.random.Generator) -> tuple[float, np.ndarray]:
        if self.full_batch:
            return loss_and_grad(self.spec, theta, self.full)
        idx = rng.choice(len(self.full), size=self.batch_size, replace=False)
        return loss_and_grad(self.spec, theta, Batch(self.full.inputs[idx], self.full.labels[idx]))


def avg_loss_along_path(path: BezierPath, objective, n_samples: int = 64, seed: int = 0) -> float:
    """Monte-Carlo estimate of the mean full-data loss over t ~ U(0, 1)."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    ts = np.random.default_rng(seed).random(n_samples)
    return float(np.mean([objective.loss(eval_path(path, t)) for t in ts]))


@dataclass(frozen=True)
class ControlOptConfig:
    lr: float = 1e-2
    tol: float = 1e-5
    max_iters: int = 300
    mc_samples: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.tol <= 0 or self.max_iters < 0 or self.mc_samples < 1:
            raise ValueError("ControlOptConfig values must be positive")


@dataclass
class OptTrace:
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    converged: bool = False

    @property
    def n_iters(self) -> int:
        return len(self.losses)

    def write_csv(self, path: str | Path) -> None:
        lines = ["iteration,loss,grad_norm"]
        lines += [f"{i},{l!r},{g!r}" for i, (l, g) in enumerate(zip(self.losses, self.grad_norms))]
        atomic_write_text(path, "\n".join(lines) + "\n")


def optimize_control_point(theta0, thetaT, objective, config: ControlOptConfig = ControlOptConfig()) -> tuple[BezierPath, OptTrace]:
    """Fit the control point from the midpoint by plain gradient descent.

    Each iteration draws ``mc_samples`` values of t and, for each, a fresh
    minibatch; the chain-rule factor for phi is ``2 t (1 - t)``.  Stops when
    the averaged gradient norm drops below ``tol`` or after ``max_iters``.
    """
    path = BezierPath.straight(theta0, thetaT)
    phi = path.phi.copy()
    rng = np.random.default_rng(config.seed)
    trace = OptTrace()
    for it in range(config.max_iters):
        ts = rng.random(config.mc_samples)
        g = np.zeros_like(phi)
        loss = 0.0
        cur = BezierPath(path.theta0, phi, path.thetaT)
        for t in ts:
            l_i, g_i = objective.minibatch_grad(eval_path(cur, t), rng)
            if not np.isfinite(l_i):
                raise ControlPointDiverged(it)
            loss += l_i / config.mc_samples
            g += (2.0 * t * (1.0 - t) / config.mc_samples) * g_i
        gnorm = float(np.linalg.norm(g))
        trace.losses.append(float(loss))
        trace.grad_norms.append(gnorm)
        if gnorm < config.tol:
            trace.converged = True
            break
        phi = phi - config.lr * g
        if not np.all(np.isfinite(phi)):
            raise ControlPointDiverged(it)
    return BezierPath(path.theta0, phi, path.thetaT), trace


def save_path(path: BezierPath, file: str | Path, meta: dict | None = None) -> None:
    file = Path(file)
    payload = f32le(path.theta0) + f32le(path.phi) + f32le(path.thetaT)
    atomic_write_bytes(file, pack_container(MAGIC, VERSION, struct.pack(_TAIL, path.n_params), payload))
    if meta is not None:
        write_json(sidecar(file), meta)


def load_path(file: str | Path) -> BezierPath:
    file = Path(file)
    (n,), payload, crc = unpack_container(file.read_bytes(), MAGIC, VERSION, _TAIL)
    if len(payload) != 3 * 4 * n:
        raise FormatError(f"{file}: truncated payload")
    check_crc(payload, crc)
    a = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(3, n)
    return BezierPath(a[0], a[1], a[2])


def load_path_meta(file: str | Path) -> dict:
    return json.loads(sidecar(file).read_text())


def storage_ratio(n_checkpoints: int) -> float:
    """Bytes of a stored trajectory over bytes of its three-point surrogate."""
    if n_checkpoints < 1:
        raise ValueError("need at least one checkpoint")
    return n_checkpoints / 3.0


def control_fit_cost_epochs(max_iters: int, batch_size: int, n_train: int, mc_samples: int = 2) -> float:
    """Forward passes of one control-point fit expressed in training epochs: ``mc T_max b / |D_train|``."""
    if n_train < 1 or batch_size < 1:
        raise ValueError("batch_size and n_train must be positive")
    return mc_samples * max_iters * batch_size / n_train
