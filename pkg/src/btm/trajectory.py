"""Expert SGD trajectories on real data: training, interpolation and storage."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import FormatError, atomic_write_bytes, check_crc, f32le, pack_container, sidecar, unpack_container, write_json
from .data import TabularDataset
from .net import Batch, MlpSpec, batch_loss, init_params, loss_and_grad, sgd_step

MAGIC = b"BTMT"
VERSION = 1
_TAIL = "<QI"  # param count, checkpoint count
HEADER_BYTES = 8 + struct.calcsize(_TAIL)


class TrajectoryDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"expert training diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.02
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 256
    snapshot_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.snapshot_every < 1:
            raise ValueError("epochs, batch_size and snapshot_every must be positive")
        if self.snapshot_every > self.epochs:
            raise ValueError("snapshot_every cannot exceed epochs")


@dataclass
class Trajectory:
    spec: MlpSpec
    config: SgdConfig
    checkpoints: np.ndarray  # (K + 1, N)
    train_losses: np.ndarray  # (K + 1,)
    endpoint_grad_norm: float

    @property
    def K(self) -> int:
        return len(self.checkpoints) - 1

    @property
    def theta0(self) -> np.ndarray:
        return self.checkpoints[0]

    @property
    def thetaT(self) -> np.ndarray:
        return self.checkpoints[-1]

    @property
    def payload_nbytes(self) -> int:
        return self.checkpoints.size * 4


def train_expert(ds: TabularDataset, spec: MlpSpec, config: SgdConfig) -> Trajectory:
    """Momentum SGD with dropout on the training split, snapshotting every few epochs."""
    X, y = ds.X_train, ds.y_train
    if X.shape[1] != spec.input_dim:
        raise ValueError(f"dataset has {X.shape[1]} features, network expects {spec.input_dim}")
    rng = np.random.default_rng(config.seed)
    full = Batch(X, y)
    params = init_params(spec, config.seed)
    vel = np.zeros_like(params)
    checkpoints = [params.copy()]
    losses = [batch_loss(spec, params, full)]
    n = len(y)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, g = loss_and_grad(spec, params, Batch(X[idx], y[idx]), dropout_rng=rng)
            if not np.isfinite(loss):
                raise TrajectoryDiverged(epoch)
            params, vel = sgd_step(params, g, config.lr, vel, config.momentum)
        if epoch % config.snapshot_every == 0:
            loss = batch_loss(spec, params, full)
            if not (np.isfinite(loss) and np.all(np.isfinite(params))):
                raise TrajectoryDiverged(epoch)
            checkpoints.append(params.copy())
            losses.append(loss)
    _, g_end = loss_and_grad(spec, params, full)
    return Trajectory(spec, config, np.array(checkpoints), np.array(losses), float(np.linalg.norm(g_end)))


def interp_gamma(traj: Trajectory, t: float) -> np.ndarray:
    """Piecewise-linear interpolation of the checkpoints, uniform in checkpoint index."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    K = traj.K
    if t == 1.0 or K == 0:
        return traj.checkpoints[-1].copy()
    u = t * K
    k = int(np.floor(u))
    frac = u - k
    if frac == 0.0:
        return traj.checkpoints[k].copy()
    return (1.0 - frac) * traj.checkpoints[k] + frac * traj.checkpoints[k + 1]


def second_differences(traj: Trajectory) -> np.ndarray:
    """Norms of theta_{k+1} - 2 theta_k + theta_{k-1} for k = 1 .. K-1."""
    c = traj.checkpoints
    if len(c) < 3:
        raise ValueError("need at least 3 checkpoints for second differences")
    return np.linalg.norm(c[2:] - 2.0 * c[1:-1] + c[:-2], axis=1)


def save_trajectory(traj: Trajectory, path: str | Path, traj_id: str | None = None) -> None:
    path = Path(path)
    n_ckpt, n_params = traj.checkpoints.shape
    payload = f32le(traj.checkpoints) + f32le(traj.train_losses)
    atomic_write_bytes(path, pack_container(MAGIC, VERSION, struct.pack(_TAIL, n_params, n_ckpt), payload))
    write_json(sidecar(path), {
        "id": traj_id or path.stem,
        "spec": traj.spec.to_dict(),
        "config": asdict(traj.config),
        "endpoint_grad_norm": traj.endpoint_grad_norm,
    })


def load_trajectory(path: str | Path) -> Trajectory:
    path = Path(path)
    (n_params, n_ckpt), payload, crc = unpack_container(path.read_bytes(), MAGIC, VERSION, _TAIL)
    if len(payload) != 4 * n_ckpt * (n_params + 1):
        raise FormatError(f"{path}: truncated payload")
    check_crc(payload, crc)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    checkpoints = flat[: n_ckpt * n_params].reshape(n_ckpt, n_params)
    losses = flat[n_ckpt * n_params:]
    meta = json.loads(sidecar(path).read_text())
    spec = MlpSpec.from_dict(meta["spec"])
    if spec.n_params != n_params:
        raise FormatError(f"{path}: sidecar spec has {spec.n_params} params, file has {n_params}")
    return Trajectory(spec, SgdConfig(**meta["config"]), checkpoints, losses, float(meta["endpoint_grad_norm"]))
