"""Condensation by matching student unrolls to segments of surrogate paths.

Each iteration picks a segment ``(theta_start, theta_target)`` from a Bezier
surrogate, trains a student from ``theta_start`` for N plain-SGD steps on the
synthetic set, and scores the end point with the normalised distance

    L = ||theta_N - theta_target||^2 / ||theta_start - theta_target||^2.

The synthetic inputs and the student step size are then moved along a
first-order meta-gradient that treats every recorded student state as
constant.  The same machinery runs the MTT baseline when segments come from
stored expert checkpoints instead.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ._io import atomic_write_text
from .bezier import BezierPath, eval_path
from .data import SyntheticDataset, TabularDataset
from .evalharness import EvalConfig, TrainingDiverged, evaluate_synthetic
from .net import Batch, MlpSpec, grad_inputs_of_inner_product, loss_and_grad
from .trajectory import Trajectory

log = logging.getLogger(__name__)

DEGENERATE_SEGMENT = 1e-12
MIN_ETA_S = 1e-6


class StudentDiverged(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"student unroll produced non-finite parameters at step {step}")
        self.step = step


@dataclass(frozen=True)
class CondenseConfig:
    segment_length: float = 0.2
    t_start_max: float = 0.8
    segment_scheme: str = "fixed"  # or "uniform_pair": t_start < t_end both ~ U(0, 1)
    student_steps: int = 30
    meta_lr: float = 100.0
    meta_momentum: float = 0.9
    eta_s_lr: float = 1e-4
    eta_s_momentum: float = 0.5
    batch_size: int | None = None  # None -> max(2 * ipc, 256)
    max_iters: int = 2000
    eval_every: int = 10
    eval_epochs: int = 50
    expert_epochs: int = 5  # M, MTT baseline only
    seed: int = 0

    def __post_init__(self):
        if self.segment_scheme not in ("fixed", "uniform_pair"):
            raise ValueError(f"unknown segment_scheme {self.segment_scheme!r}")
        if self.segment_scheme == "fixed":
            if not (0 < self.segment_length <= 1 and 0 <= self.t_start_max <= 1 - self.segment_length + 1e-12):
                raise ValueError("segment_length/t_start_max must keep t_end inside [0, 1]")
        if self.student_steps < 1:
            raise ValueError("student_steps must be at least 1")
        if min(self.meta_lr, self.eta_s_lr) <= 0 or self.eval_every < 1 or self.max_iters < 0:
            raise ValueError("rates and eval_every must be positive, max_iters non-negative")

    def synthetic_batch_size(self, ipc: int) -> int:
        return self.batch_size if self.batch_size is not None else max(2 * ipc, 256)


@dataclass
class MatchSegment:
    theta_start: np.ndarray
    theta_target: np.ndarray
    t_start: float
    t_end: float

    @property
    def scale(self) -> float:
        return float(np.sum((self.theta_start - self.theta_target) ** 2))


@dataclass
class TapeStep:
    indices: np.ndarray
    theta: np.ndarray
    grad: np.ndarray


def _draw_times(cfg: CondenseConfig, rng) -> tuple[float, float]:
    if cfg.segment_scheme == "fixed":
        t0 = float(rng.uniform(0.0, cfg.t_start_max))
        return t0, min(t0 + cfg.segment_length, 1.0)
    a, b = sorted(rng.random(2))
    return float(a), float(b)


def sample_segment(paths: list[BezierPath], cfg: CondenseConfig, rng) -> MatchSegment:
    if not paths:
        raise ValueError("need at least one surrogate path")
    for _ in range(100):
        path = paths[int(rng.integers(len(paths)))]
        t0, t1 = _draw_times(cfg, rng)
        if t1 <= t0:
            continue
        seg = MatchSegment(eval_path(path, t0), eval_path(path, t1), t0, t1)
        if math.sqrt(seg.scale) >= DEGENERATE_SEGMENT:
            return seg
    raise ValueError("could not draw a non-degenerate segment in 100 attempts")


def mtt_baseline_segment(traj: Trajectory, M: int, rng, k: int | None = None) -> MatchSegment:
    """Segment between stored checkpoints ``k`` and ``k + M``, ``k`` uniform on 0..K-M."""
    K = traj.K
    if K < M:
        raise ValueError(f"trajectory has {K + 1} checkpoints, need at least {M + 1}")
    if k is None:
        k = int(rng.integers(0, K - M + 1))
    if not 0 <= k <= K - M:
        raise ValueError(f"start index {k} out of range 0..{K - M}")
    return MatchSegment(traj.checkpoints[k].copy(), traj.checkpoints[k + M].copy(), k / K, (k + M) / K)


def mtt_sampler(trajs: list[Trajectory], M: int) -> Callable:
    def sample(rng):
        return mtt_baseline_segment(trajs[int(rng.integers(len(trajs)))], M, rng)
    return sample


def student_unroll(
    spec: MlpSpec, theta_start: np.ndarray, synth: SyntheticDataset, cfg: CondenseConfig, rng
) -> tuple[np.ndarray, list[TapeStep]]:
    n = len(synth.labels)
    b = cfg.synthetic_batch_size(synth.ipc)
    theta = np.array(theta_start, dtype=np.float64)
    tape = []
    for step in range(cfg.student_steps):
        idx = np.arange(n) if b >= n else np.sort(rng.choice(n, size=b, replace=False))
        _, g = loss_and_grad(spec, theta, Batch(synth.inputs[idx], synth.labels[idx]))
        tape.append(TapeStep(idx, theta, g))
        theta = theta - synth.eta_s * g
        if not np.all(np.isfinite(theta)):
            raise StudentDiverged(step)
    return theta, tape


def _scale(seg: MatchSegment) -> float:
    d = seg.scale
    if d <= 1e-24:
        raise ValueError("degenerate segment: start and target coincide")
    return d


def matching_loss(theta_N: np.ndarray, seg: MatchSegment) -> float:
    return float(np.sum((theta_N - seg.theta_target) ** 2) / _scale(seg))


def loss_grad_gL(theta_N: np.ndarray, seg: MatchSegment) -> np.ndarray:
    return 2.0 * (theta_N - seg.theta_target) / _scale(seg)


def meta_grad_inputs(spec: MlpSpec, tape: list[TapeStep], gL: np.ndarray, synth: SyntheticDataset) -> np.ndarray:
    """First-order gradient of the matching loss w.r.t. the synthetic inputs.

    Each step contributes ``-eta_s * d/dX <grad_theta mean-loss(B_i), g_L>``,
    scattered back onto the rows that formed ``B_i``.
    """
    if not tape:
        raise ValueError("empty tape")
    n = len(synth.labels)
    out = np.zeros_like(synth.inputs)
    for step in tape:
        if step.indices.min() < 0 or step.indices.max() >= n:
            raise IndexError("tape references rows outside the synthetic set")
        batch = Batch(synth.inputs[step.indices], synth.labels[step.indices])
        G = grad_inputs_of_inner_product(spec, step.theta, batch, gL)
        np.add.at(out, step.indices, -synth.eta_s * G)
    return out


def meta_grad_eta_s(tape: list[TapeStep], gL: np.ndarray) -> float:
    """``<g_L, d theta_N / d eta_s>`` with the recorded minibatch gradients held fixed."""
    return -float(sum(np.dot(gL, step.grad) for step in tape))


@dataclass
class CondenseHistory:
    rows: list[dict] = field(default_factory=list)

    FIELDS = ("iteration", "l_btm", "eta_s", "val_auroc", "val_auprc", "best_val_auprc")

    def write_csv(self, path: str | Path) -> None:
        lines = [",".join(self.FIELDS)]
        for r in self.rows:
            lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in self.FIELDS))
        atomic_write_text(path, "\n".join(lines) + "\n")

    @property
    def evaluations(self) -> list[dict]:
        return [r for r in self.rows if not math.isnan(r["val_auprc"])]


def condense_run(
    paths: list[BezierPath] | None,
    ds: TabularDataset,
    spec: MlpSpec,
    synth0: SyntheticDataset,
    cfg: CondenseConfig,
    sampler: Callable | None = None,
) -> tuple[SyntheticDataset, CondenseHistory]:
    """Run the condensation loop and return the best synthetic set by validation AUPRC.

    ``sampler(rng) -> MatchSegment`` overrides the default surrogate sampling
    (used for the MTT baseline).  Validation runs at iteration 0 and every
    ``eval_every`` iterations after, each with a fresh network seed.
    """
    if sampler is None:
        def sampler(rng):
            return sample_segment(paths, cfg, rng)
    if synth0.inputs.shape[1] != spec.input_dim:
        raise ValueError("synthetic inputs do not match the network input width")
    rng = np.random.default_rng(cfg.seed)
    eval_cfg = EvalConfig(epochs=cfg.eval_epochs, n_seeds=1)
    val_set = (ds.X_val, ds.y_val)
    synth = synth0.copy()
    best = synth0.copy()
    best_auprc = -np.inf
    x_vel = np.zeros_like(synth.inputs)
    eta_vel = 0.0
    history = CondenseHistory()

    def evaluate(it):
        nonlocal best, best_auprc
        seed = int(np.random.SeedSequence([cfg.seed, it]).generate_state(1)[0])
        try:
            m = evaluate_synthetic(synth, spec, val_set, eval_cfg, seeds=[seed])
        except TrainingDiverged:
            log.warning("validation training diverged at iteration %d", it)
            return math.nan, math.nan
        if m.auprc_mean > best_auprc:
            best_auprc = m.auprc_mean
            best = synth.copy()
        return m.auroc_mean, m.auprc_mean

    for it in range(cfg.max_iters + 1):
        l_btm = math.nan
        if it > 0:
            try:
                seg = sampler(rng)
                theta_N, tape = student_unroll(spec, seg.theta_start, synth, cfg, rng)
                l_btm = matching_loss(theta_N, seg)
                gL = loss_grad_gL(theta_N, seg)
                gX = meta_grad_inputs(spec, tape, gL, synth)
                g_eta = meta_grad_eta_s(tape, gL)
            except Exception as exc:
                raise RuntimeError(f"condensation iteration {it} failed: {exc}") from exc
            x_vel = cfg.meta_momentum * x_vel + gX
            synth.inputs = synth.inputs - cfg.meta_lr * x_vel
            eta_vel = cfg.eta_s_momentum * eta_vel + g_eta
            synth.eta_s = max(synth.eta_s - cfg.eta_s_lr * eta_vel, MIN_ETA_S)
        auroc_v = auprc_v = math.nan
        if cfg.max_iters > 0 and (it % cfg.eval_every == 0 or it == cfg.max_iters):
            auroc_v, auprc_v = evaluate(it)
        history.rows.append({
            "iteration": it, "l_btm": l_btm, "eta_s": synth.eta_s,
            "val_auroc": auroc_v, "val_auprc": auprc_v,
            "best_val_auprc": float(best_auprc) if np.isfinite(best_auprc) else math.nan,
        })
    return best, history
