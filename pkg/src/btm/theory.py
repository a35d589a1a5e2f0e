"""Numerical checks of the surrogate-path guarantees on trained networks.

Three properties of an optimised quadratic Bezier path ``Phi`` relative to the
piecewise-linear SGD path ``gamma`` are measured:

* average loss: ``int L(Phi) <= int L(gamma) + beta kappa^2 / 240``
* curvature: ``||Phi''|| = kappa`` everywhere, versus the discrete SGD
  second differences rescaled to unit time
* predictions: ``sup |f_Phi(t)(x) - f_gamma(t)(x)| <= L_f kappa / 8``

``beta`` and ``L_f`` are replaced by empirical estimates, which are lower
bounds on the true constants.  A failed inequality with plug-in constants is
therefore reported as advisory, not as a refutation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.integrate import simpson

from ._io import atomic_write_text
from .bezier import BezierPath, eval_path, path_curvature
from .net import MlpSpec, forward_logits
from .trajectory import Trajectory, interp_gamma, second_differences

ENDPOINT_TOL = 1e-6
ROUND_TOL = 1e-12  # relative slack for float rounding in the inequality checks
BOUND_DENOMINATOR = 240.0  # (beta/8) * int_0^1 t^2 (1-t)^2 dt = beta / 240


def t_grid(n_t: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_t)


def integrate_grid(values: np.ndarray, ts: np.ndarray) -> float:
    """Composite Simpson rule on a uniform grid."""
    return float(simpson(values, x=ts))


def estimate_beta(objective, probe_points, n_pairs: int = 8, radius: float = 1e-2, seed: int = 0, power_iters: int = 10) -> float:
    """Largest observed ``||grad(theta + r d) - grad(theta)|| / r`` over unit directions ``d``.

    At each probe point ``n_pairs`` directions are drawn at random; a further
    ``power_iters`` directions follow power iteration on the gradient
    difference, which steers towards the sharpest local direction.  Every
    ratio is a lower bound on the gradient Lipschitz constant.
    """
    if n_pairs < 1 or radius <= 0:
        raise ValueError("n_pairs must be >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    best = 0.0
    for theta in probe_points:
        theta = np.asarray(theta, dtype=np.float64)
        g0 = objective.grad(theta)

        def ratio(d):
            d = d / np.linalg.norm(d)
            diff = objective.grad(theta + radius * d) - g0
            return float(np.linalg.norm(diff) / radius), diff

        for _ in range(n_pairs):
            best = max(best, ratio(rng.normal(size=theta.shape))[0])
        d = rng.normal(size=theta.shape)
        for _ in range(power_iters):
            r, diff = ratio(d)
            best = max(best, r)
            if not np.any(diff):
                break
            d = diff
    return best


def _check_endpoints(traj: Trajectory, path: BezierPath) -> None:
    err = max(np.max(np.abs(path.theta0 - traj.theta0)), np.max(np.abs(path.thetaT - traj.thetaT)))
    if err > ENDPOINT_TOL:
        raise ValueError(f"surrogate endpoints differ from the trajectory by {err:.3g}")


def path_loss_integrals(traj: Trajectory, path: BezierPath, objective, n_t: int = 257) -> tuple[float, float]:
    ts = t_grid(n_t)
    lb = np.array([objective.loss(eval_path(path, t)) for t in ts])
    lg = np.array([objective.loss(interp_gamma(traj, t)) for t in ts])
    return integrate_grid(lb, ts), integrate_grid(lg, ts)


def check_bound_avg_loss(
    traj: Trajectory, path: BezierPath, objective, n_t: int = 257, seed: int = 0,
    n_probe: int = 9, n_pairs: int = 8, radius: float = 1e-2,
) -> dict:
    _check_endpoints(traj, path)
    avg_b, avg_g = path_loss_integrals(traj, path, objective, n_t)
    probes = [eval_path(path, t) for t in t_grid(n_probe)] + [interp_gamma(traj, t) for t in t_grid(n_probe)]
    beta = estimate_beta(objective, probes, n_pairs, radius, seed)
    kappa = path_curvature(path)
    rhs = avg_g + beta * kappa ** 2 / BOUND_DENOMINATOR
    gap = avg_b - avg_g
    return {
        "avg_loss_bezier": avg_b,
        "avg_loss_gamma": avg_g,
        "beta_hat": beta,
        "kappa": kappa,
        "bound_rhs": rhs,
        "bound_holds": bool(avg_b <= rhs + ROUND_TOL * abs(rhs)),
        # smallest beta for which the inequality would hold with this kappa
        "beta_required": max(gap, 0.0) * BOUND_DENOMINATOR / kappa ** 2 if kappa > 0 else (0.0 if gap <= 0 else math.inf),
    }


def grid_curvature(path: BezierPath, n: int = 101) -> np.ndarray:
    """``||Phi''||`` from central second differences on a uniform t-grid."""
    ts = t_grid(n)
    h = ts[1] - ts[0]
    pts = np.array([eval_path(path, t) for t in ts])
    return np.linalg.norm(pts[2:] - 2 * pts[1:-1] + pts[:-2], axis=1) / h ** 2


def check_curvature(traj: Trajectory, path: BezierPath) -> dict:
    """Compare the constant Bezier curvature with SGD second differences.

    Under uniform-time interpolation the segment length in t is 1/K, so a
    second difference ``Delta_k`` corresponds to ``||gamma''|| ~ ||Delta_k|| K^2``.
    """
    sd = second_differences(traj)
    kappa = path_curvature(path)
    scaled_max = float(sd.max() * traj.K ** 2)
    return {
        "kappa": kappa,
        "sgd_second_diff_max": float(sd.max()),
        "sgd_second_diff_mean": float(sd.mean()),
        "sgd_curvature_scaled_max": scaled_max,
        "curvature_holds": bool(scaled_max >= kappa),
    }


def check_prediction_deviation(
    traj: Trajectory, path: BezierPath, spec: MlpSpec, inputs: np.ndarray, n_t: int = 65, n_x: int = 256, seed: int = 0
) -> dict:
    """Sup over a (t, x) grid of the logit gap between the two paths, against ``L_f kappa / 8``."""
    _check_endpoints(traj, path)
    rng = np.random.default_rng(seed)
    X = inputs[rng.choice(len(inputs), size=min(n_x, len(inputs)), replace=False)]
    ts = t_grid(n_t)
    thb = [eval_path(path, t) for t in ts]
    thg = [interp_gamma(traj, t) for t in ts]
    fb = np.array([forward_logits(spec, th, X) for th in thb])
    fg = np.array([forward_logits(spec, th, X) for th in thg])
    dev = float(np.max(np.abs(fb - fg)))
    param_gap = float(max(np.linalg.norm(a - b) for a, b in zip(thb, thg)))

    lf = 0.0
    pairs = [(fb[i], fg[i], thb[i], thg[i]) for i in range(n_t)]
    pairs += [(fb[i], fb[i + 1], thb[i], thb[i + 1]) for i in range(n_t - 1)]
    pairs += [(fg[i], fg[i + 1], thg[i], thg[i + 1]) for i in range(n_t - 1)]
    for f1, f2, t1, t2 in pairs:
        dist = np.linalg.norm(t1 - t2)
        if dist > 0:
            lf = max(lf, float(np.max(np.abs(f1 - f2)) / dist))
    kappa = path_curvature(path)
    rhs = lf * kappa / 8.0
    ratio = dev / rhs if rhs > 0 else (0.0 if dev == 0 else math.inf)
    return {
        "lipschitz_hat": lf,
        "pred_dev_sup": dev,
        "pred_bound_rhs": rhs,
        "pred_ratio": ratio,
        "pred_holds": bool(dev <= rhs + ROUND_TOL * max(abs(rhs), 1.0)),
        # the parameter-space deviation the bound assumes is at most kappa / 8
        "param_gap_sup": param_gap,
        "param_gap_bound": kappa / 8.0,
        "n_x_samples": len(X),
    }


@dataclass
class TheoremReport:
    kappa: float
    beta_hat: float
    eps_hat: float
    avg_loss_bezier: float
    avg_loss_gamma: float
    bound_rhs: float
    bound_holds: bool
    beta_required: float
    bezier_sup_curv: float
    sgd_second_diff_max: float
    sgd_second_diff_mean: float
    sgd_curvature_scaled_max: float
    curvature_holds: bool
    lipschitz_hat: float
    pred_dev_sup: float
    pred_bound_rhs: float
    pred_ratio: float
    pred_holds: bool
    param_gap_sup: float
    param_gap_bound: float
    n_t_samples: int
    n_x_samples: int

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        status = lambda ok: "holds" if ok else "ADVISORY (plug-in constant)"
        return "\n".join([
            f"kappa = {self.kappa:.6g}, beta_hat = {self.beta_hat:.6g}, eps_hat = {self.eps_hat:.3g}",
            f"(i)   avg loss: bezier {self.avg_loss_bezier:.6g} <= gamma {self.avg_loss_gamma:.6g}"
            f" + beta kappa^2/240 = {self.bound_rhs:.6g}: {status(self.bound_holds)}"
            f" (beta needed {self.beta_required:.3g})",
            f"(ii)  curvature: kappa {self.kappa:.6g} vs scaled SGD max {self.sgd_curvature_scaled_max:.6g}:"
            f" {'holds' if self.curvature_holds else 'violated'}",
            f"(iii) predictions: sup dev {self.pred_dev_sup:.6g} vs L_f kappa/8 = {self.pred_bound_rhs:.6g}"
            f" (ratio {self.pred_ratio:.3g}): {status(self.pred_holds)}",
            f"      sup ||Phi(t) - gamma(t)|| = {self.param_gap_sup:.6g} vs kappa/8 = {self.param_gap_bound:.6g}",
        ])


def theorem_report(
    traj: Trajectory, path: BezierPath, objective, spec: MlpSpec, inputs: np.ndarray,
    n_t: int = 257, n_t_pred: int = 65, n_x: int = 256, seed: int = 0,
) -> TheoremReport:
    b = check_bound_avg_loss(traj, path, objective, n_t=n_t, seed=seed)
    c = check_curvature(traj, path)
    p = check_prediction_deviation(traj, path, spec, inputs, n_t=n_t_pred, n_x=n_x, seed=seed)
    return TheoremReport(
        kappa=b["kappa"], beta_hat=b["beta_hat"], eps_hat=traj.endpoint_grad_norm,
        avg_loss_bezier=b["avg_loss_bezier"], avg_loss_gamma=b["avg_loss_gamma"],
        bound_rhs=b["bound_rhs"], bound_holds=b["bound_holds"], beta_required=b["beta_required"],
        bezier_sup_curv=b["kappa"],
        sgd_second_diff_max=c["sgd_second_diff_max"], sgd_second_diff_mean=c["sgd_second_diff_mean"],
        sgd_curvature_scaled_max=c["sgd_curvature_scaled_max"], curvature_holds=c["curvature_holds"],
        lipschitz_hat=p["lipschitz_hat"], pred_dev_sup=p["pred_dev_sup"], pred_bound_rhs=p["pred_bound_rhs"],
        pred_ratio=p["pred_ratio"], pred_holds=p["pred_holds"],
        param_gap_sup=p["param_gap_sup"], param_gap_bound=p["param_gap_bound"],
        n_t_samples=n_t, n_x_samples=p["n_x_samples"],
    )


def write_report(report: TheoremReport, json_path: str | Path, text_path: str | Path | None = None) -> None:
    atomic_write_text(json_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    if text_path is not None:
        atomic_write_text(text_path, report.summary() + "\n")
