import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from btm._io import FormatError
from btm.bezier import (
    HEADER_BYTES, BezierPath, ControlOptConfig, MlpObjective, avg_loss_along_path, control_fit_cost_epochs,
    eval_path, load_path, load_path_meta, optimize_control_point, path_curvature, save_path,
    second_derivative, storage_ratio,
)
from btm.trajectory import SgdConfig, train_expert


class Quadratic:
    """L(theta) = 0.5 ||theta - c||^2 with exact gradients; minibatch_grad adds no noise."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=float)

    def loss(self, theta):
        return 0.5 * float(np.sum((theta - self.c) ** 2))

    def grad(self, theta):
        return theta - self.c

    def minibatch_grad(self, theta, rng):
        return self.loss(theta), self.grad(theta)


def random_path(seed, n=5):
    rng = np.random.default_rng(seed)
    return BezierPath(*rng.normal(size=(3, n)))


def test_endpoints_exact():
    for seed in range(5):
        p = random_path(seed)
        assert_array_equal(eval_path(p, 0.0), p.theta0)
        assert_array_equal(eval_path(p, 1.0), p.thetaT)


def test_bernstein_midpoint():
    p = random_path(1)
    assert_allclose(eval_path(p, 0.5), 0.25 * p.theta0 + 0.5 * p.phi + 0.25 * p.thetaT, rtol=0, atol=1e-15)


def test_kappa_hand_example():
    # theta0 = 0, phi = 0, thetaT = 2 e1 -> Phi'' = 2 * 2 e1, kappa = 4
    p = BezierPath(np.zeros(3), np.zeros(3), np.array([2.0, 0, 0]))
    assert path_curvature(p) == 4.0
    assert_array_equal(second_derivative(p), [4.0, 0, 0])


def test_midpoint_control_is_straight():
    p = BezierPath.straight(np.zeros(4), np.arange(4.0))
    assert path_curvature(p) == 0.0
    assert_allclose(eval_path(p, 0.3), 0.3 * np.arange(4.0), rtol=1e-15)


def test_swap_symmetry():
    p = random_path(2)
    q = BezierPath(p.thetaT, p.phi, p.theta0)
    for t in (0.1, 0.37, 0.8):
        assert_allclose(eval_path(p, t), eval_path(q, 1 - t), rtol=1e-14)
    assert path_curvature(p) == pytest.approx(path_curvature(q), rel=1e-15)


def test_constant_path():
    x = np.array([1.0, -2.0])
    p = BezierPath(x, x, x)
    for t in np.linspace(0, 1, 7):
        assert_allclose(eval_path(p, t), x, rtol=1e-15)


def test_second_derivative_constant_on_grid():
    p = random_path(3)
    ts = np.linspace(0, 1, 201)
    h = ts[1] - ts[0]
    pts = np.array([eval_path(p, t) for t in ts])
    dd = (pts[2:] - 2 * pts[1:-1] + pts[:-2]) / h ** 2
    assert_allclose(dd, np.broadcast_to(second_derivative(p), dd.shape), rtol=1e-6, atol=1e-6)


def test_validation():
    with pytest.raises(ValueError):
        BezierPath(np.zeros(2), np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        BezierPath(np.zeros(2), np.array([np.nan, 0]), np.zeros(2))
    with pytest.raises(ValueError):
        eval_path(random_path(0), -0.1)


def test_quadratic_avg_loss_one_third():
    # straight path from -1 to 1 in 1-D on L = x^2 / 2: mean of (2t - 1)^2 / 2 over U(0,1) = 1/6
    p = BezierPath.straight(np.array([-1.0]), np.array([1.0]))
    est = avg_loss_along_path(p, Quadratic([0.0]), n_samples=4000, seed=0)
    assert est == pytest.approx(1 / 6, rel=0.02)
    # same path on L = x^2 (twice the objective) gives 1/3
    est2 = avg_loss_along_path(p, _Scaled(Quadratic([0.0]), 2.0), n_samples=4000, seed=0)
    assert est2 == pytest.approx(1 / 3, rel=0.02)


class _Scaled:
    def __init__(self, base, s):
        self.base, self.s = base, s

    def loss(self, theta):
        return self.s * self.base.loss(theta)

    def minibatch_grad(self, theta, rng):
        l, g = self.base.minibatch_grad(theta, rng)
        return self.s * l, self.s * g


def test_zero_iterations_returns_midpoint():
    path, trace = optimize_control_point(np.zeros(3), np.ones(3), Quadratic(np.zeros(3)), ControlOptConfig(max_iters=0))
    assert_array_equal(path.phi, 0.5 * np.ones(3))
    assert trace.n_iters == 0


def test_quadratic_converges_to_analytic_optimum():
    # minimiser of int_0^1 0.5 ||Phi(t) - c||^2 dt over phi:
    # int B1 (B0 a + B1 phi + B2 b - c) = 0 with int B1 B0 = int B1 B2 = 1/10, int B1^2 = 2/15, int B1 = 1/3
    a, b, c = np.array([0.0, 0.0]), np.array([2.0, 0.0]), np.array([1.0, 3.0])
    phi_star = (c / 3 - (a + b) / 10) * 15 / 2
    path, trace = optimize_control_point(a, b, Quadratic(c), ControlOptConfig(lr=0.5, max_iters=4000, mc_samples=64, seed=1, tol=1e-12))
    assert_allclose(path.phi, phi_star, atol=0.15)
    assert path.theta0 is not None and np.array_equal(path.theta0, a) and np.array_equal(path.thetaT, b)


class _Flat:
    def loss(self, theta):
        return 1.0

    def minibatch_grad(self, theta, rng):
        return 1.0, np.zeros_like(theta)


def test_tolerance_stops_early():
    path, trace = optimize_control_point(np.zeros(2), np.ones(2), _Flat(), ControlOptConfig())
    assert trace.converged and trace.n_iters == 1
    assert_array_equal(path.phi, [0.5, 0.5])


def test_descent_on_mlp(small_ds, small_spec):
    traj = train_expert(small_ds, small_spec, SgdConfig(epochs=10, seed=0))
    obj = MlpObjective.from_dataset(small_spec, small_ds, batch_size=128)
    path, trace = optimize_control_point(traj.theta0, traj.thetaT, obj, ControlOptConfig(lr=0.05))
    straight = BezierPath.straight(traj.theta0, traj.thetaT)
    assert avg_loss_along_path(path, obj, 64, seed=5) <= avg_loss_along_path(straight, obj, 64, seed=5)
    smooth = np.convolve(trace.losses, np.ones(20) / 20, mode="valid")
    assert smooth[-1] <= smooth[0]


def test_save_load_round_trip(tmp_path):
    p = random_path(4, n=7)
    f = tmp_path / "s.btmb"
    save_path(p, f, meta={"source_trajectory": "expert_0001"})
    q = load_path(f)
    assert_array_equal(q.phi, p.phi.astype(np.float32))
    assert f.stat().st_size == HEADER_BYTES + 3 * 7 * 4 + 4
    assert load_path_meta(f)["source_trajectory"] == "expert_0001"
    assert f.read_bytes()[:4] == b"BTMB"


def test_version_mismatch(tmp_path):
    f = tmp_path / "s.btmb"
    save_path(random_path(0), f)
    data = bytearray(f.read_bytes())
    data[4] = 2
    f.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        load_path(f)


def test_storage_ratio_against_trajectory(small_ds, small_spec):
    traj = train_expert(small_ds, small_spec, SgdConfig(epochs=5))
    path = BezierPath.straight(traj.theta0, traj.thetaT)
    assert path.payload_nbytes / traj.payload_nbytes == pytest.approx(3 / (traj.K + 1), rel=1e-15)
    assert storage_ratio(traj.K + 1) == traj.payload_nbytes / path.payload_nbytes


def test_cost_formula():
    assert control_fit_cost_epochs(300, 256, 113_369) == pytest.approx(1.355, abs=1e-3)
    assert control_fit_cost_epochs(0, 256, 100) == 0.0
