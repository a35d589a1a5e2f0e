import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from btm._io import FormatError
from btm.net import MlpSpec, init_params
from btm.trajectory import (
    HEADER_BYTES, SgdConfig, Trajectory, interp_gamma, load_trajectory, save_trajectory, second_differences,
    train_expert,
)


def line_trajectory(K, N=4, spec=None):
    spec = spec or MlpSpec((3, 1))
    assert spec.n_params == N
    a, b = np.arange(N, dtype=float), np.ones(N)
    ckpts = np.array([a + k * b for k in range(K + 1)])
    return Trajectory(spec, SgdConfig(epochs=max(K, 1)), ckpts, np.linspace(1, 0, K + 1), 0.0)


@pytest.fixture(scope="module")
def expert(small_ds, small_spec):
    return train_expert(small_ds, small_spec, SgdConfig(epochs=6, seed=1))


def test_checkpoint_count(expert, small_spec):
    assert expert.checkpoints.shape == (7, small_spec.n_params)
    assert expert.train_losses.shape == (7,)
    assert_array_equal(expert.theta0, init_params(small_spec, 1))


def test_snapshot_stride(small_ds, small_spec):
    t = train_expert(small_ds, small_spec, SgdConfig(epochs=6, snapshot_every=3))
    assert t.K == 2


def test_training_reduces_loss(expert):
    assert expert.train_losses[-1] < expert.train_losses[0]
    assert expert.endpoint_grad_norm > 0


def test_zero_lr_keeps_parameters(small_ds, small_spec):
    t = train_expert(small_ds, small_spec, SgdConfig(lr=0.0, epochs=3))
    for c in t.checkpoints:
        assert_array_equal(c, t.theta0)


def test_deterministic(small_ds):
    spec = MlpSpec.hidden(small_ds.n_features, [8], dropout_rate=0.25)
    a = train_expert(small_ds, spec, SgdConfig(epochs=3, seed=4))
    b = train_expert(small_ds, spec, SgdConfig(epochs=3, seed=4))
    assert_array_equal(a.checkpoints, b.checkpoints)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(small_ds, small_spec):
    from btm.trajectory import TrajectoryDiverged
    with pytest.raises(TrajectoryDiverged):
        train_expert(small_ds, small_spec, SgdConfig(lr=1e100, epochs=5))


@pytest.mark.parametrize("kw", [dict(lr=-1), dict(momentum=1.0), dict(epochs=0), dict(snapshot_every=5, epochs=2)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SgdConfig(**kw)


def test_interp_endpoints_and_knots(expert):
    assert_array_equal(interp_gamma(expert, 0.0), expert.theta0)
    assert_array_equal(interp_gamma(expert, 1.0), expert.thetaT)
    K = expert.K
    assert_array_equal(interp_gamma(expert, 2 / K), expert.checkpoints[2])


def test_interp_midpoint_between_knots():
    t = line_trajectory(4)
    # t = 0.375 -> index 1.5
    assert_allclose(interp_gamma(t, 0.375), 0.5 * (t.checkpoints[1] + t.checkpoints[2]), rtol=1e-15)
    with pytest.raises(ValueError):
        interp_gamma(t, 1.5)


def test_second_differences_straight_line_zero():
    assert_allclose(second_differences(line_trajectory(5)), 0.0, atol=1e-14)


def test_second_differences_sqrt_n():
    # theta_k = k^2 * ones -> second difference 2 * ones with norm 2 sqrt(N)
    spec = MlpSpec((3, 1))
    ck = np.array([k * k * np.ones(4) for k in range(5)], dtype=float)
    t = Trajectory(spec, SgdConfig(epochs=4), ck, np.zeros(5), 0.0)
    assert_allclose(second_differences(t), 2 * np.sqrt(4), rtol=1e-15)
    with pytest.raises(ValueError):
        second_differences(line_trajectory(1))


def test_round_trip_and_size(expert, tmp_path):
    p = tmp_path / "expert_0001.btmt"
    save_trajectory(expert, p)
    back = load_trajectory(p)
    K1, N = expert.checkpoints.shape
    assert p.stat().st_size == HEADER_BYTES + K1 * N * 4 + K1 * 4 + 4
    assert_allclose(back.checkpoints, expert.checkpoints, rtol=1e-6, atol=1e-7)
    assert_array_equal(back.checkpoints, expert.checkpoints.astype(np.float32))
    assert back.spec == expert.spec and back.config == expert.config
    assert back.endpoint_grad_norm == expert.endpoint_grad_norm
    # header fields
    raw = p.read_bytes()
    assert raw[:4] == b"BTMT"
    assert struct.unpack_from("<IQI", raw, 4) == (1, N, K1)


def _corrupt(path, fn):
    data = bytearray(path.read_bytes())
    fn(data)
    path.write_bytes(bytes(data))


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d.__setitem__(0, ord("X")), "magic"),
    (lambda d: d.__setitem__(4, 9), "version"),
    (lambda d: d.__setitem__(30, d[30] ^ 0xFF), "checksum"),
])
def test_corruption_detected(expert, tmp_path, mutate, msg):
    p = tmp_path / "t.btmt"
    save_trajectory(expert, p)
    _corrupt(p, mutate)
    with pytest.raises(FormatError, match=msg):
        load_trajectory(p)


def test_truncation_detected(expert, tmp_path):
    p = tmp_path / "t.btmt"
    save_trajectory(expert, p)
    p.write_bytes(p.read_bytes()[:-40])
    with pytest.raises(FormatError):
        load_trajectory(p)
    p.write_bytes(b"BTMT")
    with pytest.raises(FormatError):
        load_trajectory(p)
