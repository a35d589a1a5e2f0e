import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from btm.data import (
    CsvFormatError, GenConfig, RawTable, SyntheticDataset, apply_preprocessing, balance_train_split,
    generate_raw, generate_synthetic_clinical, init_synthetic, load_csv, load_dataset, load_synthetic, preprocess,
    save_dataset, save_synthetic, stratified_split,
)
from btm.evalharness import auroc


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_csv_fixture(tmp_path):
    t = load_csv(write(tmp_path, "a,b,label\n1,2,0\n3,,1\n5,6,0\n"))
    assert len(t) == 3 and t.feature_names == ["a", "b"]
    assert np.isnan(t.features[1, 1])
    assert_array_equal(t.labels, [0, 1, 0])


def test_label_column_anywhere(tmp_path):
    t = load_csv(write(tmp_path, "y,a\n1,0.5\n0,1.5\n"), label_column="y")
    assert_array_equal(t.features[:, 0], [0.5, 1.5])


@pytest.mark.parametrize("text,match", [
    ("a,label\n1,2\n", "row 2, column 'label'"),
    ("a,label\nx,1\n", "row 2, column 'a'"),
    ("a,label\n1,0\n2\n", "row 3"),
    ("a,b\n1,0\n", "no label column"),
    ("", "header"),
])
def test_csv_errors(tmp_path, text, match):
    with pytest.raises(CsvFormatError, match=match):
        load_csv(write(tmp_path, text))


def _raw(X, y):
    return RawTable(np.asarray(X, dtype=float), np.asarray(y), [f"f{j}" for j in range(np.asarray(X).shape[1])])


def test_median_imputation_hand_example():
    raw = _raw([[1.0], [2.0], [100.0], [np.nan]], [0, 1, 0, 1])
    ds = apply_preprocessing(raw, [0, 1, 2], [3], [])
    assert ds.medians[0] == 2.0
    assert_allclose(ds.X_val[0, 0], (2.0 - ds.mean[0]) / ds.std[0])


def test_no_missing_imputation_identity():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 3))
    ds = apply_preprocessing(_raw(X, np.r_[np.zeros(20), np.ones(20)].astype(int)), np.arange(30), np.arange(30, 35), np.arange(35, 40))
    assert_allclose(ds.X_test * ds.std + ds.mean, X[35:], rtol=1e-12)


def test_train_only_statistics():
    ds = generate_synthetic_clinical(GenConfig(n_samples=2000, seed=1))
    raw, _ = generate_raw(GenConfig(n_samples=2000, seed=1))
    tr = raw.features[ds.split_indices["train"]]
    assert_allclose(ds.medians, np.nanmedian(tr, axis=0), rtol=1e-12)
    assert_allclose(np.abs(ds.X_train.mean(axis=0)), 0, atol=1e-9)
    assert_allclose(ds.X_train.std(axis=0), 1, atol=1e-9)
    # test rows never shift the statistics
    raw.features[ds.split_indices["test"]] += 1000.0
    ds2 = apply_preprocessing(raw, ds.split_indices["train"], ds.split_indices["val"], ds.split_indices["test"])
    assert_array_equal(ds2.mean, ds.mean)
    assert_array_equal(ds2.medians, ds.medians)


def test_constant_column_left_unscaled():
    X = np.c_[np.full(30, 4.0), np.arange(30.0)]
    ds = apply_preprocessing(_raw(X, np.r_[np.zeros(15), np.ones(15)].astype(int)), np.arange(20), np.arange(20, 25), np.arange(25, 30))
    assert ds.std[0] == 1.0
    assert_array_equal(ds.X_train[:, 0], 0.0)


def test_split_disjoint_and_proportions():
    y = np.r_[np.zeros(900), np.ones(100)].astype(int)
    tr, va, te = stratified_split(y, seed=0)
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert len(tr) + len(va) + len(te) == 1000
    assert abs(len(tr) - 700) <= 1 and abs(len(va) - 150) <= 1
    for idx in (tr, va, te):
        assert y[idx].mean() == pytest.approx(0.1, abs=0.01)
    assert_array_equal(tr, stratified_split(y, seed=0)[0])


def test_preprocess_needs_ten_per_class():
    with pytest.raises(ValueError, match="at least 10"):
        preprocess(_raw(np.zeros((30, 1)), np.r_[np.zeros(25), np.ones(5)].astype(int)))


def test_generator_counts_and_determinism():
    cfg = GenConfig()
    a, b = generate_synthetic_clinical(cfg), generate_synthetic_clinical(cfg)
    assert_array_equal(a.X_train, b.X_train)
    total_pos = sum(int(a.split(s)[1].sum()) for s in ("train", "val", "test"))
    assert total_pos == 500
    raw, mu = generate_raw(cfg)
    assert np.linalg.norm(mu) == pytest.approx(cfg.class_separation)
    assert np.isnan(raw.features).mean() == pytest.approx(0.02, abs=0.005)


def test_zero_separation_is_chance():
    cfg = GenConfig(class_separation=0.0, seed=4)
    raw, _ = generate_raw(cfg)
    ref = generate_raw(GenConfig(seed=4))[1]  # direction from the same seed
    X = np.nan_to_num(raw.features)
    assert auroc(X @ ref, raw.labels) == pytest.approx(0.5, abs=0.03)


def test_separation_monotone_auroc():
    wins = 0
    for seed in range(3):
        vals = []
        for sep in (0.5, 1.0, 2.0):
            raw, mu = generate_raw(GenConfig(class_separation=sep, seed=seed))
            vals.append(auroc(np.nan_to_num(raw.features) @ mu, raw.labels))
        wins += vals[0] < vals[1] < vals[2]
    assert wins >= 2


@pytest.mark.parametrize("kw", [dict(prevalence=0.0), dict(prevalence=1.0), dict(missing_rate=1.0), dict(n_samples=0)])
def test_genconfig_validation(kw):
    with pytest.raises(ValueError):
        GenConfig(**kw)


def test_dataset_round_trip(small_ds, tmp_path):
    save_dataset(small_ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert_array_equal(back.X_test, small_ds.X_test)
    assert_array_equal(back.y_train, small_ds.y_train)
    assert_array_equal(back.mean, small_ds.mean)
    assert back.feature_names == small_ds.feature_names


def test_init_strategies(small_ds):
    real = init_synthetic(small_ds, 12, "real", seed=1)
    rows = {tuple(r) for r in small_ds.X_train}
    assert all(tuple(r) in rows for r in real.inputs)
    assert real.eta_s == 0.01
    ipc = 400
    rnd = init_synthetic(small_ds, ipc, "random", seed=1)
    for cls in (0, 1):
        Xc = small_ds.X_train[small_ds.y_train == cls]
        got = rnd.inputs[rnd.labels == cls].mean(axis=0)
        assert np.all(np.abs(got - Xc.mean(axis=0)) <= 3 * Xc.std(axis=0) / np.sqrt(ipc))
    for s in (real, rnd):
        assert int(s.labels.sum()) == s.ipc and len(s.labels) == 2 * s.ipc
    with pytest.raises(ValueError):
        init_synthetic(small_ds, 10_000, "real")
    with pytest.raises(ValueError):
        init_synthetic(small_ds, 3, "other")


def test_balance_train_split():
    y = np.r_[np.zeros(900), np.ones(100)].astype(int)
    raw = _raw(np.random.default_rng(0).normal(size=(1000, 2)), y)
    ds = preprocess(raw)
    bal = balance_train_split(ds, seed=0)
    assert int(bal.y_train.sum()) == int((bal.y_train == 0).sum()) == 70
    assert_array_equal(bal.y_val, ds.y_val)
    assert balance_train_split(bal) is bal


def test_synthetic_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        SyntheticDataset(np.zeros((3, 2)), np.array([0, 1, 1]))
    with pytest.raises(ValueError):
        SyntheticDataset(np.zeros((2, 2)), np.array([0, 1]), eta_s=0.0)
    s = SyntheticDataset(np.arange(8.0).reshape(4, 2) / 3, np.array([0, 0, 1, 1]), eta_s=0.0123)
    save_synthetic(s, tmp_path / "s.csv", ["a", "b"], {"method": "btm"})
    back = load_synthetic(tmp_path / "s.csv")
    assert_array_equal(back.inputs, s.inputs)
    assert back.eta_s == 0.0123 and back.ipc == 2
