import numpy as np
import pytest

from cogsel.baselines import (
    SvmConfig,
    SvmModel,
    load_svm,
    random_selection,
    random_subsets,
    save_svm,
    score_spectra,
    subset_spectra,
    svm_accuracy,
    svm_from_bytes,
    svm_predict,
    svm_predict_classes,
    svm_to_bytes,
    svm_train,
)
from cogsel.dataset import DatasetConfig, build_dataset
from cogsel.doa import azimuth_grid, beamform_spectrum, grid_steering
from cogsel.errors import FormatError
from cogsel.geometry import class_id, make_uca
from cogsel.signal import DoA, generate_snapshots, sample_covariance


@pytest.fixture(scope="module")
def ds():
    return build_dataset(DatasetConfig(make_uca(8), 3, L=50, P=12, T=4, snr_train=[20.0], seed=1))


def doubled(d):
    idx = np.concatenate([np.arange(len(d)), np.arange(len(d))])
    return d.subset(idx)


def test_svm_fits_training_data(ds):
    m = svm_train(ds, SvmConfig(epochs=300, lr=1e-2))
    assert svm_accuracy(m, ds) > 60.0
    assert m.weights.shape == (len(m.class_ids), 1 + 3 * 64)
    assert m.class_ids == sorted(set(ds.labels.tolist()))


def test_svm_duplication_invariant(ds):
    a = svm_train(ds, SvmConfig(epochs=50))
    b = svm_train(doubled(ds), SvmConfig(epochs=50))
    np.testing.assert_allclose(a.weights, b.weights, rtol=1e-9, atol=1e-12)


def test_svm_deterministic(ds):
    a = svm_train(ds, SvmConfig(epochs=20))
    b = svm_train(ds, SvmConfig(epochs=20))
    np.testing.assert_array_equal(a.weights, b.weights)


def test_svm_tie_goes_to_lowest_id():
    m = SvmModel(np.zeros((3, 1 + 3 * 64)), np.zeros(192), np.ones(192), [4, 9, 17], 8)
    assert svm_predict(m, np.zeros((3, 8, 8))) == 4
    np.testing.assert_array_equal(svm_predict_classes(m, np.zeros((2, 3, 8, 8))), [4, 4])


def test_svm_shape_check(ds):
    m = svm_train(ds, SvmConfig(epochs=1))
    with pytest.raises(ValueError):
        m.scores(np.zeros((3, 7, 7)))


def test_svm_rejects_empty(ds):
    with pytest.raises(ValueError):
        svm_train(ds.subset(np.array([], dtype=int)))


def test_svm_round_trip(ds, tmp_path):
    m = svm_train(ds, SvmConfig(epochs=5))
    path = tmp_path / "s.ckpt"
    save_svm(m, path)
    back = load_svm(path)
    assert back.class_ids == m.class_ids and back.M == 8
    np.testing.assert_array_equal(back.weights, m.weights)
    np.testing.assert_array_equal(back.scale, m.scale)
    buf = path.read_bytes()
    with pytest.raises(FormatError):
        svm_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        svm_from_bytes(b"CGSL" + buf[4:])


def test_random_subsets_valid_and_uniform():
    t = random_subsets(10, 4, 20000, np.random.default_rng(0))
    assert t.shape == (20000, 4)
    assert np.all(np.diff(t, axis=1) > 0)
    counts = np.bincount(t.ravel(), minlength=10) / t.shape[0]
    np.testing.assert_allclose(counts, 0.4, atol=0.02)


def test_subset_spectra_match_beamformer():
    g = make_uca(10)
    grid = azimuth_grid(2.0)
    Y = generate_snapshots(g, DoA(90, 77), 40, 1.0, 0.1, np.random.default_rng(3))
    R = sample_covariance(Y).matrix
    table = random_subsets(10, 4, 5, np.random.default_rng(1))
    P = subset_spectra(grid_steering(g, grid), R, table)
    for row, sub in zip(P, table):
        ref = beamform_spectrum(g, R[np.ix_(sub, sub)], grid, sub).power.ravel()
        np.testing.assert_allclose(row, ref, rtol=1e-12, atol=1e-14)


def test_score_rules():
    P = np.array([[1.0, 1.0, 4.0], [2.0, 2.0, 2.0]])
    np.testing.assert_allclose(score_spectra(P), [2.0, 1.0])
    np.testing.assert_allclose(score_spectra(P, "peak"), [4.0, 2.0])
    np.testing.assert_array_equal(score_spectra(P, "none"), [0.0, 0.0])
    with pytest.raises(ValueError):
        score_spectra(P, "median")


def test_none_score_picks_first_draw():
    g = make_uca(10)
    Y = generate_snapshots(g, DoA(90, 10), 20, 1.0, 0.1, np.random.default_rng(0))
    sel = random_selection(10, 4, 30, Y, azimuth_grid(), np.random.default_rng(5), g, score="none")
    first = random_subsets(10, 4, 30, np.random.default_rng(5))[0]
    assert sel.subarray.indices == tuple(first)
    assert sel.class_id == class_id(first, 10)


def test_peak_to_mean_selection_is_best_of_draws():
    g = make_uca(10)
    grid = azimuth_grid(1.0)
    Y = generate_snapshots(g, DoA(90, 200), 50, 1.0, 0.05, np.random.default_rng(2))
    sel = random_selection(10, 4, 64, Y, grid, np.random.default_rng(9), g, chunk=7)
    table = random_subsets(10, 4, 64, np.random.default_rng(9))
    scores = score_spectra(subset_spectra(grid_steering(g, grid), sample_covariance(Y).matrix, table))
    assert sel.subarray.indices == tuple(table[int(np.argmax(scores))])
    assert sel.score == pytest.approx(scores.max())


def test_random_selection_validation():
    g = make_uca(10)
    Y = generate_snapshots(g, DoA(90, 10), 5, 1.0, 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        random_selection(10, 4, 0, Y, azimuth_grid(), np.random.default_rng(0), g)
    with pytest.raises(ValueError):
        random_selection(10, 4, 5, Y, azimuth_grid(), np.random.default_rng(0))
