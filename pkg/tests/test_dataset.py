import numpy as np
import pytest

from cogsel.errors import FormatError
from cogsel.geometry import make_uca
from cogsel.dataset import (
    DatasetConfig,
    build_dataset,
    dataset_from_bytes,
    dataset_to_bytes,
    direction_set,
    label_histogram,
    load_dataset,
    save_dataset,
)
from cogsel.rng import substream


def cfg(**kw):
    base = dict(geometry=make_uca(8), K=3, L=20, P=6, T=3, snr_train=[10.0, 20.0], seed=4)
    base.update(kw)
    return DatasetConfig(**base)


@pytest.fixture(scope="module")
def small():
    return build_dataset(cfg())


def test_sample_count_and_shapes(small):
    assert len(small) == 2 * 6 * 3
    assert small.features.shape == (36, 3, 8, 8)
    assert small.doas.shape == (36, 2)
    np.testing.assert_array_equal(small.snr, np.repeat([10.0, 20.0], 18))


def test_labels_within_reduced_set(small):
    assert set(small.labels.tolist()) == set(small.class_set.reduced)
    assert small.class_set.Q == 56


def test_features_are_sample_covariance(small):
    R = small.covariances()
    np.testing.assert_allclose(R, np.conj(np.swapaxes(R, 1, 2)), atol=0)
    np.testing.assert_allclose(small.features[:, 0], np.angle(R))


def test_deterministic():
    a, b = build_dataset(cfg()), build_dataset(cfg())
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = build_dataset(cfg(seed=5))
    assert not np.array_equal(a.features, c.features)


def test_worker_count_does_not_change_output(small):
    par = build_dataset(cfg(workers=3))
    np.testing.assert_array_equal(par.features, small.features)
    np.testing.assert_array_equal(par.labels, small.labels)


def test_grid_directions():
    dirs = direction_set(cfg(P=4))
    assert [d.phi for d in dirs] == [0.0, 90.0, 180.0, 270.0]
    assert all(d.theta == 90.0 for d in dirs)
    two_d = direction_set(cfg(P=4, P_theta=3, theta_range=(80.0, 100.0)))
    assert len(two_d) == 12
    assert sorted({d.theta for d in two_d}) == [80.0, 90.0, 100.0]


def test_random_directions_follow_stream():
    c = cfg(directions="random", stream="test")
    dirs = direction_set(c, 1)
    expect = substream(4, "test/directions", 1).uniform(0.0, 360.0, 6)
    np.testing.assert_allclose([d.phi for d in dirs], expect)


def test_analytic_labels_constant_per_direction():
    ds = build_dataset(cfg(label_source="analytic", snr_train=[20.0]))
    per_dir = ds.labels.reshape(6, 3)
    assert np.all(per_dir == per_dir[:, :1])


def test_class_subsample_restricts_labels():
    ds = build_dataset(cfg(class_subsample=0.1, snr_train=[20.0]))
    n = int(round(0.1 * 56))
    assert len(set(ds.labels.tolist())) <= n


def test_histogram_counts(small):
    rows = label_histogram(small)
    assert sum(n for _, _, n in rows) == len(small)
    assert [c for c, _, _ in rows] == small.class_set.reduced


def test_split_partitions(small):
    tr, va = small.split(0.25, np.random.default_rng(0))
    assert len(tr) + len(va) == len(small)
    assert len(va) == 9
    with pytest.raises(ValueError):
        small.split(1.0, np.random.default_rng(0))


def test_binary_round_trip(small, tmp_path):
    path = tmp_path / "d.cgds"
    save_dataset(small, path, make_uca(8))
    back = load_dataset(path)
    np.testing.assert_array_equal(back.features, small.features)
    np.testing.assert_array_equal(back.labels, small.labels)
    np.testing.assert_array_equal(back.snr, small.snr)
    assert back.class_set.reduced == small.class_set.reduced
    assert back.meta["geometry"] == "uca"
    for k in ("M", "K", "L", "P", "T", "seed", "snr_train"):
        assert back.meta[k] == small.meta[k]


def test_binary_rejects_corruption(small):
    buf = dataset_to_bytes(small)
    with pytest.raises(FormatError):
        dataset_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:-3])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:20])


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(L=0)
    with pytest.raises(ValueError):
        cfg(snr_train=[])
    with pytest.raises(ValueError):
        cfg(directions="spiral")
    with pytest.raises(ValueError):
        cfg(class_subsample=0.0)
