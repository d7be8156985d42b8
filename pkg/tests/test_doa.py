import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cogsel.crb import Selection
from cogsel.doa import (
    BeamSpectrum,
    FullArraySelector,
    OracleSelector,
    RasSelector,
    ScanConfig,
    SearchGrid,
    azimuth_error,
    azimuth_grid,
    beamform_spectrum,
    doa_error,
    doa_grid,
    estimate_doa,
    estimate_on_subarray,
    evaluate_rmse,
    level_means,
    make_schedule,
    make_selector,
    parabolic_offset,
    rmse_to_csv,
    scan_loop,
    scan_to_csv,
)
from cogsel.geometry import Subarray, make_rda, make_uca
from cogsel.signal import DoA, generate_snapshots, sample_covariance


def test_grids():
    g = azimuth_grid(0.5)
    assert g.shape == (1, 720) and g.phis[1] == 0.5 and not g.is_2d
    with pytest.raises(ValueError):
        azimuth_grid(0.7)
    g2 = doa_grid((90, 100), 1.0, 1.0)
    assert g2.shape == (11, 360) and g2.is_2d
    with pytest.raises(ValueError):
        SearchGrid((90.0,), (1.0, 0.0))


def test_identity_covariance_gives_flat_unit_spectrum(uca10):
    s = beamform_spectrum(uca10, np.eye(10), azimuth_grid(1.0))
    np.testing.assert_allclose(s.power, 1.0, rtol=1e-12)


def test_spectrum_scale_invariance(uca10):
    Y = generate_snapshots(uca10, DoA(90, 40), 30, 1.0, 0.1, np.random.default_rng(0))
    R = sample_covariance(Y).matrix
    grid = azimuth_grid(1.0)
    a = beamform_spectrum(uca10, R, grid).power
    b = beamform_spectrum(uca10, 7.5 * R, grid).power
    np.testing.assert_allclose(b, 7.5 * a, rtol=1e-12)
    ea, eb = estimate_doa(BeamSpectrum(grid, a))[0], estimate_doa(BeamSpectrum(grid, b))[0]
    assert eb.phi == pytest.approx(ea.phi, abs=1e-9)


def test_spectrum_shape_check(uca10):
    with pytest.raises(ValueError):
        beamform_spectrum(uca10, np.eye(4), azimuth_grid(), (0, 1, 2))


@given(st.integers(0, 359))
def test_noise_free_peak_on_grid_point(k):
    g = make_uca(10)
    grid = azimuth_grid(1.0)
    Y = generate_snapshots(g, DoA(90, float(k)), 10, 1.0, 0.0, np.random.default_rng(k))
    est, _ = estimate_doa(beamform_spectrum(g, sample_covariance(Y), grid))
    assert azimuth_error(est.phi, k) < 1e-6


def test_delta_spectrum_returns_grid_point():
    grid = azimuth_grid(1.0)
    p = np.zeros(360)
    p[123] = 1.0
    est, peak = estimate_doa(BeamSpectrum(grid, p))
    assert est.phi == 123.0 and peak == 1.0


def test_two_peak_tie_takes_first():
    grid = azimuth_grid(1.0)
    p = np.zeros(360)
    p[[50, 250]] = 2.0
    assert estimate_doa(BeamSpectrum(grid, p))[0].phi == 50.0


def test_parabola_interpolates_exactly():
    # samples of -(x - 0.3)^2 at x = -1, 0, 1
    f = lambda x: -((x - 0.3) ** 2)
    assert parabolic_offset(f(-1), f(0), f(1)) == pytest.approx(0.3, abs=1e-14)
    assert parabolic_offset(1.0, 4.0, 1.0) == 0.0
    assert parabolic_offset(1.0, 1.0, 1.0) == 0.0
    assert parabolic_offset(0.0, -1.0, 0.0) == 0.0
    assert parabolic_offset(4.0, 4.0, 0.0) == -0.5


def test_interpolation_wraps_across_zero():
    grid = azimuth_grid(1.0)
    p = np.zeros(360)
    p[0], p[359], p[1] = 4.0, 3.0, 1.0
    est, _ = estimate_doa(BeamSpectrum(grid, p))
    assert est.phi > 359.0


def test_two_d_interpolation():
    grid = doa_grid((80, 100), 1.0, 1.0)
    t, p = np.meshgrid(grid.thetas, grid.phis, indexing="ij")
    power = 10 - (t - 90.25) ** 2 - (p - 40.4) ** 2
    est, _ = estimate_doa(BeamSpectrum(grid, power))
    assert est.theta == pytest.approx(90.25, abs=1e-9)
    assert est.phi == pytest.approx(40.4, abs=1e-9)


def test_errors():
    assert azimuth_error(359.0, 1.0) == 2.0
    assert azimuth_error(10.0, 190.0) == 180.0
    assert doa_error(DoA(93, 0), DoA(90, 4), True) == pytest.approx(5.0)
    assert doa_error(DoA(93, 0), DoA(90, 4), False) == pytest.approx(4.0)


def test_estimate_on_subarray_uses_rows(uca10):
    Y = generate_snapshots(uca10, DoA(90, 80), 200, 1.0, 0.001, np.random.default_rng(0))
    est, _ = estimate_on_subarray(uca10, Y, (0, 2, 5, 7), azimuth_grid())
    assert azimuth_error(est.phi, 80) < 0.5


def test_selectors_return_valid_selections(uca10):
    Y = generate_snapshots(uca10, DoA(90, 80), 100, 1.0, 0.01, np.random.default_rng(0))
    Y.snr_db = 20.0
    o = OracleSelector(uca10, 4).select(Y, DoA(90, 80))
    assert o.subarray.K == 4 and np.isfinite(o.score)
    r = RasSelector(uca10, 4, realizations=20).select(Y, None, np.random.default_rng(0))
    assert r.subarray.K == 4
    with pytest.raises(ValueError):
        RasSelector(uca10, 4).select(Y)
    f = FullArraySelector(10).select()
    assert f.class_id == -1 and f.subarray.K == 10
    with pytest.raises(ValueError):
        make_selector("cnn", uca10, 4)
    with pytest.raises(ValueError):
        make_selector("magic", uca10, 4)


def test_noise_free_oracle_rmse_negligible_on_grid(uca10):
    # an asymmetric subarray beam biases the parabolic refinement slightly
    doas = [DoA(90, 10.0), DoA(90, 137.5), DoA(90, 300.0)]
    res = evaluate_rmse(make_selector("oracle", uca10, 4), uca10, 4, doas, 20, float("inf"), 2, seed=0)
    assert res.rmse < 0.01
    np.testing.assert_allclose(res.errors_phi[:, 0], res.errors_phi[:, 1], atol=1e-9)


def test_full_array_rmse_below_grid_step(uca10):
    rng = np.random.default_rng(4)
    doas = [DoA(90, p) for p in rng.uniform(0, 360, 10)]
    res = evaluate_rmse(FullArraySelector(10), uca10, 4, doas, 100, 20.0, 3, seed=1)
    assert res.rmse < 0.5
    assert res.errors_phi.shape == (10, 3) and res.modal_class() == -1


def test_rmse_same_data_across_selectors(uca10):
    class Fixed:
        name = "fixed"

        def select(self, Y, truth, rng):
            return Selection(0, 0.0, Subarray((0, 1, 2, 3)))

    doas = [DoA(90, 33.0)]
    a = evaluate_rmse(Fixed(), uca10, 4, doas, 30, 5.0, 4, seed=2)
    b = evaluate_rmse(Fixed(), uca10, 4, doas, 30, 5.0, 4, seed=2)
    np.testing.assert_array_equal(a.errors_phi, b.errors_phi)
    csv = rmse_to_csv([a], 10, 4)
    assert csv.splitlines()[0] == "# cogsel rmse v1"
    assert csv.splitlines()[2].endswith(",0;1;2;3")


def test_selector_failure_reports_location(uca10):
    class Broken:
        name = "broken"

        def select(self, Y, truth, rng):
            raise RuntimeError("boom")

    with pytest.raises(RuntimeError, match="doa 0, trial 0"):
        evaluate_rmse(Broken(), uca10, 4, [DoA(90, 0)], 10, 10.0, 1, seed=0)


def test_schedule():
    s = make_schedule((0, 20), blocks_per_level=6, move_every=4, snapshots=10, seed=3)
    assert len(s) == 12
    assert [b.snr_db for b in s] == [0.0] * 6 + [20.0] * 6
    phis = [b.doa.phi for b in s]
    assert len(set(phis[:4])) == 1 and phis[4] != phis[3]


class Counting:
    name = "count"

    def __init__(self):
        self.calls = 0

    def select(self, Y, truth, rng):
        self.calls += 1
        return Selection(self.calls, 0.0, Subarray((0, 3, 5, 8)) if self.calls % 2 else Subarray((1, 2, 6, 7)))


def test_scan_deterministic_and_period(uca10):
    blocks = make_schedule((10, 20), blocks_per_level=6, move_every=3, snapshots=20, seed=0)
    sel = Counting()
    recs = scan_loop(ScanConfig(blocks, 4, selection_period=4), sel, uca10, seed=1)
    assert sel.calls == 3  # blocks 0, 4, 8
    assert [r.reselected for r in recs] == [b % 4 == 0 for b in range(12)]
    again = scan_loop(ScanConfig(blocks, 4, selection_period=4), Counting(), uca10, seed=1)
    assert [r.error_deg for r in recs] == [r.error_deg for r in again]
    assert set(level_means(recs)) == {10.0, 20.0}
    text = scan_to_csv(recs, "count")
    assert text.splitlines()[1] == "block,snr_db,selector,error_deg,indices"
    assert len(text.splitlines()) == 14


def test_scan_static_subarray(uca10):
    blocks = make_schedule((10,), blocks_per_level=5, move_every=5, snapshots=20)
    sel = Counting()
    recs = scan_loop(ScanConfig(blocks, 4, selection_period=None), sel, uca10)
    assert sel.calls == 1
    assert {r.subarray for r in recs} == {Subarray((0, 3, 5, 8))}


def test_scan_config_validation():
    blocks = make_schedule((10,), blocks_per_level=2, move_every=2)
    with pytest.raises(ValueError):
        ScanConfig(blocks, 4, selection_period=0)
    with pytest.raises(ValueError):
        ScanConfig([], 4)


def test_two_d_rmse_off_plane():
    g = make_rda(4, 4, 0.5, 0.1, seed=0)
    grid = doa_grid((80, 100), 1.0, 1.0)
    res = evaluate_rmse(FullArraySelector(16), g, 4, [DoA(88, 45)], 200, 30.0, 2, seed=0, grid=grid)
    assert res.two_d and res.rmse < 1.0


def test_oracle_rmse_non_increasing_in_snr(uca10):
    rng = np.random.default_rng(8)
    doas = [DoA(90, p) for p in rng.uniform(0, 360, 8)]
    sel = make_selector("oracle", uca10, 4)
    means = []
    for snr in (0.0, 10.0, 20.0, 30.0):
        means.append(np.mean([evaluate_rmse(sel, uca10, 4, doas, 100, snr, 3, seed=s).rmse for s in range(2)]))
    assert all(b <= a for a, b in zip(means, means[1:])), means
