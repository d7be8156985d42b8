"""Bartlett beamforming DoA estimation, RMSE evaluation and the cognitive scan loop."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .crb import Selection, SubarrayScorer
from .geometry import ArrayGeometry, Subarray, subarray_table
from .rng import substream
from .signal import (
    DoA,
    SampleCovariance,
    SnapshotMatrix,
    extract_features,
    generate_snapshots,
    noise_power,
    sample_covariance,
    steering_matrix,
)

SCAN_CSV_VERSION = 1
RMSE_CSV_VERSION = 1


# ---------------------------------------------------------------- grid and spectrum


@dataclass(frozen=True)
class SearchGrid:
    """Rectangular (theta, phi) search grid in degrees, theta-major.

    ``circular`` marks an azimuth axis covering the full turn, so peak
    interpolation wraps across 0/360.
    """

    thetas: tuple
    phis: tuple
    circular: bool = True

    def __post_init__(self):
        if len(self.thetas) == 0 or len(self.phis) == 0:
            raise ValueError("search grid must be nonempty")
        for name, axis in (("theta", self.thetas), ("phi", self.phis)):
            if len(axis) > 1 and np.any(np.diff(axis) <= 0):
                raise ValueError(f"{name} axis must be strictly increasing")

    @property
    def shape(self):
        return len(self.thetas), len(self.phis)

    @property
    def size(self) -> int:
        return len(self.thetas) * len(self.phis)

    @property
    def is_2d(self) -> bool:
        return len(self.thetas) > 1

    def doas(self) -> list:
        return [DoA(t, p) for t in self.thetas for p in self.phis]


def azimuth_grid(step: float = 0.5, theta: float = 90.0) -> SearchGrid:
    """Full-turn azimuth grid at a fixed elevation."""
    n = int(round(360.0 / step))
    if not math.isclose(n * step, 360.0):
        raise ValueError(f"azimuth step {step} does not divide 360")
    return SearchGrid((float(theta),), tuple(float(p) for p in np.arange(n) * step), True)


def doa_grid(theta_range=(90.0, 100.0), theta_step: float = 1.0, phi_step: float = 0.5) -> SearchGrid:
    """2-D grid: elevation over a closed range, azimuth over the full turn."""
    lo, hi = theta_range
    n = int(round((hi - lo) / theta_step)) + 1
    thetas = tuple(float(t) for t in lo + theta_step * np.arange(n))
    return SearchGrid(thetas, azimuth_grid(phi_step).phis, True)


@lru_cache(maxsize=16)
def _grid_steering_cached(geometry: ArrayGeometry, grid: SearchGrid) -> np.ndarray:
    tt, pp = np.meshgrid(grid.thetas, grid.phis, indexing="ij")
    A = steering_matrix(geometry, tt.ravel(), pp.ravel())
    A.setflags(write=False)
    return A


def grid_steering(geometry: ArrayGeometry, grid: SearchGrid) -> np.ndarray:
    """Steering matrix (M, G) over the flattened grid; cached per (geometry, grid)."""
    return _grid_steering_cached(geometry, grid)


@dataclass
class BeamSpectrum:
    grid: SearchGrid
    power: np.ndarray  # grid.shape

    def __post_init__(self):
        self.power = np.asarray(self.power, dtype=np.float64).reshape(self.grid.shape)
        if not np.all(np.isfinite(self.power)):
            raise ValueError("spectrum power must be finite")


def _bartlett(A: np.ndarray, R: np.ndarray) -> np.ndarray:
    num = np.real(np.sum(A.conj() * (R @ A), axis=0))
    den = np.sum(np.abs(A) ** 2, axis=0)
    # R is PSD, so tiny negative values are rounding
    return np.maximum(num / den, 0.0)


def beamform_spectrum(geometry: ArrayGeometry, R, grid: SearchGrid, subarray=None) -> BeamSpectrum:
    """``a^H R a / a^H a`` on the grid.

    With ``subarray`` given, ``R`` is the K x K covariance of those antennas and
    steering vectors are rows of the parent array's grid matrix.
    """
    R = R.matrix if isinstance(R, SampleCovariance) else np.asarray(R)
    A = grid_steering(geometry, grid)
    if subarray is not None:
        A = A[list(subarray)]
    if R.shape != (A.shape[0], A.shape[0]):
        raise ValueError(f"covariance shape {R.shape} does not match {A.shape[0]} antennas")
    return BeamSpectrum(grid, _bartlett(A, R))


def parabolic_offset(left: float, mid: float, right: float) -> float:
    """Vertex offset in samples of the parabola through three equally spaced points."""
    denom = left - 2.0 * mid + right
    if not denom < 0.0:  # flat or not a maximum
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def estimate_doa(spectrum: BeamSpectrum) -> tuple[DoA, float]:
    """Grid argmax refined by quadratic interpolation along each axis.

    The first grid index wins ties. The returned power is the grid sample at
    the argmax.
    """
    P = spectrum.power
    grid = spectrum.grid
    i, j = np.unravel_index(int(np.argmax(P)), P.shape)
    n_t, n_p = P.shape
    phi = grid.phis[j]
    if n_p >= 3 and (grid.circular or 0 < j < n_p - 1):
        step = grid.phis[1] - grid.phis[0]
        phi += step * parabolic_offset(P[i, (j - 1) % n_p], P[i, j], P[i, (j + 1) % n_p])
    theta = grid.thetas[i]
    if 0 < i < n_t - 1:
        step = grid.thetas[1] - grid.thetas[0]
        theta += step * parabolic_offset(P[i - 1, j], P[i, j], P[i + 1, j])
    return DoA(float(np.clip(theta, 0.0, 180.0)), float(phi)), float(P[i, j])


def azimuth_error(est: float, true: float) -> float:
    """Shorter arc between two azimuths, degrees."""
    d = (est - true) % 360.0
    return float(min(d, 360.0 - d))


def doa_error(est: DoA, true: DoA, two_d: bool) -> float:
    dphi = azimuth_error(est.phi, true.phi)
    if not two_d:
        return dphi
    return float(math.hypot(dphi, est.theta - true.theta))


def estimate_on_subarray(geometry, Y, subarray, grid) -> tuple[DoA, float]:
    """Beamformer estimate from the rows of Y belonging to ``subarray``."""
    data = Y.data if isinstance(Y, SnapshotMatrix) else np.asarray(Y)
    R = sample_covariance(data[list(subarray)])
    return estimate_doa(beamform_spectrum(geometry, R, grid, subarray))


# ---------------------------------------------------------------- selectors


class OracleSelector:
    """Bound-optimal subarray given the true direction (the training-label rule)."""

    name = "oracle"

    def __init__(self, geometry, K, bound="crb1d", sigma_s2=1.0, covariance="sample"):
        if covariance not in ("sample", "analytic"):
            raise ValueError("covariance must be 'sample' or 'analytic'")
        self.scorer = SubarrayScorer(geometry, K, bound)
        self.sigma_s2 = sigma_s2
        self.covariance = covariance

    def select(self, Y: SnapshotMatrix, truth: DoA, rng=None) -> Selection:
        n2 = noise_power(Y.snr_db, self.sigma_s2)
        R = sample_covariance(Y.data) if self.covariance == "sample" else None
        return self.scorer.best(truth, R, Y.L, self.sigma_s2, n2)


class CnnSelector:
    name = "cnn"

    def __init__(self, model, M, K):
        self.model = model
        self.M = M
        self.K = K

    def select(self, Y: SnapshotMatrix, truth=None, rng=None) -> Selection:
        from .nn import predict_proba

        x = extract_features(sample_covariance(Y.data).matrix)
        p = predict_proba(self.model, x[None])[0]
        k = int(np.argmax(p))
        cid = int(self.model.class_ids[k])
        return Selection(cid, float(p[k]), _subarray_of(cid, self.M, self.K))


class SvmSelector:
    name = "svm"

    def __init__(self, model, M, K):
        self.model = model
        self.M = M
        self.K = K

    def select(self, Y: SnapshotMatrix, truth=None, rng=None) -> Selection:
        x = extract_features(sample_covariance(Y.data).matrix)
        s = self.model.scores(x)[0]
        k = int(np.argmax(s))
        cid = int(self.model.class_ids[k])
        return Selection(cid, float(s[k]), _subarray_of(cid, self.M, self.K))


class RasSelector:
    name = "ras"

    def __init__(self, geometry, K, realizations=1000, grid=None, score="peak_to_mean"):
        self.geometry = geometry
        self.K = K
        self.realizations = realizations
        self.grid = grid or azimuth_grid()
        self.score = score

    def select(self, Y: SnapshotMatrix, truth=None, rng=None) -> Selection:
        from .baselines import random_selection

        if rng is None:
            raise ValueError("random selection needs an rng")
        return random_selection(
            self.geometry.M, self.K, self.realizations, Y, self.grid, rng, self.geometry, self.score
        )


class FullArraySelector:
    """Uses every antenna; the class id is -1 since K = M has no class table."""

    name = "full"

    def __init__(self, M):
        self.sub = Subarray(tuple(range(M)))

    def select(self, Y=None, truth=None, rng=None) -> Selection:
        return Selection(-1, 0.0, self.sub)


@lru_cache(maxsize=8)
def _table(M, K):
    return subarray_table(M, K)


def _subarray_of(cid: int, M: int, K: int) -> Subarray:
    return Subarray(tuple(int(i) for i in _table(M, K)[cid]))


def make_selector(kind: str, geometry, K, model=None, **kw):
    """Selector by name: oracle, cnn, svm, ras or full."""
    if kind == "oracle":
        return OracleSelector(geometry, K, **kw)
    if kind == "cnn":
        if model is None:
            raise ValueError("cnn selector needs a trained model")
        return CnnSelector(model, geometry.M, K)
    if kind == "svm":
        if model is None:
            raise ValueError("svm selector needs a trained model")
        return SvmSelector(model, geometry.M, K)
    if kind == "ras":
        return RasSelector(geometry, K, **kw)
    if kind == "full":
        return FullArraySelector(geometry.M)
    raise ValueError(f"unknown selector {kind!r}")


# ---------------------------------------------------------------- RMSE evaluation


@dataclass
class RmseResult:
    selector: str
    snr_db: float
    errors_phi: np.ndarray  # (n_doas, trials), degrees
    errors_theta: np.ndarray
    class_ids: np.ndarray
    two_d: bool = False

    @property
    def rmse_phi(self) -> float:
        return float(np.sqrt(np.mean(self.errors_phi**2)))

    @property
    def rmse_theta(self) -> float:
        return float(np.sqrt(np.mean(self.errors_theta**2)))

    @property
    def rmse(self) -> float:
        if not self.two_d:
            return self.rmse_phi
        return float(np.sqrt(np.mean(self.errors_phi**2 + self.errors_theta**2)))

    def modal_class(self) -> int:
        return Counter(self.class_ids.ravel().tolist()).most_common(1)[0][0]


def evaluate_rmse(
    selector,
    geometry: ArrayGeometry,
    K: int,
    test_doas,
    L: int,
    snr_db: float,
    trials: int,
    seed: int,
    grid: SearchGrid | None = None,
    sigma_s2: float = 1.0,
) -> RmseResult:
    """Beamformer error on the selector's subarray over DoAs x trials.

    Snapshot draws depend only on (seed, DoA index, trial), so different
    selectors see identical data. Selection and estimation share one draw.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    grid = grid or azimuth_grid()
    n2 = noise_power(snr_db, sigma_s2)
    test_doas = list(test_doas)
    e_phi = np.zeros((len(test_doas), trials))
    e_theta = np.zeros_like(e_phi)
    cids = np.zeros(e_phi.shape, dtype=np.int64)
    for d, doa in enumerate(test_doas):
        for t in range(trials):
            Y = generate_snapshots(geometry, doa, L, sigma_s2, n2, substream(seed, "test/doa", d, t))
            Y.snr_db = snr_db
            try:
                sel = selector.select(Y, doa, substream(seed, "ras", d, t))
            except Exception as exc:
                raise type(exc)(f"selector {selector.name} failed at doa {d}, trial {t}: {exc}") from exc
            est, _ = estimate_on_subarray(geometry, Y, sel.subarray, grid)
            e_phi[d, t] = azimuth_error(est.phi, doa.phi)
            e_theta[d, t] = abs(est.theta - doa.theta)
            cids[d, t] = sel.class_id
    return RmseResult(selector.name, float(snr_db), e_phi, e_theta, cids, grid.is_2d)


def rmse_to_csv(results, M=None, K=None) -> str:
    """One row per result: snr_db, selector, rmse_deg, modal subarray indices."""
    buf = io.StringIO()
    buf.write(f"# cogsel rmse v{RMSE_CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["snr_db", "selector", "rmse_deg", "indices"])
    for r in results:
        cid = r.modal_class()
        if cid < 0 or M is None or K is None:
            idx = "all" if cid < 0 else str(cid)
        else:
            idx = ";".join(str(i) for i in _subarray_of(cid, M, K).indices)
        w.writerow([f"{r.snr_db:g}", r.selector, f"{r.rmse:.10g}", idx])
    return buf.getvalue()


# ---------------------------------------------------------------- scan loop


@dataclass(frozen=True)
class ScanBlock:
    snapshots: int
    snr_db: float
    doa: DoA

    def __post_init__(self):
        if self.snapshots < 1:
            raise ValueError("block size must be >= 1")


@dataclass
class ScanConfig:
    """A schedule of blocks and the reselection policy.

    ``selection_period`` counts blocks between full-array reselections; None
    selects once at the first block. ``drift_deg`` offsets the azimuth seen by
    the selection scan from the truth used for estimation.
    """

    blocks: list
    K: int
    selection_period: int | None = 1
    classifier: str = "cnn"
    selection_snapshots: int = 100
    drift_deg: float = 0.0
    sigma_s2: float = 1.0

    def __post_init__(self):
        if self.selection_period is not None and self.selection_period < 1:
            raise ValueError("selection_period must be >= 1")
        if self.selection_snapshots < 1:
            raise ValueError("selection_snapshots must be >= 1")
        if not self.blocks:
            raise ValueError("schedule has no blocks")


@dataclass
class ScanRecord:
    block: int
    snr_db: float
    subarray: Subarray
    class_id: int
    estimate: DoA
    error_deg: float
    reselected: bool = False


def make_schedule(
    snr_levels=(0.0, 10.0, 20.0, 10.0, 0.0),
    blocks_per_level: int = 1000,
    move_every: int = 500,
    snapshots: int = 100,
    seed: int = 0,
    theta: float = 90.0,
) -> list:
    """Piecewise-constant SNR schedule with a new uniform-random azimuth every ``move_every`` blocks."""
    n = len(snr_levels) * blocks_per_level
    rng = substream(seed, "scan-targets")
    phis = rng.uniform(0.0, 360.0, size=-(-n // move_every))
    return [
        ScanBlock(snapshots, float(snr_levels[b // blocks_per_level]), DoA(theta, float(phis[b // move_every])))
        for b in range(n)
    ]


def scan_loop(cfg: ScanConfig, selector, geometry: ArrayGeometry, seed: int = 0, grid: SearchGrid | None = None):
    """Alternate full-array selection scans with K-antenna estimation blocks.

    A reselection block first draws ``selection_snapshots`` full-array
    snapshots (at the drifted direction) for the selector; every block then
    draws its own snapshots and beamforms on the current subarray only.
    """
    grid = grid or azimuth_grid(theta=cfg.blocks[0].doa.theta)
    records = []
    current = None
    for b, blk in enumerate(cfg.blocks):
        n2 = noise_power(blk.snr_db, cfg.sigma_s2)
        period = cfg.selection_period
        reselect = current is None or (period is not None and b % period == 0)
        if reselect:
            seen = DoA(blk.doa.theta, blk.doa.phi + cfg.drift_deg)
            Ys = generate_snapshots(
                geometry, seen, cfg.selection_snapshots, cfg.sigma_s2, n2, substream(seed, "scan-select", b)
            )
            Ys.snr_db = blk.snr_db
            current = selector.select(Ys, seen, substream(seed, "ras", b))
        Y = generate_snapshots(geometry, blk.doa, blk.snapshots, cfg.sigma_s2, n2, substream(seed, "scan", b))
        est, _ = estimate_on_subarray(geometry, Y, current.subarray, grid)
        err = doa_error(est, blk.doa, grid.is_2d)
        records.append(ScanRecord(b, blk.snr_db, current.subarray, current.class_id, est, err, reselect))
    return records


def level_means(records) -> dict:
    """Mean error per SNR level, pooling every block at that level."""
    acc = {}
    for r in records:
        acc.setdefault(r.snr_db, []).append(r.error_deg)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def scan_to_csv(records, selector: str) -> str:
    buf = io.StringIO()
    buf.write(f"# cogsel scan v{SCAN_CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", "snr_db", "selector", "error_deg", "indices"])
    for r in records:
        w.writerow([r.block, f"{r.snr_db:g}", selector, f"{r.error_deg:.10g}", ";".join(map(str, r.subarray.indices))])
    return buf.getvalue()
