"""Cramer-Rao bounds per subarray and exhaustive best-subarray search.

All bound evaluations go through a batched core that scores every candidate
subarray of a parent array at once: the geometric projector terms depend only
on the direction, the ``a^H R_q^{-1} a`` term on the covariance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoSolutionError
from .geometry import ArrayGeometry, Subarray, subarray_table
from .signal import DoA, SampleCovariance, steering_derivatives, steering_vector

BOUNDS = ("crb1d", "crb2d", "auto")

# relative eps for the ridge added to sample covariances before inversion
REGULARIZATION = 1e-10
# projector terms below this fraction of the derivative energy count as zero
_IDENT_TOL = 1e-12


@dataclass(frozen=True)
class CrbResult:
    """Per-angle bounds and the absolute bound, rad^2. ``inf`` marks an unobservable direction."""

    crb_theta: float
    crb_phi: float
    eta: float

    @property
    def identifiable(self) -> bool:
        return bool(np.isfinite(self.eta))


@dataclass(frozen=True)
class Selection:
    """A chosen subarray, its class id and the bound or score that justified it."""

    class_id: int
    score: float
    subarray: Subarray

    @property
    def eta(self) -> float:
        return self.score


def analytic_covariance(a_q: np.ndarray, sigma_s2: float, sigma_n2: float) -> np.ndarray:
    a_q = np.asarray(a_q, dtype=np.complex128)
    return sigma_s2 * np.outer(a_q, a_q.conj()) + sigma_n2 * np.eye(a_q.size)


def regularize(R: np.ndarray, eps: float = REGULARIZATION) -> np.ndarray:
    """Add ``eps * trace/K * I`` to one or a stack of K x K matrices."""
    K = R.shape[-1]
    tr = np.real(np.trace(R, axis1=-2, axis2=-1))
    return R + (eps * tr / K)[..., None, None] * np.eye(K)


def geometric_terms(a, da_t, da_p, table):
    """Projector quadratic forms for every subarray row in ``table``.

    Returns ``(g_pp, g_tp, e_t, e_p)`` where ``g_pp = da_p^H P da_p``,
    ``g_tp = da_t^H P da_p`` with ``P = I - a a^H / K``, and ``e_*`` are the
    derivative energies used for the identifiability threshold.
    """
    K = table.shape[1]
    aq, tq, pq = a[table], da_t[table], da_p[table]
    a_t = np.sum(aq.conj() * tq, axis=-1)
    a_p = np.sum(aq.conj() * pq, axis=-1)
    e_t = np.sum(np.abs(tq) ** 2, axis=-1)
    e_p = np.sum(np.abs(pq) ** 2, axis=-1)
    g_pp = e_p - np.abs(a_p) ** 2 / K
    g_tp = np.sum(tq.conj() * pq, axis=-1) - a_t.conj() * a_p / K
    return g_pp, g_tp, e_t, e_p


def quad_terms(a, R, table, eps: float = REGULARIZATION) -> np.ndarray:
    """``a_q^H R_q^{-1} a_q`` for every subarray, R_q being the K x K block of ``R``."""
    aq = a[table]
    Rq = R[table[:, :, None], table[:, None, :]]
    Rq = regularize(Rq, eps)
    x = np.linalg.solve(Rq, aq[..., None])[..., 0]
    return np.real(np.sum(aq.conj() * x, axis=-1))


def bound_terms(g_pp, g_tp, e_t, e_p, quad, L, sigma_s2, bound):
    """Bounds per unit noise power, shape (Q,), plus (crb_theta, crb_phi) for the joint bound.

    Multiplying by sigma_n^2 gives the bound itself; ranking on the unit
    version keeps the noise-free limit well defined.
    """
    s4 = sigma_s2**2
    if bound == "crb1d":
        denom = 2.0 * L * g_pp * s4 * quad
        ok = g_pp > _IDENT_TOL * e_p
        unit = np.where(ok, 1.0 / np.where(ok, denom, 1.0), np.inf)
        return unit, None, None
    # joint bound, written as two reals parts of Hadamard products of scalars
    den_t = 2.0 * L * np.real(g_tp * s4 * quad)
    den_p = 2.0 * L * np.real(np.conj(g_tp) * s4 * quad)
    scale = _IDENT_TOL * (e_t + e_p)
    ok = (np.real(g_tp) > scale) & (den_t > 0) & (den_p > 0)
    c_t = np.where(ok, 1.0 / np.where(ok, den_t, 1.0), np.inf)
    c_p = np.where(ok, 1.0 / np.where(ok, den_p, 1.0), np.inf)
    unit = np.sqrt(c_t**2 + c_p**2) / np.sqrt(2.0)
    return unit, c_t, c_p


def _cov_matrix(covariance, a, sigma_s2, sigma_n2):
    if covariance is None:
        return analytic_covariance(a, sigma_s2, sigma_n2)
    return covariance.matrix if isinstance(covariance, SampleCovariance) else np.asarray(covariance)


def crb_pair(geometry, doa: DoA, covariance, L: int, sigma_s2: float, sigma_n2: float) -> CrbResult:
    """Joint (theta, phi) bound for a subarray whose positions are ``geometry``.

    ``covariance`` is the subarray's K x K matrix, or None for the analytic model.
    """
    if L < 1:
        raise ValueError("L must be >= 1")
    a = steering_vector(geometry, doa)
    da_t, da_p = steering_derivatives(geometry, doa)
    table = np.arange(a.size)[None, :]
    R = _cov_matrix(covariance, a, sigma_s2, sigma_n2)
    g = geometric_terms(a, da_t, da_p, table)
    quad = quad_terms(a, R, table)
    unit, c_t, c_p = bound_terms(*g, quad, L, sigma_s2, "crb2d")
    return CrbResult(float(sigma_n2 * c_t[0]), float(sigma_n2 * c_p[0]), float(sigma_n2 * unit[0]))


def crb_1d(geometry, doa: DoA, covariance, L: int, sigma_s2: float, sigma_n2: float) -> float:
    """Azimuth-only bound with the elevation known, rad^2."""
    if L < 1:
        raise ValueError("L must be >= 1")
    a = steering_vector(geometry, doa)
    da_t, da_p = steering_derivatives(geometry, doa)
    table = np.arange(a.size)[None, :]
    R = _cov_matrix(covariance, a, sigma_s2, sigma_n2)
    g = geometric_terms(a, da_t, da_p, table)
    quad = quad_terms(a, R, table)
    unit, _, _ = bound_terms(*g, quad, L, sigma_s2, "crb1d")
    return float(sigma_n2 * unit[0])


class SubarrayScorer:
    """Scores every K-subarray of a parent array for one direction at a time.

    ``candidates`` optionally restricts the search to a subset of class ids
    (random class subsampling); ids always refer to the full lexicographic table.
    """

    def __init__(self, geometry: ArrayGeometry, K: int, bound: str = "crb1d", candidates=None):
        if bound not in BOUNDS:
            raise ValueError(f"unknown bound {bound!r}; expected one of {BOUNDS}")
        self.geometry = geometry
        self.K = K
        self.bound = bound
        table = subarray_table(geometry.M, K)
        if candidates is None:
            self.ids = np.arange(table.shape[0])
        else:
            self.ids = np.asarray(sorted(set(int(c) for c in candidates)), dtype=np.int64)
            if self.ids.size == 0:
                raise ValueError("empty candidate set")
        self.table = table[self.ids]
        self._cache_doa = None

    def _prepare(self, doa):
        if self._cache_doa != doa:
            a = steering_vector(self.geometry, doa)
            da_t, da_p = steering_derivatives(self.geometry, doa)
            self._a = a
            self._g = geometric_terms(a, da_t, da_p, self.table)
            self._cache_doa = doa
        return self._a, self._g

    def unit_bounds(self, doa: DoA, covariance, L: int, sigma_s2: float, sigma_n2: float):
        """Bounds per unit noise power for all candidates, in candidate order."""
        a, g = self._prepare(doa)
        R = _cov_matrix(covariance, a, sigma_s2, sigma_n2)
        quad = quad_terms(a, R, self.table)
        if self.bound == "auto":
            unit, _, _ = bound_terms(*g, quad, L, sigma_s2, "crb2d")
            if not np.any(np.isfinite(unit)):
                unit, _, _ = bound_terms(*g, quad, L, sigma_s2, "crb1d")
            return unit
        unit, _, _ = bound_terms(*g, quad, L, sigma_s2, self.bound)
        return unit

    def best(self, doa: DoA, covariance, L: int, sigma_s2: float, sigma_n2: float) -> Selection:
        unit = self.unit_bounds(doa, covariance, L, sigma_s2, sigma_n2)
        if not np.any(np.isfinite(unit)):
            raise NoSolutionError(
                f"no {self.K}-element subarray can observe {doa} under bound {self.bound}"
            )
        j = int(np.argmin(unit))  # first minimum, i.e. lowest class id
        return Selection(int(self.ids[j]), float(sigma_n2 * unit[j]), Subarray(tuple(self.table[j])))


def best_subarray(
    geometry: ArrayGeometry,
    K: int,
    doa: DoA,
    covariance=None,
    bound: str = "crb1d",
    L: int = 100,
    sigma_s2: float = 1.0,
    sigma_n2: float = 0.01,
    candidates=None,
) -> Selection:
    """Exhaustive argmin of the bound over all C(M, K) subarrays.

    ``covariance`` is the full M x M (sample) covariance; None uses the
    analytic model at the given powers.
    """
    scorer = SubarrayScorer(geometry, K, bound, candidates)
    return scorer.best(doa, covariance, L, sigma_s2, sigma_n2)


def reduce_classes(labels) -> list:
    """Distinct class ids in order of first appearance."""
    labels = list(labels)
    if not labels:
        raise ValueError("need at least one label")
    seen = {}
    for c in labels:
        seen.setdefault(int(c), None)
    return list(seen)
