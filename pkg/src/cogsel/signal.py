"""Narrowband single-source array signal model.

The steering vector is ``a_m = exp(-j 2 pi p_m . r(theta, phi))`` with ``p_m``
in wavelengths. Setting :data:`CONJUGATE` to True flips the exponent sign
globally; bounds are unaffected, but every beamformer in a run must agree.
Angles are taken in degrees at the API and derivatives are per radian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import FormatError
from .geometry import ArrayGeometry

CONJUGATE = False

SNAPSHOT_MAGIC = b"CGSY"
COVARIANCE_MAGIC = b"CGSC"
_BIN_VERSION = 1


def _sign(conjugate):
    if conjugate is None:
        conjugate = CONJUGATE
    return 1.0 if conjugate else -1.0


@dataclass(frozen=True)
class DoA:
    """Elevation ``theta`` in [0, 180] and azimuth ``phi`` in [0, 360), degrees."""

    theta: float
    phi: float

    def __post_init__(self):
        theta, phi = float(self.theta), float(self.phi)
        if not (np.isfinite(theta) and np.isfinite(phi)):
            raise ValueError("DoA angles must be finite")
        if not 0.0 <= theta <= 180.0:
            raise ValueError(f"elevation {theta} outside [0, 180]")
        phi = phi % 360.0
        if phi == 360.0:  # -tiny % 360 rounds up
            phi = 0.0
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "phi", phi)

    @property
    def radians(self) -> tuple:
        return np.deg2rad(self.theta), np.deg2rad(self.phi)


class DirectionCosines(NamedTuple):
    mu: float
    nu: float
    xi: float


def direction_vector(doa: DoA) -> DirectionCosines:
    r, _, _ = _unit_and_derivs(doa.theta, doa.phi)
    return DirectionCosines(*(float(v) for v in r))


def doa_from_cosines(dc: DirectionCosines, tol: float = 1e-15) -> tuple[DoA, bool]:
    """Invert :func:`direction_vector`.

    Returns ``(doa, degenerate)``; ``degenerate`` is True at the zenith or nadir,
    where the azimuth is undefined and reported as 0.
    """
    mu, nu, xi = (float(v) for v in dc)
    norm = np.sqrt(mu * mu + nu * nu + xi * xi)
    if norm == 0:
        raise ValueError("direction cosines must not all be zero")
    theta = np.rad2deg(np.arccos(np.clip(xi / norm, -1.0, 1.0)))
    if np.hypot(mu, nu) <= tol * norm:
        return DoA(theta, 0.0), True
    phi = np.rad2deg(np.arctan2(nu, mu))
    return DoA(theta, phi), False


def cos_sin_deg(deg):
    """cos and sin of angles in degrees, exact at multiples of 90."""
    deg = np.asarray(deg, dtype=np.float64)
    rad = np.deg2rad(deg)
    c, s = np.cos(rad), np.sin(rad)
    quarter = np.mod(deg, 360.0) / 90.0
    exact = quarter == np.round(quarter)
    if np.any(exact):
        q = np.round(quarter).astype(int) % 4
        c = np.where(exact, np.array([1.0, 0.0, -1.0, 0.0])[q], c)
        s = np.where(exact, np.array([0.0, 1.0, 0.0, -1.0])[q], s)
    return c, s


def _unit_and_derivs(theta_deg, phi_deg):
    """r, dr/dtheta, dr/dphi as (..., 3) arrays."""
    ct, st = cos_sin_deg(theta_deg)
    cp, sp = cos_sin_deg(phi_deg)
    r = np.stack(np.broadcast_arrays(cp * st, sp * st, ct), axis=-1)
    dr_t = np.stack(np.broadcast_arrays(cp * ct, sp * ct, -st), axis=-1)
    dr_p = np.stack(np.broadcast_arrays(-sp * st, cp * st, np.zeros_like(st * sp)), axis=-1)
    return r, dr_t, dr_p


def _positions(geometry) -> np.ndarray:
    return geometry.positions if isinstance(geometry, ArrayGeometry) else np.asarray(geometry, float)


def steering_matrix(geometry, theta_deg, phi_deg, conjugate=None) -> np.ndarray:
    """Steering vectors for a batch of directions, shape (M, N).

    ``theta_deg`` and ``phi_deg`` broadcast against each other and are flattened.
    """
    pos = _positions(geometry)
    th = np.asarray(theta_deg, dtype=np.float64).ravel()
    ph = np.asarray(phi_deg, dtype=np.float64).ravel()
    th, ph = np.broadcast_arrays(th, ph)
    r, _, _ = _unit_and_derivs(th, ph)
    return np.exp(_sign(conjugate) * 2j * np.pi * (pos @ r.T))


def steering_vector(geometry, doa: DoA, conjugate=None) -> np.ndarray:
    return steering_matrix(geometry, doa.theta, doa.phi, conjugate)[:, 0]


def steering_derivatives(geometry, doa: DoA, conjugate=None) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (da/dtheta, da/dphi), per radian."""
    pos = _positions(geometry)
    r, dr_t, dr_p = _unit_and_derivs(doa.theta, doa.phi)
    s = _sign(conjugate)
    a = np.exp(s * 2j * np.pi * (pos @ r))
    da_t = s * 2j * np.pi * (pos @ dr_t) * a
    da_p = s * 2j * np.pi * (pos @ dr_p) * a
    return da_t, da_p


@dataclass
class SnapshotMatrix:
    data: np.ndarray
    snr_db: float = float("nan")

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError("snapshot data must be M x L with L >= 1")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("snapshot data must be finite")

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def L(self) -> int:
        return self.data.shape[1]

    def rows(self, indices) -> "SnapshotMatrix":
        return SnapshotMatrix(self.data[list(indices)], self.snr_db)


@dataclass
class SampleCovariance:
    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=np.complex128)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise ValueError("covariance must be square")
        self.matrix = R

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    def sub(self, indices) -> "SampleCovariance":
        idx = np.asarray(list(indices))
        return SampleCovariance(self.matrix[np.ix_(idx, idx)])


def snr_db(sigma_s2: float, sigma_n2: float) -> float:
    if sigma_n2 == 0:
        return float("inf")
    return float(10.0 * np.log10(sigma_s2 / sigma_n2))


def noise_power(snr: float, sigma_s2: float = 1.0) -> float:
    """Noise power for a given SNR in dB; ``inf`` gives a noise-free model."""
    if np.isinf(snr) and snr > 0:
        return 0.0
    return float(sigma_s2 / 10.0 ** (snr / 10.0))


def complex_normal(rng: np.random.Generator, shape, power: float) -> np.ndarray:
    """Circularly-symmetric CN(0, power) draws: real and imaginary parts each carry power/2."""
    scale = np.sqrt(power / 2.0)
    z = rng.standard_normal(tuple(shape) + (2,))
    return scale * (z[..., 0] + 1j * z[..., 1])


def generate_snapshots(
    geometry,
    doa: DoA,
    L: int,
    sigma_s2: float,
    sigma_n2: float,
    rng: np.random.Generator,
    conjugate=None,
) -> SnapshotMatrix:
    """Y = a s^T + N for one source. ``sigma_n2 = 0`` produces noise-free data."""
    if L < 1:
        raise ValueError("need at least one snapshot")
    if not sigma_s2 > 0:
        raise ValueError("signal power must be positive")
    if sigma_n2 < 0:
        raise ValueError("noise power must be nonnegative")
    a = steering_vector(geometry, doa, conjugate)
    s = complex_normal(rng, (L,), sigma_s2)
    Y = np.outer(a, s)
    if sigma_n2 > 0:
        Y = Y + complex_normal(rng, (a.size, L), sigma_n2)
    return SnapshotMatrix(Y, snr_db(sigma_s2, sigma_n2))


def sample_covariance(Y) -> SampleCovariance:
    data = Y.data if isinstance(Y, SnapshotMatrix) else np.asarray(Y)
    R = data @ data.conj().T / data.shape[1]
    # exact Hermitian symmetry regardless of BLAS summation order
    R = 0.5 * (R + R.conj().T)
    return SampleCovariance(R)


def extract_features(R) -> np.ndarray:
    """(phase, real, imag) channels of a covariance, shape (3, M, M) or (N, 3, M, M)."""
    mat = R.matrix if isinstance(R, SampleCovariance) else np.asarray(R)
    return np.stack([np.angle(mat), mat.real, mat.imag], axis=-3)


def _write_complex(magic: bytes, data: np.ndarray) -> bytes:
    rows, cols = data.shape
    head = magic + struct.pack("<BII", _BIN_VERSION, rows, cols)
    body = np.ascontiguousarray(data, dtype="<c16").tobytes()  # interleaved re, im
    return head + body


def _read_complex(magic: bytes, buf: bytes) -> np.ndarray:
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    version, rows, cols = struct.unpack_from("<BII", buf, 4)
    if version != _BIN_VERSION:
        raise FormatError(f"unsupported version {version}")
    body = buf[13:]
    if len(body) != rows * cols * 16:
        raise FormatError("truncated complex matrix record")
    return np.frombuffer(body, dtype="<c16").reshape(rows, cols).astype(np.complex128)


def snapshots_to_bytes(Y: SnapshotMatrix) -> bytes:
    return _write_complex(SNAPSHOT_MAGIC, Y.data)


def snapshots_from_bytes(buf: bytes) -> SnapshotMatrix:
    return SnapshotMatrix(_read_complex(SNAPSHOT_MAGIC, buf))


def covariance_to_bytes(R: SampleCovariance) -> bytes:
    return _write_complex(COVARIANCE_MAGIC, R.matrix)


def covariance_from_bytes(buf: bytes) -> SampleCovariance:
    return SampleCovariance(_read_complex(COVARIANCE_MAGIC, buf))
