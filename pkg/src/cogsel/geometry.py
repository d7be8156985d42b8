"""Array geometries, K-of-M subarray enumeration and class sets.

Positions are stored in units of the carrier wavelength, so phase terms
need no division by the wavelength. Antenna and class indices are 0-based.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import FormatError

KINDS = ("ula", "uca", "rda", "custom")


@dataclass(frozen=True)
class ArrayGeometry:
    """Antenna positions (M x 3, wavelengths) plus the carrier wavelength in meters."""

    positions: np.ndarray
    wavelength: float = 0.1
    label: str = "custom"

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must be M x 3, got shape {pos.shape}")
        if pos.shape[0] < 2:
            raise ValueError("an array needs at least 2 antennas")
        if not np.all(np.isfinite(pos)):
            raise ValueError("antenna positions must be finite")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        if self.label not in KINDS:
            raise ValueError(f"unknown geometry kind {self.label!r}")
        if len(np.unique(np.round(pos, 12), axis=0)) != pos.shape[0]:
            raise ValueError("two antennas share the same position")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @property
    def M(self) -> int:
        return self.positions.shape[0]

    def is_planar(self) -> bool:
        return bool(np.all(self.positions[:, 2] == 0.0))

    def __eq__(self, other):
        if not isinstance(other, ArrayGeometry):
            return NotImplemented
        return (
            self.label == other.label
            and self.wavelength == other.wavelength
            and np.array_equal(self.positions, other.positions)
        )

    def __hash__(self):
        return hash((self.label, self.wavelength, self.positions.tobytes()))

    def to_text(self) -> str:
        return geometry_to_text(self)


def make_ula(M: int, spacing: float = 0.5, wavelength: float = 0.1) -> ArrayGeometry:
    """Uniform linear array along +x, element 0 at the origin."""
    if M < 2:
        raise ValueError(f"ULA needs M >= 2, got {M}")
    if not spacing > 0:
        raise ValueError(f"ULA spacing must be positive, got {spacing}")
    pos = np.zeros((M, 3))
    pos[:, 0] = np.arange(M) * spacing
    return ArrayGeometry(pos, wavelength, "ula")


def uca_radius(M: int, adjacent_spacing: float = 0.5, chord: bool = True) -> float:
    """Radius of an M-element circle whose neighbours are ``adjacent_spacing`` apart.

    With ``chord=False`` the spacing is measured along the arc instead.
    """
    if chord:
        return adjacent_spacing / (2.0 * math.sin(math.pi / M))
    return adjacent_spacing * M / (2.0 * math.pi)


def make_uca(
    M: int, adjacent_spacing: float = 0.5, wavelength: float = 0.1, chord: bool = True
) -> ArrayGeometry:
    """Uniform circular array in the z=0 plane, indexed counter-clockwise from +x."""
    if M < 3:
        raise ValueError(f"UCA needs M >= 3, got {M}")
    if not adjacent_spacing > 0:
        raise ValueError("UCA spacing must be positive")
    r = uca_radius(M, adjacent_spacing, chord)
    ang = 2.0 * np.pi * np.arange(M) / M
    pos = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(M)], axis=1)
    return ArrayGeometry(pos, wavelength, "uca")


def make_rda(
    rows: int,
    cols: int,
    spacing: float = 0.5,
    perturb_max: float = 0.1,
    seed: int = 0,
    wavelength: float = 0.1,
) -> ArrayGeometry:
    """Rectangular grid with each (x, y) jittered by U[-perturb_max, perturb_max].

    Elements are indexed row-major, x fastest.
    """
    if rows < 1 or cols < 1 or rows * cols < 2:
        raise ValueError("RDA needs rows*cols >= 2")
    if not spacing > 0:
        raise ValueError("RDA spacing must be positive")
    if perturb_max < 0 or perturb_max >= spacing / 2:
        raise ValueError(
            f"perturb_max must lie in [0, spacing/2), got {perturb_max} for spacing {spacing}"
        )
    yy, xx = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    pos = np.zeros((rows * cols, 3))
    pos[:, 0] = xx.ravel() * spacing
    pos[:, 1] = yy.ravel() * spacing
    if perturb_max > 0:
        rng = np.random.default_rng(seed)
        pos[:, :2] += rng.uniform(-perturb_max, perturb_max, size=(rows * cols, 2))
    return ArrayGeometry(pos, wavelength, "rda")


@dataclass(frozen=True)
class Subarray:
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(idx) < 1:
            raise ValueError("a subarray needs at least one antenna")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"subarray indices must be strictly increasing: {idx}")
        if idx[0] < 0:
            raise ValueError("negative antenna index")
        object.__setattr__(self, "indices", idx)

    @property
    def K(self) -> int:
        return len(self.indices)

    def one_based(self) -> tuple:
        return tuple(i + 1 for i in self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __len__(self):
        return len(self.indices)


def _check_mk(M: int, K: int) -> None:
    if M < 2:
        raise ValueError(f"M must be >= 2, got {M}")
    if K < 1 or K >= M:
        raise ValueError(f"need 1 <= K < M, got K={K}, M={M}")


def enumerate_subarrays(M: int, K: int) -> Iterator[Subarray]:
    """All C(M, K) subarrays in lexicographic order; position in the sequence is the class id."""
    _check_mk(M, K)
    for combo in itertools.combinations(range(M), K):
        yield Subarray(combo)


def subarray_table(M: int, K: int) -> np.ndarray:
    """Q x K integer table of all subarrays, row q being class q."""
    _check_mk(M, K)
    return np.array(list(itertools.combinations(range(M), K)), dtype=np.int64).reshape(-1, K)


def class_id(subarray: Subarray | Sequence[int], M: int) -> int:
    """Lexicographic rank of a sorted K-subset of range(M)."""
    idx = list(subarray)
    K = len(idx)
    _check_mk(M, K)
    rank = 0
    prev = -1
    for pos, i in enumerate(idx):
        if not (prev < i < M):
            raise ValueError(f"invalid subarray {idx} for M={M}")
        for j in range(prev + 1, i):
            rank += math.comb(M - 1 - j, K - 1 - pos)
        prev = i
    return rank


def restrict(geometry: ArrayGeometry, subarray: Subarray | Sequence[int]) -> ArrayGeometry:
    idx = list(subarray)
    if not isinstance(subarray, Subarray):
        subarray = Subarray(tuple(idx))
    if subarray.K >= geometry.M:
        raise ValueError("a subarray must have fewer antennas than its parent")
    if idx[-1] >= geometry.M:
        raise ValueError(f"antenna index {idx[-1]} out of range for M={geometry.M}")
    return ArrayGeometry(geometry.positions[idx], geometry.wavelength, geometry.label)


@dataclass
class ClassSet:
    """All subarrays of one (M, K) pair plus the optional reduced set of class ids."""

    M: int
    K: int
    reduced: list | None = None
    table: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.table = subarray_table(self.M, self.K)
        if self.reduced is not None:
            red = [int(c) for c in self.reduced]
            if len(set(red)) != len(red):
                raise ValueError("reduced class ids must be distinct")
            if any(c < 0 or c >= self.Q for c in red):
                raise ValueError("reduced class id out of range")
            self.reduced = red

    @property
    def Q(self) -> int:
        return self.table.shape[0]

    @property
    def Q_bar(self) -> int:
        return len(self.reduced) if self.reduced is not None else self.Q

    def subarray(self, cid: int) -> Subarray:
        return Subarray(tuple(self.table[cid]))

    @property
    def classes(self) -> list:
        return [self.subarray(q) for q in range(self.Q)]

    def output_classes(self, use_reduced: bool = True) -> list:
        """Class ids in network-output order."""
        if use_reduced and self.reduced is not None:
            return list(self.reduced)
        return list(range(self.Q))


def geometry_to_text(geometry: ArrayGeometry) -> str:
    lines = [
        "# cogsel array geometry v1",
        f"kind: {geometry.label}",
        f"M: {geometry.M}",
        f"wavelength: {geometry.wavelength!r}",
        "positions:  # x y z in wavelengths",
    ]
    for x, y, z in geometry.positions:
        lines.append(f"{x:.17g} {y:.17g} {z:.17g}")
    return "\n".join(lines) + "\n"


def geometry_from_text(text: str) -> ArrayGeometry:
    header = {}
    rows = []
    in_table = False
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if in_table:
            rows.append([float(v) for v in line.split()])
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise FormatError(f"malformed geometry line: {raw!r}")
        key = key.strip()
        if key == "positions":
            in_table = True
        else:
            header[key] = value.strip()
    try:
        M = int(header["M"])
        kind = header["kind"]
        wavelength = float(header["wavelength"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete geometry header: {exc}") from exc
    pos = np.array(rows, dtype=np.float64)
    if pos.shape != (M, 3):
        raise FormatError(f"expected {M} x 3 positions, got {pos.shape}")
    return ArrayGeometry(pos, wavelength, kind)
