"""CRB-labelled training and test data.

Samples are the (phase, real, imag) features of the full-array sample
covariance; the label is the class id of the subarray whose bound, evaluated
on the corresponding K x K blocks of the same covariance, is smallest.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .crb import SubarrayScorer, reduce_classes
from .errors import FormatError
from .geometry import ArrayGeometry, ClassSet, class_id, geometry_from_text, geometry_to_text
from .rng import substream
from .signal import DoA, extract_features, generate_snapshots, noise_power, sample_covariance

DATASET_MAGIC = b"CGDS"
DATASET_VERSION = 1


@dataclass
class DatasetConfig:
    geometry: ArrayGeometry
    K: int
    L: int = 100
    P: int = 100
    T: int = 100
    snr_train: list = field(default_factory=lambda: [20.0])
    bound: str = "crb1d"
    seed: int = 0
    sigma_s2: float = 1.0
    # "grid": uniform azimuth (x elevation) grid; "random": uniform random draws
    directions: str = "grid"
    # elevation grid for 2-D scenarios; P_theta = 1 pins theta to theta_range[0]
    P_theta: int = 1
    theta_range: tuple = (90.0, 100.0)
    random_theta_range: tuple = (90.0, 90.0)
    # "sample" scores K x K blocks of the sample covariance, "analytic" the model
    label_source: str = "sample"
    class_subsample: float | None = None
    stream: str = "dataset"
    workers: int = 1

    def __post_init__(self):
        if self.L < 1 or self.P < 1 or self.T < 1:
            raise ValueError("L, P and T must all be >= 1")
        if not self.snr_train:
            raise ValueError("at least one SNR level is required")
        if self.directions not in ("grid", "random"):
            raise ValueError(f"unknown direction mode {self.directions!r}")
        if self.label_source not in ("sample", "analytic"):
            raise ValueError(f"unknown label source {self.label_source!r}")
        if self.class_subsample is not None and not 0 < self.class_subsample <= 1:
            raise ValueError("class_subsample must lie in (0, 1]")


@dataclass
class LabeledDataset:
    features: np.ndarray  # (J, 3, M, M) float64
    labels: np.ndarray  # (J,) global class ids
    class_set: ClassSet
    meta: dict
    doas: np.ndarray | None = None  # (J, 2) theta, phi in degrees
    snr: np.ndarray | None = None  # (J,) dB

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4 or self.features.shape[1] != 3:
            raise ValueError("features must be (J, 3, M, M)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on J")
        if self.features.shape[2] != self.class_set.M:
            raise ValueError("feature size does not match the class set M")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def M(self) -> int:
        return self.class_set.M

    @property
    def K(self) -> int:
        return self.class_set.K

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            self.class_set,
            dict(self.meta),
            None if self.doas is None else self.doas[idx],
            None if self.snr is None else self.snr[idx],
        )

    def covariances(self) -> np.ndarray:
        """Recover the complex M x M sample covariances from the real/imag channels."""
        return self.features[:, 1] + 1j * self.features[:, 2]

    def split(self, val_fraction: float, rng: np.random.Generator):
        if not 0 < val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        J = len(self)
        perm = rng.permutation(J)
        n_val = int(round(val_fraction * J))
        n_val = min(max(n_val, 1), J - 1) if J > 1 else 0
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def direction_set(cfg: DatasetConfig, snr_index: int = 0) -> list:
    """The P label directions: a uniform grid, or a random draw for test data."""
    if cfg.directions == "grid":
        phis = 360.0 * np.arange(cfg.P) / cfg.P
        if cfg.P_theta == 1:
            thetas = np.array([cfg.theta_range[0]])
        else:
            thetas = np.linspace(cfg.theta_range[0], cfg.theta_range[1], cfg.P_theta)
        return [DoA(t, p) for t in thetas for p in phis]
    rng = substream(cfg.seed, cfg.stream + "/directions", snr_index)
    n = cfg.P * cfg.P_theta
    lo, hi = cfg.random_theta_range
    thetas = rng.uniform(lo, hi, n) if hi > lo else np.full(n, float(lo))
    phis = rng.uniform(0.0, 360.0, n)
    return [DoA(t, p) for t, p in zip(thetas, phis)]


def _candidates(cfg: DatasetConfig, Q: int):
    if cfg.class_subsample is None or cfg.class_subsample >= 1:
        return None
    rng = substream(cfg.seed, cfg.stream + "/classes")
    n = max(1, int(round(cfg.class_subsample * Q)))
    return np.sort(rng.choice(Q, size=n, replace=False))


def _direction_block(cfg, scorer, s_idx, p_idx, doa, sigma_n2):
    """T realizations for one (SNR, direction) pair."""
    rng = substream(cfg.seed, cfg.stream, s_idx, p_idx)
    M = cfg.geometry.M
    feats = np.empty((cfg.T, 3, M, M))
    labels = np.empty(cfg.T, dtype=np.int64)
    for i in range(cfg.T):
        Y = generate_snapshots(cfg.geometry, doa, cfg.L, cfg.sigma_s2, sigma_n2, rng)
        R = sample_covariance(Y)
        cov = R if cfg.label_source == "sample" else None
        labels[i] = scorer.best(doa, cov, cfg.L, cfg.sigma_s2, sigma_n2).class_id
        feats[i] = extract_features(R)
    return feats, labels


def build_dataset(cfg: DatasetConfig) -> LabeledDataset:
    """Generate J = T * P labelled samples per SNR level.

    Sample order is SNR-major, then direction, then realization.
    """
    geometry = cfg.geometry
    cs = ClassSet(geometry.M, cfg.K)
    candidates = _candidates(cfg, cs.Q)
    feats, labels, doas, snrs = [], [], [], []
    for s_idx, snr in enumerate(cfg.snr_train):
        sigma_n2 = noise_power(float(snr), cfg.sigma_s2)
        dirs = direction_set(cfg, s_idx)
        jobs = [(s_idx, p, d) for p, d in enumerate(dirs)]

        def run(job, sigma_n2=sigma_n2):
            scorer = SubarrayScorer(geometry, cfg.K, cfg.bound, candidates)
            return _direction_block(cfg, scorer, job[0], job[1], job[2], sigma_n2)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                blocks = list(pool.map(run, jobs))
        else:
            scorer = SubarrayScorer(geometry, cfg.K, cfg.bound, candidates)
            blocks = [_direction_block(cfg, scorer, s, p, d, sigma_n2) for s, p, d in jobs]
        for (f, lab), d in zip(blocks, dirs):
            feats.append(f)
            labels.append(lab)
            doas.append(np.tile([d.theta, d.phi], (cfg.T, 1)))
            snrs.append(np.full(cfg.T, float(snr)))
    labels = np.concatenate(labels)
    cs.reduced = reduce_classes(labels)
    meta = {
        "M": geometry.M,
        "K": cfg.K,
        "L": cfg.L,
        "P": len(direction_set(cfg, 0)),
        "T": cfg.T,
        "snr_train": [float(s) for s in cfg.snr_train],
        "geometry": geometry.label,
        "seed": cfg.seed,
        "bound": cfg.bound,
    }
    return LabeledDataset(
        np.concatenate(feats), labels, cs, meta, np.concatenate(doas), np.concatenate(snrs)
    )


def label_histogram(ds: LabeledDataset) -> list:
    """(class id, subarray, count) rows in reduced-set order."""
    order = ds.class_set.reduced if ds.class_set.reduced is not None else reduce_classes(ds.labels)
    counts = {c: 0 for c in order}
    for c in ds.labels:
        counts[int(c)] = counts.get(int(c), 0) + 1
    return [(c, ds.class_set.subarray(c), counts[c]) for c in order]


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    cs = ds.class_set
    reduced = cs.reduced if cs.reduced is not None else reduce_classes(ds.labels)
    row_of = {c: r for r, c in enumerate(reduced)}
    meta = ds.meta
    snrs = meta.get("snr_train", [])
    geom_doc = meta.get("geometry_doc", "").encode("utf-8")
    head = bytearray(DATASET_MAGIC)
    head += struct.pack(
        "<HIIIIIIII",
        DATASET_VERSION,
        cs.M,
        cs.K,
        cs.Q,
        len(reduced),
        int(meta.get("L", 0)),
        int(meta.get("P", 0)),
        int(meta.get("T", 0)),
        len(snrs),
    )
    head += struct.pack(f"<{len(snrs)}d", *snrs)
    head += struct.pack("<QI", int(meta.get("seed", 0)), len(geom_doc))
    head += geom_doc
    table = np.array([cs.table[c] for c in reduced], dtype="<u4").reshape(len(reduced), cs.K)
    head += table.tobytes()
    head += struct.pack("<Q", len(ds))
    rec = np.dtype([("x", "<f8", (3 * cs.M * cs.M,)), ("z", "<u4")])
    body = np.empty(len(ds), dtype=rec)
    body["x"] = ds.features.reshape(len(ds), -1)
    try:
        body["z"] = [row_of[int(c)] for c in ds.labels]
    except KeyError as exc:
        raise ValueError(f"label {exc} missing from the reduced class set") from exc
    return bytes(head) + body.tobytes()


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    if buf[:4] != DATASET_MAGIC:
        raise FormatError(f"not a dataset file (magic {buf[:4]!r})")
    off = 4
    try:
        version, M, K, Q, Qbar, L, P, T, n_snr = struct.unpack_from("<HIIIIIIII", buf, off)
        if version != DATASET_VERSION:
            raise FormatError(f"unsupported dataset version {version}")
        off += struct.calcsize("<HIIIIIIII")
        snrs = list(struct.unpack_from(f"<{n_snr}d", buf, off))
        off += 8 * n_snr
        seed, glen = struct.unpack_from("<QI", buf, off)
        off += 12
        geom_doc = buf[off : off + glen].decode("utf-8")
        off += glen
        table = np.frombuffer(buf, dtype="<u4", count=Qbar * K, offset=off).reshape(Qbar, K)
        off += 4 * Qbar * K
        (J,) = struct.unpack_from("<Q", buf, off)
        off += 8
        rec = np.dtype([("x", "<f8", (3 * M * M,)), ("z", "<u4")])
        if len(buf) - off != J * rec.itemsize:
            raise FormatError("dataset body length does not match its header")
        body = np.frombuffer(buf, dtype=rec, count=J, offset=off)
    except struct.error as exc:
        raise FormatError(f"truncated dataset header: {exc}") from exc
    reduced = [class_id(tuple(int(i) for i in row), M) for row in table]
    cs = ClassSet(M, K, reduced)
    if cs.Q != Q:
        raise FormatError(f"header Q={Q} inconsistent with C({M},{K})={cs.Q}")
    z = body["z"].astype(np.int64)
    if J and z.max() >= Qbar:
        raise FormatError("label row outside the class table")
    labels = np.asarray(reduced, dtype=np.int64)[z] if J else np.empty(0, np.int64)
    meta = {"M": M, "K": K, "L": L, "P": P, "T": T, "snr_train": snrs, "seed": seed}
    if geom_doc:
        meta["geometry_doc"] = geom_doc
        meta["geometry"] = geometry_from_text(geom_doc).label
    feats = body["x"].reshape(J, 3, M, M).astype(np.float64)
    # records are SNR-major, so per-sample SNR follows from the header when sizes agree
    snr = np.repeat(np.asarray(snrs, dtype=np.float64), P * T) if J == n_snr * P * T else None
    return LabeledDataset(feats, labels, cs, meta, snr=snr)


def save_dataset(ds: LabeledDataset, path, geometry: ArrayGeometry | None = None) -> None:
    if geometry is not None:
        ds.meta["geometry_doc"] = geometry_to_text(geometry)
    with open(path, "wb") as fh:
        fh.write(dataset_to_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        return dataset_from_bytes(fh.read())
