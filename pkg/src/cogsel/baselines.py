"""Reference selectors: a linear one-vs-rest SVM and random antenna selection (RAS)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .crb import Selection
from .errors import FormatError, NumericError
from .geometry import Subarray, class_id
from .rng import substream

SVM_MAGIC = b"CGSV"
SVM_VERSION = 1
RAS_SCORES = ("peak_to_mean", "peak", "none")


@dataclass
class SvmConfig:
    C: float = 1.0
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 0


@dataclass
class SvmModel:
    """Per-class weights over standardized flattened features; column 0 is the bias."""

    weights: np.ndarray  # (n_classes, 1 + 3*M*M)
    mean: np.ndarray
    scale: np.ndarray
    class_ids: list
    M: int

    def scores(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.shape[1:] != (3, self.M, self.M):
            raise ValueError(f"feature shape {X.shape[1:]} does not match SVM input (3, {self.M}, {self.M})")
        Z = (X.reshape(X.shape[0], -1) - self.mean) / self.scale
        return Z @ self.weights[:, 1:].T + self.weights[:, 0]


def standardize_stats(X2d):
    mean = X2d.mean(axis=0)
    scale = X2d.std(axis=0)
    # constant features (e.g. zero phase on the diagonal) are left unscaled
    scale = np.where(scale > 1e-12, scale, 1.0)
    return mean, scale


def svm_train(dataset, cfg: SvmConfig | None = None) -> SvmModel:
    """One-vs-rest linear SVM by full-batch subgradient descent.

    Each class minimizes ``||w||^2 / (2C) + mean_i max(0, 1 - y_i (w.x_i + b))``
    with the bias unregularized. The objective is an average, so duplicating
    every sample leaves the minimizer unchanged.
    """
    cfg = cfg or SvmConfig()
    if len(dataset) == 0:
        raise ValueError("cannot train an SVM on an empty dataset")
    X = dataset.features.reshape(len(dataset), -1)
    mean, scale = standardize_stats(X)
    Z = (X - mean) / scale
    class_ids = sorted(set(int(c) for c in dataset.labels))
    lut = {c: i for i, c in enumerate(class_ids)}
    target = np.array([lut[int(c)] for c in dataset.labels])
    n, d = Z.shape
    Y = -np.ones((n, len(class_ids)))
    Y[np.arange(n), target] = 1.0
    W = np.zeros((len(class_ids), d))
    b = np.zeros(len(class_ids))
    lam = 1.0 / cfg.C
    for epoch in range(cfg.epochs):
        margin = Y * (Z @ W.T + b)
        active = (margin < 1.0) * Y  # d hinge / d score = -y where the margin is violated
        gW = lam * W - active.T @ Z / n
        gb = -active.sum(axis=0) / n
        W -= cfg.lr * gW
        b -= cfg.lr * gb
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NumericError(f"SVM weights became non-finite at epoch {epoch}; lower lr")
    weights = np.concatenate([b[:, None], W], axis=1)
    return SvmModel(weights, mean, scale, class_ids, dataset.M)


def svm_predict(model: SvmModel, x) -> int:
    """Global class id with the highest one-vs-rest score; ties go to the lowest id."""
    return model.class_ids[int(np.argmax(model.scores(x)[0]))]


def svm_predict_classes(model: SvmModel, X) -> np.ndarray:
    return np.asarray(model.class_ids)[np.argmax(model.scores(X), axis=1)]


def svm_accuracy(model: SvmModel, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return 100.0 * float(np.mean(svm_predict_classes(model, dataset.features) == dataset.labels))


def svm_to_bytes(model: SvmModel) -> bytes:
    n, d = model.weights.shape
    out = bytearray(SVM_MAGIC)
    out += struct.pack("<HIII", SVM_VERSION, model.M, n, d)
    out += struct.pack(f"<{n}I", *model.class_ids)
    for arr in (model.mean, model.scale, model.weights):
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def svm_from_bytes(buf: bytes) -> SvmModel:
    if buf[:4] != SVM_MAGIC:
        raise FormatError(f"not an SVM checkpoint (magic {buf[:4]!r})")
    try:
        version, M, n, d = struct.unpack_from("<HIII", buf, 4)
    except struct.error as exc:
        raise FormatError("truncated SVM header") from exc
    if version != SVM_VERSION:
        raise FormatError(f"unsupported SVM version {version}")
    if d != 1 + 3 * M * M:
        raise FormatError(f"weight width {d} inconsistent with M={M}")
    off = 4 + struct.calcsize("<HIII")
    class_ids = list(struct.unpack_from(f"<{n}I", buf, off))
    off += 4 * n
    need = off + 8 * (2 * (d - 1) + n * d)
    if len(buf) != need:
        raise FormatError("SVM checkpoint length does not match its header")
    mean = np.frombuffer(buf, "<f8", d - 1, off).astype(np.float64)
    off += 8 * (d - 1)
    scale = np.frombuffer(buf, "<f8", d - 1, off).astype(np.float64)
    off += 8 * (d - 1)
    weights = np.frombuffer(buf, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    return SvmModel(weights, mean, scale, class_ids, M)


def save_svm(model: SvmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(svm_to_bytes(model))


def load_svm(path) -> SvmModel:
    with open(path, "rb") as fh:
        return svm_from_bytes(fh.read())


# ---------------------------------------------------------------- random selection


def random_subsets(M: int, K: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """n independent uniform K-subsets of range(M), each row sorted."""
    keys = rng.random((n, M))
    return np.sort(np.argsort(keys, axis=1)[:, :K], axis=1)


def subset_spectra(A: np.ndarray, R: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Bartlett spectra of many subarrays at once.

    ``A`` is the full-array steering matrix (M, G), ``R`` the full covariance,
    ``table`` (N, K) subset rows; returns (N, G) powers normalized by K.
    """
    K = table.shape[1]
    As = A[table]  # (N, K, G)
    Rs = R[table[:, :, None], table[:, None, :]]  # (N, K, K)
    return np.real(np.sum(As.conj() * (Rs @ As), axis=1)) / K


def score_spectra(power: np.ndarray, rule: str = "peak_to_mean") -> np.ndarray:
    if rule == "peak_to_mean":
        return power.max(axis=-1) / power.mean(axis=-1)
    if rule == "peak":
        return power.max(axis=-1)
    if rule == "none":
        return np.zeros(power.shape[0])
    raise ValueError(f"unknown RAS scoring rule {rule!r}; expected one of {RAS_SCORES}")


def random_selection(
    M: int,
    K: int,
    realizations: int,
    Y,
    grid,
    rng: np.random.Generator,
    geometry=None,
    score: str = "peak_to_mean",
    chunk: int = 250,
) -> Selection:
    """Best of ``realizations`` random K-subsets, scored on their beamformer spectra.

    ``grid`` is a :class:`cogsel.doa.SearchGrid` and ``geometry`` the parent
    array; both are unused with ``score="none"``. The first maximum wins ties,
    and with ``score="none"`` that is simply the first draw.
    """
    from .doa import grid_steering  # avoid an import cycle
    from .signal import sample_covariance

    if realizations < 1:
        raise ValueError("need at least one realization")
    table = random_subsets(M, K, realizations, rng)
    if score == "none":
        best = 0
        best_score = 0.0
    else:
        if geometry is None:
            raise ValueError("spectrum scoring needs the parent geometry")
        data = Y.data if hasattr(Y, "data") else np.asarray(Y)
        R = sample_covariance(data).matrix
        A = grid_steering(geometry, grid)
        scores = np.concatenate(
            [score_spectra(subset_spectra(A, R, table[i : i + chunk]), score) for i in range(0, realizations, chunk)]
        )
        best = int(np.argmax(scores))
        best_score = float(scores[best])
    sub = Subarray(tuple(int(i) for i in table[best]))
    return Selection(class_id(sub, M), best_score, sub)


def ras_stream(seed: int, *keys: int) -> np.random.Generator:
    return substream(seed, "ras", *keys)
