"""Convolutional subarray classifier, written directly in numpy (float64).

Layer stack for an M x M x 3 input::

    conv 2x2 (F filters, same padding) -> ReLU -> maxpool 2x2/2
    conv 2x2 (F, same)                 -> ReLU -> maxpool 2x2/2
    conv 2x2 (F, same)                 -> ReLU
    fc H -> ReLU -> dropout
    fc H -> ReLU -> dropout
    fc C -> softmax

Defaults are F=64, H=1024. "Same" padding for the even kernel adds one row
and column at the bottom/right. Pooling floors odd sizes.
"""

from __future__ import annotations

import csv
import io
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, NumericError
from .rng import substream

CHECKPOINT_MAGIC = b"CGSL"
CHECKPOINT_VERSION = 1
MIN_M = 8

PARAM_ORDER = (
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
    "fc1_w", "fc1_b", "fc2_w", "fc2_b", "fc3_w", "fc3_b",
)  # fmt: skip


def pooled(n: int) -> int:
    return n // 2


def param_shapes(M: int, C: int, n_filters: int = 64, n_hidden: int = 1024) -> dict:
    side = pooled(pooled(M))
    flat = n_filters * side * side
    F, H = n_filters, n_hidden
    return {
        "conv1_w": (F, 3, 2, 2), "conv1_b": (F,),
        "conv2_w": (F, F, 2, 2), "conv2_b": (F,),
        "conv3_w": (F, F, 2, 2), "conv3_b": (F,),
        "fc1_w": (flat, H), "fc1_b": (H,),
        "fc2_w": (H, H), "fc2_b": (H,),
        "fc3_w": (H, C), "fc3_b": (C,),
    }  # fmt: skip


# ---------------------------------------------------------------- layers


def conv_forward(x, w, b):
    N, Cin, H, W = x.shape
    F = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (0, 1), (0, 1)))
    cols = np.stack([xp[:, :, di : di + H, dj : dj + W] for di in (0, 1) for dj in (0, 1)], axis=-1)
    # (N, Cin, H, W, 4) -> (N*H*W, Cin*4), matching w.reshape(F, Cin*4)
    cols = cols.transpose(0, 2, 3, 1, 4).reshape(N * H * W, Cin * 4)
    out = cols @ w.reshape(F, Cin * 4).T + b
    return out.reshape(N, H, W, F).transpose(0, 3, 1, 2), cols


def conv_backward(dout, cols, x_shape, w):
    N, Cin, H, W = x_shape
    F = w.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(N * H * W, F)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = (d @ w.reshape(F, Cin * 4)).reshape(N, H, W, Cin, 4).transpose(0, 3, 1, 2, 4)
    dxp = np.zeros((N, Cin, H + 1, W + 1))
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dxp[:, :, di : di + H, dj : dj + W] += dcols[..., k]
    return dxp[:, :, :H, :W], dw, db


def pool_forward(x):
    N, C, H, W = x.shape
    Ho, Wo = pooled(H), pooled(W)
    win = x[:, :, : 2 * Ho, : 2 * Wo].reshape(N, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(N, C, Ho, Wo, 4)
    arg = np.argmax(win, axis=-1)  # first maximum wins ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def pool_backward(dout, arg, x_shape):
    N, C, H, W = x_shape
    Ho, Wo = dout.shape[2:]
    dwin = np.zeros((N, C, Ho, Wo, 4))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, 2 * Ho, 2 * Wo)
    dx = np.zeros(x_shape)
    dx[:, :, : 2 * Ho, : 2 * Wo] = dwin
    return dx


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, targets) -> float:
    p = probs[np.arange(targets.size), targets]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# ---------------------------------------------------------------- model


@dataclass
class CnnModel:
    M: int
    C: int
    params: dict
    class_ids: list
    n_filters: int = 64
    n_hidden: int = 1024
    dropout_p: float = 0.5
    seed: int = 0

    def check_shapes(self):
        expected = param_shapes(self.M, self.C, self.n_filters, self.n_hidden)
        for name in PARAM_ORDER:
            if name not in self.params or self.params[name].shape != expected[name]:
                got = self.params[name].shape if name in self.params else None
                raise FormatError(f"{name}: expected shape {expected[name]}, got {got}")
        if len(self.class_ids) != self.C:
            raise FormatError("class id list does not match C")

    # forward / backward ------------------------------------------------

    def logits(self, x, train: bool = False, rng: np.random.Generator | None = None):
        """Pre-softmax outputs and the cache needed for :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (3, self.M, self.M):
            raise ValueError(f"input shape {x.shape[1:]} does not match model (3, {self.M}, {self.M})")
        p = self.params
        cache = {"train": train}
        h = x
        for i in (1, 2, 3):
            z, cols = conv_forward(h, p[f"conv{i}_w"], p[f"conv{i}_b"])
            cache[f"conv{i}"] = (cols, h.shape)
            cache[f"relu{i}"] = z > 0
            h = np.maximum(z, 0.0)
            if i < 3:
                shape = h.shape
                h, arg = pool_forward(h)
                cache[f"pool{i}"] = (arg, shape)
        cache["flat_shape"] = h.shape
        h = h.reshape(h.shape[0], -1)
        for i in (1, 2):
            cache[f"fc{i}_in"] = h
            z = h @ p[f"fc{i}_w"] + p[f"fc{i}_b"]
            cache[f"frelu{i}"] = z > 0
            h = np.maximum(z, 0.0)
            if train and self.dropout_p > 0:
                if rng is None:
                    raise ValueError("train mode needs an rng for dropout masks")
                keep = (rng.random(h.shape) >= self.dropout_p) / (1.0 - self.dropout_p)
                cache[f"drop{i}"] = keep
                h = h * keep
        cache["fc3_in"] = h
        z = h @ p["fc3_w"] + p["fc3_b"]
        return z, cache

    def forward(self, x, train: bool = False, rng=None) -> np.ndarray:
        z, _ = self.logits(x, train, rng)
        return softmax(z)

    def backward(self, cache, dz) -> dict:
        """Gradients of the loss given ``dz = dLoss/dlogits``."""
        p = self.params
        g = {}
        g["fc3_w"] = cache["fc3_in"].T @ dz
        g["fc3_b"] = dz.sum(axis=0)
        dh = dz @ p["fc3_w"].T
        for i in (2, 1):
            if f"drop{i}" in cache:
                dh = dh * cache[f"drop{i}"]
            dh = dh * cache[f"frelu{i}"]
            g[f"fc{i}_w"] = cache[f"fc{i}_in"].T @ dh
            g[f"fc{i}_b"] = dh.sum(axis=0)
            dh = dh @ p[f"fc{i}_w"].T
        dh = dh.reshape(cache["flat_shape"])
        for i in (3, 2, 1):
            if i < 3:
                arg, shape = cache[f"pool{i}"]
                dh = pool_backward(dh, arg, shape)
            dh = dh * cache[f"relu{i}"]
            cols, shape = cache[f"conv{i}"]
            dh, g[f"conv{i}_w"], g[f"conv{i}_b"] = conv_backward(dh, cols, shape, p[f"conv{i}_w"])
        return g

    def loss_and_grads(self, x, targets, train=False, rng=None):
        z, cache = self.logits(x, train, rng)
        probs = softmax(z)
        loss = cross_entropy(probs, targets)
        dz = probs.copy()
        dz[np.arange(targets.size), targets] -= 1.0
        dz /= targets.size
        return loss, self.backward(cache, dz), probs

    # label mapping -------------------------------------------------------

    def output_index(self, labels) -> np.ndarray:
        """Map global class ids to output units; -1 for classes the model lacks."""
        lut = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lut.get(int(c), -1) for c in labels], dtype=np.int64)


def init_model(
    M: int,
    C: int | list,
    seed: int = 0,
    n_filters: int = 64,
    n_hidden: int = 1024,
    dropout_p: float = 0.5,
    init_gain: float = 0.5,
) -> CnnModel:
    """Fan-in scaled uniform weights (bound ``init_gain * sqrt(6 / fan_in)``), zero biases.

    ``C`` is either the number of outputs or the list of global class ids the
    outputs stand for; ids are kept in ascending order.
    """
    if M < MIN_M:
        raise ValueError(
            f"M={M} is too small: two 2x2 poolings need M >= {MIN_M} to leave a 2x2 map"
        )
    class_ids = list(range(C)) if isinstance(C, (int, np.integer)) else sorted(int(c) for c in C)
    if len(class_ids) < 2:
        raise ValueError("a classifier needs at least 2 classes")
    if len(set(class_ids)) != len(class_ids):
        raise ValueError("duplicate class ids")
    rng = substream(seed, "init")
    shapes = param_shapes(M, len(class_ids), n_filters, n_hidden)
    params = {}
    for name in PARAM_ORDER:
        shape = shapes[name]
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            bound = init_gain * np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return CnnModel(M, len(class_ids), params, class_ids, n_filters, n_hidden, dropout_p, seed)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 500
    epochs: int = 50
    dropout_p: float = 0.5
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class TrainReport:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for row in zip(self.epoch, self.train_loss, self.train_acc, self.val_acc):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def sgd_momentum_step(params, grads, velocity, lr, momentum):
    """v <- momentum * v - lr * g;  w <- w + v  (in place)."""
    for name, g in grads.items():
        v = velocity.setdefault(name, np.zeros_like(g))
        v *= momentum
        v -= lr * g
        params[name] += v


def _split(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    n_val = min(max(n_val, 1), n - 1) if n > 1 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(model: CnnModel, dataset, cfg: TrainConfig, log=None) -> TrainReport:
    """Minibatch SGD with momentum on cross-entropy; a 10% (default) split is held out."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    model.dropout_p = cfg.dropout_p
    targets = model.output_index(dataset.labels)
    if np.any(targets < 0):
        raise ValueError("dataset contains classes the model has no output for")
    tr_idx, va_idx = _split(len(dataset), cfg.val_fraction, substream(cfg.seed, "split"))
    missing = set(range(model.C)) - set(targets[tr_idx].tolist())
    if missing:
        warnings.warn(f"{len(missing)} output classes have no training samples", stacklevel=2)
    X = dataset.features
    batch = min(cfg.batch_size, tr_idx.size)
    velocity = {}
    report = TrainReport()
    for epoch in range(1, cfg.epochs + 1):
        order = tr_idx[substream(cfg.seed, "shuffle", epoch).permutation(tr_idx.size)]
        drop_rng = substream(cfg.seed, "dropout", epoch)
        losses, correct, seen = [], 0, 0
        for start in range(0, order.size, batch):
            idx = order[start : start + batch]
            loss, grads, probs = model.loss_and_grads(X[idx], targets[idx], True, drop_rng)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; learning rate {cfg.learning_rate} is likely too high"
                )
            sgd_momentum_step(model.params, grads, velocity, cfg.learning_rate, cfg.momentum)
            losses.append(loss * idx.size)
            report.step_losses.append(loss)
            correct += int(np.sum(np.argmax(probs, axis=1) == targets[idx]))
            seen += idx.size
        report.epoch.append(epoch)
        report.train_loss.append(sum(losses) / seen)
        report.train_acc.append(100.0 * correct / seen)
        val = 100.0 * _correct(model, X[va_idx], targets[va_idx]) / va_idx.size if va_idx.size else float("nan")
        report.val_acc.append(val)
        if log is not None:
            log(f"epoch {epoch:3d}  loss {report.train_loss[-1]:.4f}  "
                f"train {report.train_acc[-1]:.1f}%  val {val:.1f}%")  # fmt: skip
    return report


def predict_proba(model: CnnModel, X, batch: int = 1000) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    return np.concatenate([model.forward(X[i : i + batch]) for i in range(0, X.shape[0], batch)])


def predict(model: CnnModel, x):
    """(global class id, probability vector) for one feature tensor."""
    probs = model.forward(x)[0]
    return model.class_ids[int(np.argmax(probs))], probs


def predict_classes(model: CnnModel, X) -> np.ndarray:
    probs = predict_proba(model, X)
    return np.asarray(model.class_ids, dtype=np.int64)[np.argmax(probs, axis=1)]


def _correct(model, X, targets) -> int:
    if X.shape[0] == 0:
        return 0
    return int(np.sum(np.argmax(predict_proba(model, X), axis=1) == targets))


def accuracy(model: CnnModel, dataset) -> float:
    """Percentage of samples whose predicted class equals the label."""
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = predict_classes(model, dataset.features)
    return 100.0 * float(np.sum(pred == dataset.labels)) / len(dataset)


# ---------------------------------------------------------------- gradient check


def _activation_pattern(cache) -> list:
    pats = []
    for key in ("relu1", "relu2", "relu3", "frelu1", "frelu2"):
        pats.append(cache[key])
    pats.append(cache["pool1"][0])
    pats.append(cache["pool2"][0])
    return pats


def gradient_check(
    model: CnnModel,
    x,
    label: int,
    h: float = 1e-5,
    fraction: float = 0.01,
    min_count: int = 25,
    seed: int = 0,
    floor: float = 1e-8,
) -> tuple[float, int, int]:
    """Backprop vs central differences on a random subsample of weights.

    Dropout is off (eval-mode forward). A weight is skipped when the +/-h
    perturbation flips any ReLU mask or pooling argmax, since the loss is not
    differentiable there. Returns ``(max relative error, n checked, n skipped)``;
    the error is ``|g - g_fd| / max(|g|, |g_fd|, floor)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-7, 1e-4]")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    target = np.array([label])
    _, grads, _ = model.loss_and_grads(x, target, train=False)
    rng = substream(seed, "gradcheck")
    worst, checked, skipped = 0.0, 0, 0
    for name in PARAM_ORDER:
        w = model.params[name]
        n_pick = min(w.size, max(min_count, int(np.ceil(fraction * w.size))))
        picks = rng.choice(w.size, size=n_pick, replace=False)
        flat = w.reshape(-1)
        for k in picks:
            orig = flat[k]
            base_pat = None
            vals = []
            flipped = False
            for sgn in (1.0, -1.0):
                flat[k] = orig + sgn * h
                z, cache = model.logits(x)
                vals.append(cross_entropy(softmax(z), target))
                pat = _activation_pattern(cache)
                if base_pat is None:
                    base_pat = pat
                elif any(not np.array_equal(a, b) for a, b in zip(pat, base_pat)):
                    flipped = True
            flat[k] = orig
            if not flipped:
                _, cache0 = model.logits(x)
                pat0 = _activation_pattern(cache0)
                flipped = any(not np.array_equal(a, b) for a, b in zip(pat0, base_pat))
            if flipped:
                skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2.0 * h)
            an = grads[name].reshape(-1)[k]
            err = abs(an - fd) / max(abs(an), abs(fd), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


# ---------------------------------------------------------------- checkpoints


def checkpoint_to_bytes(model: CnnModel) -> bytes:
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack(
        "<IIIIdQ", model.M, model.C, model.n_filters, model.n_hidden, model.dropout_p, model.seed
    )
    out += struct.pack(f"<{model.C}I", *model.class_ids)
    out += struct.pack("<I", len(PARAM_ORDER))
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(model.params[name], dtype="<f8")
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def checkpoint_from_bytes(buf: bytes) -> CnnModel:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"not a CNN checkpoint (magic {buf[:4]!r})")
    try:
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        off = 6
        M, C, F, H, p, seed = struct.unpack_from("<IIIIdQ", buf, off)
        off += struct.calcsize("<IIIIdQ")
        class_ids = list(struct.unpack_from(f"<{C}I", buf, off))
        off += 4 * C
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if n != len(PARAM_ORDER):
            raise FormatError(f"expected {len(PARAM_ORDER)} tensors, found {n}")
        params = {}
        for name in PARAM_ORDER:
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape))
            if off + 8 * count > len(buf):
                raise FormatError(f"truncated tensor {name}")
            params[name] = np.frombuffer(buf, "<f8", count, off).reshape(shape).astype(np.float64)
            off += 8 * count
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if off != len(buf):
        raise FormatError("trailing bytes after the last tensor")
    model = CnnModel(M, C, params, class_ids, F, H, p, seed)
    model.check_shapes()
    return model


def save_checkpoint(model: CnnModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(model))


def load_checkpoint(path) -> CnnModel:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
