"""Experiment stages shared by the CLI subcommands and the full pipeline.

Each stage reads artifacts from an output directory and writes new ones.
Files are written as ``<name>.partial`` and renamed when the stage
completes, so a failed stage leaves its partial output behind under that
suffix and never a file that looks finished.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import warnings
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import baselines, doa, nn
from .config import ExperimentConfig, dump_config
from .dataset import DatasetConfig, build_dataset, dataset_to_bytes, load_dataset
from .errors import ConfigError, MissingArtifactError
from .geometry import subarray_table
from .rng import substream
from .signal import DoA, generate_snapshots, noise_power

log = logging.getLogger("cogsel")

LOCK_NAME = ".cogsel.lock"
CSV_VERSION = 1

TRAIN_DATA = "train.cgds"
TEST_DATA = "test.cgds"
CNN_CKPT = "cnn.ckpt"
SVM_CKPT = "svm.ckpt"


class StageError(RuntimeError):
    """A stage failed; ``cause`` keeps the original exception for exit-code mapping."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


class Workspace:
    """An output directory owned by one process at a time."""

    def __init__(self, root):
        self.root = Path(root)
        self._pending = None
        self._locked = False

    def path(self, name) -> Path:
        return self.root / name

    def require(self, name) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(f"missing artifact {p}; run the stage that produces it first")
        return p

    def acquire(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path(LOCK_NAME), os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise ConfigError(f"{self.root} is locked by another run (remove {LOCK_NAME} if stale)") from exc
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        self._locked = True
        return self

    def release(self):
        if self._locked:
            self.path(LOCK_NAME).unlink(missing_ok=True)
            self._locked = False

    def __enter__(self):
        return self.acquire()

    def __exit__(self, *exc):
        self.release()

    @contextmanager
    def stage(self, name):
        self._pending = []
        try:
            yield self
        except Exception as exc:
            self._pending = None
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        for final in self._pending:
            os.replace(f"{final}.partial", final)
        self._pending = None

    def _target(self, name) -> Path:
        final = self.path(name)
        if self._pending is None:
            return final
        self._pending.append(final)
        return Path(f"{final}.partial")

    def write_bytes(self, name, data: bytes) -> Path:
        p = self._target(name)
        p.write_bytes(data)
        return self.path(name)

    def write_text(self, name, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))


# ---------------------------------------------------------------- csv helpers


def csv_text(kind: str, header, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# cogsel {kind} v{CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv(path_or_text) -> list:
    """Rows as dicts, skipping ``#`` schema lines."""
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def fmt(x: float) -> str:
    return f"{x:.10g}"


# ---------------------------------------------------------------- configs to objects


def dataset_config(cfg: ExperimentConfig, which: str) -> DatasetConfig:
    spec = cfg.train if which == "train" else cfg.test
    theta_range = tuple(spec.theta_range)
    common = dict(
        geometry=cfg.geometry.build(),
        K=cfg.K,
        L=spec.L,
        P=spec.P,
        T=spec.T,
        snr_train=list(spec.snr_db),
        bound=cfg.bound,
        sigma_s2=cfg.sigma_s2,
        P_theta=spec.P_theta,
        theta_range=theta_range,
        label_source=spec.label_source,
        workers=cfg.threads,
    )
    if which == "train":
        return DatasetConfig(seed=cfg.seed, directions="grid", stream="dataset", **common)
    rand_theta = theta_range if spec.P_theta > 1 else (theta_range[0], theta_range[0])
    return DatasetConfig(seed=cfg.seed, directions="random", stream="test", random_theta_range=rand_theta, **common)


def search_grid(cfg: ExperimentConfig) -> doa.SearchGrid:
    spec = cfg.train
    if spec.P_theta > 1:
        return doa.doa_grid(tuple(spec.theta_range), cfg.doa.theta_step, cfg.doa.phi_step)
    return doa.azimuth_grid(cfg.doa.phi_step, spec.theta_range[0])


def test_doas(cfg: ExperimentConfig) -> list:
    rng = substream(cfg.seed, "test/doa-angles")
    phis = rng.uniform(0.0, 360.0, cfg.doa.n_doas)
    lo, hi = cfg.train.theta_range
    if cfg.train.P_theta > 1:
        thetas = rng.uniform(lo, hi, cfg.doa.n_doas)
    else:
        thetas = np.full(cfg.doa.n_doas, float(lo))
    return [DoA(float(t), float(p)) for t, p in zip(thetas, phis)]


def train_config(cfg: ExperimentConfig) -> nn.TrainConfig:
    c = cfg.cnn
    return nn.TrainConfig(c.learning_rate, c.momentum, c.batch_size, c.epochs, c.dropout, c.val_fraction, cfg.seed)


def svm_config(cfg: ExperimentConfig) -> baselines.SvmConfig:
    return baselines.SvmConfig(cfg.svm.C, cfg.svm.epochs, cfg.svm.lr, cfg.seed)


def build_selector(cfg: ExperimentConfig, name: str, ws: Workspace, models=None):
    g = cfg.geometry.build()
    models = models or {}
    if name == "cnn":
        model = models.get("cnn") or nn.load_checkpoint(ws.require(CNN_CKPT))
        return doa.make_selector("cnn", g, cfg.K, model)
    if name == "svm":
        model = models.get("svm") or baselines.load_svm(ws.require(SVM_CKPT))
        return doa.make_selector("svm", g, cfg.K, model)
    if name == "ras":
        return doa.RasSelector(g, cfg.K, cfg.doa.ras_realizations, search_grid(cfg), cfg.doa.ras_score)
    if name == "oracle":
        return doa.OracleSelector(g, cfg.K, cfg.bound, cfg.sigma_s2)
    return doa.make_selector(name, g, cfg.K)


# ---------------------------------------------------------------- stages


def stage_gen_data(cfg: ExperimentConfig, ws: Workspace):
    g = cfg.geometry.build()
    with ws.stage("gen-data"):
        for which, name in (("train", TRAIN_DATA), ("test", TEST_DATA)):
            t0 = time.perf_counter()
            ds = build_dataset(dataset_config(cfg, which))
            ds.meta["geometry_doc"] = g.to_text()
            ws.write_bytes(name, dataset_to_bytes(ds))
            log.info("%s: J=%d, %d classes, %.1fs", name, len(ds), len(ds.class_set.reduced), time.perf_counter() - t0)


def stage_train(cfg: ExperimentConfig, ws: Workspace):
    ds = load_dataset(ws.require(TRAIN_DATA))
    with ws.stage("train"):
        c = cfg.cnn
        model = nn.init_model(
            ds.M, ds.class_set.reduced, cfg.seed, c.n_filters, c.n_hidden, c.dropout, c.init_gain
        )
        report = nn.train(model, ds, train_config(cfg), log=log.info)
        ws.write_bytes(CNN_CKPT, nn.checkpoint_to_bytes(model))
        ws.write_text("train_log.csv", report.to_csv())
    return model


def stage_svm(cfg: ExperimentConfig, ws: Workspace):
    ds = load_dataset(ws.require(TRAIN_DATA))
    with ws.stage("baseline svm"):
        model = baselines.svm_train(ds, svm_config(cfg))
        ws.write_bytes(SVM_CKPT, baselines.svm_to_bytes(model))
    return model


def antenna_histogram(class_ids, M: int, K: int) -> np.ndarray:
    """Percentage of selections that include each antenna; totals K * 100."""
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size == 0:
        return np.zeros(M)
    rows = subarray_table(M, K)[class_ids]
    counts = np.bincount(rows.ravel(), minlength=M)
    return 100.0 * counts / class_ids.size


def selection_histogram(model, dataset) -> np.ndarray:
    """Per-antenna selection percentages of a classifier's predictions on ``dataset``."""
    if isinstance(model, baselines.SvmModel):
        pred = baselines.svm_predict_classes(model, dataset.features)
    else:
        pred = nn.predict_classes(model, dataset.features)
    return antenna_histogram(pred, dataset.M, dataset.K)


def _accuracy_by_snr(pred, ds):
    out = {}
    for snr in ds.meta["snr_train"]:
        mask = ds.snr == snr
        out[snr] = 100.0 * float(np.mean(pred[mask] == ds.labels[mask]))
    return out


def stage_eval_acc(cfg: ExperimentConfig, ws: Workspace, models=None):
    models = models or {}
    test = load_dataset(ws.require(TEST_DATA))
    cnn_model = models.get("cnn") or nn.load_checkpoint(ws.require(CNN_CKPT))
    svm_model = models.get("svm")
    if svm_model is None and cfg.svm.enabled:
        svm_model = baselines.load_svm(ws.require(SVM_CKPT))
    with ws.stage("eval acc"):
        cnn_pred = nn.predict_classes(cnn_model, test.features)
        cnn_acc = _accuracy_by_snr(cnn_pred, test)
        svm_pred = svm_acc = None
        if svm_model is not None:
            svm_pred = baselines.svm_predict_classes(svm_model, test.features)
            svm_acc = _accuracy_by_snr(svm_pred, test)
        train_snrs = ";".join(f"{s:g}" for s in cfg.train.snr_db)
        rows = [
            [train_snrs, f"{s:g}", fmt(cnn_acc[s]), fmt(svm_acc[s]) if svm_acc else ""]
            for s in test.meta["snr_train"]
        ]
        ws.write_text("accuracy.csv", csv_text("accuracy", ["snr_train", "snr_test", "cnn_acc", "svm_acc"], rows))
        M, K = test.M, test.K
        label_h = antenna_histogram(test.labels, M, K)
        cnn_h = antenna_histogram(cnn_pred, M, K)
        svm_h = antenna_histogram(svm_pred, M, K) if svm_pred is not None else None
        hrows = [
            [m, fmt(label_h[m]), fmt(cnn_h[m]), fmt(svm_h[m]) if svm_h is not None else ""] for m in range(M)
        ]
        ws.write_text(
            "selection_histogram.csv",
            csv_text("selection-histogram", ["antenna", "label_pct", "cnn_pct", "svm_pct"], hrows),
        )
    return cnn_acc, svm_acc


def _rmse_results(cfg, ws, selectors, models=None):
    g = cfg.geometry.build()
    grid = search_grid(cfg)
    doas = test_doas(cfg)
    results = []
    for snr in cfg.doa.snr_db:
        for name in selectors:
            if name == "svm" and not cfg.svm.enabled and not (models and "svm" in models):
                continue
            sel = build_selector(cfg, name, ws, models)
            k = g.M if name == "full" else cfg.K
            r = doa.evaluate_rmse(sel, g, k, doas, cfg.doa.L, snr, cfg.doa.trials, cfg.seed, grid, cfg.sigma_s2)
            log.info("rmse snr=%g %s %.4f deg", snr, name, r.rmse)
            results.append(r)
    return results


def stage_doa(cfg: ExperimentConfig, ws: Workspace, models=None, selectors=None, name="rmse.csv"):
    selectors = selectors or cfg.doa.selectors
    with ws.stage("doa eval"):
        results = _rmse_results(cfg, ws, selectors, models)
        ws.write_text(name, doa.rmse_to_csv(results, cfg.geometry.build().M, cfg.K))
    return results


def stage_scan(cfg: ExperimentConfig, ws: Workspace, models=None):
    g = cfg.geometry.build()
    s = cfg.scan
    blocks = doa.make_schedule(
        s.snr_levels, s.blocks_per_level, s.move_every, s.snapshots, cfg.seed, cfg.train.theta_range[0]
    )
    sc = doa.ScanConfig(blocks, cfg.K, s.selection_period, "cnn", s.selection_snapshots, s.drift_deg, cfg.sigma_s2)
    out = {}
    with ws.stage("scan sim"):
        parts = []
        level_rows = []
        for name in s.selectors:
            sel = build_selector(cfg, name, ws, models)
            records = doa.scan_loop(sc, sel, g, cfg.seed, search_grid(cfg))
            out[name] = records
            text = doa.scan_to_csv(records, name)
            parts.append(text if not parts else text.split("\n", 2)[2])
            for level, mean in sorted(doa.level_means(records).items()):
                level_rows.append([f"{level:g}", name, fmt(mean)])
        ws.write_text("scan.csv", "".join(parts))
        ws.write_text("scan_levels.csv", csv_text("scan-levels", ["snr_db", "selector", "mean_error_deg"], level_rows))
    return out


def _timed(fn, reps):
    times = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn(i)
        times[i] = time.perf_counter() - t0
    return times


def bench(cfg: ExperimentConfig, ws: Workspace, models=None, methods=("cnn", "svm", "ras")) -> dict:
    """Median and IQR of selection plus DoA estimation time per method."""
    reps = cfg.bench.repetitions
    if reps < 1:
        raise ConfigError("bench.repetitions must be >= 1")
    if reps == 1:
        warnings.warn("a single repetition gives no spread estimate", stacklevel=2)
    g = cfg.geometry.build()
    grid = search_grid(cfg)
    n2 = noise_power(cfg.bench.snr_db, cfg.sigma_s2)
    rng = substream(cfg.seed, "bench")
    truth = [DoA(cfg.train.theta_range[0], float(p)) for p in rng.uniform(0, 360, 16)]
    Ys = [generate_snapshots(g, d, cfg.bench.L, cfg.sigma_s2, n2, rng) for d in truth]
    stats = {}
    for name in methods:
        sel = build_selector(cfg, name, ws, models)
        if name == "ras":
            sel.realizations = cfg.bench.ras_realizations
        doa.grid_steering(g, grid)  # warm the steering cache outside the timed region

        def step(i, sel=sel):
            Y = Ys[i % len(Ys)]
            choice = sel.select(Y, truth[i % len(truth)], substream(cfg.seed, "bench/ras", i))
            doa.estimate_on_subarray(g, Y, choice.subarray, grid)

        step(0)
        t = _timed(step, reps)
        q1, med, q3 = np.percentile(t, [25, 50, 75])
        stats[name] = (float(med), float(q3 - q1))
    with ws.stage("bench"):
        rows = [[k, reps, fmt(v[0]), fmt(v[1])] for k, v in stats.items()]
        ws.write_text("bench.csv", csv_text("bench", ["method", "repetitions", "median_s", "iqr_s"], rows))
    order = [stats[m][0] for m in methods if m in stats]
    if order != sorted(order):
        log.warning("timing ordering %s not strictly increasing: %s", methods, order)
    return stats


def stage_plots(cfg: ExperimentConfig, ws: Workspace):
    from . import plotting

    with ws.stage("plots"):
        return plotting.render_all(ws)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(cfg: ExperimentConfig, ws: Workspace, stages) -> Path:
    artifacts = {}
    for p in sorted(ws.root.iterdir()):
        if p.is_file() and p.suffix in (".csv", ".ckpt", ".cgds"):
            artifacts[p.name] = file_digest(p)
    doc = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stages": list(stages),
        "artifacts": artifacts,
        "config": cfg.to_dict(),
    }
    ws.write_text("config.yaml", dump_config(cfg))
    return ws.write_text("manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_pipeline(cfg: ExperimentConfig, out) -> Workspace:
    """gen-data, train (CNN and optionally SVM), accuracy and RMSE evaluation, figures, manifest."""
    ws = Workspace(out)
    with ws:
        stages = ["gen-data", "train"]
        stage_gen_data(cfg, ws)
        models = {"cnn": stage_train(cfg, ws)}
        if cfg.svm.enabled:
            models["svm"] = stage_svm(cfg, ws)
            stages.append("baseline svm")
        stage_eval_acc(cfg, ws, models)
        stage_doa(cfg, ws, models)
        stages += ["eval acc", "doa eval"]
        if cfg.plots:
            stage_plots(cfg, ws)
            stages.append("plots")
        write_manifest(cfg, ws, stages)
    return ws
