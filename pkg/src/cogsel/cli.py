"""Command-line interface.

    cogsel geom --config exp.yaml
    cogsel run --config exp.yaml --out results/

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 missing or
unreadable artifact.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_ARTIFACT = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def exit_code(exc: BaseException) -> int:
    from .errors import ConfigError, FormatError, MissingArtifactError, NoSolutionError, NumericError
    from .pipeline import StageError

    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (MissingArtifactError, FormatError)):
        return EXIT_ARTIFACT
    if isinstance(exc, (NumericError, NoSolutionError, FloatingPointError)):
        return EXIT_NUMERIC
    return 1


def _common(p):
    p.add_argument("--config", help="experiment YAML; defaults apply when omitted")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--threads", type=int, help="worker threads for data generation and BLAS")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogsel", description="CRB-labelled antenna subarray selection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("geom", help="print the array geometry document")
    _common(p)

    p = sub.add_parser("gen-data", help="generate CRB-labelled train and test datasets")
    _common(p)

    p = sub.add_parser("inspect", help="print a dataset or checkpoint header")
    p.add_argument("path")
    p.add_argument("--one-based", action="store_true", help="display antenna indices from 1")

    p = sub.add_parser("train", help="train the CNN selector")
    _common(p)

    p = sub.add_parser("baseline", help="train or evaluate a baseline selector")
    p.add_argument("method", choices=["svm", "ras"])
    _common(p)

    p = sub.add_parser("eval", help="classification accuracy versus test SNR")
    p.add_argument("what", choices=["acc"])
    _common(p)

    p = sub.add_parser("doa", help="beamforming DoA RMSE versus test SNR")
    p.add_argument("what", choices=["eval"])
    _common(p)

    p = sub.add_parser("scan", help="simulate the cognitive scan loop")
    p.add_argument("what", choices=["sim"])
    _common(p)

    p = sub.add_parser("bench", help="median selection plus DoA time per method")
    p.add_argument("--repetitions", type=int, help="override bench.repetitions")
    _common(p)

    p = sub.add_parser("run", help="full pipeline: data, training, evaluation, figures")
    _common(p)

    p = sub.add_parser("plot", help="render PNG figures from the CSVs in --out")
    _common(p)
    return parser


def _load(args):
    from .config import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg.validate()


def _inspect(path, one_based, out):
    from .baselines import SVM_MAGIC, load_svm
    from .dataset import DATASET_MAGIC, label_histogram, load_dataset
    from .errors import MissingArtifactError
    from .nn import CHECKPOINT_MAGIC, load_checkpoint

    if not os.path.exists(path):
        raise MissingArtifactError(f"no such file {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    base = 1 if one_based else 0
    if magic == DATASET_MAGIC:
        ds = load_dataset(path)
        m = ds.meta
        print(f"dataset {path}", file=out)
        for key in ("M", "K", "L", "P", "T", "seed"):
            print(f"  {key}: {m[key]}", file=out)
        print(f"  Q: {ds.class_set.Q}", file=out)
        print(f"  Q_bar: {len(ds.class_set.reduced)}", file=out)
        print(f"  snr_db: {' '.join(f'{s:g}' for s in m['snr_train'])}", file=out)
        print(f"  J: {len(ds)}", file=out)
        if "geometry" in m:
            print(f"  geometry: {m['geometry']}", file=out)
        print("class_id,indices,count", file=out)
        for cid, sub, n in label_histogram(ds):
            print(f"{cid},{';'.join(str(i + base) for i in sub.indices)},{n}", file=out)
    elif magic == CHECKPOINT_MAGIC:
        model = load_checkpoint(path)
        print(f"cnn checkpoint {path}", file=out)
        print(f"  M: {model.M}\n  C: {model.C}\n  filters: {model.n_filters}\n  hidden: {model.n_hidden}", file=out)
        print(f"  classes: {' '.join(map(str, model.class_ids))}", file=out)
    elif magic == SVM_MAGIC:
        model = load_svm(path)
        print(f"svm checkpoint {path}", file=out)
        print(f"  M: {model.M}\n  classes: {' '.join(map(str, model.class_ids))}", file=out)
    else:
        from .errors import FormatError

        raise FormatError(f"{path}: unrecognized magic {magic!r}")


def dispatch(args, out=None) -> int:
    out = out or sys.stdout
    if args.command == "inspect":
        _inspect(args.path, args.one_based, out)
        return EXIT_OK
    cfg = _load(args)
    from . import pipeline

    if args.command == "geom":
        out.write(cfg.geometry.build().to_text())
        return EXIT_OK
    if args.command == "run":
        pipeline.run_pipeline(cfg, args.out)
        return EXIT_OK
    if args.command == "bench" and args.repetitions is not None:
        cfg.bench.repetitions = args.repetitions
    with pipeline.Workspace(args.out) as ws:
        if args.command == "gen-data":
            pipeline.stage_gen_data(cfg, ws)
        elif args.command == "train":
            pipeline.stage_train(cfg, ws)
        elif args.command == "baseline" and args.method == "svm":
            pipeline.stage_svm(cfg, ws)
        elif args.command == "baseline":
            pipeline.stage_doa(cfg, ws, selectors=["ras"], name="ras_rmse.csv")
        elif args.command == "eval":
            pipeline.stage_eval_acc(cfg, ws)
        elif args.command == "doa":
            pipeline.stage_doa(cfg, ws)
        elif args.command == "scan":
            pipeline.stage_scan(cfg, ws)
        elif args.command == "bench":
            stats = pipeline.bench(cfg, ws)
            for name, (med, iqr) in stats.items():
                print(f"{name}: median {med * 1e3:.3f} ms, IQR {iqr * 1e3:.3f} ms", file=out)
        elif args.command == "plot":
            pipeline.stage_plots(cfg, ws)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads:
        # only effective before numpy loads its BLAS, i.e. in a fresh process
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return dispatch(args)
    except Exception as exc:  # mapped to documented exit codes
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"cogsel: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
