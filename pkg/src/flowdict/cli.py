"""Command-line experiment harness.

Commands::

    flowdict train <cfg>
    flowdict eval <model> <dataset> [--deform kind=value] [--window K]
    flowdict sweep <cfg>
    flowdict export-dict <model> <dir>
    flowdict benchmark --mnist <dir> [--usps-train F --usps-test F] [--full]

Configuration files hold one ``key = value`` pair per line; ``#`` starts a
comment. A dataset argument is either a directory of MNIST IDX files or a
USPS text file. Exit status is 0 on success, 1 for usage or configuration
errors, 2 for data errors and 3 for numerical failures. ``FLOWDICT_THREADS``
caps the number of worker threads.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np

from . import __version__
from .data_io import (DataError, DeformSpec, RawDataset, deform_dataset, load_model,
                      read_mnist_dir, read_usps, save_model, write_atomic)
from .estimator import predict_model
from .lasso import NumericalError
from .learn import LearnConfig, Model, train
from .plot import line_plot
from .tensor import GeometryError

logger = logging.getLogger("flowdict")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SWEEP_DEFAULTS = {
    "train_size": (300, 1000, 2000, 5000, 10000, 20000, 40000, 60000),
    "translate_x": tuple(range(-5, 6)),
    "rotate": (-30, -20, -10, 0, 10, 20, 30),
    "scale": (0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3),
}
SWEEP_COLUMNS = ("sweep_kind", "sweep_value", "method", "accuracy", "n_test", "seed")
REFERENCE_ERROR = {"mnist": 0.0112, "usps": 0.0343}


class ConfigError(ValueError):
    """Malformed configuration file or command line."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration

def _to_bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_LEARN_TYPES = {f.name: f.type if isinstance(f.type, str) else f.type.__name__
                for f in fields(LearnConfig) if f.name != "n_threads"}
_CONVERT = {"int": int, "float": float, "bool": _to_bool, "str": str}


def _schema(extra):
    schema = {k: _CONVERT[t] for k, t in _LEARN_TYPES.items()}
    schema.update(extra)
    return schema


TRAIN_SCHEMA = _schema({"data": str, "split": str, "limit": int, "label_offset": int,
                        "model": str, "metrics": str, "threads": int})
SWEEP_SCHEMA = _schema({"kind": str, "values": str, "train_data": str, "train_split": str,
                        "test_data": str, "test_split": str, "n_test": int,
                        "label_offset": int, "model": str, "baseline_model": str,
                        "out": str, "plot": str, "threads": int})


def read_config(path, schema) -> dict:
    """Parse a ``key = value`` file, converting values with ``schema``."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        where = f"{path}:{lineno}"
        if not sep or not key:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        if key not in schema:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            out[key] = schema[key](value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return out


def _learn_config(options, threads=None) -> LearnConfig:
    kw = {k: v for k, v in options.items() if k in _LEARN_TYPES}
    try:
        return LearnConfig(n_threads=resolve_threads(threads), **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _require(options, *keys, path=""):
    for key in keys:
        if key not in options:
            raise ConfigError(f"{path}: missing required key {key!r}")


def resolve_threads(requested=None) -> int:
    """Worker count: ``requested`` (default 1) capped by ``FLOWDICT_THREADS``."""
    env = os.environ.get("FLOWDICT_THREADS")
    cap = None
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            logger.warning("ignoring FLOWDICT_THREADS=%r", env)
    n = requested if requested is not None else (cap or 1)
    return max(1, min(n, cap) if cap else n)


def echo_header(title, items) -> str:
    """Comment lines recording every setting that produced an output file."""
    lines = [f"# {title}"]
    lines += [f"# {k}={v}" for k, v in sorted(items.items())]
    return "\n".join(lines) + "\n"


def _config_echo(cfg: LearnConfig) -> dict:
    return {k: v for k, v in cfg.as_dict().items() if k != "n_threads"}


def _csv_text(header, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# --------------------------------------------------------------------------
# data

def load_dataset(path, split="test", label_offset=0, limit=None) -> RawDataset:
    """MNIST IDX directory or USPS text file, optionally truncated to ``limit`` samples."""
    if not path or not os.path.exists(path):
        raise DataError(f"dataset not found: {path}")
    try:
        if os.path.isdir(path):
            if split not in ("train", "test"):
                raise DataError(f"unknown split {split!r}")
            ds = read_mnist_dir(path, split)
        else:
            ds = read_usps(path, label_offset=label_offset, split=split)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    if limit is not None:
        if limit < 1:
            raise DataError("limit must be positive")
        ds = ds.head(limit)
    if len(ds) == 0:
        raise DataError(f"{path}: no samples")
    return ds


def _check_geometry(model: Model, ds: RawDataset):
    dims = model.dictionary.grid.source_dims
    if dims and tuple(dims) != tuple(ds.image_shape):
        raise GeometryError(f"model expects {tuple(dims)} images, dataset has "
                            f"{tuple(ds.image_shape)}")


def _load_model(path) -> Model:
    if not os.path.exists(path):
        raise DataError(f"model not found: {path}")
    return load_model(path)


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    opts = read_config(args.config, TRAIN_SCHEMA)
    _require(opts, "data", "model", path=args.config)
    cfg = _learn_config(opts, opts.get("threads"))
    metrics = opts.get("metrics") or opts["model"] + ".metrics.csv"
    ds = load_dataset(opts["data"], opts.get("split", "train"), opts.get("label_offset", 0),
                      opts.get("limit"))

    tic = time.perf_counter()
    model = train(ds, cfg)
    logger.info("trained on %d samples in %.1f s", len(ds), time.perf_counter() - tic)
    save_model(model, opts["model"])

    echo = dict(_config_echo(cfg), data=opts["data"], split=opts.get("split", "train"),
                n_train=len(ds), label_offset=opts.get("label_offset", 0),
                model=opts["model"])
    cols = ("epoch", "mean_loss", "train_error", "mean_active_set")
    rows = [[_fmt(row[c]) for c in cols] for row in model.history]
    write_atomic(metrics, _csv_text(echo_header("flowdict train", echo), cols, rows).encode())
    final = model.history[-1]["train_error"] if model.history else float("nan")
    print(f"final training error: {final:.4f}")
    return EXIT_OK


@dataclass
class EvalResult:
    labels: np.ndarray
    predictions: np.ndarray
    n_classes: int

    @property
    def error(self) -> float:
        return float(np.mean(self.labels != self.predictions))

    @property
    def accuracy(self) -> float:
        return 1.0 - self.error

    def per_class(self):
        rows = []
        for c in range(self.n_classes):
            mask = self.labels == c
            n = int(mask.sum())
            wrong = int(np.sum(self.predictions[mask] != c))
            rows.append((str(c), n, wrong, wrong / n if n else 0.0))
        wrong = int(np.sum(self.labels != self.predictions))
        rows.append(("all", len(self.labels), wrong, wrong / len(self.labels)))
        return rows


def evaluate(model: Model, ds: RawDataset, deformation=None, window_side=None,
             n_threads=None) -> EvalResult:
    _check_geometry(model, ds)
    if deformation is not None and not deformation.is_identity:
        ds = deform_dataset(ds, deformation)
    if ds.labels.max() >= model.n_classes or ds.labels.min() < 0:
        raise DataError(f"labels outside the model's {model.n_classes} classes")
    pred = predict_model(model, ds.images, window_side, resolve_threads(n_threads))
    return EvalResult(ds.labels, pred, model.n_classes)


def cmd_eval(args) -> int:
    if args.window is not None and (args.window < 1 or args.window % 2 == 0):
        raise ConfigError("--window must be a positive odd integer")
    spec = None
    if args.deform:
        try:
            spec = DeformSpec.parse(args.deform)
        except ValueError as exc:
            raise ConfigError(f"--deform: {exc}") from None
    model = _load_model(args.model)
    ds = load_dataset(args.dataset, args.split, args.label_offset, args.limit)
    window = model.config.window_side if args.window is None else args.window
    res = evaluate(model, ds, spec, window)

    echo = dict(_config_echo(model.config), model=args.model, dataset=args.dataset,
                split=args.split, n_test=len(ds), eval_window=window,
                deform="none" if spec is None or spec.is_identity else args.deform)
    rows = [(c, n, w, _fmt(e)) for c, n, w, e in res.per_class()]
    text = _csv_text(echo_header("flowdict eval", echo), ("class", "n", "errors", "error_rate"),
                     rows)
    if args.predictions:
        pred_rows = [(i, int(y), int(p)) for i, (y, p) in
                     enumerate(zip(res.labels, res.predictions))]
        write_atomic(args.predictions,
                     _csv_text(echo_header("flowdict eval", echo),
                               ("index", "label", "prediction"), pred_rows).encode())
    if args.out:
        write_atomic(args.out, text.encode())
        print(f"error: {res.error:.4f} ({int(np.sum(res.labels != res.predictions))}"
              f"/{len(ds)})")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _sweep_values(kind, text):
    if kind not in SWEEP_DEFAULTS:
        raise ConfigError(f"unknown sweep kind {kind!r}; expected one of "
                          f"{', '.join(SWEEP_DEFAULTS)}")
    if not text:
        return list(SWEEP_DEFAULTS[kind])
    conv = int if kind == "train_size" else float
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"values: {exc}") from None


def sweep_rows(kind, values, proposed, baseline, test, seed):
    """Evaluate both models at every sweep value; ``proposed``/``baseline`` map value -> model."""
    rows = []
    for v in values:
        spec = None if kind == "train_size" else DeformSpec(kind, v)
        for method, models in (("proposed", proposed), ("baseline", baseline)):
            res = evaluate(models(v), test, spec)
            rows.append((kind, _fmt_value(v), method, _fmt(res.accuracy), len(test.labels),
                         seed))
            logger.info("%s=%s %s accuracy %.4f", kind, v, method, res.accuracy)
    return rows


def _fmt_value(v):
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def cmd_sweep(args) -> int:
    opts = read_config(args.config, SWEEP_SCHEMA)
    _require(opts, "kind", "test_data", "out", path=args.config)
    kind = opts["kind"]
    values = _sweep_values(kind, opts.get("values"))
    test = load_dataset(opts["test_data"], opts.get("test_split", "test"),
                        opts.get("label_offset", 0), opts.get("n_test"))
    echo = {"kind": kind, "values": ",".join(_fmt_value(v) for v in values),
            "test_data": opts["test_data"], "n_test": len(test)}

    if kind == "train_size":
        _require(opts, "train_data", path=args.config)
        cfg = _learn_config(opts, opts.get("threads"))
        pool = load_dataset(opts["train_data"], opts.get("train_split", "train"),
                            opts.get("label_offset", 0))
        kept = [v for v in values if v <= len(pool)]
        for v in values:
            if v > len(pool):
                logger.warning("skipping train_size=%d: only %d training samples", v,
                               len(pool))
        values = kept
        if not values:
            raise DataError("no train_size value fits the training set")
        cache = {}

        def trained(window):
            def get(v):
                key = (window, v)
                if key not in cache:
                    cache[key] = train(pool.head(v), replace(cfg, window_side=window))
                return cache[key]
            return get

        proposed, baseline = trained(cfg.window_side), trained(1)
        seed = cfg.seed
        echo.update(_config_echo(cfg), train_data=opts["train_data"])
    else:
        _require(opts, "model", "baseline_model", path=args.config)
        m_prop, m_base = _load_model(opts["model"]), _load_model(opts["baseline_model"])
        proposed, baseline = (lambda v: m_prop), (lambda v: m_base)
        seed = m_prop.config.seed
        echo.update(model=opts["model"], baseline_model=opts["baseline_model"])

    rows = sweep_rows(kind, values, proposed, baseline, test, seed)
    write_atomic(opts["out"],
                 _csv_text(echo_header("flowdict sweep", echo), SWEEP_COLUMNS, rows).encode())
    plot = opts.get("plot") or os.path.splitext(opts["out"])[0] + ".svg"
    write_atomic(plot, sweep_svg(rows).encode())
    print(f"wrote {opts['out']} and {plot}")
    return EXIT_OK


def sweep_svg(rows) -> str:
    """Accuracy of both methods against the sweep value, with the difference shaded."""
    kind = rows[0][0]
    acc = {}
    for _, v, method, a, _, _ in rows:
        acc.setdefault(method, {})[float(v)] = float(a)
    xs = sorted(acc["proposed"])
    prop = [acc["proposed"][x] for x in xs]
    base = [acc["baseline"][x] for x in xs]
    band = [p - b for p, b in zip(prop, base)]
    return line_plot(xs, {"proposed": prop, "baseline (w=1)": base}, band=band,
                     title=f"accuracy vs {kind}", xlabel=kind, ylabel="accuracy")


def atom_images(model: Model) -> np.ndarray:
    """Each atom folded back to image space, overlapping patches averaged."""
    d = model.dictionary
    g = d.grid
    k, s = g.patch_size, g.stride
    h = (g.rows - 1) * s + k
    w = (g.cols - 1) * s + k
    out = np.zeros((d.n_atoms, h, w))
    count = np.zeros((h, w))
    for p in range(g.n_positions):
        r, c = divmod(p, g.cols)
        sl = (slice(r * s, r * s + k), slice(c * s, c * s + k))
        out[(slice(None),) + sl] += d.data[:, :, p].reshape(d.n_atoms, k, k)
        count[sl] += 1
    return out / np.maximum(count, 1)


def write_pgm(path, image, comment=""):
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros(image.shape) if hi == lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    head = "P5\n" + (f"# {comment}\n" if comment else "") + \
        f"{image.shape[1]} {image.shape[0]}\n255\n"
    write_atomic(path, head.encode("ascii") + pixels.tobytes())


def cmd_export_dict(args) -> int:
    model = _load_model(args.model)
    os.makedirs(args.directory, exist_ok=True)
    hint = model.dictionary.class_hint
    for n, img in enumerate(atom_images(model)):
        comment = f"atom {n}" + ("" if hint is None else f" class {int(hint[n])}")
        write_pgm(os.path.join(args.directory, f"atom_{n:03d}.pgm"), img, comment)
    print(f"wrote {model.dictionary.n_atoms} atoms to {args.directory}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    runs = []
    if args.full:
        base = LearnConfig(epochs=args.epochs, n_threads=resolve_threads())
        runs.append(("mnist", load_dataset(args.mnist, "train"), load_dataset(args.mnist),
                     replace(base, n_atoms=150)))
        if args.usps_train or args.usps_test:
            if not (args.usps_train and args.usps_test):
                raise ConfigError("--usps-train and --usps-test go together")
            runs.append(("usps", load_dataset(args.usps_train, "train", args.label_offset),
                         load_dataset(args.usps_test, "test", args.label_offset),
                         replace(base, n_atoms=80)))
    else:
        cfg = LearnConfig(n_atoms=150, epochs=5, n_threads=resolve_threads())
        runs.append(("mnist", load_dataset(args.mnist, "train", limit=1000),
                     load_dataset(args.mnist, "test", limit=2000), cfg))

    rows = []
    for name, tr, te, cfg in runs:
        for method, window in (("proposed", cfg.window_side), ("baseline", 1)):
            tic = time.perf_counter()
            model = train(tr, replace(cfg, window_side=window))
            err = evaluate(model, te).error
            ref = REFERENCE_ERROR[name] if args.full and method == "proposed" else ""
            logger.info("%s %s: error %.4f in %.0f s%s", name, method, err,
                        time.perf_counter() - tic,
                        f" (reference {ref:.4f})" if ref != "" else "")
            print(f"{name} {method} error {err:.4f}"
                  + (f" reference {ref:.4f}" if ref != "" else ""))
            rows.append((name, method, len(tr), len(te), cfg.n_atoms, cfg.epochs, _fmt(err),
                         "" if ref == "" else _fmt(ref)))
    if args.out:
        cols = ("dataset", "method", "n_train", "n_test", "n_atoms", "epochs", "error",
                "reference_error")
        echo = dict(_config_echo(runs[0][3]), profile="full" if args.full else "desk")
        write_atomic(args.out,
                     _csv_text(echo_header("flowdict benchmark", echo), cols, rows).encode())
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowdict", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="learn a dictionary and classifier")
    p.add_argument("config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="error rates of a model on a dataset")
    p.add_argument("model")
    p.add_argument("dataset", help="MNIST IDX directory or USPS text file")
    p.add_argument("--deform", help="test-time deformation, e.g. rotate=15")
    p.add_argument("--window", type=int, help="search window side (1 = no alignment)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--limit", type=int, help="evaluate the first LIMIT samples only")
    p.add_argument("--label-offset", type=int, default=0, help="subtracted from USPS labels")
    p.add_argument("--out", help="report CSV (default: stdout)")
    p.add_argument("--predictions", help="also write per-sample predictions here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy of both methods over a sweep")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-dict", help="write atoms as PGM images")
    p.add_argument("model")
    p.add_argument("directory")
    p.set_defaults(func=cmd_export_dict)

    p = sub.add_parser("benchmark", help="train and evaluate both methods end to end")
    p.add_argument("--mnist", required=True, help="MNIST IDX directory")
    p.add_argument("--usps-train")
    p.add_argument("--usps-test")
    p.add_argument("--label-offset", type=int, default=0)
    p.add_argument("--full", action="store_true",
                   help="all training samples instead of the 1000-sample desk profile")
    p.add_argument("--epochs", type=int, default=5, help="epochs for --full")
    p.add_argument("--out", help="results CSV")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"flowdict: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, OSError) as exc:
        print(f"flowdict: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"flowdict: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"flowdict: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
