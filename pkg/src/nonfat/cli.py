"""Command-line interface.

Users work in raw units: timestamps and values as they appear in the CSV
files. Normalization is fitted during ``train``, stored in the checkpoint
and applied on the way in and undone on the way out by every other command.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
import argparse
import csv
from dataclasses import fields
import json
import logging
import math
from pathlib import Path
import sys

import numpy as np

from nonfat import checkpoint, model, optim
from nonfat.config import TrainConfig
from nonfat.data import (
    apply_norm,
    format_real,
    from_arrays,
    load_csv,
    normalize,
    split,
    synth_dataset,
    write_csv,
)
from nonfat.errors import DataError, NumericalError
from nonfat.quadrature import MAX_ORDER, gauss_laguerre

log = logging.getLogger("nonfat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CHECKPOINT_NAME = "checkpoint.nfck"
HISTORY_NAME = "history.csv"
RUN_KEYS = {"data": None, "num_modes": None, "train_frac": 0.8, "out_dir": ".", "dims": None}


class UsageError(Exception):
    pass


class StageError(Exception):
    """Wraps a pipeline failure with the stage it happened in."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage, self.cause = stage, exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run configuration -----------------------------------------------------------


def parse_override(text):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def load_run_config(path, overrides=()):
    """Read a JSON run configuration, apply ``--set`` overrides and validate.

    Returns ``(run, train_config)`` where ``run`` holds the pipeline keys
    with ``data`` and ``out_dir`` resolved against the config file's folder.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    for text in overrides:
        key, val = parse_override(text)
        raw[key] = val
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(raw) - train_keys - set(RUN_KEYS))
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    run = {k: raw.get(k, default) for k, default in RUN_KEYS.items()}
    if run["data"] is None or run["num_modes"] is None:
        raise UsageError("config must set 'data' and 'num_modes'")
    if not 0 < float(run["train_frac"]) < 1:
        raise UsageError(f"train_frac must lie in (0, 1), got {run['train_frac']}")
    base = path.parent
    run["data"] = str(base / run["data"])
    run["out_dir"] = str(base / run["out_dir"])
    try:
        cfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc
    return run, cfg


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (DataError, NumericalError, OSError) as exc:
        raise StageError(name, exc) from exc


# -- commands -----------------------------------------------------------------------


def cmd_train(args):
    run, cfg = load_run_config(args.config, args.set or ())
    out_dir = Path(args.out) if args.out else Path(run["out_dir"])
    dims = tuple(run["dims"]) if run["dims"] else None
    data = _stage("load", load_csv, run["data"], int(run["num_modes"]), dims)
    train_raw, test_raw = _stage("split", split, data, float(run["train_frac"]), cfg.seed)
    train_set, test_set, stats = _stage("normalize", normalize, train_raw, test_raw)

    def progress(rec):
        if args.progress and rec["epoch"] % args.progress == 0:
            log.info("epoch %d elbo %.6g train_rmse %.4f test_rmse %.4f test_ll %.4f",
                     rec["epoch"], rec["elbo"], rec["train_rmse"], rec["test_rmse"],
                     rec["test_ll"])

    params, history = _stage("train", optim.train, train_set, test_set, cfg, progress)
    ck = checkpoint.Checkpoint(params, {**run, **cfg.to_dict()}, stats, data.meta)
    _stage("save", out_dir.mkdir, parents=True, exist_ok=True)
    _stage("save", checkpoint.save, out_dir / CHECKPOINT_NAME, ck)
    _stage("save", history.write_csv, out_dir / HISTORY_NAME)
    if history.records:
        best = history.records[history.best_epoch]
        rmse, ll, epoch = best["test_rmse"], best["test_ll"], history.best_epoch
    else:
        rmse, ll = optim.evaluate(params, test_set, cfg.num_pred_samples, cfg.seed)
        epoch = -1
    print(f"test_rmse={format_real(rmse)} test_ll={format_real(ll)} best_epoch={epoch} "
          f"epochs={len(history)} checkpoint={out_dir / CHECKPOINT_NAME}")
    return EXIT_OK


def _load_ck(path):
    return _stage("checkpoint", checkpoint.load, path)


def _in_range(indices, dims):
    return np.all((indices >= 0) & (indices < np.asarray(dims)), axis=1)


def _report_skipped(n):
    if n:
        print(f"warning: skipped {n} row(s) with out-of-range entity index", file=sys.stderr)


def cmd_eval(args):
    ck = _load_ck(args.checkpoint)
    raw = _stage("load", load_csv, args.data, ck.meta.num_modes)
    keep = _in_range(raw.indices, ck.meta.dims)
    skipped = int((~keep).sum())
    _report_skipped(skipped)
    if not keep.any():
        raise StageError("load", DataError("no observations within the checkpoint's dimensions"))
    data = from_arrays(raw.indices[keep], raw.values[keep], raw.times[keep], dims=ck.meta.dims)
    data = apply_norm(data, ck.norm)
    samples = args.samples or int(ck.run.get("num_pred_samples", 20))
    rmse, ll = _stage("evaluate", optim.evaluate, ck.params, data, samples, args.seed)
    print(f"rmse={format_real(rmse)} log_likelihood={format_real(ll)} n={len(data)} "
          f"skipped={skipped}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rmse", "log_likelihood", "n", "skipped"])
            w.writerow([format_real(rmse), format_real(ll), len(data), skipped])
    return EXIT_OK


def read_query(path, num_modes):
    """Entries and raw times from a CSV with header ``i1..iK,time`` (a value column is ignored)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    want = [f"i{k + 1}" for k in range(num_modes)]
    if header[:num_modes] != want or "time" not in header[num_modes:]:
        raise DataError(f"{path}: header must start with {','.join(want)} and contain 'time'")
    tcol = header.index("time")
    idx, times = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: line {line}: expected {len(header)} fields, got {len(row)}")
        try:
            idx.append([int(v) for v in row[:num_modes]])
            times.append(float(row[tcol]))
        except ValueError as exc:
            raise DataError(f"{path}: line {line}: {exc}") from exc
        if not math.isfinite(times[-1]):
            raise DataError(f"{path}: line {line}: non-finite time")
    if not idx:
        raise DataError(f"{path}: no queries")
    return np.asarray(idx, dtype=np.int64), np.asarray(times)


def cmd_predict(args):
    ck = _load_ck(args.checkpoint)
    idx, raw_t = _stage("load", read_query, args.queries, ck.meta.num_modes)
    keep = _in_range(idx, ck.meta.dims)
    _report_skipped(int((~keep).sum()))
    idx, raw_t = idx[keep], raw_t[keep]
    samples = args.samples or int(ck.run.get("num_pred_samples", 20))
    pred = _stage("predict", model.predict, ck.params, idx, ck.norm.times(raw_t), samples,
                  args.seed)
    mean = ck.norm.raw_values(pred.mean)
    std = pred.std * ck.norm.value_std
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow([f"i{k + 1}" for k in range(ck.meta.num_modes)] + ["time", "mean", "std"])
        for i in range(len(idx)):
            w.writerow([int(v) for v in idx[i]]
                       + [format_real(raw_t[i]), format_real(mean[i]), format_real(std[i])])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def parse_grid(text):
    try:
        start, stop, num = text.split(":")
        start, stop, num = float(start), float(stop), int(num)
    except ValueError as exc:
        raise UsageError(f"--grid expects start:stop:num, got {text!r}") from exc
    if num < 1 or not (math.isfinite(start) and math.isfinite(stop)):
        raise UsageError(f"invalid grid {text!r}")
    return np.linspace(start, stop, num)


def parse_ints(text, what):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"{what} expects comma-separated integers, got {text!r}") from exc
    if not vals:
        raise UsageError(f"{what} is empty")
    return vals


def cmd_trajectories(args):
    ck = _load_ck(args.checkpoint)
    p = ck.params
    if not 0 <= args.mode < p.num_modes:
        raise StageError("trajectories", DataError(f"mode {args.mode} out of range"))
    entities = parse_ints(args.entities, "--entities")
    for j in entities:
        if not 0 <= j < p.dims[args.mode]:
            raise StageError("trajectories", DataError(
                f"entity {j} out of range for mode {args.mode} (size {p.dims[args.mode]})"))
    grid = parse_grid(args.grid)
    scaled = ck.norm.times(grid)
    samples = args.samples or int(ck.run.get("num_pred_samples", 20))
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["mode", "entity", "r", "t", "mean", "std"])
        for j in entities:
            for r in range(p.rank):
                mean, std = model.export_trajectory(p, args.mode, j, r, scaled, samples, args.seed)
                for t, m, s in zip(grid, mean, std):
                    w.writerow([args.mode, j, r, format_real(t), format_real(m), format_real(s)])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_quadrature(args):
    if not 1 <= args.order <= MAX_ORDER:
        raise UsageError(f"order must lie in [1, {MAX_ORDER}], got {args.order}")
    rule = gauss_laguerre(args.order)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["node", "weight"])
        for x, g in zip(rule.nodes, rule.weights):
            w.writerow([format_real(x), format_real(g)])
    finally:
        if out is not sys.stdout:
            out.close()
    print(f"weight_sum={format_real(math.fsum(rule.weights))}", file=sys.stderr)
    return EXIT_OK


def cmd_simulate(args):
    dims = parse_ints(args.dims, "--dims")
    if args.num_obs < 1:
        raise UsageError("--num-obs must be >= 1")
    data, truth = _stage("simulate", synth_dataset, dims, args.num_obs, args.noise, args.seed,
                         rank=args.rank, time_range=(args.t0, args.t1))
    out = Path(args.out)
    manifest = Path(args.manifest) if args.manifest else out.with_name(out.name + ".truth.json")
    _stage("save", write_csv, data, out)
    doc = {
        "dims": dims,
        "num_obs": args.num_obs,
        "noise_std": args.noise,
        "seed": args.seed,
        "time_range": [args.t0, args.t1],
        "truth": truth.to_dict(),
    }
    _stage("save", manifest.write_text, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    print(f"wrote {len(data)} observations to {out} and ground truth to {manifest}")
    return EXIT_OK


def cmd_gradcheck(args):
    params, batch = optim.tiny_model(args.seed)
    res = optim.grad_check(params, batch, eps=args.eps, seed=args.seed)
    print(f"max_rel_error={res.max_rel_error:.3e} worst={res.worst_name}{list(res.worst_index)} "
          f"analytic={res.analytic:.10g} numeric={res.numeric:.10g} checked={res.num_checked}")
    return EXIT_OK if res.max_rel_error <= args.tol else EXIT_NUMERICAL


# -- entry point ----------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="nonfat", description="Nonparametric factor-trajectory tensor decomposition")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="fit a model from a JSON run configuration")
    t.add_argument("config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--out", help="output directory (overrides out_dir)")
    t.add_argument("--progress", type=int, default=0, metavar="N",
                   help="log every N-th epoch (with -v)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="RMSE and log-likelihood on a data CSV")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--out", help="also write the metrics as CSV")
    e.add_argument("--samples", type=int, default=0, help="Monte-Carlo samples (default: config)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("predict", help="predictive mean and std for queried entries")
    q.add_argument("checkpoint")
    q.add_argument("queries", help="CSV with header i1..iK,time")
    q.add_argument("--out")
    q.add_argument("--samples", type=int, default=0)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_predict)

    j = sub.add_parser("trajectories", help="export learned factor trajectories")
    j.add_argument("checkpoint")
    j.add_argument("--mode", type=int, required=True)
    j.add_argument("--entities", required=True, help="comma-separated entity ids")
    j.add_argument("--grid", required=True, help="raw time grid start:stop:num")
    j.add_argument("--out")
    j.add_argument("--samples", type=int, default=0)
    j.add_argument("--seed", type=int, default=0)
    j.set_defaults(func=cmd_trajectories)

    g = sub.add_parser("quadrature", help="print Gauss-Laguerre nodes and weights")
    g.add_argument("--order", type=int, required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_quadrature)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--dims", required=True, help="comma-separated mode sizes")
    s.add_argument("--num-obs", type=int, required=True)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--rank", type=int, default=2)
    s.add_argument("--t0", type=float, default=0.0)
    s.add_argument("--t1", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--manifest", help="ground-truth JSON (default: OUT.truth.json)")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("gradcheck", help="finite-difference check on a tiny built-in model")
    c.add_argument("--eps", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nonfat: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"nonfat: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else EXIT_DATA
    except (DataError, OSError) as exc:
        print(f"nonfat: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"nonfat: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
