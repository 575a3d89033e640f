"""Command-line front end.

Subcommands: ``simulate``, ``fit``, ``select``, ``eval``, ``bench`` and the
``report`` formatter.  Every subcommand accepts ``--seed``, ``--threads``
and ``--out-dir``; artifacts are written atomically (temp file in the target
directory, then rename), JSON artifacts are schema-versioned and
deterministic for a fixed seed up to the recorded timings.

Exit codes: 0 on success, 2 on validation problems (bad flags, malformed
input, inadmissible configurations), 3 when fitting fails to produce a
usable model (all starts degenerate, eigensolver non-convergence).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import linops
from .ecm import (
    AllStartsFailed,
    EmptyCluster,
    FitConfig,
    fit,
    fit_baseline_aecm,
)
from .metrics import adjusted_rand_index, confusion_metrics
from .model import DataMatrix, FitReport
from .preprocess import (
    CsvFormatError,
    feature_tie_counts,
    gaussian_distributional_transform,
    load_csv,
)
from .selection import SearchGrid, select_common_q, select_per_cluster_q, write_bic_table
from .simgen import SimSpec, draw_truth, sample_dataset

FIT_SCHEMA_VERSION = 1
_CONVERGENCE_FAILURES = (
    AllStartsFailed,
    EmptyCluster,
    linops.NoConvergence,
    linops.DegenerateWeights,
)


def _atomic_write(path: str, writer) -> None:
    """Write via a sibling temp file and rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: str, payload) -> None:
    _atomic_write(path, lambda fh: json.dump(payload, fh, sort_keys=True, indent=2))


def _write_rows(path: str, header, rows) -> None:
    def writer(fh):
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)

    _atomic_write(path, writer)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _parse_q(text: str) -> int | tuple[int, ...]:
    parts = [s.strip() for s in text.split(",") if s.strip()]
    if not parts:
        raise ValueError("--q must be an integer or a comma-separated list")
    values = tuple(int(s) for s in parts)
    return values[0] if len(values) == 1 else values


def _parse_k_range(text: str) -> tuple[int, ...]:
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        lo, hi = int(lo_s), int(hi_s)
        if hi < lo:
            raise ValueError(f"--k-range bounds out of order: {text!r}")
        return tuple(range(lo, hi + 1))
    return (int(text),)


def _sniff_header(path: str) -> bool:
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not any(c.strip() for c in row):
                continue
            for cell in row:
                cell = cell.strip()
                if cell == "":
                    continue
                try:
                    float(cell)
                except ValueError:
                    return True
            return False
    return False


def _load_features(path: str, label_col):
    has_header = _sniff_header(path)
    label_column = None
    if label_col is not None:
        try:
            label_column = int(label_col)
        except ValueError:
            label_column = label_col
    return load_csv(
        path,
        has_header=has_header,
        label_column=label_column,
        return_mapping=True,
    )


def _read_label_file(path: str):
    """One label per line; returns (codes array, first-appearance mapping)."""
    with open(path, newline="") as fh:
        cells = []
        for row in csv.reader(fh):
            vals = [c.strip() for c in row if c.strip()]
            cells.extend(vals)
    if not cells:
        raise CsvFormatError(f"{path}: no labels found")
    if cells[0].lower() in {"label", "labels", "cluster", "class", "truth"}:
        cells = cells[1:]
    if not cells:
        raise CsvFormatError(f"{path}: header only, no labels")
    mapping: dict = {}
    for c in cells:
        if c not in mapping:
            mapping[c] = len(mapping)
    codes = np.array([mapping[c] for c in cells], dtype=np.int64)
    return codes, mapping


def _rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((seed, rep)).generate_state(1)[0])


def _model_payload(model):
    return {
        "weights": [c.weight for c in model.components],
        "means": [_jsonable(c.mean) for c in model.components],
        "loadings": [_jsonable(c.loadings) for c in model.components],
        "uniquenesses": [_jsonable(c.uniquenesses) for c in model.components],
        "factor_spec": list(model.factor_vector),
        "n_components": model.n_components,
        "p": model.p,
    }


def _write_fit_artifacts(report: FitReport, out_dir: str, *, config: FitConfig,
                         truth_labels=None, positive_code=None, label_mapping=None):
    from .model import free_param_count

    payload = {
        "schema_version": FIT_SCHEMA_VERSION,
        "engine": report.engine,
        "seed": report.seed,
        "config": {
            "n_components": config.n_components,
            "factor_spec": list(config.factor_vector()),
            "tol": config.tol,
            "max_iter": config.max_iter,
            "n_random_starts": config.n_random_starts,
            "short_run_iters": config.short_run_iters,
            "n_finalists": config.n_finalists,
            "use_kmeans_start": config.use_kmeans_start,
        },
        "model": _model_payload(report.model),
        "loglik": report.loglik,
        "loglik_trace": _jsonable(report.loglik_trace),
        "bic": report.bic,
        "n_params": free_param_count(report.model),
        "n_iter": report.n_iter,
        "converged": report.converged,
        "wall_time_s": report.wall_time_s,
    }
    if label_mapping:
        payload["label_mapping"] = {str(k): v for k, v in label_mapping.items()}
    _write_json(os.path.join(out_dir, "fit.json"), payload)
    _write_rows(
        os.path.join(out_dir, "assignments.csv"),
        ["cluster"],
        [[int(c)] for c in report.hard_assignment],
    )
    for k, comp in enumerate(report.model.components):
        header = [f"F{j + 1}" for j in range(comp.n_factors)]
        rows = [[f"{v:.10g}" for v in row] for row in np.atleast_2d(comp.loadings)]
        if comp.n_factors == 0:
            rows = [[] for _ in range(comp.p)]
        _write_rows(os.path.join(out_dir, f"loadings_k{k}.csv"), header, rows)

    if truth_labels is not None:
        metrics = {"ari": adjusted_rand_index(report.hard_assignment, truth_labels)}
        n_truth = np.unique(truth_labels).size
        n_pred = np.unique(report.hard_assignment).size
        if n_truth == 2 and n_pred <= 2:
            pos = positive_code if positive_code is not None else int(truth_labels[0])
            cm = confusion_metrics(report.hard_assignment, truth_labels, pos)
            metrics.update(
                accuracy=cm.accuracy,
                sensitivity=cm.sensitivity,
                specificity=cm.specificity,
                kappa=cm.kappa,
                positive_class_code=int(pos),
            )
        _write_json(os.path.join(out_dir, "metrics.json"), metrics)


def _prepare_data(args):
    data, mapping = _load_features(args.data, getattr(args, "label_col", None))
    truth = data.labels
    if getattr(args, "labels", None):
        codes, label_map = _read_label_file(args.labels)
        if codes.shape[0] != data.n:
            raise CsvFormatError("label file length disagrees with the data")
        data = DataMatrix(values=data.values, labels=codes)
        truth = codes
        mapping = label_map
    if args.gdt:
        ties = feature_tie_counts(data)
        data = gaussian_distributional_transform(data)
        _write_json(
            os.path.join(args.out_dir, "gdt_ties.json"),
            {
                "n_features": int(ties.size),
                "tie_counts": _jsonable(ties),
                "features_with_ties": int(np.sum(ties > 0)),
            },
        )
    return data, truth, mapping


def cmd_simulate(args):
    qspec = _parse_q(args.q)
    for rep in range(args.reps):
        seed = _rep_seed(args.seed, rep)
        spec = SimSpec(
            n=args.n,
            p=args.p,
            n_components=args.k,
            factor_spec=qspec,
            separation=args.separation,
            seed=seed,
        )
        truth = draw_truth(spec)
        sample = sample_dataset(truth, args.n, seed=seed + 1)
        stem = os.path.join(args.out_dir, f"sim_rep{rep:03d}")
        _write_rows(
            stem + "_data.csv",
            None,
            [[f"{v:.17g}" for v in row] for row in sample.values],
        )
        _write_rows(stem + "_labels.csv", ["label"], [[int(v)] for v in sample.labels])
        _write_json(
            stem + "_truth.json",
            {
                "schema_version": FIT_SCHEMA_VERSION,
                "spec": {
                    "n": args.n,
                    "p": args.p,
                    "k": args.k,
                    "q": list(spec.factor_vector()),
                    "separation": args.separation,
                    "seed": seed,
                },
                "model": _model_payload(truth),
            },
        )
    print(f"wrote {args.reps} replicate(s) to {args.out_dir}")


def cmd_fit(args):
    data, truth, mapping = _prepare_data(args)
    config = FitConfig(
        n_components=args.k,
        factor_spec=_parse_q(args.q),
        tol=args.tol,
        max_iter=args.max_iter,
        n_random_starts=args.starts,
        n_finalists=args.finalists,
        seed=args.seed,
    )
    if args.engine == "aecm":
        report = fit_baseline_aecm(
            data, config, threads=args.threads, force=args.force
        )
    else:
        report = fit(data, config, threads=args.threads)
    _write_fit_artifacts(
        report,
        args.out_dir,
        config=config,
        truth_labels=truth,
        label_mapping=mapping,
    )
    print(
        f"engine={report.engine} loglik={report.loglik:.6f} bic={report.bic:.6f} "
        f"iters={report.n_iter} converged={report.converged}"
    )


def cmd_select(args):
    data, truth, mapping = _prepare_data(args)
    config = FitConfig(
        n_components=2,  # replaced per cell
        factor_spec=1,
        tol=args.tol,
        max_iter=args.max_iter,
        n_random_starts=args.starts,
        n_finalists=args.finalists,
        seed=args.seed,
    )
    grid = SearchGrid(
        k_values=_parse_k_range(args.k_range), q_max=args.q_max, fit_config=config
    )
    if args.per_cluster_q:
        report, rows = select_per_cluster_q(data, grid, threads=args.threads)
    else:
        report, rows = select_common_q(data, grid, threads=args.threads)
    write_bic_table(rows, os.path.join(args.out_dir, "bic_table.csv"))
    best_config = FitConfig(
        n_components=report.model.n_components,
        factor_spec=report.model.factor_vector,
        tol=args.tol,
        max_iter=args.max_iter,
        n_random_starts=args.starts,
        n_finalists=args.finalists,
        seed=args.seed,
    )
    _write_fit_artifacts(
        report, args.out_dir, config=best_config, truth_labels=truth,
        label_mapping=mapping,
    )
    print(
        f"selected K={report.model.n_components} "
        f"q={report.model.factor_vector} bic={report.bic:.6f}"
    )


def cmd_eval(args):
    pred, _ = _read_label_file(args.pred)
    truth, truth_map = _read_label_file(args.truth)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth files disagree on length")
    metrics = {"ari": adjusted_rand_index(pred, truth)}
    if np.unique(truth).size == 2 and np.unique(pred).size <= 2:
        if args.positive_class is not None:
            if args.positive_class not in truth_map:
                raise ValueError(
                    f"--positive-class {args.positive_class!r} not among truth labels"
                )
            pos = truth_map[args.positive_class]
        else:
            pos = int(truth[0])
        cm = confusion_metrics(pred, truth, pos)
        positive_name = next(k for k, v in truth_map.items() if v == pos)
        metrics.update(
            accuracy=cm.accuracy,
            sensitivity=cm.sensitivity,
            specificity=cm.specificity,
            kappa=cm.kappa,
            positive_class=positive_name,
        )
    _write_json(os.path.join(args.out_dir, "metrics.json"), metrics)
    print(json.dumps(metrics, sort_keys=True))


def run_bench(n, p, k, q, reps, seed, *, config_template=None, threads=1,
              separation=1.5):
    """Paired engine timings on matched synthetic replicates."""
    template = config_template or FitConfig(
        n_components=k,
        factor_spec=q,
        n_random_starts=10,
        n_finalists=2,
    )
    rows = []
    speedups = []
    for rep in range(reps):
        rep_seed = _rep_seed(seed, rep)
        spec = SimSpec(
            n=n, p=p, n_components=k, factor_spec=q,
            separation=separation, seed=rep_seed,
        )
        truth = draw_truth(spec)
        sample = sample_dataset(truth, n, seed=rep_seed + 1)
        from dataclasses import replace as _replace

        config = _replace(template, n_components=k, factor_spec=q, seed=rep_seed)
        t0 = time.perf_counter()
        r_primary = fit(sample, config, threads=threads)
        t_primary = time.perf_counter() - t0
        t0 = time.perf_counter()
        r_baseline = fit_baseline_aecm(sample, config, threads=threads, force=True)
        t_baseline = time.perf_counter() - t0
        speedup = t_baseline / t_primary
        speedups.append(speedup)
        rows.append(
            {
                "rep": rep,
                "gmmfad_seconds": t_primary,
                "aecm_seconds": t_baseline,
                "gmmfad_loglik": r_primary.loglik,
                "aecm_loglik": r_baseline.loglik,
                "gmmfad_iters": r_primary.n_iter,
                "aecm_iters": r_baseline.n_iter,
                "speedup": speedup,
            }
        )
    arr = np.array(speedups)
    summary = {
        "n": n,
        "p": p,
        "k": k,
        "q": q if isinstance(q, int) else list(q),
        "reps": reps,
        "median_speedup": float(np.median(arr)),
        "q1_speedup": float(np.quantile(arr, 0.25)),
        "q3_speedup": float(np.quantile(arr, 0.75)),
    }
    return rows, summary


def cmd_bench(args):
    rows, summary = run_bench(
        args.n, args.p, args.k, _parse_q(args.q), args.reps, args.seed,
        threads=args.threads,
    )
    header = list(rows[0].keys())
    _write_rows(
        os.path.join(args.out_dir, "bench_rows.csv"),
        header,
        [[row[h] for h in header] for row in rows],
    )
    _write_json(os.path.join(args.out_dir, "bench_summary.json"), summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_report(args):
    with open(args.fit) as fh:
        payload = json.load(fh)
    loadings = payload["model"]["loadings"]
    threshold = args.suppress_below
    for k, lam in enumerate(loadings):
        lam = np.asarray(lam, dtype=np.float64)
        header = [f"F{j + 1}" for j in range(lam.shape[1] if lam.ndim == 2 else 0)]
        rows = []
        for row in np.atleast_2d(lam):
            rows.append(
                ["" if abs(v) < threshold else f"{v:.4f}" for v in row]
            )
        _write_rows(
            os.path.join(args.out_dir, f"loadings_report_k{k}.csv"), header, rows
        )
    print(
        f"wrote {len(loadings)} loadings report(s) "
        f"(|value| < {threshold} suppressed)"
    )


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--out-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmfad",
        description="Clustering with Gaussian mixtures of factor analyzers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="draw synthetic mixture replicates")
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--p", type=int, required=True)
    sim.add_argument("--k", type=int, required=True)
    sim.add_argument("--q", required=True, help="int or comma-separated list")
    sim.add_argument("--separation", type=float, default=1.0)
    sim.add_argument("--reps", type=int, default=1)
    _add_common(sim)
    sim.set_defaults(func=cmd_simulate)

    fit_p = sub.add_parser("fit", help="fit a mixture to a CSV")
    fit_p.add_argument("--data", required=True)
    group = fit_p.add_mutually_exclusive_group()
    group.add_argument("--labels", help="CSV with one truth label per line")
    group.add_argument("--label-col", help="label column name or index in --data")
    fit_p.add_argument("--k", type=int, required=True)
    fit_p.add_argument("--q", required=True, help="int or comma-separated list")
    fit_p.add_argument("--gdt", action="store_true")
    fit_p.add_argument("--tol", type=float, default=1e-6)
    fit_p.add_argument("--max-iter", type=int, default=500)
    fit_p.add_argument("--starts", type=int, default=20)
    fit_p.add_argument("--finalists", type=int, default=3)
    fit_p.add_argument("--engine", choices=("gmmfad", "aecm"), default="gmmfad")
    fit_p.add_argument("--force", action="store_true",
                       help="let the aecm baseline exceed its p limit")
    _add_common(fit_p)
    fit_p.set_defaults(func=cmd_fit)

    sel = sub.add_parser("select", help="BIC search over K and q")
    sel.add_argument("--data", required=True)
    group = sel.add_mutually_exclusive_group()
    group.add_argument("--labels")
    group.add_argument("--label-col")
    sel.add_argument("--k-range", required=True, help="e.g. 1..4 or 2")
    sel.add_argument("--q-max", type=int, required=True)
    sel.add_argument("--per-cluster-q", action="store_true")
    sel.add_argument("--gdt", action="store_true")
    sel.add_argument("--tol", type=float, default=1e-6)
    sel.add_argument("--max-iter", type=int, default=500)
    sel.add_argument("--starts", type=int, default=20)
    sel.add_argument("--finalists", type=int, default=3)
    _add_common(sel)
    sel.set_defaults(func=cmd_select)

    ev = sub.add_parser("eval", help="score predicted labels against truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--positive-class", default=None)
    _add_common(ev)
    ev.set_defaults(func=cmd_eval)

    bench = sub.add_parser("bench", help="paired engine timing comparison")
    bench.add_argument("--n", type=int, required=True)
    bench.add_argument("--p", type=int, required=True)
    bench.add_argument("--k", type=int, required=True)
    bench.add_argument("--q", required=True)
    bench.add_argument("--reps", type=int, default=5)
    _add_common(bench)
    bench.set_defaults(func=cmd_bench)

    rep = sub.add_parser("report", help="format loadings with suppression")
    rep.add_argument("--fit", required=True, help="path to a fit.json")
    rep.add_argument("--suppress-below", type=float, default=0.1)
    _add_common(rep)
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    os.makedirs(args.out_dir, exist_ok=True)
    try:
        args.func(args)
    except _CONVERGENCE_FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CsvFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
