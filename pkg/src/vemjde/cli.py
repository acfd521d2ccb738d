"""Command-line entry point: simulate, fit, evaluate, bench.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
failure. Evaluate and bench write CSV tables plus rendered PNG figures
next to them; timing sidecars (``timing_*.json``) are the only outputs
that legitimately differ between reruns.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data_path, io, metrics, plots
from .errors import ConfigError, DataError, JdeError, NumericalError
from .simulate import (
    SimulationConfig,
    compute_cnr,
    compute_snr,
    simulate_from_config,
)
from .vem import VemConfig, VemEngine

__all__ = ["main"]


def _resolve_config(path_str: str) -> Path:
    """Use the packaged preset when the path does not exist locally."""
    path = Path(path_str)
    if path.exists():
        return path
    builtin = data_path(path.name)
    if builtin.is_file():
        return Path(str(builtin))
    raise DataError(f"config file not found: {path_str}")


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- simulate -------------------------------------------------------------


def _simulate_one(cfg: SimulationConfig, out_dir: Path) -> None:
    pairs = simulate_from_config(cfg)
    io.write_dataset([d for d, _ in pairs], [t for _, t in pairs], out_dir)
    for data, truth in pairs:
        mix = truth.mixture
        stim = data.Y - data.P @ truth.drift_coeffs - truth.noise
        snr = compute_snr(stim, truth.noise)
        for m in range(data.n_conditions):
            cnr = compute_cnr(mix.means[1, m], mix.variances[1, m],
                              mix.means[0, m], mix.variances[0, m])
            print(f"parcel {data.parcel_id} cond {m + 1}: "
                  f"CNR={cnr:.2f} SNR={snr:.2f} dB "
                  f"(N={data.n_scans}, J={data.n_voxels})")


def cmd_simulate(args) -> int:
    cfg_path = _resolve_config(args.config)
    raw = io.load_json(cfg_path)
    out = Path(args.out)
    if args.isi_sweep:
        try:
            lo, hi, count = args.isi_sweep.split(":")
            isis = np.linspace(float(lo), float(hi), int(count))
        except ValueError as exc:
            raise ConfigError(
                f"--isi-sweep expects LOW:HIGH:COUNT, got {args.isi_sweep!r}"
            ) from exc
        for isi in isis:
            sub = dict(raw)
            sub["isi"] = float(isi)
            session = sub["N"] * sub["TR"]
            sub["events_per_condition"] = int(
                session / (isi * sub.get("n_conditions", 2))
            )
            cfg = SimulationConfig.from_dict(sub, base_dir=cfg_path.parent)
            sub_dir = out / f"isi_{isi:05.2f}"
            print(f"== ISI {isi:.2f} s "
                  f"({cfg.events_per_condition} events/condition)")
            _simulate_one(cfg, sub_dir)
        io._dump_json(out / "sweep.json", {"isi_seconds": isis.tolist()})
    else:
        cfg = SimulationConfig.from_dict(raw, base_dir=cfg_path.parent)
        _simulate_one(cfg, out)
    return 0


# -- fit ------------------------------------------------------------------


def _fit_worker(payload):
    data, config = payload
    try:
        return data.parcel_id, VemEngine(data, config).run(), None
    except JdeError as exc:
        return data.parcel_id, None, f"{type(exc).__name__}: {exc}"


def cmd_fit(args) -> int:
    datasets, _ = io.read_dataset(Path(args.data))
    if args.config:
        config = VemConfig.from_dict(io.load_json(_resolve_config(args.config)))
    else:
        config = VemConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = max(1, args.jobs)
    payloads = [(d, config) for d in datasets]
    if jobs == 1:
        results = [_fit_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_worker, payloads))
    failures = []
    for pid, report, error in sorted(results, key=lambda r: r[0]):
        if error is not None:
            failures.append({"parcel": pid, "error": error})
            print(f"parcel {pid}: FAILED ({error})", file=sys.stderr)
            continue
        io.write_report(report, out)
        total = sum(s.seconds for s in report.trace)
        print(f"parcel {pid}: {report.n_iters} iterations, "
              f"converged={report.converged}, {total:.1f}s")
    io._dump_json(out / "fit_summary.json", {
        "n_parcels": len(datasets),
        "failures": failures,
        "config": config.to_dict(),
    })
    return 4 if failures else 0


# -- evaluate -------------------------------------------------------------


def _binary_truth(labels_m: np.ndarray) -> np.ndarray:
    return labels_m == 2


def cmd_evaluate(args) -> int:
    datasets, truths = io.read_dataset(Path(args.data))
    if truths is None:
        raise DataError("dataset carries no ground truth to evaluate against")
    reports_dir = Path(args.reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    weights = None
    if args.contrast:
        weights = np.asarray([float(w) for w in args.contrast.split(",")])

    mse_rows, feat_rows, beta_rows = [], [], []
    roc_rows: dict[int, list] = {}
    ppm_rows: dict[int, list] = {}
    contrast_rows = []
    roc_curves_fig: dict[int, dict] = {}
    for data, truth in zip(datasets, truths):
        pid = data.parcel_id
        report_path = reports_dir / f"report_p{pid:04d}.json"
        if not report_path.exists():
            raise DataError(f"no report for parcel {pid} in {reports_dir}")
        report = io.read_report(report_path)
        if report.state.m_a.shape[0] != data.n_voxels:
            raise DataError(f"parcel {pid}: report/dataset voxel mismatch")
        M = data.n_conditions
        h_est, a_est = report.normalized_view()          # unit-peak convention
        truth_peak = float(np.max(truth.hrf.taps))
        h_true = truth.hrf.taps / truth_peak
        a_true = truth.nrls * truth_peak
        for m in range(M):
            mse_rows.append((pid, m + 1, metrics.mse(a_est[m], a_true[m])))
            ppm = report.state.marginals[m, :, 1]
            pos = _binary_truth(truth.labels.labels[m])
            if pos.any() and not pos.all():
                curve = metrics.roc_curve(ppm, pos)
                roc_rows.setdefault(m, []).extend(
                    (pid, th, f, t, curve.auc)
                    for th, f, t in zip(curve.thresholds, curve.fpr, curve.tpr)
                )
                roc_curves_fig.setdefault(m, {})[f"parcel {pid}"] = curve
            ppm_rows.setdefault(m, []).extend(
                (pid, j, *data.coords[j], ppm[j]) for j in range(data.n_voxels)
            )
            beta_true = ("" if truth.beta is None else truth.beta[m])
            beta_rows.append((pid, m + 1, report.state.beta[m], beta_true))
        feats = metrics.hrf_features(h_est, report.state.dt)
        corr = float(np.corrcoef(report.state.m_h, h_true[1:-1])[0, 1])
        feat_rows.append((pid, feats.peak_value, feats.time_to_peak,
                          feats.time_to_undershoot, feats.fwhm, corr))
        w = weights if weights is not None else _default_contrast(M)
        if w.size != M:
            raise ConfigError(f"contrast needs {M} weights, got {w.size}")
        values = w @ a_est
        contrast_rows.extend(
            (pid, j, *data.coords[j], values[j]) for j in range(data.n_voxels)
        )
        if not args.no_figures:
            plots.save_hrf(out / f"hrf_p{pid:04d}.png", report.state.dt,
                           h_est, h_true)
            plots.save_convergence(out / f"convergence_p{pid:04d}.png",
                                   report.trace)
            for m in range(M):
                plots.save_ppm(out / f"ppm_m{m + 1}_p{pid:04d}.png",
                               report.state.marginals[m, :, 1], data.coords)

    _write_csv(out / "nrl_mse.csv", ["parcel", "condition", "mse"], mse_rows)
    _write_csv(out / "hrf_features.csv",
               ["parcel", "peak_value", "time_to_peak", "time_to_undershoot",
                "fwhm", "correlation"], feat_rows)
    _write_csv(out / "beta_estimates.csv",
               ["parcel", "condition", "beta_hat", "beta_true"], beta_rows)
    _write_csv(out / "contrast.csv",
               ["parcel", "voxel", "x", "y", "z", "value"], contrast_rows)
    for m, rows in roc_rows.items():
        _write_csv(out / f"roc_m{m + 1}.csv",
                   ["parcel", "threshold", "fpr", "tpr", "auc"], rows)
    for m, rows in ppm_rows.items():
        _write_csv(out / f"ppm_m{m + 1}.csv",
                   ["parcel", "voxel", "x", "y", "z", "probability"], rows)
    if not args.no_figures:
        for m, curves in roc_curves_fig.items():
            plots.save_roc(out / f"roc_m{m + 1}.png", curves)
    print(f"evaluation tables written to {out}")
    return 0


def _default_contrast(M: int) -> np.ndarray:
    w = np.zeros(M)
    w[0] = 1.0
    if M > 1:
        w[1] = -1.0
    return w


# -- bench ----------------------------------------------------------------


def _bench_dataset(J: int, M: int, N: int, seed: int = 7):
    from .model import MixtureParams
    from .simulate import (interleaved_paradigm, sample_drift_coeffs,
                           simulate_parcel)
    from .model import HrfModel, VoxelGraph, build_drift_basis
    from .simulate import sample_potts_labels

    TR, dt, D = 2.0, 0.5, 24
    side = max(2, int(np.ceil(np.sqrt(J))))
    graph = VoxelGraph.grid(side, side)
    labels = sample_potts_labels(graph, np.full(M, 0.6), 2, 10, seed)
    keep = slice(0, J)
    xs, ys = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    coords = np.stack(
        [xs.ravel(), ys.ravel(), np.zeros(xs.size, dtype=np.intp)], axis=1
    )[keep]
    from .model import LabelField
    labels = LabelField(labels.labels[:, keep], 2)
    mixture = MixtureParams(
        np.vstack([np.zeros(M), np.full(M, 2.5)]),
        np.full((2, M), 0.3),
    )
    paradigm = interleaved_paradigm(M, max(5, int(N * TR / (M * 12))),
                                    N * TR, dt, seed)
    hrf = HrfModel.canonical(D, dt)
    P = build_drift_basis(N, TR)
    drift = sample_drift_coeffs(P.shape[1], J, 5.0, seed)
    data, _ = simulate_parcel(paradigm, hrf, labels, coords, mixture, drift,
                              "white", {"variance": 1.0}, N, TR, dt, seed)
    return data


def cmd_bench(args) -> int:
    base = {"J": 400, "M": 2, "N": 268}
    grids: dict[str, list[int]] = {}
    for spec in args.dims:
        try:
            dim, values = spec.split("=")
            grids[dim] = [int(v) for v in values.split(",")]
        except ValueError as exc:
            raise ConfigError(
                f"bad dims spec {spec!r}; expected e.g. J=200,400"
            ) from exc
        if dim not in base:
            raise ConfigError(f"unknown dimension {dim!r} (use J, M or N)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    iters = max(5, args.iters)
    rows = []
    for dim, values in grids.items():
        for value in values:
            dims = dict(base, **{dim: value})
            data = _bench_dataset(dims["J"], dims["M"], dims["N"])
            config = VemConfig(max_iters=iters + 1, tol_h=1e-300,
                               tol_a=1e-300)
            report = VemEngine(data, config).run()
            timed = [s.seconds for s in report.trace[1:]]
            per_iter = float(np.mean(timed))
            rows.append((dim, value, per_iter, len(timed)))
            print(f"{dim}={value}: {per_iter * 1e3:.1f} ms/iteration")
    _write_csv(out / "bench.csv",
               ["dimension", "value", "seconds_per_iteration", "n_timed"],
               rows)
    if not args.no_figures:
        plots.save_bench(out / "bench.png", rows)
    return 0


# -- argument parsing -------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vemjde",
        description="Joint detection-estimation of evoked brain activity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate artificial parcels")
    p.add_argument("--config", required=True,
                   help="simulation config JSON (packaged presets resolve "
                        "by bare name, e.g. sim_sec41.json)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--isi-sweep", default=None, metavar="LOW:HIGH:COUNT",
                   help="emit one dataset per inter-stimulus interval")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the solver on every parcel")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", default=None, help="solver config JSON")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="score reports against ground truth")
    p.add_argument("--reports", required=True, help="directory of reports")
    p.add_argument("--data", required=True,
                   help="dataset directory with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--contrast", default=None,
                   help="comma-separated NRL weights, e.g. 1,-1")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="time one iteration across dimensions")
    p.add_argument("--dims", nargs="+", required=True, metavar="DIM=V1,V2",
                   help="grids per dimension, e.g. J=200,400 N=134,268")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=5,
                   help="timed iterations per point (minimum 5)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
