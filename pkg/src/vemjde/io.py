"""Persistence: raw array files, dataset manifests, reports, CSV inputs.

Array files are a fixed little-endian format: an 8-byte magic
``VJDEARR\\0``, two unsigned 32-bit dimensions, then row-major float64
payload. Everything round-trips bit-exactly; see ``docs/formats.md``
for the full layout and all manifest keys.

Writes go to a temporary file followed by an atomic rename, under an
exclusive per-directory lock file.
"""

from __future__ import annotations

import json
import os
import struct
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, InvariantError, ShapeError
from .model import (
    Condition,
    DesignMatrix,
    HrfModel,
    LabelField,
    MixtureParams,
    NoiseParams,
    Paradigm,
    ParcelDataset,
)
from .vem import IterationStats, PosteriorState, VemConfig, VemReport

__all__ = [
    "write_array",
    "read_array",
    "write_dataset",
    "read_dataset",
    "write_report",
    "read_report",
    "write_paradigm_csv",
    "read_paradigm_csv",
    "write_mask_csv",
    "read_mask_csv",
    "load_json",
]

MAGIC = b"VJDEARR\0"
FORMAT_VERSION = 1
LOCK_NAME = ".vemjde.lock"


@contextmanager
def _dir_lock(directory: Path, timeout: float = 60.0):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            if time.monotonic() > deadline:
                raise DataError(f"could not acquire write lock {lock}")
            time.sleep(0.01)
    try:
        os.write(fd, str(os.getpid()).encode())
        yield
    finally:
        os.close(fd)
        lock.unlink(missing_ok=True)


def _atomic_write(path: Path, payload: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_array(path, arr: np.ndarray):
    """Write a 1- or 2-D float array in the raw format."""
    arr = np.atleast_2d(np.asarray(arr, dtype="<f8"))
    if arr.ndim != 2:
        raise ShapeError("raw format stores 2-D arrays")
    rows, cols = arr.shape
    if rows >= 2**32 or cols >= 2**32:
        raise ShapeError("dimension exceeds the 32-bit header field")
    header = MAGIC + struct.pack("<II", rows, cols)
    _atomic_write(Path(path), header + np.ascontiguousarray(arr).tobytes())


def read_array(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing array file {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    rows, cols = struct.unpack("<II", blob[8:16])
    expected = 16 + 8 * rows * cols
    if len(blob) != expected:
        raise ShapeError(
            f"{path}: payload is {len(blob) - 16} bytes, header says "
            f"{rows}x{cols}"
        )
    return np.frombuffer(blob[16:], dtype="<f8").reshape(rows, cols).copy()


def _read_array_checked(path, shape) -> np.ndarray:
    arr = read_array(path)
    if arr.shape != tuple(shape):
        raise ShapeError(
            f"{path}: array is {arr.shape}, manifest declares {tuple(shape)}"
        )
    return arr


def _dump_json(path: Path, obj: dict):
    _atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n")
                  .encode())


def load_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# -- datasets -----------------------------------------------------------


def write_dataset(datasets, ground_truths=None, directory=".") -> Path:
    """Write parcels (plus optional ground truth) and return the manifest
    path."""
    if not datasets:
        raise DataError("empty parcel list")
    directory = Path(directory)
    if ground_truths is not None and len(ground_truths) != len(datasets):
        raise ShapeError("one ground truth per parcel required")
    first = datasets[0]
    design = first.design
    with _dir_lock(directory):
        write_array(directory / "drift.arr", first.P)
        design_files = []
        for m in range(design.n_conditions):
            name = f"design_m{m + 1}.arr"
            write_array(directory / name, design.X[m])
            design_files.append(name)
        parcels = []
        for k, data in enumerate(datasets):
            truth = ground_truths[k] if ground_truths is not None else None
            pid = data.parcel_id
            stem = f"p{pid:04d}"
            files = {"y": f"{stem}_y.arr", "coords": f"{stem}_coords.arr"}
            write_array(directory / files["y"], data.Y)
            write_array(directory / files["coords"],
                        data.coords.astype(float))
            entry = {"id": pid, "n_voxels": data.n_voxels, "files": files}
            if truth is not None:
                gt_files = {
                    "labels": f"{stem}_gt_labels.arr",
                    "nrls": f"{stem}_gt_nrls.arr",
                    "hrf": f"{stem}_gt_hrf.arr",
                    "drift_coeffs": f"{stem}_gt_drift.arr",
                    "noise": f"{stem}_gt_noise.arr",
                }
                write_array(directory / gt_files["labels"],
                            truth.labels.labels.astype(float))
                write_array(directory / gt_files["nrls"], truth.nrls)
                write_array(directory / gt_files["hrf"],
                            truth.hrf.taps[None, :])
                write_array(directory / gt_files["drift_coeffs"],
                            truth.drift_coeffs)
                write_array(directory / gt_files["noise"], truth.noise)
                entry["ground_truth"] = {
                    "files": gt_files,
                    "n_classes": truth.labels.n_classes,
                    "noise_kind": truth.noise_kind,
                    "noise_params": truth.noise_params,
                    "mixture_means": truth.mixture.means.tolist(),
                    "mixture_variances": truth.mixture.variances.tolist(),
                    "seed": truth.seed,
                    "beta": None if truth.beta is None
                    else np.asarray(truth.beta).tolist(),
                }
            parcels.append(entry)
        manifest = {
            "kind": "vemjde-dataset",
            "format_version": FORMAT_VERSION,
            "TR": design.TR,
            "dt": design.dt,
            "N": design.n_scans,
            "D": design.hrf_len - 1,
            "M": design.n_conditions,
            "O": first.n_drifts,
            "condition_names": list(design.condition_names),
            "drift_file": "drift.arr",
            "design_files": design_files,
            "parcels": parcels,
        }
        path = directory / "dataset.json"
        _dump_json(path, manifest)
    return path


def read_dataset(manifest_path):
    """Load every parcel; type invariants are re-validated on the way in.

    Returns (datasets, ground_truths) where the second item is None when
    no parcel carries ground truth.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "dataset.json"
    raw = load_json(manifest_path)
    if raw.get("kind") != "vemjde-dataset":
        raise FormatError(f"{manifest_path}: not a dataset manifest")
    if raw.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: format_version {raw.get('format_version')} "
            f"not supported (expected {FORMAT_VERSION})"
        )
    base = manifest_path.parent
    N, D, M = raw["N"], raw["D"], raw["M"]
    P = _read_array_checked(base / raw["drift_file"], (N, raw["O"]))
    X = np.stack([
        _read_array_checked(base / name, (N, D + 1))
        for name in raw["design_files"]
    ])
    if not np.all((X == 0) | (X == 1)):
        raise InvariantError("design matrices must be binary")
    design = DesignMatrix(X=X, TR=raw["TR"], dt=raw["dt"],
                          condition_names=tuple(raw["condition_names"]))
    from .simulate import GroundTruth  # deferred; simulate does not import io

    datasets, truths = [], []
    any_truth = False
    for entry in raw["parcels"]:
        J = entry["n_voxels"]
        files = entry["files"]
        Y = _read_array_checked(base / files["y"], (N, J))
        coords = _read_array_checked(base / files["coords"], (J, 3))
        if np.any(coords != np.round(coords)):
            raise InvariantError("voxel coordinates must be integral")
        data = ParcelDataset(parcel_id=entry["id"], Y=Y,
                             coords=coords.astype(np.intp), P=P, design=design)
        datasets.append(data)
        gt = entry.get("ground_truth")
        if gt is None:
            truths.append(None)
            continue
        any_truth = True
        gt_files = gt["files"]
        labels = _read_array_checked(base / gt_files["labels"], (M, J))
        truth = GroundTruth(
            labels=LabelField(labels.astype(np.intp), gt["n_classes"]),
            nrls=_read_array_checked(base / gt_files["nrls"], (M, J)),
            hrf=HrfModel(
                _read_array_checked(base / gt_files["hrf"], (1, D + 1))[0],
                raw["dt"],
            ),
            drift_coeffs=_read_array_checked(
                base / gt_files["drift_coeffs"], (raw["O"], J)
            ),
            noise_kind=gt["noise_kind"],
            noise_params=gt["noise_params"],
            noise=_read_array_checked(base / gt_files["noise"], (N, J)),
            mixture=MixtureParams(np.asarray(gt["mixture_means"]),
                                  np.asarray(gt["mixture_variances"])),
            seed=gt["seed"],
            beta=None if gt.get("beta") is None
            else np.asarray(gt["beta"], dtype=float),
        )
        truths.append(truth)
    return datasets, (truths if any_truth else None)


# -- reports ------------------------------------------------------------


def write_report(report: VemReport, directory) -> Path:
    """Serialize one parcel report.

    Wall-clock seconds go to a separate ``timing_p*.json`` sidecar so
    the canonical report files are bit-identical across reruns.
    """
    directory = Path(directory)
    stem = f"report_p{report.parcel_id:04d}"
    state = report.state
    J, M = state.m_a.shape
    I = state.marginals.shape[2]
    with _dir_lock(directory):
        files = {
            "m_h": f"{stem}_m_h.arr",
            "sigma_h": f"{stem}_sigma_h.arr",
            "m_a": f"{stem}_m_a.arr",
            "sigma_a": f"{stem}_sigma_a.arr",
            "drifts": f"{stem}_drifts.arr",
            "noise": f"{stem}_noise.arr",
        }
        write_array(directory / files["m_h"], state.m_h[None, :])
        write_array(directory / files["sigma_h"], state.sigma_h)
        write_array(directory / files["m_a"], state.m_a)
        write_array(directory / files["sigma_a"],
                    state.sigma_a.reshape(J * M, M))
        write_array(directory / files["drifts"], state.drifts)
        write_array(directory / files["noise"],
                    np.stack([state.noise.sigma2, state.noise.rho]))
        for m in range(M):
            name = f"{stem}_marginals_m{m + 1}.arr"
            files[f"marginals_m{m + 1}"] = name
            write_array(directory / name, state.marginals[m])
        doc = {
            "kind": "vemjde-report",
            "format_version": FORMAT_VERSION,
            "parcel_id": report.parcel_id,
            "n_iters": report.n_iters,
            "converged": report.converged,
            "warnings": report.warnings,
            "config": report.config.to_dict(),
            "dt": state.dt,
            "v_h": state.v_h,
            "beta": state.beta.tolist(),
            "mixture_means": state.mixture.means.tolist(),
            "mixture_variances": state.mixture.variances.tolist(),
            "n_voxels": J,
            "n_conditions": M,
            "n_classes": I,
            "trace": {
                "free_energy": [s.free_energy for s in report.trace],
                "c_h": [s.c_h for s in report.trace],
                "c_a": [s.c_a for s in report.trace],
            },
            "files": files,
        }
        path = directory / f"{stem}.json"
        _dump_json(path, doc)
        _dump_json(directory / f"timing_p{report.parcel_id:04d}.json",
                   {"seconds": [s.seconds for s in report.trace]})
    return path


def read_report(path) -> VemReport:
    path = Path(path)
    raw = load_json(path)
    if raw.get("kind") != "vemjde-report":
        raise FormatError(f"{path}: not a report file")
    if raw.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version")
    base = path.parent
    files = raw["files"]
    J, M, I = raw["n_voxels"], raw["n_conditions"], raw["n_classes"]
    m_h = read_array(base / files["m_h"])[0]
    K = m_h.size
    sigma_h = _read_array_checked(base / files["sigma_h"], (K, K))
    m_a = _read_array_checked(base / files["m_a"], (J, M))
    sigma_a = _read_array_checked(base / files["sigma_a"], (J * M, M)) \
        .reshape(J, M, M)
    drifts = read_array(base / files["drifts"])
    noise_arr = _read_array_checked(base / files["noise"], (2, J))
    marginals = np.stack([
        _read_array_checked(base / files[f"marginals_m{m + 1}"], (J, I))
        for m in range(M)
    ])
    state = PosteriorState(
        m_h=m_h, sigma_h=sigma_h, m_a=m_a, sigma_a=sigma_a,
        marginals=marginals, drifts=drifts,
        noise=NoiseParams(sigma2=noise_arr[0], rho=noise_arr[1]),
        mixture=MixtureParams(np.asarray(raw["mixture_means"]),
                              np.asarray(raw["mixture_variances"])),
        v_h=raw["v_h"], beta=np.asarray(raw["beta"], dtype=float),
        dt=raw["dt"],
    )
    tr = raw["trace"]
    n = len(tr["free_energy"])
    timing_path = base / f"timing_p{raw['parcel_id']:04d}.json"
    seconds = (load_json(timing_path)["seconds"] if timing_path.exists()
               else [0.0] * n)
    trace = [
        IterationStats(free_energy=tr["free_energy"][i], c_h=tr["c_h"][i],
                       c_a=tr["c_a"][i], seconds=seconds[i])
        for i in range(n)
    ]
    if n != raw["n_iters"]:
        raise InvariantError(f"{path}: trace length disagrees with n_iters")
    return VemReport(
        parcel_id=raw["parcel_id"], state=state, n_iters=raw["n_iters"],
        trace=trace, converged=raw["converged"], warnings=raw["warnings"],
        config=VemConfig.from_dict(raw["config"]),
    )


# -- small text formats ---------------------------------------------------


def write_paradigm_csv(paradigm: Paradigm, path):
    lines = ["condition,onset_seconds"]
    for cond in paradigm.conditions:
        for onset in cond.onsets:
            lines.append(f"{cond.name},{onset!r}")
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_paradigm_csv(path, session_length: float) -> Paradigm:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing paradigm file {path}")
    onsets: dict[str, list[float]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "condition,onset_seconds":
            raise FormatError(f"{path}: unexpected header {header!r}")
        for line in fh:
            line = line.strip()
            if not line:
                continue
            name, value = line.split(",")
            onsets.setdefault(name, []).append(float(value))
    conditions = tuple(
        Condition(name=k, onsets=tuple(sorted(v))) for k, v in onsets.items()
    )
    return Paradigm(conditions=conditions, session_length=session_length)


def write_mask_csv(grid: np.ndarray, path):
    grid = np.asarray(grid, dtype=int)
    lines = [",".join(str(v) for v in row) for row in grid]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_mask_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing mask file {path}")
    return np.loadtxt(path, delimiter=",", dtype=np.intp, ndmin=2)
