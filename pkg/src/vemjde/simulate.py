"""Artificial parcel generation and signal-quality summaries.

Builds ground-truth parcels by the bilinear recipe: activation labels
(hand masks or Potts samples), response levels drawn from the class
mixture, convolution of the stimulus trains with a known HRF, low
frequency drift, and white/AR(1)/AR(2) noise columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import potts
from .errors import ConfigError, InvariantError, NonstationaryNoiseError, ShapeError
from .model import (
    Condition,
    HrfModel,
    LabelField,
    MixtureParams,
    Paradigm,
    ParcelDataset,
    VoxelGraph,
    build_design_matrix,
    build_drift_basis,
)

__all__ = [
    "GroundTruth",
    "interleaved_paradigm",
    "sample_potts_labels",
    "load_mask_labels",
    "sample_nrls",
    "sample_noise",
    "sample_drift_coeffs",
    "simulate_parcel",
    "compute_cnr",
    "compute_snr",
    "SimulationConfig",
    "simulate_from_config",
]


@dataclass
class GroundTruth:
    """Everything that went into one simulated parcel."""

    labels: LabelField
    nrls: np.ndarray          # (M, J)
    hrf: HrfModel
    drift_coeffs: np.ndarray  # (O, J)
    noise_kind: str
    noise_params: dict
    noise: np.ndarray         # (N, J) realization
    mixture: MixtureParams
    seed: int
    beta: np.ndarray | None = None  # set when labels are Potts samples


def interleaved_paradigm(n_conditions: int, events_per_condition: int,
                         session_length: float, dt: float, seed: int,
                         isi: float | None = None,
                         names: tuple[str, ...] | None = None,
                         schedule: str = "uniform",
                         min_gap: float | None = None) -> Paradigm:
    """One randomized event schedule shared by all conditions.

    The quoted ISI is the mean interval between consecutive events
    irrespective of condition; ``session_length / isi`` events are
    drawn. The default schedule places events uniformly at random with
    a hard minimum gap of 2*dt (sorted-uniform construction), then
    deals them to conditions by a balanced shuffle. ``schedule="even"``
    instead uses an evenly spaced grid with +-dt/2 jitter and cyclic
    condition assignment; note that a near-periodic pooled train makes
    the per-condition regressors strongly anti-correlated once slow
    drifts are regressed out, so the randomized schedule is the default.
    """
    M = n_conditions
    total = M * events_per_condition
    if isi is not None:
        total = max(M, int(round(session_length / isi)))
    mean_isi = session_length / total
    if min_gap is None:
        min_gap = 2 * dt
    if min_gap * total > session_length:
        raise ConfigError(
            f"{total} events with minimum gap {min_gap:.3g}s do not fit in "
            f"{session_length:.3g}s"
        )
    rng = np.random.default_rng(seed)
    if schedule == "uniform":
        slack = session_length - total * min_gap
        times = np.sort(rng.uniform(0, slack, total)) \
            + np.arange(total) * min_gap
    elif schedule == "even":
        times = (np.arange(total) + 0.5) * mean_isi \
            + rng.uniform(-dt / 2, dt / 2, total)
    else:
        raise ConfigError(f"unknown schedule {schedule!r}")
    times = np.clip(times, 0.0, session_length * (1 - 1e-9))
    if schedule == "even":
        assign = np.arange(total) % M
    else:
        counts = np.full(M, total // M)
        counts[: total % M] += 1
        assign = np.repeat(np.arange(M), counts)
        rng.shuffle(assign)
    if names is None:
        names = tuple(f"cond{m + 1}" for m in range(M))
    conds = []
    for m in range(M):
        onsets = np.sort(times[assign == m])
        conds.append(Condition(name=names[m], onsets=tuple(onsets)))
    return Paradigm(conditions=tuple(conds), session_length=session_length)


def sample_potts_labels(graph: VoxelGraph, beta: np.ndarray, I: int,
                        sweeps: int, seed: int) -> LabelField:
    """Gibbs-sample one label map per condition.

    Starts from an i.i.d. uniform configuration and performs ``sweeps``
    full sequential sweeps in site order. Deterministic given the seed.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if np.any(beta < 0) or sweeps < 1:
        raise ConfigError("need beta >= 0 and sweeps >= 1")
    rng = np.random.default_rng(seed)
    J = graph.n_sites
    neighbors = graph.neighbors
    out = np.empty((beta.size, J), dtype=np.intp)
    for m, b in enumerate(beta):
        q = rng.integers(0, I, size=J)
        for sweep in range(sweeps):
            u = rng.random(J)
            for j in range(J):
                counts = np.bincount(q[neighbors[j]], minlength=I)
                w = np.cumsum(np.exp(b * (counts - counts.max())))
                q[j] = np.searchsorted(w, u[j] * w[-1], side="right")
        out[m] = q + 1
    return LabelField(labels=out, n_classes=I)


def load_mask_labels(mask_files) -> tuple[LabelField, np.ndarray]:
    """Read one CSV integer grid per condition.

    Returns the label field and the voxel coordinates of the grid in
    row-major order; 2D masks get a singleton third axis.
    """
    grids = []
    for path in mask_files:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"mask file not found: {path}")
        grid = np.loadtxt(path, delimiter=",", dtype=np.intp, ndmin=2)
        grids.append(grid)
    shape = grids[0].shape
    for path, g in zip(mask_files, grids):
        if g.shape != shape:
            raise ShapeError(f"mask {path} has shape {g.shape}, expected {shape}")
    labels = np.stack([g.ravel() for g in grids])
    I = int(labels.max())
    if labels.min() < 1:
        raise InvariantError("mask labels must be >= 1")
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]),
                             indexing="ij")
    coords = np.stack(
        [rows.ravel(), cols.ravel(), np.zeros(rows.size, dtype=np.intp)], axis=1
    )
    return LabelField(labels=labels, n_classes=max(I, 2)), coords


def sample_nrls(labels: LabelField, mixture: MixtureParams, seed: int
                ) -> np.ndarray:
    """Draw response levels from the class-conditional Gaussians."""
    if labels.n_classes > mixture.n_classes:
        raise InvariantError("labels reference more classes than the mixture")
    rng = np.random.default_rng(seed)
    M, J = labels.labels.shape
    cls = labels.labels - 1
    cond = np.arange(M)[:, None]
    mu = mixture.means[cls, cond]
    sd = np.sqrt(mixture.variances[cls, cond])
    return mu + sd * rng.standard_normal((M, J))


def _ar_stationary_start(coeffs: np.ndarray, sigma2: float, J: int,
                         rng: np.random.Generator) -> np.ndarray:
    """Draw the first p values of each column from the stationary law."""
    p = coeffs.size
    if p == 1:
        rho = coeffs[0]
        return rng.standard_normal((1, J)) * np.sqrt(sigma2 / (1 - rho**2))
    phi1, phi2 = coeffs
    g0 = (1 - phi2) * sigma2 / ((1 + phi2) * ((1 - phi2) ** 2 - phi1**2))
    g1 = phi1 * g0 / (1 - phi2)
    cov = np.array([[g0, g1], [g1, g0]])
    L = np.linalg.cholesky(cov)
    return L @ rng.standard_normal((2, J))


def _check_stationary(coeffs: np.ndarray):
    # Roots of 1 - phi_1 z - ... - phi_p z^p must lie outside the unit circle.
    roots = np.roots(np.concatenate(([1.0], -coeffs))[::-1])
    if np.any(np.abs(roots) <= 1.0 + 1e-12):
        raise NonstationaryNoiseError(
            f"AR coefficients {coeffs.tolist()} are not stationary"
        )


def sample_noise(kind: str, params: dict, N: int, J: int, seed: int
                 ) -> np.ndarray:
    """i.i.d. noise columns: white, AR(1) or AR(2).

    AR columns start from their stationary distribution. ``params``
    carries ``variance`` (innovation variance) plus ``rho`` for ar1 or
    ``coeffs`` for ar2.
    """
    rng = np.random.default_rng(seed)
    sigma2 = float(params.get("variance", 1.0))
    if sigma2 <= 0:
        raise ConfigError("noise variance must be positive")
    if kind == "white":
        return np.sqrt(sigma2) * rng.standard_normal((N, J))
    if kind == "ar1":
        coeffs = np.array([float(params["rho"])])
    elif kind == "ar2":
        coeffs = np.asarray(params["coeffs"], dtype=float)
        if coeffs.size != 2:
            raise ConfigError("ar2 noise needs exactly two coefficients")
    else:
        raise ConfigError(f"unknown noise kind {kind!r}")
    _check_stationary(coeffs)
    p = coeffs.size
    eps = np.empty((N, J))
    eps[:p] = _ar_stationary_start(coeffs, sigma2, J, rng)
    innov = np.sqrt(sigma2) * rng.standard_normal((N, J))
    for n in range(p, N):
        eps[n] = innov[n]
        for lag in range(p):
            eps[n] += coeffs[lag] * eps[n - 1 - lag]
    return eps


def ar2_coeffs_for_lag1(lag1: float, phi2: float = -0.2) -> np.ndarray:
    """Stable AR(2) pair with the requested lag-1 autocorrelation."""
    coeffs = np.array([lag1 * (1 - phi2), phi2])
    _check_stationary(coeffs)
    return coeffs


def sample_drift_coeffs(O: int, J: int, scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((O, J))


def simulate_parcel(paradigm: Paradigm, hrf: HrfModel, labels: LabelField,
                    coords: np.ndarray, mixture: MixtureParams,
                    drift_coeffs: np.ndarray, noise_kind: str,
                    noise_params: dict, N: int, TR: float, dt: float,
                    seed: int, cutoff_period: float = 128.0,
                    parcel_id: int = 0) -> tuple[ParcelDataset, GroundTruth]:
    """Assemble one parcel: Y = sum_m a^m (X_m h) + P L + noise.

    The identity is exact; subtracting the stored components recovers
    the stimulus-induced term bit for bit.
    """
    design = build_design_matrix(paradigm, N, TR, dt, hrf.order)
    P = build_drift_basis(N, TR, cutoff_period)
    if drift_coeffs.shape != (P.shape[1], labels.n_voxels):
        raise ShapeError(
            f"drift_coeffs must be (O={P.shape[1]}, J={labels.n_voxels})"
        )
    ss = np.random.SeedSequence(seed)
    nrl_seed, noise_seed = [int(s.generate_state(1)[0]) for s in ss.spawn(2)]
    a = sample_nrls(labels, mixture, nrl_seed)
    eps = sample_noise(noise_kind, noise_params, N, labels.n_voxels, noise_seed)
    stim_resp = np.einsum("mnd,d->mn", design.X, hrf.taps)  # (M, N)
    Y = stim_resp.T @ a + P @ drift_coeffs + eps
    data = ParcelDataset(parcel_id=parcel_id, Y=Y, coords=coords, P=P,
                         design=design)
    truth = GroundTruth(labels=labels, nrls=a, hrf=hrf,
                        drift_coeffs=drift_coeffs, noise_kind=noise_kind,
                        noise_params=dict(noise_params), noise=eps,
                        mixture=mixture.copy(), seed=seed)
    return data, truth


def compute_cnr(mu1: float, v1: float, mu2: float, v2: float) -> float:
    """Contrast-to-noise ratio 2 (mu1 - mu2)^2 / (v1 + v2)."""
    if v1 + v2 <= 0:
        raise InvariantError("variances must not both be zero")
    return 2.0 * (mu1 - mu2) ** 2 / (v1 + v2)


def compute_snr(stim_component: np.ndarray, noise_component: np.ndarray
                ) -> float:
    """Input SNR in dB: 10 log10 of stimulus energy over noise energy."""
    noise_energy = float(np.sum(np.square(noise_component)))
    if noise_energy == 0:
        raise InvariantError("noise component has zero energy")
    stim_energy = float(np.sum(np.square(stim_component)))
    return 10.0 * np.log10(stim_energy / noise_energy)


@dataclass
class SimulationConfig:
    """Validated contents of a simulation config JSON."""

    N: int
    TR: float
    dt: float
    D: int
    mixture: MixtureParams
    noise_kind: str
    noise_params: dict
    seed: int
    cutoff_period: float = 128.0
    events_per_condition: int = 30
    isi: float | None = None
    paradigm_file: str | None = None
    mask_files: list[str] = field(default_factory=list)
    potts_beta: list[float] | None = None
    potts_shape: tuple[int, int] = (20, 20)
    potts_sweeps: int = 200
    n_conditions: int = 2
    n_parcels: int = 1
    drift_scale: float = 10.0
    hrf_peak: float = 5.0

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None
                  ) -> "SimulationConfig":
        def need(key, kind, path="$"):
            if key not in raw:
                raise ConfigError(f"missing field {path}.{key}")
            try:
                return kind(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value at {path}.{key}: {exc}") from exc

        N = need("N", int)
        TR = need("TR", float)
        dt = need("dt", float)
        D = need("D", int)
        seed = need("seed", int)
        mix = raw.get("mixture")
        if not isinstance(mix, dict):
            raise ConfigError("missing object at $.mixture")
        try:
            mixture = MixtureParams(np.asarray(mix["means"], dtype=float),
                                    np.asarray(mix["variances"], dtype=float))
        except KeyError as exc:
            raise ConfigError(f"missing field $.mixture.{exc.args[0]}") from exc
        except InvariantError as exc:
            raise ConfigError(f"bad mixture: {exc}") from exc
        noise = raw.get("noise")
        if not isinstance(noise, dict) or "kind" not in noise:
            raise ConfigError("missing object at $.noise with a 'kind' field")
        noise_kind = noise["kind"]
        noise_params = {k: v for k, v in noise.items() if k != "kind"}
        labels = raw.get("labels", {})
        mask_files = []
        potts_beta = None
        if labels.get("kind") == "masks":
            mask_files = list(labels.get("paths", []))
            if not mask_files:
                raise ConfigError("missing field $.labels.paths")
            if base_dir is not None:
                mask_files = [
                    str(p) if Path(p).is_absolute() else str(base_dir / p)
                    for p in mask_files
                ]
        elif labels.get("kind") == "potts":
            potts_beta = [float(b) for b in labels.get("beta", [])]
            if not potts_beta:
                raise ConfigError("missing field $.labels.beta")
        else:
            raise ConfigError("field $.labels.kind must be 'masks' or 'potts'")
        cfg = cls(
            N=N, TR=TR, dt=dt, D=D, mixture=mixture, noise_kind=noise_kind,
            noise_params=noise_params, seed=seed,
            cutoff_period=float(raw.get("cutoff_period", 128.0)),
            events_per_condition=int(raw.get("events_per_condition", 30)),
            isi=raw.get("isi"),
            mask_files=mask_files,
            potts_beta=potts_beta,
            potts_shape=tuple(labels.get("shape", (20, 20))),
            potts_sweeps=int(labels.get("sweeps", 200)),
            n_conditions=int(raw.get("n_conditions",
                                     mixture.n_conditions)),
            n_parcels=int(raw.get("n_parcels", 1)),
            drift_scale=float(raw.get("drift_scale", 10.0)),
            hrf_peak=float(raw.get("hrf_peak", 5.0)),
        )
        if cfg.dt >= cfg.TR:
            raise ConfigError("field $.dt must be smaller than $.TR")
        if cfg.n_conditions != mixture.n_conditions:
            raise ConfigError(
                "$.n_conditions disagrees with the mixture column count"
            )
        return cfg


def simulate_from_config(cfg: SimulationConfig
                         ) -> list[tuple[ParcelDataset, GroundTruth]]:
    """Generate every parcel requested by a config, with derived seeds."""
    out = []
    hrf = HrfModel.canonical(cfg.D, cfg.dt, peak=cfg.hrf_peak)
    session = cfg.N * cfg.TR
    for pid in range(cfg.n_parcels):
        seed = cfg.seed ^ pid
        paradigm = interleaved_paradigm(
            cfg.n_conditions, cfg.events_per_condition, session, cfg.dt,
            seed=seed, isi=cfg.isi,
        )
        if cfg.mask_files:
            labels, coords = load_mask_labels(cfg.mask_files)
            if labels.n_classes < cfg.mixture.n_classes:
                labels = LabelField(labels.labels, cfg.mixture.n_classes)
            beta_truth = None
        else:
            nx, ny = cfg.potts_shape
            graph = VoxelGraph.grid(nx, ny)
            beta_truth = np.asarray(cfg.potts_beta, dtype=float)
            labels = sample_potts_labels(
                graph, beta_truth, cfg.mixture.n_classes,
                cfg.potts_sweeps, seed,
            )
            xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
            coords = np.stack(
                [xs.ravel(), ys.ravel(), np.zeros(xs.size, dtype=np.intp)],
                axis=1,
            )
        P = build_drift_basis(cfg.N, cfg.TR, cfg.cutoff_period)
        drift = sample_drift_coeffs(P.shape[1], labels.n_voxels,
                                    cfg.drift_scale, seed + 1)
        data, truth = simulate_parcel(
            paradigm, hrf, labels, coords, cfg.mixture, drift,
            cfg.noise_kind, cfg.noise_params, cfg.N, cfg.TR, cfg.dt,
            seed=seed, cutoff_period=cfg.cutoff_period, parcel_id=pid,
        )
        truth.beta = beta_truth
        out.append((data, truth))
    return out
