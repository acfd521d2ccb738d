"""Generative model building blocks.

Domain types for one parcel of event-related BOLD data and the
deterministic constructions on top of them: stimulus design matrices on
the HRF sampling grid, the orthonormal low-frequency drift basis, the
smoothness prior for the HRF, AR(1) noise precisions in tridiagonal
form, and exact log-likelihood / log-joint evaluators.

Array conventions
-----------------
    Y       (N, J)   BOLD series, one column per voxel
    X       (M, N, D+1) binary design matrices, one per condition
    h       (D+1,)   HRF taps on the dt grid, h[0] = h[D] = 0
    P       (N, O)   orthonormal drift basis
    A       (M, J)   neural response levels
    labels  (M, J)   activation classes, values in 1..I
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DriftBasisError,
    InvalidParadigmError,
    InvalidSamplingError,
    InvariantError,
    NonstationaryNoiseError,
)

__all__ = [
    "Condition",
    "Paradigm",
    "DesignMatrix",
    "HrfModel",
    "MixtureParams",
    "NoiseParams",
    "Ar1Precision",
    "VoxelGraph",
    "ParcelDataset",
    "LabelField",
    "build_design_matrix",
    "build_drift_basis",
    "build_hrf_prior",
    "second_difference_matrix",
    "canonical_hrf",
    "ar1_precision",
    "log_likelihood",
    "log_joint",
    "LogJointResult",
]

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class Condition:
    """One experimental condition: a name and its onset times in seconds."""

    name: str
    onsets: tuple[float, ...]


@dataclass(frozen=True)
class Paradigm:
    """Stimulus timing for one session."""

    conditions: tuple[Condition, ...]
    session_length: float

    def __post_init__(self):
        if len(self.conditions) < 1:
            raise InvalidParadigmError("paradigm needs at least one condition")
        if self.session_length <= 0:
            raise InvalidParadigmError("session_length must be positive")
        for cond in self.conditions:
            onsets = np.asarray(cond.onsets, dtype=float)
            if onsets.size and np.any(np.diff(onsets) < 0):
                raise InvalidParadigmError(
                    f"onsets of condition {cond.name!r} are not sorted"
                )
            if onsets.size and (onsets[0] < 0 or onsets[-1] >= self.session_length):
                raise InvalidParadigmError(
                    f"condition {cond.name!r} has onsets outside "
                    f"[0, {self.session_length})"
                )

    @property
    def n_conditions(self) -> int:
        return len(self.conditions)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.conditions)


@dataclass(frozen=True)
class DesignMatrix:
    """Per-condition binary stimulus-occurrence matrices.

    ``X[m, n, d] = 1`` iff an onset of condition m, delayed by d*dt,
    falls in the sampling bin of scan n (scans at t_n = n*TR).
    """

    X: np.ndarray  # (M, N, D+1), values in {0, 1}
    TR: float
    dt: float
    condition_names: tuple[str, ...]

    @property
    def n_conditions(self) -> int:
        return self.X.shape[0]

    @property
    def n_scans(self) -> int:
        return self.X.shape[1]

    @property
    def hrf_len(self) -> int:
        """Number of HRF taps D+1."""
        return self.X.shape[2]

    def interior(self) -> np.ndarray:
        """Design columns for the D-1 free interior taps."""
        return self.X[:, :, 1:-1]


class HrfModel:
    """FIR hemodynamic filter on the dt grid with pinned endpoints.

    The first and last taps are structurally zero; only the D-1 interior
    taps are free. ``prior_cov`` is the smoothness kernel for those
    interior taps, ``(dt**4) * inv(D2' D2)`` with D2 the second-order
    finite-difference operator.
    """

    def __init__(self, taps: np.ndarray, dt: float):
        taps = np.asarray(taps, dtype=float)
        if taps.ndim != 1 or taps.size < 5:
            raise InvariantError("HRF needs at least 5 taps (D >= 4)")
        if taps[0] != 0.0 or taps[-1] != 0.0:
            raise InvariantError("HRF endpoint taps must be zero")
        if dt <= 0:
            raise InvalidSamplingError("dt must be positive")
        self.taps = taps
        self.dt = float(dt)

    @property
    def order(self) -> int:
        """D, so that the filter spans D*dt seconds with D+1 taps."""
        return self.taps.size - 1

    @property
    def free_taps(self) -> np.ndarray:
        return self.taps[1:-1]

    @property
    def prior_cov(self) -> np.ndarray:
        return build_hrf_prior(self.order, self.dt)

    @classmethod
    def from_interior(cls, interior: np.ndarray, dt: float) -> "HrfModel":
        taps = np.zeros(np.asarray(interior).size + 2)
        taps[1:-1] = interior
        return cls(taps, dt)

    @classmethod
    def canonical(cls, D: int, dt: float, peak: float = 5.0,
                  undershoot: float = 15.0, undershoot_ratio: float = 0.35
                  ) -> "HrfModel":
        return cls(canonical_hrf(D, dt, peak, undershoot, undershoot_ratio), dt)


@dataclass
class MixtureParams:
    """Gaussian class parameters of the response-level mixture.

    Rows index classes (0: non-activated with pinned zero mean,
    1: activated, 2: optional deactivated), columns index conditions.
    """

    means: np.ndarray      # (I, M)
    variances: np.ndarray  # (I, M)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape:
            raise InvariantError("means/variances shape mismatch")
        I = self.means.shape[0]
        if I not in (2, 3):
            raise InvariantError(f"class count must be 2 or 3, got {I}")
        if np.any(self.means[0] != 0.0):
            raise InvariantError("non-activated class mean must be zero")
        if np.any(self.variances <= 0.0):
            raise InvariantError("all class variances must be positive")
        if I == 3 and np.any(self.means[2] > 0.0):
            raise InvariantError("deactivated class mean must be <= 0")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def n_conditions(self) -> int:
        return self.means.shape[1]

    def copy(self) -> "MixtureParams":
        return MixtureParams(self.means.copy(), self.variances.copy())


@dataclass
class NoiseParams:
    """Per-voxel AR(1) noise parameters; rho == 0 means white noise."""

    sigma2: np.ndarray  # (J,)
    rho: np.ndarray     # (J,)

    def __post_init__(self):
        self.sigma2 = np.atleast_1d(np.asarray(self.sigma2, dtype=float))
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        if self.sigma2.shape != self.rho.shape:
            raise InvariantError("sigma2/rho shape mismatch")
        if np.any(self.sigma2 <= 0):
            raise InvariantError("innovation variances must be positive")
        if np.any(np.abs(self.rho) >= 1):
            raise NonstationaryNoiseError("|rho| must be < 1")

    @property
    def n_voxels(self) -> int:
        return self.sigma2.size

    def precision(self, j: int, N: int) -> "Ar1Precision":
        return ar1_precision(self.rho[j], self.sigma2[j], N)

    def copy(self) -> "NoiseParams":
        return NoiseParams(self.sigma2.copy(), self.rho.copy())


class Ar1Precision:
    """Tridiagonal noise precision Gamma = Lambda(rho) / sigma2.

    Lambda has unit corners, 1 + rho^2 on the interior diagonal and
    -rho off the diagonal. All operations run in O(N); no dense matrix
    is ever materialized here.
    """

    def __init__(self, rho: float, sigma2: float, N: int):
        if abs(rho) >= 1:
            raise NonstationaryNoiseError(f"|rho| must be < 1, got {rho}")
        if sigma2 <= 0:
            raise InvariantError("sigma2 must be positive")
        if N < 2:
            raise InvariantError("need at least two scans")
        self.rho = float(rho)
        self.sigma2 = float(sigma2)
        self.N = int(N)

    def diagonals(self) -> tuple[np.ndarray, np.ndarray]:
        """(main, off) diagonals of Lambda."""
        main = np.full(self.N, 1.0 + self.rho**2)
        main[0] = main[-1] = 1.0
        off = np.full(self.N - 1, -self.rho)
        return main, off

    def lambda_matvec(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = u.copy()
        out[1:-1] += self.rho**2 * u[1:-1]
        out[:-1] -= self.rho * u[1:]
        out[1:] -= self.rho * u[:-1]
        return out

    def matvec(self, u: np.ndarray) -> np.ndarray:
        """Gamma @ u."""
        return self.lambda_matvec(u) / self.sigma2

    def quad_form(self, u: np.ndarray, v: np.ndarray | None = None) -> float:
        """u' Gamma v (v defaults to u)."""
        if v is None:
            v = u
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        q = (
            u @ v
            + self.rho**2 * (u[1:-1] @ v[1:-1])
            - self.rho * (u[:-1] @ v[1:] + u[1:] @ v[:-1])
        )
        return q / self.sigma2

    @property
    def logdet(self) -> float:
        """log |Gamma| = -N log sigma2 + log(1 - rho^2)."""
        return -self.N * math.log(self.sigma2) + math.log1p(-self.rho**2)


class VoxelGraph:
    """Undirected voxel adjacency under 6-connectivity.

    Stores per-site neighbor index arrays and the unordered edge list
    (each pair once, j < k).
    """

    def __init__(self, neighbors: list[np.ndarray]):
        self.neighbors = [np.asarray(nb, dtype=np.intp) for nb in neighbors]
        edges = [
            (j, int(k))
            for j, nbs in enumerate(self.neighbors)
            for k in nbs
            if j < k
        ]
        self.edges = (
            np.asarray(edges, dtype=np.intp).reshape(-1, 2)
            if edges
            else np.empty((0, 2), dtype=np.intp)
        )
        for j, nbs in enumerate(self.neighbors):
            for k in nbs:
                if j not in self.neighbors[k]:
                    raise InvariantError("voxel graph is not symmetric")

    @property
    def n_sites(self) -> int:
        return len(self.neighbors)

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @classmethod
    def from_coords(cls, coords: np.ndarray) -> "VoxelGraph":
        """6-connectivity graph of integer 3D coordinates."""
        coords = np.asarray(coords, dtype=np.intp)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise InvariantError("coords must be (J, 3)")
        index = {tuple(c): j for j, c in enumerate(coords)}
        if len(index) != coords.shape[0]:
            raise InvariantError("voxel coordinates are not unique")
        offsets = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        neighbors = []
        for c in coords:
            nbs = [
                index[(c[0] + dx, c[1] + dy, c[2] + dz)]
                for dx, dy, dz in offsets
                if (c[0] + dx, c[1] + dy, c[2] + dz) in index
            ]
            neighbors.append(np.sort(np.asarray(nbs, dtype=np.intp)))
        return cls(neighbors)

    @classmethod
    def grid(cls, nx: int, ny: int, nz: int = 1) -> "VoxelGraph":
        xs, ys, zs = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        coords = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)
        return cls.from_coords(coords)

    @classmethod
    def chain(cls, n: int) -> "VoxelGraph":
        return cls.grid(n, 1, 1)


@dataclass
class LabelField:
    """Hard activation labels, one per (condition, voxel), in 1..I."""

    labels: np.ndarray  # (M, J) integer
    n_classes: int

    def __post_init__(self):
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.intp))
        if np.any(self.labels < 1) or np.any(self.labels > self.n_classes):
            raise InvariantError(
                f"labels must lie in 1..{self.n_classes}"
            )

    @property
    def n_conditions(self) -> int:
        return self.labels.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.labels.shape[1]


@dataclass
class ParcelDataset:
    """Observed data and fixed operators for one parcel."""

    parcel_id: int
    Y: np.ndarray            # (N, J)
    coords: np.ndarray       # (J, 3) integer voxel coordinates
    P: np.ndarray            # (N, O) orthonormal drift basis
    design: DesignMatrix
    graph: VoxelGraph = field(default=None)  # built from coords if omitted

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=float)
        self.coords = np.asarray(self.coords, dtype=np.intp)
        self.P = np.asarray(self.P, dtype=float)
        if self.graph is None:
            self.graph = VoxelGraph.from_coords(self.coords)
        N, J = self.Y.shape
        if self.coords.shape != (J, 3):
            raise InvariantError("coords must be (J, 3)")
        if self.P.shape[0] != N:
            raise InvariantError("drift basis row count must equal N")
        if self.design.n_scans != N:
            raise InvariantError("design matrix scan count must equal N")
        if self.graph.n_sites != J:
            raise InvariantError("graph site count must equal J")
        gram = self.P.T @ self.P
        if np.max(np.abs(gram - np.eye(gram.shape[0]))) > ORTHO_TOL:
            raise InvariantError("drift basis is not orthonormal")

    @property
    def n_scans(self) -> int:
        return self.Y.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.Y.shape[1]

    @property
    def n_conditions(self) -> int:
        return self.design.n_conditions

    @property
    def n_drifts(self) -> int:
        return self.P.shape[1]


def build_design_matrix(paradigm: Paradigm, N: int, TR: float, dt: float,
                        D: int) -> DesignMatrix:
    """Bin stimulus onsets onto the lagged HRF sampling grid.

    An onset at time s lights entry (n, d) when the nearest lag bin
    round((n*TR - s)/dt) equals d for some 0 <= d <= D and the bin-center
    offset |n*TR - s - d*dt| is at most dt/2.
    """
    if dt >= TR:
        raise InvalidSamplingError(f"dt must be < TR (got dt={dt}, TR={TR})")
    if D < 1 or N < 1:
        raise InvalidParadigmError("N and D must be positive")
    M = paradigm.n_conditions
    X = np.zeros((M, N, D + 1))
    t = np.arange(N) * TR
    for m, cond in enumerate(paradigm.conditions):
        for s in cond.onsets:
            if s < 0 or s >= paradigm.session_length:
                raise InvalidParadigmError(
                    f"onset {s} outside session [0, {paradigm.session_length})"
                )
            lag = t - s
            d = np.rint(lag / dt).astype(int)
            ok = (d >= 0) & (d <= D) & (np.abs(lag - d * dt) <= dt / 2 + 1e-12)
            X[m, np.nonzero(ok)[0], d[ok]] = 1.0
    return DesignMatrix(X=X, TR=TR, dt=dt, condition_names=paradigm.names)


def build_drift_basis(N: int, TR: float, cutoff_period: float = 128.0
                      ) -> np.ndarray:
    """Orthonormal discrete-cosine drift basis.

    Keeps the constant column plus every cosine whose period is at least
    ``cutoff_period`` seconds, i.e. O = 1 + floor(2*N*TR / cutoff_period)
    columns.
    """
    if cutoff_period <= 2 * TR:
        raise DriftBasisError("cutoff_period must exceed 2*TR")
    O = 1 + int(math.floor(2 * N * TR / cutoff_period))
    if O >= N:
        raise DriftBasisError(
            f"drift basis too rich: O={O} with only N={N} scans"
        )
    n = np.arange(N)
    P = np.empty((N, O))
    P[:, 0] = 1.0 / math.sqrt(N)
    for k in range(1, O):
        P[:, k] = math.sqrt(2.0 / N) * np.cos(math.pi * k * (2 * n + 1) / (2 * N))
    return P


def second_difference_matrix(size: int) -> np.ndarray:
    """Second-order finite differences with zero (Dirichlet) boundaries."""
    D2 = np.zeros((size, size))
    idx = np.arange(size)
    D2[idx, idx] = -2.0
    D2[idx[:-1], idx[:-1] + 1] = 1.0
    D2[idx[1:], idx[1:] - 1] = 1.0
    return D2


def build_hrf_prior(D: int, dt: float) -> np.ndarray:
    """Smoothness covariance kernel for the D-1 interior HRF taps."""
    if D < 4:
        raise InvalidSamplingError("need D >= 4 for a meaningful HRF")
    D2 = second_difference_matrix(D - 1)
    K = D2.T @ D2
    # The Dirichlet second-difference operator is nonsingular for any size.
    R = dt**4 * np.linalg.inv(K)
    return 0.5 * (R + R.T)


def canonical_hrf(D: int, dt: float, peak: float = 5.0,
                  undershoot: float = 15.0, undershoot_ratio: float = 0.35
                  ) -> np.ndarray:
    """Difference-of-gamma HRF taps, unit peak, zero endpoints."""
    if D < 4:
        raise InvalidSamplingError("need D >= 4")
    t = np.arange(D + 1) * dt
    span = D * dt

    def bump(center, width):
        shape = max((center / width) ** 2, 1.5)
        scale = center / (shape - 1)  # gamma mode at (shape-1)*scale
        x = t / scale
        with np.errstate(divide="ignore", invalid="ignore"):
            b = np.where(t > 0, np.exp((shape - 1) * np.log(x) - x), 0.0)
        return b / b.max()

    h = bump(peak, 2.5) - undershoot_ratio * bump(min(undershoot, 0.8 * span), 4.0)
    h[0] = 0.0
    h[-1] = 0.0
    peak_val = np.max(np.abs(h))
    return h / peak_val


def ar1_precision(rho: float, sigma2: float, N: int) -> Ar1Precision:
    """Tridiagonal AR(1) precision; rho = 0 gives white noise."""
    return Ar1Precision(rho, sigma2, N)


def log_likelihood(y: np.ndarray, a: np.ndarray, h_taps: np.ndarray,
                   ell: np.ndarray, noise: Ar1Precision, P: np.ndarray,
                   design: DesignMatrix) -> float:
    """Exact Gaussian log-likelihood of one voxel's series.

    Evaluates -(N/2) log(2 pi) + (1/2) log|Gamma| - (1/2) r' Gamma r with
    r = y - P ell - sum_m a_m X_m h.
    """
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    h_taps = np.asarray(h_taps, dtype=float)
    N = y.size
    if noise.N != N or P.shape[0] != N or design.n_scans != N:
        raise InvariantError("inconsistent scan counts")
    if a.size != design.n_conditions or h_taps.size != design.hrf_len:
        raise InvariantError("inconsistent condition/tap counts")
    stim = np.einsum("m,mnd,d->n", a, design.X, h_taps)
    r = y - P @ np.asarray(ell, dtype=float) - stim
    return -0.5 * N * math.log(2 * math.pi) + 0.5 * noise.logdet \
        - 0.5 * noise.quad_form(r)


@dataclass(frozen=True)
class LogJointResult:
    value: float
    potts_exact: bool

    def __float__(self):
        return self.value


def log_joint(dataset: ParcelDataset, A: np.ndarray, h: HrfModel,
              labels: LabelField, mixture: MixtureParams,
              drifts: np.ndarray, noise: NoiseParams, v_h: float,
              beta: np.ndarray, enumeration_limit: int = 2**24
              ) -> LogJointResult:
    """Complete-data log density log p(Y, A, h, Q ; Theta).

    The label-prior normalizer is computed exactly by enumeration when
    I^J stays below ``enumeration_limit`` and by the mean-field surrogate
    otherwise; the flag in the result records which one was used.
    """
    from . import potts

    J = dataset.n_voxels
    M = dataset.n_conditions
    N = dataset.n_scans
    A = np.asarray(A, dtype=float).reshape(M, J)
    drifts = np.asarray(drifts, dtype=float)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    I = mixture.n_classes

    total = 0.0
    for j in range(J):
        total += log_likelihood(
            dataset.Y[:, j], A[:, j], h.taps, drifts[:, j],
            noise.precision(j, N), dataset.P, dataset.design,
        )

    # HRF smoothness prior on the interior taps.
    R = h.prior_cov
    hi = h.free_taps
    sign, logdet_R = np.linalg.slogdet(R)
    if sign <= 0:
        raise InvariantError("HRF prior kernel is not positive definite")
    k = hi.size
    quad = hi @ np.linalg.solve(R, hi)
    total += -0.5 * (k * math.log(2 * math.pi) + k * math.log(v_h)
                     + logdet_R + quad / v_h)

    # Conditional Gaussian mixture over response levels.
    cls = labels.labels - 1
    mu = mixture.means[cls, np.arange(M)[:, None]]
    var = mixture.variances[cls, np.arange(M)[:, None]]
    total += np.sum(-0.5 * (np.log(2 * math.pi * var) + (A - mu) ** 2 / var))

    # Potts label prior, one field per condition.
    exact = I**J <= enumeration_limit
    for m in range(M):
        q = labels.labels[m]
        total += beta[m] * potts.energy(q, dataset.graph)
        if exact:
            total -= potts.exact_log_partition(dataset.graph, beta[m], I)
        else:
            delta = np.zeros((J, I))
            delta[np.arange(J), q - 1] = 1.0
            total -= potts.mean_field_log_partition(delta, dataset.graph, beta[m])
    return LogJointResult(value=float(total), potts_exact=exact)
