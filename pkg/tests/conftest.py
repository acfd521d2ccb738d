import numpy as np
import pytest

from vemjde.model import (
    HrfModel,
    MixtureParams,
    VoxelGraph,
    build_drift_basis,
)
from vemjde.simulate import (
    interleaved_paradigm,
    sample_drift_coeffs,
    sample_potts_labels,
    simulate_parcel,
)


def grid_coords(nx, ny):
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    return np.stack(
        [xs.ravel(), ys.ravel(), np.zeros(xs.size, dtype=np.intp)], axis=1
    )


def make_parcel(seed=0, N=80, TR=1.0, dt=0.5, D=12, side=5, M=1,
                noise_kind="white", noise_params=None, beta=0.5,
                events=10, mu_act=2.8, drift_scale=5.0, noise_var=1.0,
                sweeps=30):
    """Small simulated parcel for engine tests."""
    J = side * side
    graph = VoxelGraph.grid(side, side)
    labels = sample_potts_labels(graph, np.full(M, beta), 2, sweeps, seed)
    mixture = MixtureParams(
        np.vstack([np.zeros(M), np.full(M, mu_act)]),
        np.full((2, M), 0.25),
    )
    paradigm = interleaved_paradigm(M, events, N * TR, dt, seed)
    hrf = HrfModel.canonical(D, dt)
    P = build_drift_basis(N, TR)
    drift = sample_drift_coeffs(P.shape[1], J, drift_scale, seed + 1)
    if noise_params is None:
        noise_params = {"variance": noise_var}
    data, truth = simulate_parcel(
        paradigm, hrf, labels, grid_coords(side, side), mixture, drift,
        noise_kind, noise_params, N, TR, dt, seed,
    )
    return data, truth


@pytest.fixture
def small_parcel():
    return make_parcel(seed=3)
