"""Potts Markov-field utilities.

Shared by the label-prior evaluators, the mean-field label update and
the interaction-strength estimator. Site marginals are plain (J, I)
arrays: row j is a probability vector over the I classes.

The surrogate partition function used throughout is the
pseudo-likelihood form: each site contributes the partition of its full
conditional given the neighbor marginals, and the sum is halved so that
each edge is counted once,

    log Z~(beta) = 1/2 sum_j log sum_i exp(beta * s_j(i)),

with s_j(i) the marginal mass of class i among j's neighbors. Its
beta-derivative equals the expected neighbor agreement when the site
conditionals are self-consistent with the marginals, which is what
makes the interaction-strength estimate below consistent on
sub-critical fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvariantError
from .model import VoxelGraph

__all__ = [
    "check_site_marginals",
    "energy",
    "exact_log_partition",
    "mean_field_log_partition",
    "mean_field_sweep",
    "expected_agreement",
    "estimate_beta",
    "BetaEstimate",
]

SIMPLEX_TOL = 1e-12
ENUMERATION_LIMIT = 2**24


def check_site_marginals(marginals: np.ndarray) -> np.ndarray:
    """Validate a (J, I) marginal array; returns it as float64."""
    p = np.asarray(marginals, dtype=float)
    if p.ndim != 2:
        raise InvariantError("site marginals must be a (J, I) array")
    if np.any(p < 0):
        raise InvariantError("site marginals must be nonnegative")
    if np.max(np.abs(p.sum(axis=1) - 1.0)) > SIMPLEX_TOL:
        raise InvariantError("site marginals must sum to one per site")
    return p


def energy(labels: np.ndarray, graph: VoxelGraph) -> float:
    """Number of agreeing unordered neighbor pairs."""
    labels = np.asarray(labels).ravel()
    if labels.size != graph.n_sites:
        raise InvariantError("label count must match graph size")
    e = graph.edges
    if e.size == 0:
        return 0.0
    return float(np.sum(labels[e[:, 0]] == labels[e[:, 1]]))


def _neighbor_sums(marginals: np.ndarray, graph: VoxelGraph) -> np.ndarray:
    """s[j, i] = sum of marginals[k, i] over neighbors k of j."""
    s = np.zeros_like(marginals)
    e = graph.edges
    if e.size:
        np.add.at(s, e[:, 0], marginals[e[:, 1]])
        np.add.at(s, e[:, 1], marginals[e[:, 0]])
    return s


def exact_log_partition(graph: VoxelGraph, beta: float, I: int,
                        chunk: int = 1 << 16) -> float:
    """log Z(beta) by exhaustive enumeration (test oracle).

    Refuses graphs with more than 2**24 configurations. Accumulates
    exp(beta * (U - U_max)) so every term stays in [0, 1].
    """
    n = graph.n_sites
    total = I**n
    if total > ENUMERATION_LIMIT:
        raise InvariantError(
            f"enumeration refused: {I}^{n} configurations exceed 2^24"
        )
    e = graph.edges
    u_max = e.shape[0] if beta >= 0 else 0.0
    acc = 0.0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        # Decode configuration indices into per-site labels (mixed radix).
        digits = np.empty((idx.size, n), dtype=np.int64)
        rem = idx.copy()
        for site in range(n - 1, -1, -1):
            digits[:, site] = rem % I
            rem //= I
        if e.size:
            u = np.sum(digits[:, e[:, 0]] == digits[:, e[:, 1]], axis=1)
        else:
            u = np.zeros(idx.size)
        acc += float(np.sum(np.exp(beta * (u - u_max))))
    return float(beta * u_max + np.log(acc))


def _logsumexp_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1)
    return m + np.log(np.sum(np.exp(logits - m[:, None]), axis=1))


def mean_field_log_partition(marginals: np.ndarray, graph: VoxelGraph,
                             beta: float) -> float:
    """Pseudo-likelihood surrogate of log Z(beta) on the marginals."""
    p = check_site_marginals(marginals)
    s = _neighbor_sums(p, graph)
    return 0.5 * float(np.sum(_logsumexp_rows(beta * s)))


def _mean_field_log_partition_grad(s: np.ndarray, beta: float) -> float:
    """d/dbeta of the surrogate, given precomputed neighbor sums."""
    logits = beta * s
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return 0.5 * float(np.sum(w * s))


def mean_field_sweep(marginals: np.ndarray, external_field: np.ndarray,
                     beta: float, graph: VoxelGraph,
                     order: np.ndarray | None = None) -> np.ndarray:
    """One full fixed-point sweep of the factorized label posterior.

    Sites are visited sequentially (raster order unless ``order`` is
    given); each update sees the freshly updated marginals of earlier
    neighbors. The neighbor summary is the current marginal expectation,
    so the new marginal at site j is the softmax of

        field[j, i] + beta * sum_{k ~ j} p_k(i).

    The input array is not modified.
    """
    p = check_site_marginals(marginals).copy()
    field = np.asarray(external_field, dtype=float)
    if field.shape != p.shape:
        raise InvariantError("field shape must match marginals")
    sites = np.arange(graph.n_sites) if order is None else np.asarray(order)
    neighbors = graph.neighbors
    for j in sites:
        logits = field[j] + beta * p[neighbors[j]].sum(axis=0)
        logits -= logits.max()
        w = np.exp(logits)
        p[j] = w / w.sum()
    return p


def expected_agreement(marginals: np.ndarray, graph: VoxelGraph) -> float:
    """Expected neighbor agreement under factorized marginals."""
    p = check_site_marginals(marginals)
    e = graph.edges
    if e.size == 0:
        return 0.0
    return float(np.sum(p[e[:, 0]] * p[e[:, 1]]))


@dataclass(frozen=True)
class BetaEstimate:
    value: float
    converged: bool
    n_iters: int

    def __float__(self):
        return self.value


def estimate_beta(marginals: np.ndarray, graph: VoxelGraph,
                  beta_init: float = 0.5, lambda_beta: float = 0.0, *,
                  beta_max: float = 1.5, step: float = 0.05,
                  max_iters: int = 200, tol: float = 1e-5,
                  grad_tol: float = 1e-7) -> BetaEstimate:
    """Interaction strength maximizing the penalized surrogate objective.

    Runs projected gradient ascent on [0, beta_max] for

        g(beta) = beta * (agreement - lambda_beta) - log Z~(beta),

    with a fixed initial step and backtracking halving, so the objective
    increases at every accepted step. When the marginals put all mass on
    one class the gradient stays positive and the estimate saturates at
    beta_max. A False flag signals that neither the step size nor the
    gradient dropped below tolerance within ``max_iters``.
    """
    if beta_init < 0 or lambda_beta < 0:
        raise InvariantError("beta_init and lambda_beta must be >= 0")
    p = check_site_marginals(marginals)
    s = _neighbor_sums(p, graph)
    target = expected_agreement(p, graph) - lambda_beta

    def value(b):
        return b * target - 0.5 * float(np.sum(_logsumexp_rows(b * s)))

    def grad(b):
        return target - _mean_field_log_partition_grad(s, b)

    b = min(max(beta_init, 0.0), beta_max)
    g = value(b)
    for it in range(1, max_iters + 1):
        d = grad(b)
        # Projected stationarity: interior zero gradient, or gradient
        # pointing outward at either bound.
        if abs(d) <= grad_tol or (b == 0.0 and d < 0) or (b == beta_max and d > 0):
            return BetaEstimate(value=b, converged=True, n_iters=it)
        st = step
        while st > 1e-10:
            cand = min(max(b + st * d, 0.0), beta_max)
            g_cand = value(cand)
            if g_cand >= g and cand != b:
                break
            st *= 0.5
        else:
            return BetaEstimate(value=b, converged=True, n_iters=it)
        moved = abs(cand - b)
        b, g = cand, g_cand
        if moved <= tol:
            return BetaEstimate(value=b, converged=True, n_iters=it)
    return BetaEstimate(value=b, converged=False, n_iters=max_iters)
