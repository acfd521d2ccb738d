"""Variational EM engine for one parcel.

Alternates the three factor updates (HRF, response levels, labels) with
the four M-sub-steps (mixture moments, HRF prior scale, spatial
interaction strengths, drift and noise), monitors a free-energy
surrogate, and stops on the squared relative change of the HRF and NRL
means.

All per-voxel noise algebra exploits the tridiagonal structure
Lambda(rho) = I + rho^2 B + rho C, where B carries ones on the interior
diagonal and C carries -1 off the diagonal, so quadratic forms and the
matrices entering every update are linear in the scan count. Dense
N x N forms appear only in test oracles.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import potts
from .errors import ConfigError, NumericalError
from .model import (
    HrfModel,
    MixtureParams,
    NoiseParams,
    ParcelDataset,
    build_hrf_prior,
    canonical_hrf,
    second_difference_matrix,
)

__all__ = [
    "VemConfig",
    "PosteriorState",
    "IterationStats",
    "VemReport",
    "VemEngine",
    "initialize",
    "run_vem",
    "e_h_step",
    "e_a_step",
    "e_q_step",
    "m_mixture_step",
    "m_vh_step",
    "m_beta_step",
    "m_drift_noise_step",
    "free_energy",
]

V_MIN = 1e-8


@dataclass
class VemConfig:
    """Knobs of the fit; defaults reproduce the reference protocol."""

    noise_mode: str = "white"          # "white" | "ar1"
    n_classes: int = 2
    max_iters: int = 200
    tol_h: float = 1e-5
    tol_a: float = 1e-5
    lambda_vh: float = 0.0             # exponential prior rate, 0 disables
    lambda_beta: float = 0.0           # exponential prior rate, 0 disables
    estimate_beta: bool = True
    beta_init: float = 0.5
    beta_max: float = 1.5
    mean_field_sweeps: int = 1
    jitter: float = 1e-8
    v_min: float = V_MIN
    v_h_init: float = 0.1
    init_hrf_peak: float = 5.0
    ar1_max_inner: int = 50
    ar1_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.noise_mode not in ("white", "ar1"):
            raise ConfigError(f"unknown noise_mode {self.noise_mode!r}")
        if self.n_classes not in (2, 3):
            raise ConfigError("n_classes must be 2 or 3")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.tol_h <= 0 or self.tol_a <= 0:
            raise ConfigError("tolerances must be positive")

    @classmethod
    def from_dict(cls, raw: dict) -> "VemConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(
                f"unknown config fields: {sorted('$.' + u for u in unknown)}"
            )
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorState:
    """Factorized posterior plus current parameter estimates."""

    m_h: np.ndarray        # (D-1,) interior-tap mean
    sigma_h: np.ndarray    # (D-1, D-1)
    m_a: np.ndarray        # (J, M)
    sigma_a: np.ndarray    # (J, M, M)
    marginals: np.ndarray  # (M, J, I) label probabilities
    drifts: np.ndarray     # (O, J)
    noise: NoiseParams
    mixture: MixtureParams
    v_h: float
    beta: np.ndarray       # (M,)
    dt: float

    def hrf(self) -> HrfModel:
        return HrfModel.from_interior(self.m_h, self.dt)

    def copy(self) -> "PosteriorState":
        return PosteriorState(
            m_h=self.m_h.copy(), sigma_h=self.sigma_h.copy(),
            m_a=self.m_a.copy(), sigma_a=self.sigma_a.copy(),
            marginals=self.marginals.copy(), drifts=self.drifts.copy(),
            noise=self.noise.copy(), mixture=self.mixture.copy(),
            v_h=self.v_h, beta=self.beta.copy(), dt=self.dt,
        )


@dataclass
class IterationStats:
    free_energy: float
    c_h: float
    c_a: float
    seconds: float


@dataclass
class VemReport:
    """Outcome of one parcel fit."""

    parcel_id: int
    state: PosteriorState
    n_iters: int
    trace: list[IterationStats]
    converged: bool
    warnings: list[str]
    config: VemConfig

    @property
    def hrf_taps(self) -> np.ndarray:
        return self.state.hrf().taps

    def normalized_view(self) -> tuple[np.ndarray, np.ndarray]:
        """(unit-peak HRF taps, inversely rescaled NRLs as (M, J)).

        The product a * h is the identifiable quantity; this view pins
        its split by scaling the HRF to unit peak.
        """
        taps = self.hrf_taps
        peak = float(np.max(taps))
        if peak <= 0:
            peak = float(np.max(np.abs(taps))) or 1.0
        return taps / peak, (self.state.m_a * peak).T


def _apply_B(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    out[1:-1] = u[1:-1]
    return out


def _apply_C(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    out[:-1] -= u[1:]
    out[1:] -= u[:-1]
    return out


def _bilinear_BC(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(U' B V, U' C V) for column-stacked U, V."""
    ub = U[1:-1].T @ V[1:-1]
    uc = -(U[:-1].T @ V[1:] + U[1:].T @ V[:-1])
    return ub, uc


class VemEngine:
    """Per-parcel solver; precomputes every data-only operator once."""

    def __init__(self, data: ParcelDataset, config: VemConfig):
        self.data = data
        self.config = config
        design = data.design
        self.Xi = np.ascontiguousarray(design.interior())  # (M, N, K)
        self.M, self.N, self.K = self.Xi.shape
        self.J = data.n_voxels
        self.dt = design.dt
        self.I = config.n_classes

        D2 = second_difference_matrix(self.K)
        self.R_inv = (D2.T @ D2) / self.dt**4
        sign, logdet_rinv = np.linalg.slogdet(self.R_inv)
        self._logdet_R = -logdet_rinv

        # X_m' X_m', X_m' B X_m', X_m' C X_m' for all condition pairs.
        self.KI = np.einsum("mnk,pnl->mpkl", self.Xi, self.Xi)
        self.KB = np.einsum("mnk,pnl->mpkl", self.Xi[:, 1:-1], self.Xi[:, 1:-1])
        xc = np.einsum("mnk,pnl->mpkl", self.Xi[:, :-1], self.Xi[:, 1:])
        self.KC = -(xc + xc.transpose(1, 0, 3, 2))

        P = data.P
        self.PBP, self.PCP = _bilinear_BC(P, P)
        self.PtP = P.T @ P

    # -- shared per-iteration pieces -----------------------------------

    def _gt(self, m_h: np.ndarray) -> np.ndarray:
        """Expected per-condition regressors X_m E[h], stacked (N, M)."""
        return np.einsum("mnk,k->nm", self.Xi, m_h)

    def _trace_mats(self, sigma_h: np.ndarray):
        """T*[m, m'] = trace(* X_m Sigma_H X_m') for * in {I, B, C}."""
        XiS = np.einsum("mnk,kl->mnl", self.Xi, sigma_h)
        TI = np.einsum("mnl,pnl->mp", XiS, self.Xi)
        TB = np.einsum("mnl,pnl->mp", XiS[:, 1:-1], self.Xi[:, 1:-1])
        tc = np.einsum("mnl,pnl->mp", XiS[:, :-1], self.Xi[:, 1:])
        tc2 = np.einsum("mnl,pnl->mp", XiS[:, 1:], self.Xi[:, :-1])
        TC = -(tc + tc2)
        return TI, TB, TC

    def _second_moment_mats(self, m_h, sigma_h):
        """E[G' * G] pieces: W0 + rho^2 WB + rho WC gives E[G' Lambda G]."""
        Gt = self._gt(m_h)
        TI, TB, TC = self._trace_mats(sigma_h)
        W0 = Gt.T @ Gt + TI
        gb, gc = _bilinear_BC(Gt, Gt)
        return Gt, W0, gb + TB, gc + TC

    def _gamma_apply(self, U: np.ndarray, noise: NoiseParams) -> np.ndarray:
        """Gamma_j u_j for every column: (Lambda(rho_j) u_j) / sigma2_j."""
        rho = noise.rho
        out = U + rho**2 * _apply_B(U) + rho * _apply_C(U)
        return out / noise.sigma2

    def _residual(self, state: PosteriorState) -> np.ndarray:
        return self.data.Y - self.data.P @ state.drifts

    def _u1(self, state: PosteriorState) -> np.ndarray:
        """Second moments of the NRL posterior, (J, M, M)."""
        return state.sigma_a + state.m_a[:, :, None] * state.m_a[:, None, :]

    def _spd_inverse(self, mat: np.ndarray, step: str) -> np.ndarray:
        """Inverse with one jittered retry; raises NumericalError after."""
        mat = 0.5 * (mat + np.swapaxes(mat, -1, -2))
        try:
            np.linalg.cholesky(mat)
            return np.linalg.inv(mat)
        except np.linalg.LinAlgError:
            pass
        diag = np.einsum("...ii->...i", mat)
        bump = self.config.jitter * np.mean(diag, axis=-1, keepdims=True)
        eye = np.eye(mat.shape[-1])
        mat = mat + bump[..., None] * eye
        try:
            np.linalg.cholesky(mat)
            return np.linalg.inv(mat)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                f"{step}: precision matrix not positive definite after jitter "
                f"(min diagonal {np.min(diag):.3g})"
            ) from exc

    # -- E-steps --------------------------------------------------------

    def e_h_step(self, state: PosteriorState):
        """Gaussian update of the HRF factor (interior taps)."""
        noise = state.noise
        w = 1.0 / noise.sigma2
        U1 = self._u1(state)
        A_I = np.einsum("jmp,j->mp", U1, w)
        A_B = np.einsum("jmp,j->mp", U1, w * noise.rho**2)
        A_C = np.einsum("jmp,j->mp", U1, w * noise.rho)
        prec = self.R_inv / state.v_h
        prec = prec + np.einsum("mpkl,mp->kl", self.KI, A_I)
        prec = prec + np.einsum("mpkl,mp->kl", self.KB, A_B)
        prec = prec + np.einsum("mpkl,mp->kl", self.KC, A_C)
        sigma_h = self._spd_inverse(prec, "e_h_step")
        z = self._gamma_apply(self._residual(state), noise)  # (N, J)
        rhs = np.einsum("mnk,nm->k", self.Xi, z @ state.m_a)
        return sigma_h @ rhs, sigma_h

    def e_a_step(self, state: PosteriorState):
        """Gaussian update of the per-voxel NRL factors."""
        noise = state.noise
        Gt, W0, WB, WC = self._second_moment_mats(state.m_h, state.sigma_h)
        rho = noise.rho[:, None, None]
        H = (W0[None] + rho**2 * WB[None] + rho * WC[None]) \
            / noise.sigma2[:, None, None]
        inv_v = 1.0 / state.mixture.variances                 # (I, M)
        dprec = np.einsum("mji,im->jm", state.marginals, inv_v)
        dmean = np.einsum(
            "mji,im->jm", state.marginals, state.mixture.means * inv_v
        )
        prec = H.copy()
        idx = np.arange(self.M)
        prec[:, idx, idx] += dprec
        sigma_a = self._spd_inverse(prec, "e_a_step")
        z = self._gamma_apply(self._residual(state), noise)
        b = dmean + (Gt.T @ z).T
        m_a = np.einsum("jmp,jp->jm", sigma_a, b)
        return m_a, sigma_a

    def e_q_step(self, state: PosteriorState) -> np.ndarray:
        """Mean-field update of the label marginals, one field per
        condition.

        The per-site external field is the expected class log-density of
        the NRL posterior: log N(m_A; mu_i, v_i) - v_A / (2 v_i).
        """
        out = np.empty_like(state.marginals)
        mix = state.mixture
        for m in range(self.M):
            mu = mix.means[:, m]
            v = mix.variances[:, m]
            ma = state.m_a[:, m][:, None]
            va = state.sigma_a[:, m, m][:, None]
            f = -0.5 * np.log(2 * math.pi * v)[None, :] \
                - (ma - mu[None, :]) ** 2 / (2 * v)[None, :] \
                - va / (2 * v)[None, :]
            p = state.marginals[m]
            for _ in range(self.config.mean_field_sweeps):
                p = potts.mean_field_sweep(p, f, state.beta[m], self.data.graph)
            out[m] = p
        return out

    # -- M-steps --------------------------------------------------------

    def m_mixture_step(self, state: PosteriorState):
        """Weighted class moments; the non-activated mean stays zero."""
        mix = state.mixture
        means = mix.means.copy()
        variances = mix.variances.copy()
        warnings = []
        for m in range(self.M):
            p = state.marginals[m]            # (J, I)
            ma = state.m_a[:, m]
            va = state.sigma_a[:, m, m]
            pbar = p.sum(axis=0)
            for i in range(mix.n_classes):
                if pbar[i] < 1e-8:
                    warnings.append(
                        f"empty class i={i + 1}, m={m + 1}: kept previous moments"
                    )
                    continue
                if i > 0:
                    means[i, m] = (p[:, i] @ ma) / pbar[i]
                variances[i, m] = max(
                    (p[:, i] @ ((ma - means[i, m]) ** 2 + va)) / pbar[i],
                    self.config.v_min,
                )
        return MixtureParams(means, variances), warnings

    def m_vh_step(self, state: PosteriorState) -> float:
        """HRF prior scale, optionally shrunk by an exponential prior.

        With rate lambda the update is the positive root of
        2*lambda*v^2 + (D-1)*v - C = 0, which tends to the flat-prior
        value C/(D-1) as lambda -> 0.
        """
        C = float(state.m_h @ self.R_inv @ state.m_h
                  + np.sum(state.sigma_h * self.R_inv))
        if C <= 0:
            raise NumericalError("m_vh_step: nonpositive prior quadratic form")
        lam = self.config.lambda_vh
        k = self.K
        if lam == 0.0:
            return C / k
        return (-k + math.sqrt(8 * lam * C + k * k)) / (4 * lam)

    def m_beta_step(self, state: PosteriorState):
        """Per-condition interaction strength, warm-started."""
        beta = state.beta.copy()
        warnings = []
        for m in range(self.M):
            est = potts.estimate_beta(
                state.marginals[m], self.data.graph,
                beta_init=state.beta[m],
                lambda_beta=self.config.lambda_beta,
                beta_max=self.config.beta_max,
            )
            beta[m] = est.value
            if not est.converged:
                warnings.append(f"beta search for m={m + 1} hit max_iters")
        return beta, warnings

    def m_drift_noise_step(self, state: PosteriorState):
        """Joint drift and noise update; factorizes over voxels."""
        if self.config.noise_mode == "white":
            return self._m_drift_noise_white(state)
        return self._m_drift_noise_ar1(state)

    def _m_drift_noise_white(self, state: PosteriorState):
        Gt, W0, _, _ = self._second_moment_mats(state.m_h, state.sigma_h)
        U1 = self._u1(state)
        Y = self.data.Y
        P = self.data.P
        w = Y - Gt @ state.m_a.T            # (N, J)
        drifts = P.T @ w
        ytil = Y - P @ drifts
        quad = np.einsum("mp,jmp->j", W0, U1)
        cross = np.einsum("jm,mj->j", state.m_a, Gt.T @ ytil)
        ss = np.einsum("nj,nj->j", ytil, ytil)
        sigma2 = np.maximum((quad - 2 * cross + ss) / self.N, self.config.v_min)
        noise = NoiseParams(sigma2=sigma2, rho=np.zeros(self.J))
        return drifts, noise, []

    def _m_drift_noise_ar1(self, state: PosteriorState):
        """Alternate exact drift GLS with exact (sigma2, rho) updates.

        Given the drift, the expected residual quadratic form is a
        polynomial q_I + rho^2 q_B + rho q_C, so sigma2 profiles out in
        closed form and rho maximizes

            -(N/2) log(q_I + rho^2 q_B + rho q_C) + (1/2) log(1 - rho^2)

        on [-0.95, 0.95], found by a dense grid plus one quadratic
        refinement. Direct iteration of the stationarity map diverges
        (its slope near the root grows with N), so each block is solved
        exactly instead; the alternation is then monotone in the
        expected log-likelihood.
        """
        cfg = self.config
        Gt, W0, WB, WC = self._second_moment_mats(state.m_h, state.sigma_h)
        U1 = self._u1(state)
        Y = self.data.Y
        P = self.data.P
        w = Y - Gt @ state.m_a.T
        Pw = P.T @ w
        PBw, PCw = P[1:-1].T @ w[1:-1], -(P[:-1].T @ w[1:] + P[1:].T @ w[:-1])
        trU1_0 = np.einsum("mp,jmp->j", W0, U1)
        trU1_B = np.einsum("mp,jmp->j", WB, U1)
        trU1_C = np.einsum("mp,jmp->j", WC, U1)
        grid = np.linspace(-0.95, 0.95, 381)
        log_stat = 0.5 * np.log1p(-grid**2)

        rho = state.noise.rho.copy()
        sigma2 = state.noise.sigma2.copy()
        drifts = state.drifts.copy()
        converged = False
        for _ in range(cfg.ar1_max_inner):
            r2 = rho**2
            plp = self.PtP[None] + r2[:, None, None] * self.PBP[None] \
                + rho[:, None, None] * self.PCP[None]
            rhs = (Pw + r2 * PBw + rho * PCw).T[:, :, None]
            try:
                new_drifts = np.linalg.solve(plp, rhs)[:, :, 0].T
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    "m_drift_noise_step: singular drift system"
                ) from exc
            ytil = Y - P @ new_drifts
            q_i = trU1_0 + np.einsum("nj,nj->j", ytil, ytil) \
                - 2 * np.einsum("jm,mj->j", state.m_a, Gt.T @ ytil)
            By = _apply_B(ytil)
            Cy = _apply_C(ytil)
            q_b = trU1_B + np.einsum("nj,nj->j", ytil, By) \
                - 2 * np.einsum("jm,mj->j", state.m_a, Gt.T @ By)
            q_c = trU1_C + np.einsum("nj,nj->j", ytil, Cy) \
                - 2 * np.einsum("jm,mj->j", state.m_a, Gt.T @ Cy)
            # Vectorized profile objective over (voxel, grid point).
            q = q_i[:, None] + grid[None] ** 2 * q_b[:, None] \
                + grid[None] * q_c[:, None]
            q = np.maximum(q, cfg.v_min)
            f = -0.5 * self.N * np.log(q) + log_stat[None]
            k = np.argmax(f, axis=1)
            new_rho = grid[k]
            interior = (k > 0) & (k < grid.size - 1)
            ki = k[interior]
            rows = np.nonzero(interior)[0]
            f0, f1, f2 = f[rows, ki - 1], f[rows, ki], f[rows, ki + 1]
            denom = f0 - 2 * f1 + f2
            shift = np.where(denom < 0, 0.5 * (f0 - f2) / denom, 0.0)
            step = grid[1] - grid[0]
            new_rho[rows] = np.clip(grid[ki] + shift * step, -0.95, 0.95)
            q_opt = q_i + new_rho**2 * q_b + new_rho * q_c
            new_sigma2 = np.maximum(q_opt / self.N, cfg.v_min)

            num = (np.max(np.abs(new_rho - rho))
                   + np.max(np.abs(new_sigma2 - sigma2))
                   + np.max(np.abs(new_drifts - drifts)))
            den = 1.0 + np.max(np.abs(sigma2)) + np.max(np.abs(drifts))
            drifts, sigma2, rho = new_drifts, new_sigma2, new_rho
            if num / den <= cfg.ar1_tol:
                converged = True
                break
        warnings = [] if converged else [
            "ar1 noise updates did not reach tolerance; kept last iterate"
        ]
        return drifts, NoiseParams(sigma2=sigma2, rho=rho), warnings

    # -- monitoring ------------------------------------------------------

    def free_energy(self, state: PosteriorState, return_parts: bool = False):
        """Surrogate objective: expected log-joint plus entropies.

        The label-prior normalizer uses the mean-field surrogate, which
        is exact at beta = 0.
        """
        noise = state.noise
        Gt, W0, WB, WC = self._second_moment_mats(state.m_h, state.sigma_h)
        U1 = self._u1(state)
        ytil = self._residual(state)
        r2 = noise.rho**2
        lam_y = ytil + r2 * _apply_B(ytil) + noise.rho * _apply_C(ytil)
        quad = np.einsum("jmp,jmp->j",
                         W0[None] + r2[:, None, None] * WB[None]
                         + noise.rho[:, None, None] * WC[None], U1)
        cross = np.einsum("jm,mj->j", state.m_a, Gt.T @ lam_y)
        ss = np.einsum("nj,nj->j", ytil, lam_y)
        e_ll = float(np.sum(
            -0.5 * self.N * np.log(2 * math.pi * noise.sigma2)
            + 0.5 * np.log1p(-r2)
            - (quad - 2 * cross + ss) / (2 * noise.sigma2)
        ))

        C = float(state.m_h @ self.R_inv @ state.m_h
                  + np.sum(state.sigma_h * self.R_inv))
        e_ph = -0.5 * (self.K * math.log(2 * math.pi * state.v_h)
                       + self._logdet_R + C / state.v_h)

        mix = state.mixture
        e_pa = 0.0
        for m in range(self.M):
            mu = mix.means[:, m][None, :]
            v = mix.variances[:, m][None, :]
            ma = state.m_a[:, m][:, None]
            va = state.sigma_a[:, m, m][:, None]
            ll = -0.5 * np.log(2 * math.pi * v) - ((ma - mu) ** 2 + va) / (2 * v)
            e_pa += float(np.sum(state.marginals[m] * ll))

        e_pq = 0.0
        for m in range(self.M):
            e_pq += state.beta[m] * potts.expected_agreement(
                state.marginals[m], self.data.graph
            )
            e_pq -= potts.mean_field_log_partition(
                state.marginals[m], self.data.graph, state.beta[m]
            )

        sign_h, ld_h = np.linalg.slogdet(state.sigma_h)
        h_h = (0.5 * (self.K * math.log(2 * math.pi * math.e) + ld_h)
               if sign_h > 0 else -math.inf)
        signs, lds = np.linalg.slogdet(state.sigma_a)
        if np.all(signs > 0):
            h_a = float(0.5 * np.sum(self.M * math.log(2 * math.pi * math.e)
                                     + lds))
        else:
            h_a = -math.inf
        p = state.marginals
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(p > 0, p * np.log(p), 0.0)
        h_q = -float(np.sum(plogp))

        parts = {
            "expected_loglik": e_ll, "expected_logp_h": e_ph,
            "expected_logp_a": e_pa, "expected_logp_q": e_pq,
            "entropy_h": h_h, "entropy_a": h_a, "entropy_q": h_q,
        }
        total = sum(parts.values())
        if return_parts:
            return total, parts
        return total

    # -- initialization and main loop -------------------------------------

    def initialize(self) -> PosteriorState:
        """Deterministic start: canonical-shape HRF, least-squares NRLs,
        quantile-split labels, moment-matched mixture."""
        cfg = self.config
        taps = canonical_hrf(self.K + 1, self.dt, peak=cfg.init_hrf_peak)
        m_h = taps[1:-1].copy()
        Y = self.data.Y
        P = self.data.P
        drifts = P.T @ Y
        resid = Y - P @ drifts
        Gt = self._gt(m_h)
        Gp = Gt - P @ (P.T @ Gt)
        coef, _, rank, _ = np.linalg.lstsq(Gp, resid, rcond=None)
        warnings = []
        if rank < self.M:
            coef = np.zeros((self.M, self.J))
            warnings.append("rank-deficient initial regression; NRLs start at 0")
        m_a = coef.T
        fitted = Gp @ coef
        sigma2 = np.maximum(((resid - fitted) ** 2).mean(axis=0), cfg.v_min)

        I = self.I
        marginals = np.empty((self.M, self.J, I))
        means = np.zeros((I, self.M))
        variances = np.ones((I, self.M))
        for m in range(self.M):
            a = m_a[:, m]
            strong = np.abs(a) > np.median(np.abs(a))
            if I == 2:
                marginals[m] = np.where(strong[:, None],
                                        [0.1, 0.9], [0.9, 0.1])
                groups = [~strong, strong]
            else:
                pos = strong & (a > 0)
                neg = strong & ~(a > 0)
                marginals[m] = np.where(
                    pos[:, None], [0.05, 0.9, 0.05],
                    np.where(neg[:, None], [0.05, 0.05, 0.9],
                             [0.9, 0.05, 0.05]),
                )
                groups = [~strong, pos, neg]
            for i, sel in enumerate(groups):
                vals = a[sel]
                if i > 0 and vals.size:
                    means[i, m] = float(np.mean(vals))
                if i == 2:
                    means[i, m] = min(means[i, m], 0.0)
                variances[i, m] = max(
                    float(np.var(vals)) if vals.size else 1.0, 10 * cfg.v_min
                )
        self._init_warnings = warnings
        return PosteriorState(
            m_h=m_h,
            sigma_h=np.zeros((self.K, self.K)),
            m_a=m_a,
            sigma_a=np.zeros((self.J, self.M, self.M)),
            marginals=marginals,
            drifts=drifts,
            noise=NoiseParams(sigma2=sigma2, rho=np.zeros(self.J)),
            mixture=MixtureParams(means, variances),
            v_h=cfg.v_h_init,
            beta=np.full(self.M, cfg.beta_init, dtype=float),
            dt=self.dt,
        )

    def run(self) -> VemReport:
        cfg = self.config
        state = self.initialize()
        warnings = list(getattr(self, "_init_warnings", []))
        trace: list[IterationStats] = []
        converged = False
        tiny = np.finfo(float).tiny
        for r in range(1, cfg.max_iters + 1):
            t0 = time.perf_counter()
            prev_mh = state.m_h
            prev_ma = state.m_a
            try:
                state.m_h, state.sigma_h = self.e_h_step(state)
                state.m_a, state.sigma_a = self.e_a_step(state)
                state.marginals = self.e_q_step(state)
                state.mixture, warn = self.m_mixture_step(state)
                warnings.extend(warn)
                state.v_h = self.m_vh_step(state)
                if cfg.estimate_beta:
                    state.beta, warn = self.m_beta_step(state)
                    warnings.extend(warn)
                state.drifts, state.noise, warn = self.m_drift_noise_step(state)
                warnings.extend(warn)
            except NumericalError as exc:
                raise NumericalError(f"iteration {r}: {exc}") from exc
            c_h = float(np.sum((state.m_h - prev_mh) ** 2)
                        / max(np.sum(prev_mh**2), tiny))
            c_a = float(np.sum((state.m_a - prev_ma) ** 2)
                        / max(np.sum(prev_ma**2), tiny))
            trace.append(IterationStats(
                free_energy=self.free_energy(state),
                c_h=c_h, c_a=c_a, seconds=time.perf_counter() - t0,
            ))
            if c_h <= cfg.tol_h and c_a <= cfg.tol_a:
                converged = True
                break
        return VemReport(
            parcel_id=self.data.parcel_id, state=state, n_iters=len(trace),
            trace=trace, converged=converged,
            warnings=sorted(set(warnings)), config=cfg,
        )


# -- module-level convenience wrappers (the engine is the single
#    implementation; these exist for direct calls in tests and notebooks).

def initialize(data: ParcelDataset, config: VemConfig) -> PosteriorState:
    return VemEngine(data, config).initialize()


def run_vem(data: ParcelDataset, config: VemConfig | None = None) -> VemReport:
    return VemEngine(data, config or VemConfig()).run()


def e_h_step(state, data, config=None):
    return VemEngine(data, config or VemConfig()).e_h_step(state)


def e_a_step(state, data, config=None):
    return VemEngine(data, config or VemConfig()).e_a_step(state)


def e_q_step(state, data, config=None):
    return VemEngine(data, config or VemConfig()).e_q_step(state)


def m_mixture_step(state, data, config=None):
    return VemEngine(data, config or VemConfig()).m_mixture_step(state)[0]


def m_vh_step(state, data, lambda_vh=0.0, config=None):
    cfg = config or VemConfig()
    cfg.lambda_vh = lambda_vh
    return VemEngine(data, cfg).m_vh_step(state)


def m_beta_step(state, data, lambda_beta=0.0, config=None):
    cfg = config or VemConfig()
    cfg.lambda_beta = lambda_beta
    return VemEngine(data, cfg).m_beta_step(state)[0]


def m_drift_noise_step(state, data, noise_mode="white", config=None):
    cfg = config or VemConfig()
    cfg.noise_mode = noise_mode
    drifts, noise, _ = VemEngine(data, cfg).m_drift_noise_step(state)
    return drifts, noise


def free_energy(state, data, config=None, return_parts=False):
    return VemEngine(data, config or VemConfig()).free_energy(
        state, return_parts=return_parts
    )
