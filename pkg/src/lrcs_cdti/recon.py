"""Three-step reconstruction: preliminary sparsity-only solve, phase-map
and diffusion-subspace estimation, then the ADMM recovery of the spatial
coefficient matrix under joint subspace and group-sparsity constraints.

The ADMM solves

    min_U ||d - A(U)||^2 + lambda ||Psi U V||_{1,2}

with A(U) = mask(F S [P o (U V)]) by splitting G = Psi U V: a group
soft-threshold updates G, a conjugate-gradient solve of

    (A* A + (rho/2) J) U = A*(d) + (rho/2) B*(G - Y/rho),  J(U) = U V V^H

updates U, and a dual ascent updates Y.  The threshold starts at the
largest initial transform coefficient and decays by a fixed factor per
iteration; the penalty is rho = lambda/alpha throughout.

Method variants: CS_ONLY runs the same loop with an identity subspace
and no phase map; LR_ONLY is the lambda = 0 limit, a pure CG solve of
the subspace-constrained normal equations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .datamodel import CasoratiSeries, PhaseMap
from .encoding import (EncodingModel, KSpaceData, adjoint_matrix, ifft2c,
                       normal_matrix, zero_fill)
from .errors import NumericalError, ValidationError
from .transforms import WaveletSpec, group_shrink, series_adjoint, series_forward


class Method(str, Enum):
    CS_ONLY = "cs"
    LR_ONLY = "lr"
    LRCS = "lrcs"


class PhaseMode(str, Enum):
    NONE = "none"
    LOWRES = "lowres"
    PROPOSED = "proposed"


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.0
    rank: int = 1
    alpha_decay: float = 1.55
    max_iters: int = 25
    tol: float = 1e-9
    cg_max_iters: int = 15
    cg_tol: float = 1e-8
    method: Method = Method.LRCS
    phase_mode: PhaseMode = PhaseMode.PROPOSED

    def __post_init__(self):
        if self.alpha_decay <= 1:
            raise ValidationError(f"alpha_decay must exceed 1, got {self.alpha_decay}")
        if self.max_iters < 1:
            raise ValidationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if self.method != Method.CS_ONLY and self.rank < 1:
            raise ValidationError(f"rank must be >= 1, got {self.rank}")


@dataclass
class RunReport:
    """Per-iteration solver accounting, serializable to the run-report JSON."""

    method: str
    lam: float
    rank: int
    delta_u: list = field(default_factory=list)
    feasibility: list = field(default_factory=list)
    alphas: list = field(default_factory=list)
    rhos: list = field(default_factory=list)
    cg_iters: list = field(default_factory=list)
    stop_reason: str = ""
    wall_time_s: float = 0.0

    def to_json(self) -> dict:
        return {"method": self.method, "lambda": self.lam, "rank": self.rank,
                "delta_u": self.delta_u, "feasibility": self.feasibility,
                "alpha": self.alphas, "rho": self.rhos,
                "cg_iterations": self.cg_iters, "stop_reason": self.stop_reason,
                "wall_time_s": self.wall_time_s}


@dataclass(frozen=True)
class ReconResult:
    series: CasoratiSeries
    report: RunReport
    U: np.ndarray | None = None
    V: np.ndarray | None = None


def cg_solve(apply_h, rhs: np.ndarray, x0: np.ndarray, tol: float,
             max_iters: int) -> tuple[np.ndarray, int, float]:
    """Conjugate gradients on a Hermitian positive (semi)definite system.

    Returns (solution, iterations, relative residual).  Divergence
    (residual growing three consecutive iterations while sitting well
    above the best residual seen; plain CG residuals are allowed their
    usual non-monotone jitter) raises NumericalError with the residual
    history attached.
    """
    rhs_norm = float(np.linalg.norm(rhs))
    if rhs_norm == 0.0:
        return np.zeros_like(rhs), 0, 0.0
    x = x0.copy()
    r = rhs - apply_h(x)
    p = r.copy()
    rs = float(np.vdot(r, r).real)
    history = [np.sqrt(rs) / rhs_norm]
    best = history[0]
    grows = 0
    for it in range(max_iters):
        if np.sqrt(rs) / rhs_norm < tol:
            return x, it, history[-1]
        hp = apply_h(p)
        denom = float(np.vdot(p, hp).real)
        if denom <= 0:
            # numerically singular direction; stop at the current iterate
            return x, it, history[-1]
        step = rs / denom
        x = x + step * p
        r = r - step * hp
        rs_new = float(np.vdot(r, r).real)
        history.append(np.sqrt(rs_new) / rhs_norm)
        if history[-1] > history[-2]:
            grows += 1
            if grows >= 3 and history[-1] > 10.0 * best:
                raise NumericalError(
                    "CG diverged: residual increased 3 consecutive iterations",
                    diagnostics={"residuals": history, "iteration": it})
        else:
            grows = 0
        best = min(best, history[-1])
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, max_iters, history[-1]


def _phase_model(model: EncodingModel, phase: PhaseMap | None) -> EncodingModel:
    return EncodingModel(model.coils, model.mask, phase)


def admm_solve(d: KSpaceData, model: EncodingModel, v_basis: np.ndarray,
               cfg: SolverConfig, spec: WaveletSpec) -> tuple[np.ndarray, RunReport]:
    """Run the splitting loop; returns the spatial coefficients U (M x L)."""
    t0 = time.perf_counter()
    v = np.asarray(v_basis, dtype=np.complex128)
    identity_v = v.shape[0] == v.shape[1] and np.array_equal(v, np.eye(v.shape[0]))
    vvh = v @ v.conj().T
    vh = v.conj().T
    report = RunReport(method=cfg.method.value, lam=cfg.lam, rank=v.shape[0])

    if identity_v:
        a_star_d = adjoint_matrix(model, d.samples)

        def apply_data(u):
            return normal_matrix(model, u)

        def expand(u):
            return u
    else:
        a_star_d = adjoint_matrix(model, d.samples) @ vh

        def apply_data(u):
            return normal_matrix(model, u @ v) @ vh

        def expand(u):
            return u @ v

    # U0: data-consistency-only solve
    u, cg_it, _ = cg_solve(apply_data, a_star_d, np.zeros_like(a_star_d),
                           cfg.cg_tol, cfg.cg_max_iters)
    report.cg_iters.append(cg_it)

    if cfg.lam == 0.0:
        report.stop_reason = "pure least squares (lambda = 0)"
        report.wall_time_s = time.perf_counter() - t0
        return u, report

    bu = series_forward(expand(u), spec)
    alpha = float(np.abs(bu).max())
    if alpha == 0.0:
        report.stop_reason = "zero data"
        report.wall_time_s = time.perf_counter() - t0
        return u, report

    y = np.zeros((u.shape[0], v.shape[1]), dtype=np.complex128)
    for k in range(cfg.max_iters):
        rho = cfg.lam / alpha
        z = bu + y / rho
        g = group_shrink(z, alpha)
        back = series_adjoint(g - y / rho, spec)
        rhs = a_star_d + (rho / 2.0) * (back if identity_v else back @ vh)

        if identity_v:
            def apply_h(x, _rho=rho):
                return apply_data(x) + (_rho / 2.0) * x
        else:
            def apply_h(x, _rho=rho):
                return apply_data(x) + (_rho / 2.0) * (x @ vvh)

        u_next, cg_it, _ = cg_solve(apply_h, rhs, u, cfg.cg_tol, cfg.cg_max_iters)
        if not np.isfinite(u_next).all():
            raise NumericalError("NaN/Inf in ADMM iterate",
                                 diagnostics={"iteration": k})
        bu = series_forward(expand(u_next), spec)
        y = y + rho * (bu - g)
        delta = float(np.linalg.norm(u_next - u))
        u = u_next
        report.delta_u.append(delta)
        report.feasibility.append(float(np.linalg.norm(bu - g)))
        report.alphas.append(alpha)
        report.rhos.append(rho)
        report.cg_iters.append(cg_it)
        alpha /= cfg.alpha_decay
        if delta <= cfg.tol:
            report.stop_reason = f"delta_u <= tol at iteration {k + 1}"
            break
    else:
        report.stop_reason = f"iteration cap K = {cfg.max_iters}"
    report.wall_time_s = time.perf_counter() - t0
    return u, report


def reconstruct_cs_only(d: KSpaceData, model: EncodingModel,
                        cfg: SolverConfig) -> ReconResult:
    """Sparsity-only preliminary reconstruction (identity subspace, no
    phase in the model)."""
    if model.phase is not None:
        raise ValidationError("CS-only reconstruction requires a phase-free model")
    n = model.n_columns
    spec = WaveletSpec(dims=model.spatial_dims)
    v = np.eye(n, dtype=np.complex128)
    run_cfg = replace(cfg, method=Method.CS_ONLY, rank=n)
    u, report = admm_solve(d, model, v, run_cfg, spec)
    series = CasoratiSeries(u, model.spatial_dims, d.column_labels)
    return ReconResult(series, report)


def reconstruct_lrcs(d: KSpaceData, model: EncodingModel, phase: PhaseMap | None,
                     v_basis: np.ndarray, cfg: SolverConfig) -> ReconResult:
    """Joint subspace + group-sparsity solve; returns X = P o (U V)."""
    v = np.asarray(v_basis, dtype=np.complex128)
    sv = np.linalg.svd(v, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise ValidationError("subspace basis V is rank deficient")
    solve_model = _phase_model(model, phase)
    spec = WaveletSpec(dims=model.spatial_dims)
    u, report = admm_solve(d, solve_model, v, cfg, spec)
    x = u @ v
    if phase is not None:
        x = phase.values * x
    series = CasoratiSeries(x, model.spatial_dims, d.column_labels)
    return ReconResult(series, report, U=u, V=v)


def reconstruct_lr_only(d: KSpaceData, model: EncodingModel, phase: PhaseMap | None,
                        v_basis: np.ndarray, cfg: SolverConfig) -> ReconResult:
    """Subspace-constrained least squares: the lambda = 0 limit."""
    return reconstruct_lrcs(d, model, phase, v_basis,
                            replace(cfg, lam=0.0, method=Method.LR_ONLY))


def estimate_phase_map(series: CasoratiSeries) -> PhaseMap:
    """Entrywise unit-magnitude phase of the preliminary reconstruction;
    zeros map to 1."""
    x = series.data
    if not np.isfinite(x).all():
        raise ValidationError("non-finite entries in the preliminary reconstruction")
    mag = np.abs(x)
    values = np.where(mag > 0, x / np.where(mag > 0, mag, 1.0), 1.0 + 0.0j)
    return PhaseMap(values)


def estimate_subspace(series: CasoratiSeries, rank: int) -> np.ndarray:
    """Transposed L most significant right singular vectors of |X|."""
    n = series.n_columns
    if not 1 <= rank <= n:
        raise ValidationError(f"rank must be in [1, {n}], got {rank}")
    _, _, vt = np.linalg.svd(series.magnitude(), full_matrices=False)
    return vt[:rank].astype(np.complex128)


def select_rank(series: CasoratiSeries, phase: PhaseMap | None = None,
                override: int | None = None) -> int:
    """Discrete elbow of the log-scale singular value curve of P* o X.

    The elbow is the largest positive second difference of log(sigma);
    the result is clamped to [2, N-1].  ``override`` short-circuits.
    """
    n = series.n_columns
    if override is not None:
        return int(override)
    x = series.data
    if phase is not None:
        x = np.conj(phase.values) * x
    sigma = np.linalg.svd(x, compute_uv=False)
    floor = max(sigma[0], 1.0) * np.finfo(np.float64).eps
    logs = np.log(np.maximum(sigma, floor))
    # second difference at 0-based positions 1..N-2; elbow L = argmax
    curv = logs[2:] - 2.0 * logs[1:-1] + logs[:-2]
    elbow = int(np.argmax(curv)) + 1
    return int(np.clip(elbow, 2, n - 1))


def nuclear_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.svd(matrix, compute_uv=False).sum())


def lambda_base(d: KSpaceData, model: EncodingModel) -> float:
    """Scale anchor for regularization weights: max |Psi A*(d)|."""
    spec = WaveletSpec(dims=model.spatial_dims)
    return float(np.abs(series_forward(adjoint_matrix(model, d.samples), spec)).max())


def default_lambda_grid(d: KSpaceData, model: EncodingModel) -> list[float]:
    """{1e-3, 1e-2, 1e-1} x max |Psi A*(d)|."""
    base = lambda_base(d, model)
    return [base * s for s in (1e-3, 1e-2, 1e-1)]


def select_lambda(d: KSpaceData, model: EncodingModel, candidates,
                  cfg: SolverConfig) -> tuple[float, dict]:
    """Pick the candidate whose preliminary reconstruction maximizes
    low-rankness of the phase-corrected image (minimal nuclear norm)."""
    candidates = list(candidates)
    if not candidates:
        raise ValidationError("empty lambda candidate list")
    if len(candidates) == 1:
        return float(candidates[0]), {"candidates": candidates, "norms": [None]}
    norms = []
    for lam in candidates:
        result = reconstruct_cs_only(d, model, replace(cfg, lam=float(lam)))
        phase = estimate_phase_map(result.series)
        corrected = np.conj(phase.values) * result.series.data
        norms.append(nuclear_norm(corrected))
    best = int(np.argmin(norms))
    return float(candidates[best]), {"candidates": candidates, "norms": norms}


def estimate_phase_lowres(d: KSpaceData, model: EncodingModel,
                          min_center: int = 4) -> PhaseMap:
    """Phase from a Hann-apodized zero-filled reconstruction of the
    contiguous center k-space block (per slice and column)."""
    nx, ny, nz = model.spatial_dims
    dc = ny // 2
    grid = zero_fill(d)
    kept = d.mask.kept
    n_cols = kept.shape[2]
    window = np.zeros((n_cols, nz, ny))
    for k in range(n_cols):
        for z in range(nz):
            lines = kept[:, z, k]
            if not lines[dc]:
                raise ValidationError(
                    f"mask lacks a contiguous center block (column {k}, slice {z})")
            lo = dc
            while lo > 0 and lines[lo - 1]:
                lo -= 1
            hi = dc
            while hi + 1 < ny and lines[hi + 1]:
                hi += 1
            length = hi - lo + 1
            if length < min_center:
                raise ValidationError(
                    f"center block of {length} lines is too small "
                    f"(column {k}, slice {z})")
            window[k, z, lo:hi + 1] = np.hanning(length + 2)[1:-1]
    apodized = grid * window[None, :, :, :, None]
    imgs = ifft2c(apodized)
    maps_t = model.coils.maps.transpose(0, 3, 2, 1)
    combined = np.einsum("cnzyx,czyx->nzyx", imgs, np.conj(maps_t))
    data = np.ascontiguousarray(combined.reshape((n_cols, -1)).T)
    lowres = CasoratiSeries(data, model.spatial_dims, d.column_labels)
    return estimate_phase_map(lowres)
