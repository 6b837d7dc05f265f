"""Forward signal model: coil-weighted Fourier encoding with line-based
undersampling, plus sampling-pattern generation.

Layout conventions:

* Image volumes are (nx, ny, nz).  The two in-plane axes are transformed
  by a centered unitary 2-D DFT per slice; axis 0 (x) is the fully
  sampled readout, axis 1 (y) the phase-encode axis whose lines the mask
  keeps or drops.  DC sits at index n//2 after centering.
* Full k-space grids are (C, N, nz, ny, nx): (coil, column, slice, line,
  readout), keeping the transformed axes contiguous.  A packed sample
  vector enumerates the kept entries of that grid in C order, which
  defines the (coil, column, slice, line, readout) -> position map.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass
from math import ceil

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import gaussian_filter

from .datamodel import (CasoratiSeries, CoilMaps, ColumnLabel, PhaseMap,
                        SamplingMask)
from .errors import ValidationError

N_CENTER_LINES = 4

_workers = max(1, min(4, os.cpu_count() or 1))


def set_fft_workers(n: int) -> None:
    """Bound FFT batch parallelism (results are identical for any value)."""
    global _workers
    _workers = max(1, int(n))


def get_fft_workers() -> int:
    return _workers


def _checkerboard(ny: int, nx: int) -> np.ndarray:
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    return ((-1.0) ** (iy + ix)).astype(np.float64)


def fft2c(grid: np.ndarray) -> np.ndarray:
    """Centered unitary 2-D DFT over the trailing (line, readout) axes."""
    ny, nx = grid.shape[-2:]
    if ny % 2 == 0 and nx % 2 == 0:
        # fold the fftshifts into checkerboard sign flips
        cb = _checkerboard(ny, nx)
        sign = (-1.0) ** (ny // 2 + nx // 2)
        return sign * cb * sfft.fftn(cb * grid, axes=(-2, -1), norm="ortho",
                                     workers=_workers)
    shifted = np.fft.ifftshift(grid, axes=(-2, -1))
    k = sfft.fftn(shifted, axes=(-2, -1), norm="ortho", workers=_workers)
    return np.fft.fftshift(k, axes=(-2, -1))


def ifft2c(grid: np.ndarray) -> np.ndarray:
    ny, nx = grid.shape[-2:]
    if ny % 2 == 0 and nx % 2 == 0:
        cb = _checkerboard(ny, nx)
        sign = (-1.0) ** (ny // 2 + nx // 2)
        return sign * cb * sfft.ifftn(cb * grid, axes=(-2, -1), norm="ortho",
                                      workers=_workers)
    shifted = np.fft.ifftshift(grid, axes=(-2, -1))
    img = sfft.ifftn(shifted, axes=(-2, -1), norm="ortho", workers=_workers)
    return np.fft.fftshift(img, axes=(-2, -1))


def center_line_block(n_pe: int, count: int = N_CENTER_LINES) -> np.ndarray:
    """Indices of the ``count`` centermost phase-encode lines (DC at n_pe//2)."""
    start = n_pe // 2 - count // 2
    return np.arange(start, start + count)


def make_sampling_mask(n_pe: int, nz: int, column_labels, R: float, seed: int,
                       scheme: str = "proposed") -> SamplingMask:
    """Generate the per-(slice, column) phase-encode sampling pattern.

    ``proposed``: per DW column and slice, keep ceil(n_pe/R) lines drawn
    without replacement with probability proportional to a Gaussian
    density centered at DC (sigma = n_pe/4, which leaves usable tail
    density over outer k-space), always including the 4 centermost
    lines; patterns differ per (slice, column) for incoherence.  ``lowres-lattice``: half of the line budget is a
    contiguous block at the k-space center, the remainder a uniform
    lattice over the outer lines, with one seed-derived lattice offset
    shared by all slices and columns (regular sampling has no
    incoherence to gain).  b=0 columns are always fully kept.  Masks are
    reproducible from (seed, R, dims) alone.
    """
    if R < 1:
        raise ValidationError(f"acceleration factor must be >= 1, got {R}")
    if n_pe < 8:
        raise ValidationError(f"need at least 8 phase-encode lines, got {n_pe}")
    if scheme not in ("proposed", "lowres-lattice"):
        raise ValidationError(f"unknown sampling scheme '{scheme}'")
    labels = tuple(column_labels)
    n_cols = len(labels)
    budget = ceil(n_pe / R)
    if budget < N_CENTER_LINES:
        raise ValidationError(
            f"cannot honor center lines: ceil(n_pe/R) = {budget} < {N_CENTER_LINES}")

    lines = np.arange(n_pe)
    dc = n_pe // 2
    sigma = n_pe / 4.0
    density = np.exp(-0.5 * ((lines - dc) / sigma) ** 2)
    center = center_line_block(n_pe)

    lattice_offset = float(np.random.default_rng([seed, 23]).uniform(0, 1))
    kept = np.zeros((n_pe, nz, n_cols), dtype=bool)
    for k, lab in enumerate(labels):
        if lab.is_b0:
            kept[:, :, k] = True
            continue
        for z in range(nz):
            col = np.zeros(n_pe, dtype=bool)
            if budget >= n_pe:
                col[:] = True
            elif scheme == "proposed":
                rng = np.random.default_rng([seed, k, z])
                col[center] = True
                candidates = lines[~col]
                p = density[candidates]
                extra = rng.choice(candidates, size=budget - N_CENTER_LINES,
                                   replace=False, p=p / p.sum())
                col[extra] = True
            else:
                n_center = max(budget // 2, N_CENTER_LINES)
                block = center_line_block(n_pe, n_center)
                col[block] = True
                candidates = lines[~col]
                n_rest = budget - n_center
                if n_rest > 0:
                    stride = len(candidates) / n_rest
                    picks = ((lattice_offset + np.arange(n_rest)) * stride).astype(int)
                    col[candidates[np.minimum(picks, len(candidates) - 1)]] = True
            kept[:, z, k] = col
    return SamplingMask(kept, float(R), int(seed), labels)


@dataclass(frozen=True)
class EncodingModel:
    """Coil maps + sampling mask + optional phase map; immutable.

    Construction precomputes the transposed coil/phase fields and the
    flat gather indices of the kept samples, so forward/adjoint are pure
    and cheap to call concurrently.
    """

    coils: CoilMaps
    mask: SamplingMask
    phase: PhaseMap | None = None

    def __post_init__(self):
        nx, ny, nz = self.coils.spatial_dims
        n_cols = len(self.mask.column_labels)
        if self.mask.kept.shape[0] != ny or self.mask.kept.shape[1] != nz:
            raise ValidationError(
                f"mask lines/slices {self.mask.kept.shape[:2]} do not match "
                f"grid (ny={ny}, nz={nz})")
        if self.phase is not None:
            m = nx * ny * nz
            if self.phase.values.shape != (m, n_cols):
                raise ValidationError(
                    f"phase map shape {self.phase.values.shape} does not match "
                    f"(M={m}, N={n_cols})")
        n_coils = self.coils.n_coils
        # (C, nz, ny, nx) coil fields; (N, nz, ny, nx) phase; (N, nz, ny) mask
        object.__setattr__(self, "_maps_t",
                           np.ascontiguousarray(self.coils.maps.transpose(0, 3, 2, 1)))
        object.__setattr__(self, "_kept_t",
                           np.ascontiguousarray(self.mask.kept.transpose(2, 1, 0)))
        if self.phase is not None:
            phase_t = np.ascontiguousarray(_series_to_grid(self.phase.values,
                                                           (nx, ny, nz)))
            object.__setattr__(self, "_phase_t", phase_t)
            object.__setattr__(self, "_phase_t_conj", np.conj(phase_t))
        else:
            object.__setattr__(self, "_phase_t", None)
            object.__setattr__(self, "_phase_t_conj", None)
        grid_mask = np.broadcast_to(
            self._kept_t[None, :, :, :, None],
            (n_coils, n_cols, nz, ny, nx))
        object.__setattr__(self, "_flat_idx", np.flatnonzero(grid_mask))
        # even in-plane dims let the centered DFT fold into checkerboard
        # sign flips absorbed by the precomputed coil fields
        fast = ny % 2 == 0 and nx % 2 == 0
        object.__setattr__(self, "_fast", fast)
        if fast:
            cb = (-1.0) ** (ny // 2 + nx // 2) * _checkerboard(ny, nx)
            maps_cb = self._maps_t * _checkerboard(ny, nx)
            object.__setattr__(self, "_maps_cb", maps_cb)
            object.__setattr__(self, "_maps_cb_conj", np.conj(maps_cb))
            sign_grid = np.broadcast_to(cb[None, None, None],
                                        (n_coils, n_cols, nz, ny, nx))
            object.__setattr__(self, "_sign_flat",
                               np.ascontiguousarray(sign_grid.reshape(-1)[self._flat_idx]))

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.coils.spatial_dims

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.spatial_dims
        return nx * ny * nz

    @property
    def n_columns(self) -> int:
        return len(self.mask.column_labels)


@dataclass(frozen=True)
class KSpaceData:
    """Packed kept samples of the (C, N, nz, ny, nx) grid, C order."""

    samples: np.ndarray
    mask: SamplingMask
    spatial_dims: tuple[int, int, int]
    n_coils: int

    def __post_init__(self):
        nx = self.spatial_dims[0]
        expected = self.n_coils * nx * int(np.count_nonzero(self.mask.kept))
        if self.samples.shape != (expected,):
            raise ValidationError(
                f"sample vector has shape {self.samples.shape}, "
                f"layout implies ({expected},)")
        object.__setattr__(self, "spatial_dims",
                           tuple(int(v) for v in self.spatial_dims))

    @property
    def column_labels(self) -> tuple[ColumnLabel, ...]:
        return self.mask.column_labels


def _series_to_grid(matrix: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    """(M, N) Casorati layout -> (N, nz, ny, nx) work grid (one copy)."""
    nx, ny, nz = dims
    return matrix.T.reshape((-1, nz, ny, nx))


def _grid_to_series(grid: np.ndarray) -> np.ndarray:
    """(N, nz, ny, nx) -> (M, N); the result is an F-ordered view."""
    n = grid.shape[0]
    return grid.reshape((n, -1)).T


def _bool_grid_mask(mask: SamplingMask, n_coils: int, nx: int) -> np.ndarray:
    kept_t = mask.kept.transpose(2, 1, 0)
    n_cols, nz, ny = kept_t.shape
    return np.broadcast_to(kept_t[None, :, :, :, None],
                           (n_coils, n_cols, nz, ny, nx))


def coil_kspace(series: CasoratiSeries, coils: CoilMaps,
                phase: PhaseMap | None = None) -> np.ndarray:
    """Fully sampled multi-coil k-space grid (C, N, nz, ny, nx)."""
    nx, ny, nz = coils.spatial_dims
    vols = _series_to_grid(series.data, (nx, ny, nz))
    if phase is not None:
        vols = vols * _series_to_grid(phase.values, (nx, ny, nz))
    maps_t = coils.maps.transpose(0, 3, 2, 1)
    return fft2c(maps_t[:, None] * vols[None])


def extract_samples(kgrid: np.ndarray, mask: SamplingMask) -> KSpaceData:
    """Keep masked samples of a full grid, packed in C order."""
    n_coils, _, nz, ny, nx = kgrid.shape
    samples = np.ascontiguousarray(kgrid)[_bool_grid_mask(mask, n_coils, nx)]
    return KSpaceData(samples, mask, (nx, ny, nz), n_coils)


def zero_fill(d: KSpaceData) -> np.ndarray:
    """Scatter packed samples back onto a zeroed full grid."""
    nx, ny, nz = d.spatial_dims
    n_cols = len(d.column_labels)
    grid = np.zeros((d.n_coils, n_cols, nz, ny, nx), dtype=np.complex128)
    grid.ravel()[np.flatnonzero(_bool_grid_mask(d.mask, d.n_coils, nx))] = d.samples
    return grid


def forward(model: EncodingModel, series: CasoratiSeries) -> KSpaceData:
    """d = mask(F S [P o X]): coil-weight, 2-D unitary DFT, keep lines."""
    if series.spatial_dims != model.spatial_dims:
        raise ValidationError(
            f"series dims {series.spatial_dims} != model dims {model.spatial_dims}")
    if series.n_columns != model.n_columns:
        raise ValidationError(
            f"series has {series.n_columns} columns, model {model.n_columns}")
    samples = forward_matrix(model, series.data)
    nx, ny, nz = model.spatial_dims
    return KSpaceData(samples, model.mask, (nx, ny, nz), model.coils.n_coils)


def adjoint(model: EncodingModel, d: KSpaceData) -> CasoratiSeries:
    """Exact adjoint of :func:`forward`: zero-fill, inverse DFT, conjugate
    coil combination, conjugate phase."""
    data = adjoint_matrix(model, d.samples)
    return CasoratiSeries(np.ascontiguousarray(data), model.spatial_dims,
                          d.column_labels)


def forward_matrix(model: EncodingModel, x: np.ndarray) -> np.ndarray:
    """Matrix-level forward for solver hot paths (returns packed samples)."""
    vols = _series_to_grid(x, model.spatial_dims)
    if model._phase_t is not None:
        vols = vols * model._phase_t
    if model._fast:
        kgrid = sfft.fftn(model._maps_cb[:, None] * vols[None], axes=(-2, -1),
                          norm="ortho", workers=_workers)
        return kgrid.reshape(-1)[model._flat_idx] * model._sign_flat
    kgrid = fft2c(model._maps_t[:, None] * vols[None])
    return kgrid.reshape(-1)[model._flat_idx]


def adjoint_matrix(model: EncodingModel, samples: np.ndarray) -> np.ndarray:
    nx, ny, nz = model.spatial_dims
    grid = np.zeros((model.coils.n_coils, model.n_columns, nz, ny, nx),
                    dtype=np.complex128)
    if model._fast:
        grid.ravel()[model._flat_idx] = samples * model._sign_flat
        imgs = sfft.ifftn(grid, axes=(-2, -1), norm="ortho", workers=_workers)
        combined = np.einsum("cnzyx,czyx->nzyx", imgs, model._maps_cb_conj)
    else:
        grid.ravel()[model._flat_idx] = samples
        imgs = ifft2c(grid)
        combined = np.einsum("cnzyx,czyx->nzyx", imgs, np.conj(model._maps_t))
    if model._phase_t is not None:
        combined = combined * model._phase_t_conj
    return _grid_to_series(combined)


def normal_matrix(model: EncodingModel, x: np.ndarray) -> np.ndarray:
    """A*(A(x)) without packing: the sampling projector is a diagonal
    mask on the k-space grid (the checkerboard factors cancel)."""
    vols = _series_to_grid(x, model.spatial_dims)
    if model._phase_t is not None:
        vols = vols * model._phase_t
    if model._fast:
        kgrid = sfft.fftn(model._maps_cb[:, None] * vols[None], axes=(-2, -1),
                          norm="ortho", workers=_workers)
        kgrid *= model._kept_t[None, :, :, :, None]
        imgs = sfft.ifftn(kgrid, axes=(-2, -1), norm="ortho", workers=_workers)
        combined = np.einsum("cnzyx,czyx->nzyx", imgs, model._maps_cb_conj)
    else:
        kgrid = fft2c(model._maps_t[:, None] * vols[None])
        kgrid *= model._kept_t[None, :, :, :, None]
        imgs = ifft2c(kgrid)
        combined = np.einsum("cnzyx,czyx->nzyx", imgs, np.conj(model._maps_t))
    if model._phase_t is not None:
        combined = combined * model._phase_t_conj
    return _grid_to_series(combined)


def coil_images(d: KSpaceData, column: int) -> np.ndarray:
    """Per-coil zero-filled images (C, nx, ny, nz) of one column."""
    grid = zero_fill(d)
    imgs = ifft2c(grid[:, column])
    return imgs.transpose(0, 3, 2, 1)


def estimate_coil_maps(b0_coil_images: np.ndarray,
                       smooth_sigma: float = 2.0,
                       support_fraction: float = 0.05) -> CoilMaps:
    """Sensitivity maps from fully sampled b=0 coil images.

    Each coil image is divided by the root-sum-of-squares combination,
    low-pass filtered in-plane (Gaussian, sigma in voxels), and zeroed
    outside the support (RSS below ``support_fraction`` of its max).
    Degenerate support (fewer than 1% of voxels) yields all-zero maps
    with a warning.
    """
    imgs = np.asarray(b0_coil_images, dtype=np.complex128)
    if imgs.ndim != 4:
        raise ValidationError(f"expected (C, nx, ny, nz) images, got {imgs.shape}")
    rss = np.sqrt((np.abs(imgs) ** 2).sum(axis=0))
    peak = float(rss.max())
    if peak == 0.0:
        raise ValidationError("all-zero coil images")
    support = rss >= support_fraction * peak
    if np.count_nonzero(support) < 0.01 * support.size:
        warnings.warn("coil-map support nearly empty; returning zero maps")
        return CoilMaps(np.zeros_like(imgs), rss)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(support[None], imgs / rss[None], 0.0)
    sig = (0.0, smooth_sigma, smooth_sigma, 0.0)
    maps = gaussian_filter(raw.real, sigma=sig, mode="nearest") \
        + 1j * gaussian_filter(raw.imag, sigma=sig, mode="nearest")
    maps = np.where(support[None], maps, 0.0)
    return CoilMaps(maps, rss)


def save_kspace(path, d: KSpaceData) -> None:
    from .datamodel import _labels_to_json, write_container
    write_container(path,
                    {"samples": d.samples.astype(np.complex64),
                     "kept": d.mask.kept},
                    {"kind": "kspace",
                     "spatial_dims": list(d.spatial_dims),
                     "n_coils": d.n_coils,
                     "R_nominal": d.mask.R_nominal,
                     "seed": d.mask.seed,
                     "column_labels": _labels_to_json(d.mask.column_labels)})


def load_kspace(path) -> KSpaceData:
    from .datamodel import _labels_from_json, read_container
    arrays, meta = read_container(path)
    mask = SamplingMask(arrays["kept"], float(meta["R_nominal"]), int(meta["seed"]),
                        _labels_from_json(meta["column_labels"]))
    return KSpaceData(arrays["samples"].astype(np.complex128), mask,
                      tuple(meta["spatial_dims"]), int(meta["n_coils"]))
