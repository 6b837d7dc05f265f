"""Diffusion tensor fitting and derived myocardial metrics.

Helix angle (HA) conventions: local frames are built per voxel about the
LV center with radial = in-plane unit vector from the center,
longitudinal = +z, circumferential = longitudinal x radial
(counterclockwise).  The primary eigenvector is projected onto the
circumferential-longitudinal plane with its sign chosen so the
circumferential component is >= 0; HA = atan2(longitudinal,
circumferential) in (-90, 90] degrees.

Helix angle transmurality (HAT) is the ordinary least-squares slope of
HA versus transmural depth (0% endo to 100% epi), sampled along 25
equally spaced transmural rays per slice at sub-voxel steps; the global
value averages per-slice means.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .datamodel import CasoratiSeries, ColumnLabel
from .errors import ValidationError


@dataclass(frozen=True)
class TensorField:
    """Per-voxel symmetric diffusion tensors with eigen-decomposition.

    Arrays are full volumes, zero outside ``mask``.  ``evals`` are sorted
    descending with negatives clamped to zero (``n_clamped`` voxels were
    affected); ``e1`` is sign-normalized so its z component is >= 0.
    """

    mask: np.ndarray
    tensors: np.ndarray        # (nx, ny, nz, 3, 3), mm^2/s
    s0: np.ndarray             # (nx, ny, nz)
    evals: np.ndarray          # (nx, ny, nz, 3) descending
    e1: np.ndarray             # (nx, ny, nz, 3) unit
    n_clamped: int = 0

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in self.mask.shape)


def design_matrix(labels) -> np.ndarray:
    """Log-linear DTI design: columns (ln s0, Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)."""
    rows = []
    for lab in labels:
        b = lab.b_value
        gx, gy, gz = lab.direction
        rows.append([1.0, -b * gx * gx, -b * gy * gy, -b * gz * gz,
                     -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz])
    return np.array(rows)


def fit_tensors(series: CasoratiSeries, mask: np.ndarray) -> TensorField:
    """Weighted log-linear least-squares tensor fit per masked voxel.

    Magnitudes are floored at machine epsilon before the log; weights are
    the squared magnitudes (repeated averages just contribute repeated
    design rows).
    """
    labels = series.column_labels
    n_b0 = sum(lab.is_b0 for lab in labels)
    dw_dirs = {lab.direction for lab in labels if not lab.is_b0}
    if n_b0 < 1 or len(dw_dirs) < 6:
        raise ValidationError(
            f"tensor fit needs >= 1 b=0 column and >= 6 distinct DW directions; "
            f"got {n_b0} b=0 and directions {sorted(dw_dirs)}")
    design = design_matrix(labels)
    if np.linalg.matrix_rank(design) < 7:
        raise ValidationError(
            f"rank-deficient DTI design; directions: {sorted(dw_dirs)}")

    mask = np.asarray(mask, dtype=bool)
    nx, ny, nz = mask.shape
    mag = np.abs(series.data)[mask.ravel(order="F")]
    mag = np.maximum(mag, np.finfo(np.float64).eps)
    logs = np.log(mag)
    weights = mag ** 2

    lhs = np.einsum("nk,vn,nl->vkl", design, weights, design)
    rhs = np.einsum("nk,vn,vn->vk", design, weights, logs)
    theta = np.linalg.solve(lhs, rhs[..., None])[..., 0]

    s0_v = np.exp(theta[:, 0])
    dxx, dyy, dzz, dxy, dxz, dyz = theta[:, 1:7].T
    tensors_v = np.empty((theta.shape[0], 3, 3))
    tensors_v[:, 0, 0] = dxx
    tensors_v[:, 1, 1] = dyy
    tensors_v[:, 2, 2] = dzz
    tensors_v[:, 0, 1] = tensors_v[:, 1, 0] = dxy
    tensors_v[:, 0, 2] = tensors_v[:, 2, 0] = dxz
    tensors_v[:, 1, 2] = tensors_v[:, 2, 1] = dyz

    evals_v, evecs_v = np.linalg.eigh(tensors_v)
    evals_v = evals_v[:, ::-1]
    evecs_v = evecs_v[:, :, ::-1]
    n_clamped = int(np.count_nonzero((evals_v < 0).any(axis=1)))
    evals_v = np.clip(evals_v, 0.0, None)
    e1_v = evecs_v[:, :, 0]
    flip = e1_v[:, 2] < 0
    tie = e1_v[:, 2] == 0
    flip |= tie & ((e1_v[:, 0] < 0) | ((e1_v[:, 0] == 0) & (e1_v[:, 1] < 0)))
    e1_v = np.where(flip[:, None], -e1_v, e1_v)

    def scatter(values, trailing):
        out = np.zeros((nx * ny * nz,) + trailing, dtype=values.dtype)
        out[mask.ravel(order="F")] = values
        return out.reshape((nx, ny, nz) + trailing, order="F")

    return TensorField(mask=mask,
                       tensors=scatter(tensors_v, (3, 3)),
                       s0=scatter(s0_v, ()),
                       evals=scatter(evals_v, (3,)),
                       e1=scatter(e1_v, (3,)),
                       n_clamped=n_clamped)


def mean_diffusivity(field: TensorField) -> np.ndarray:
    """MD = (l1 + l2 + l3) / 3, zero outside the mask."""
    return field.evals.mean(axis=-1) * field.mask


def fractional_anisotropy(field: TensorField) -> np.ndarray:
    """FA = sqrt(3/2) * ||l - MD|| / ||l||, zero for zero tensors."""
    lam = field.evals
    md = lam.mean(axis=-1, keepdims=True)
    num = np.linalg.norm(lam - md, axis=-1)
    den = np.linalg.norm(lam, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        fa = np.where(den > 0, np.sqrt(1.5) * num / den, 0.0)
    return fa * field.mask


def mask_centroids(mask: np.ndarray) -> np.ndarray:
    """Per-slice (cx, cy) centroid of the masked voxels."""
    nx, ny, nz = mask.shape
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    centers = np.full((nz, 2), np.nan)
    for z in range(nz):
        m = mask[:, :, z]
        if m.any():
            centers[z] = (xs[m].mean(), ys[m].mean())
    return centers


def _resolve_centers(lv_center, mask: np.ndarray) -> np.ndarray:
    nz = mask.shape[2]
    if lv_center is None:
        return mask_centroids(mask)
    arr = np.asarray(lv_center, dtype=float)
    if arr.ndim == 1:
        arr = np.tile(arr, (nz, 1))
    if arr.shape != (nz, 2):
        raise ValidationError(f"lv_center must be (cx, cy) or per-slice, got {arr.shape}")
    nx, ny = mask.shape[:2]
    if ((arr[:, 0] < 0) | (arr[:, 0] > nx - 1) | (arr[:, 1] < 0) | (arr[:, 1] > ny - 1)).any():
        raise ValidationError("lv_center outside the image")
    return arr


def helix_angle(field: TensorField, lv_center=None) -> np.ndarray:
    """HA map in degrees; NaN outside the mask and at excluded voxels."""
    mask = field.mask
    nx, ny, nz = mask.shape
    centers = _resolve_centers(lv_center, mask)
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float),
                         indexing="ij")
    ha = np.full(mask.shape, np.nan)
    excluded = 0
    for z in range(nz):
        m = mask[:, :, z]
        if not m.any():
            continue
        cx, cy = centers[z]
        dx, dy = xs - cx, ys - cy
        r = np.hypot(dx, dy)
        at_center = m & (r == 0)
        excluded += int(np.count_nonzero(at_center))
        valid = m & (r > 0)
        # circumferential = z x radial = (-dy, dx)/r
        cvec_x = -dy[valid] / r[valid]
        cvec_y = dx[valid] / r[valid]
        e1 = field.e1[:, :, z][valid]
        c = e1[:, 0] * cvec_x + e1[:, 1] * cvec_y
        l = e1[:, 2].copy()
        neg = c < 0
        c = np.abs(c)
        l[neg] = -l[neg]
        angles = np.degrees(np.arctan2(l, c))
        angles[angles <= -90.0] = 90.0
        plane = np.full((nx, ny), np.nan)
        plane[valid] = angles
        ha[:, :, z] = plane
    if excluded:
        warnings.warn(f"{excluded} voxel(s) at the exact LV center excluded from HA")
    return ha


@dataclass(frozen=True)
class HatResult:
    """Transmural regression output: 25 rays per slice."""

    ray_slopes: np.ndarray        # (nz, n_rays), deg per %TD, NaN for skipped
    ray_r2: np.ndarray            # (nz, n_rays)
    per_slice: np.ndarray         # (nz,)
    global_hat: float
    ray_angles: np.ndarray        # (n_rays,), radians
    centers: np.ndarray           # (nz, 2)
    n_skipped: int


def compute_hat(ha_map: np.ndarray, mask: np.ndarray, lv_center=None,
                n_rays: int = 25, step: float = 0.1) -> HatResult:
    """Per-ray OLS slope of HA versus transmural depth.

    Rays are cast from the LV center at ``n_rays`` equally spaced angles.
    Each ray is sampled every ``step`` voxels; a sample belongs to the
    wall if its nearest voxel is masked, and carries the HA interpolated
    bilinearly over the masked in-plane neighbors.  %TD runs linearly in
    arc length from the endocardial boundary (0%, half a step before the
    first masked sample) to the epicardial boundary (100%, half a step
    after the last); anchoring the scale at the mask transitions keeps
    the voxelization error zero-mean.  Rays meeting fewer than 3
    distinct masked voxels are skipped.
    """
    mask = np.asarray(mask, dtype=bool)
    nx, ny, nz = mask.shape
    centers = _resolve_centers(lv_center, mask)
    angles = 2 * np.pi * np.arange(n_rays) / n_rays
    slopes = np.full((nz, n_rays), np.nan)
    r2s = np.full((nz, n_rays), np.nan)
    skipped = 0
    r_max = float(np.hypot(nx, ny))
    radii = np.arange(0.0, r_max, step)
    for z in range(nz):
        if not mask[:, :, z].any() or not np.isfinite(centers[z]).all():
            skipped += n_rays
            continue
        cx, cy = centers[z]
        for j, theta in enumerate(angles):
            px = cx + radii * np.cos(theta)
            py = cy + radii * np.sin(theta)
            inb = (px >= 0) & (px <= nx - 1) & (py >= 0) & (py <= ny - 1)
            px, py = px[inb], py[inb]
            ix = np.rint(px).astype(int)
            iy = np.rint(py).astype(int)
            hit = mask[ix, iy, z]
            if not hit.any():
                skipped += 1
                continue
            sel = np.flatnonzero(hit)
            first, last = sel[0], sel[-1]
            if last == first:
                skipped += 1
                continue
            if len(set(zip(ix[sel].tolist(), iy[sel].tolist()))) < 3:
                skipped += 1
                continue
            r_sel = radii[inb][sel]
            r_endo = r_sel[0] - step / 2.0
            r_epi = r_sel[-1] + step / 2.0
            td = 100.0 * (r_sel - r_endo) / (r_epi - r_endo)
            values, coverage = _masked_bilinear(ha_map[:, :, z], mask[:, :, z],
                                                px[sel], py[sel])
            # prefer samples fully inside the wall; edge-only rays fall
            # back to partially covered samples
            ok = np.isfinite(values) & (coverage > 1.0 - 1e-9)
            if np.count_nonzero(ok) < 3:
                ok = np.isfinite(values)
            if np.count_nonzero(ok) < 3:
                skipped += 1
                continue
            slope, r2 = _ols_slope(td[ok], values[ok])
            slopes[z, j] = slope
            r2s[z, j] = r2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_slice = np.nanmean(slopes, axis=1)
        global_hat = float(np.nanmean(per_slice))
    return HatResult(slopes, r2s, per_slice, global_hat, angles, centers, skipped)


def _masked_bilinear(plane: np.ndarray, mask: np.ndarray,
                     px: np.ndarray, py: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear interpolation over masked corners (weights renormalized).

    Returns (values, coverage) where coverage is the kept weight total;
    coverage == 1 means every contributing corner was masked.
    """
    nx, ny = plane.shape
    x0 = np.clip(np.floor(px).astype(int), 0, nx - 1)
    y0 = np.clip(np.floor(py).astype(int), 0, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    fx = px - x0
    fy = py - y0
    vals = np.zeros(px.shape)
    wsum = np.zeros(px.shape)
    for xi, wx in ((x0, 1 - fx), (x1, fx)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            w = wx * wy * mask[xi, yi]
            v = plane[xi, yi]
            good = np.isfinite(v)
            vals += np.where(good, w * v, 0.0)
            wsum += np.where(good, w, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(wsum > 0, vals / wsum, np.nan)
    return values, wsum


def _ols_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    xm = x - x.mean()
    ym = y - y.mean()
    sxx = (xm * xm).sum()
    slope = float((xm * ym).sum() / sxx) if sxx > 0 else 0.0
    ss_res = float(((ym - slope * xm) ** 2).sum())
    ss_tot = float((ym * ym).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return slope, r2


@dataclass(frozen=True)
class AhaSegmentation:
    """AHA 16-segment labels: 6 basal, 6 mid, 4 apical sectors."""

    segments: np.ndarray          # (nx, ny, nz) int, 0 outside mask
    band_of_slice: tuple[str, ...]
    reference_angle: float

    def segment_mask(self, segment: int) -> np.ndarray:
        return self.segments == segment


BANDS = ("basal", "mid", "apical")


def segment_aha16(mask: np.ndarray, lv_center=None, slice_bands=None,
                  reference_angle: float = 0.0) -> AhaSegmentation:
    """Assign AHA segment ids 1..16 to masked voxels.

    Slices split into basal/mid/apical thirds (extra slices assigned
    basal-first, slice 0 being most basal); angular sectors of 60 deg
    (basal, mid) or 90 deg (apical) start at ``reference_angle`` and run
    counterclockwise.
    """
    mask = np.asarray(mask, dtype=bool)
    nx, ny, nz = mask.shape
    if slice_bands is None:
        if nz < 3:
            raise ValidationError(f"AHA segmentation needs >= 3 slices, got {nz}")
        base, rem = divmod(nz, 3)
        sizes = [base + (1 if i < rem else 0) for i in range(3)]
        slice_bands = []
        for band, size in zip(BANDS, sizes):
            slice_bands.extend([band] * size)
    else:
        slice_bands = list(slice_bands)
        if len(slice_bands) != nz or any(b not in BANDS for b in slice_bands):
            raise ValidationError(f"bad slice_bands {slice_bands}")
    for band in BANDS:
        band_slices = [z for z, b in enumerate(slice_bands) if b == band]
        if not band_slices:
            raise ValidationError(f"empty band '{band}'")
        if not any(mask[:, :, z].any() for z in band_slices):
            raise ValidationError(f"band '{band}' contains no masked voxels")

    centers = _resolve_centers(lv_center, mask)
    xs, ys = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float),
                         indexing="ij")
    segments = np.zeros(mask.shape, dtype=np.int16)
    for z in range(nz):
        m = mask[:, :, z]
        if not m.any():
            continue
        cx, cy = centers[z]
        theta = np.degrees(np.arctan2(ys - cy, xs - cx))
        rel = np.mod(theta - reference_angle, 360.0)
        band = slice_bands[z]
        if band == "basal":
            seg = 1 + np.minimum((rel / 60.0).astype(int), 5)
        elif band == "mid":
            seg = 7 + np.minimum((rel / 60.0).astype(int), 5)
        else:
            seg = 13 + np.minimum((rel / 90.0).astype(int), 3)
        segments[:, :, z] = np.where(m, seg, 0)
    return AhaSegmentation(segments, tuple(slice_bands), float(reference_angle))


def regional_means(values: np.ndarray, seg: AhaSegmentation) -> np.ndarray:
    """Mean of ``values`` per AHA segment (NaN where a segment is empty)."""
    out = np.full(16, np.nan)
    for s in range(1, 17):
        sel = seg.segments == s
        if sel.any():
            v = values[sel]
            v = v[np.isfinite(v)]
            if v.size:
                out[s - 1] = float(v.mean())
    return out


def save_tensors(path, field: TensorField) -> None:
    from .datamodel import write_container
    write_container(path,
                    {"tensors": field.tensors.astype(np.float64),
                     "s0": field.s0.astype(np.float64),
                     "evals": field.evals.astype(np.float64),
                     "e1": field.e1.astype(np.float64),
                     "mask": field.mask},
                    {"kind": "tensor_field", "n_clamped": field.n_clamped})


def load_tensors(path) -> TensorField:
    from .datamodel import read_container
    arrays, meta = read_container(path)
    return TensorField(arrays["mask"], arrays["tensors"], arrays["s0"],
                       arrays["evals"], arrays["e1"], int(meta["n_clamped"]))
