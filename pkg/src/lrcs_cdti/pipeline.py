"""Experiment orchestration: multi-subject phantom cohorts swept over
acceleration factors, reconstruction methods, and phase-correction
modes, with reference metrics, per-cell reports, and cohort statistics.

The reference for every subject is the least-squares reconstruction of
the fully sampled noisy data (the noiseless truth is recorded alongside
for oracle checks).  Coil maps are estimated once per subject from the
fully sampled b=0 column and shared by all reconstructions, as is the
regularization weight.
"""

from __future__ import annotations

import csv
import json
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import dti, encoding, phantom, recon, stats
from .errors import ValidationError

METRICS = ("hat", "md")


@dataclass(frozen=True)
class ExperimentPlan:
    n_subjects: int = 6
    master_seed: int = 0
    R_list: tuple[float, ...] = (2.0, 6.0)
    methods: tuple[str, ...] = ("lr", "cs", "lrcs")
    phase_modes: tuple[str, ...] = ("proposed",)
    output_dir: str = "study_out"
    # per-subject jitter around the base phantom
    ha_jitter_deg: float = 10.0
    md_jitter_frac: float = 0.10
    geom_jitter_vox: int = 2
    base_config: dict = field(default_factory=dict)
    # solver configuration
    rank: int | None = 7            # None -> elbow of the reference
    lambda_scale: float | None = 1e-2   # None -> nuclear-norm grid selection
    solver: dict = field(default_factory=dict)
    threads: int = 1
    save_arrays: bool = True

    def __post_init__(self):
        for m in self.methods:
            recon.Method(m)
        for p in self.phase_modes:
            recon.PhaseMode(p)
        if self.n_subjects < 1:
            raise ValidationError("need at least one subject")
        object.__setattr__(self, "R_list", tuple(float(r) for r in self.R_list))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "phase_modes", tuple(self.phase_modes))

    def to_json(self) -> dict:
        return {"n_subjects": self.n_subjects, "master_seed": self.master_seed,
                "R_list": list(self.R_list), "methods": list(self.methods),
                "phase_modes": list(self.phase_modes), "output_dir": self.output_dir,
                "ha_jitter_deg": self.ha_jitter_deg,
                "md_jitter_frac": self.md_jitter_frac,
                "geom_jitter_vox": self.geom_jitter_vox,
                "base_config": self.base_config, "rank": self.rank,
                "lambda_scale": self.lambda_scale, "solver": self.solver,
                "threads": self.threads, "save_arrays": self.save_arrays}

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentPlan":
        kwargs = dict(obj)
        for key in ("R_list", "methods", "phase_modes"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def subject_config(plan: ExperimentPlan, index: int) -> phantom.PhantomConfig:
    """Deterministic per-subject jitter of the base phantom."""
    base = phantom.PhantomConfig.from_json(
        {**phantom.PhantomConfig().to_json(), **plan.base_config})
    rng = np.random.default_rng([plan.master_seed, index])
    g = plan.geom_jitter_vox
    return replace(
        base,
        ha_endo=base.ha_endo + rng.uniform(-plan.ha_jitter_deg, plan.ha_jitter_deg),
        ha_epi=base.ha_epi + rng.uniform(-plan.ha_jitter_deg, plan.ha_jitter_deg),
        md_true=base.md_true * (1 + rng.uniform(-plan.md_jitter_frac,
                                                plan.md_jitter_frac)),
        r_endo=base.r_endo + int(rng.integers(-g, g + 1)),
        r_epi=base.r_epi + int(rng.integers(-g, g + 1)),
        seed=int(np.random.default_rng([plan.master_seed, index, 1]).integers(2 ** 31)),
    )


@dataclass
class SubjectMetrics:
    hat: float
    md: float
    regional_hat: np.ndarray | None
    regional_md: np.ndarray | None


def _series_metrics(series: dm.CasoratiSeries, mask: np.ndarray, center,
                    segmentation) -> SubjectMetrics:
    field_ = dti.fit_tensors(series, mask)
    ha = dti.helix_angle(field_, lv_center=center)
    hat = dti.compute_hat(ha, mask, lv_center=center).global_hat
    md_map = dti.mean_diffusivity(field_)
    md = float(md_map[mask].mean())
    reg_hat = reg_md = None
    if segmentation is not None:
        reg_hat = _regional_hat(ha, mask, center, segmentation)
        reg_md = dti.regional_means(np.where(mask, md_map, np.nan), segmentation)
    return SubjectMetrics(hat, md, reg_hat, reg_md)


def _regional_hat(ha: np.ndarray, mask: np.ndarray, center,
                  segmentation: dti.AhaSegmentation) -> np.ndarray:
    """Regional HAT: per-segment mean of the ray slopes whose angular
    sector and slice band fall in the segment."""
    hat = dti.compute_hat(ha, mask, lv_center=center)
    nz, n_rays = hat.ray_slopes.shape
    out = np.full(16, np.nan)
    counts = np.zeros(16)
    sums = np.zeros(16)
    for z in range(nz):
        band = segmentation.band_of_slice[z]
        for j in range(n_rays):
            slope = hat.ray_slopes[z, j]
            if not np.isfinite(slope):
                continue
            angle = np.degrees(hat.ray_angles[j])
            rel = np.mod(angle - segmentation.reference_angle, 360.0)
            if band == "basal":
                seg = 1 + min(int(rel // 60), 5)
            elif band == "mid":
                seg = 7 + min(int(rel // 60), 5)
            else:
                seg = 13 + min(int(rel // 90), 3)
            sums[seg - 1] += slope
            counts[seg - 1] += 1
    nonzero = counts > 0
    out[nonzero] = sums[nonzero] / counts[nonzero]
    return out


@dataclass
class CellResult:
    subject: int
    R: float
    method: str
    phase_mode: str
    ok: bool
    metrics: SubjectMetrics | None = None
    error: str = ""
    report: dict = field(default_factory=dict)


@dataclass
class SubjectArtifacts:
    """Everything shared across cells of one subject."""

    config: phantom.PhantomConfig
    truth: phantom.GroundTruth
    coil_maps: dm.CoilMaps
    reference: dm.CasoratiSeries
    reference_metrics: SubjectMetrics
    rank: int
    segmentation: dti.AhaSegmentation | None
    noisy_kspace: np.ndarray


def prepare_subject(plan: ExperimentPlan, index: int) -> SubjectArtifacts:
    cfg = subject_config(plan, index)
    gt = phantom.build_phantom(cfg)
    labels = gt.clean_series.column_labels
    _, ny, nz = cfg.grid
    kclean = encoding.coil_kspace(gt.clean_series, gt.coils, gt.phase)
    knoisy = phantom.add_noise(kclean, cfg.snr, phantom.mean_s0(gt), seed=cfg.seed)
    full_mask = encoding.make_sampling_mask(ny, nz, labels, R=1, seed=cfg.seed)
    d_full = encoding.extract_samples(knoisy, full_mask)
    coil_maps = encoding.estimate_coil_maps(encoding.coil_images(d_full, 0))
    model_full = encoding.EncodingModel(coil_maps, full_mask, None)
    solver = _solver_config(plan, lam=0.0, rank=len(labels))
    ref = recon.reconstruct_lrcs(d_full, model_full, None,
                                 np.eye(len(labels), dtype=np.complex128),
                                 replace(solver, cg_max_iters=30))
    segmentation = None
    if cfg.grid[2] >= 3:
        segmentation = dti.segment_aha16(gt.myocardium_mask, lv_center=cfg.center)
    ref_metrics = _series_metrics(ref.series, gt.myocardium_mask, cfg.center,
                                  segmentation)
    rank = plan.rank if plan.rank is not None else recon.select_rank(
        ref.series, recon.estimate_phase_map(ref.series))
    return SubjectArtifacts(cfg, gt, coil_maps, ref.series, ref_metrics, rank,
                            segmentation, knoisy)


def _solver_config(plan: ExperimentPlan, lam: float, rank: int) -> recon.SolverConfig:
    return recon.SolverConfig(lam=lam, rank=rank, **plan.solver)


def run_subject_cells(plan: ExperimentPlan, index: int,
                      art: SubjectArtifacts) -> list[CellResult]:
    cfg = art.config
    labels = art.truth.clean_series.column_labels
    _, ny, nz = cfg.grid
    mask_vol = art.truth.myocardium_mask
    results: list[CellResult] = []
    for R in plan.R_list:
        schemes = {}
        for mode in plan.phase_modes:
            schemes.setdefault("lowres-lattice" if mode == "lowres" else "proposed")
        for scheme in schemes:
            try:
                smask = encoding.make_sampling_mask(
                    ny, nz, labels, R=R, seed=cfg.seed, scheme=scheme)
                d = encoding.extract_samples(art.noisy_kspace, smask)
                model = encoding.EncodingModel(art.coil_maps, smask, None)
                if plan.lambda_scale is None:
                    lam, _ = recon.select_lambda(
                        d, model, recon.default_lambda_grid(d, model),
                        _solver_config(plan, lam=0.0, rank=art.rank))
                else:
                    lam = plan.lambda_scale * recon.lambda_base(d, model)
                prelim = recon.reconstruct_cs_only(
                    d, model, _solver_config(plan, lam=lam, rank=len(labels)))
                schemes[scheme] = (smask, d, model, lam, prelim)
            except Exception:
                schemes[scheme] = traceback.format_exc(limit=3)
        for method in plan.methods:
            for mode in plan.phase_modes:
                scheme = "lowres-lattice" if mode == "lowres" else "proposed"
                prepared = schemes[scheme]
                cell = CellResult(index, R, method, mode, ok=False)
                if isinstance(prepared, str):
                    cell.error = prepared
                    results.append(cell)
                    continue
                smask, d, model, lam, prelim = prepared
                try:
                    scfg = _solver_config(plan, lam=lam, rank=art.rank)
                    if method == "cs":
                        res = prelim
                    else:
                        if mode == "none":
                            pmap = None
                        elif mode == "proposed":
                            pmap = recon.estimate_phase_map(prelim.series)
                        else:
                            pmap = recon.estimate_phase_lowres(d, model)
                        v = recon.estimate_subspace(prelim.series, art.rank)
                        if method == "lr":
                            res = recon.reconstruct_lr_only(d, model, pmap, v, scfg)
                        else:
                            res = recon.reconstruct_lrcs(d, model, pmap, v, scfg)
                    cell.metrics = _series_metrics(res.series, mask_vol, cfg.center,
                                                   art.segmentation)
                    cell.report = res.report.to_json()
                    cell.ok = True
                    if plan.save_arrays:
                        out = (Path(plan.output_dir) / f"subject{index:02d}"
                               / f"R{R:g}" / f"{method}_{mode}")
                        dm.save_series(out / "recon", res.series)
                        (out / "run_report.json").write_text(
                            json.dumps(cell.report, indent=1))
                except Exception:
                    cell.error = traceback.format_exc(limit=3)
                results.append(cell)
    return results


def run_experiment(plan: ExperimentPlan) -> dict:
    """Execute the full study; returns the summary structure and writes
    the report tree under ``plan.output_dir``."""
    out_root = Path(plan.output_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "plan.json").write_text(json.dumps(plan.to_json(), indent=1))

    def one_subject(i: int):
        art = prepare_subject(plan, i)
        if plan.save_arrays:
            sdir = out_root / f"subject{i:02d}"
            phantom.save_ground_truth(sdir / "ground_truth", art.truth)
            dm.save_series(sdir / "reference", art.reference)
        cells = run_subject_cells(plan, i, art)
        return art, cells

    if plan.threads > 1:
        with ThreadPoolExecutor(max_workers=plan.threads) as pool:
            subject_runs = list(pool.map(one_subject, range(plan.n_subjects)))
    else:
        subject_runs = [one_subject(i) for i in range(plan.n_subjects)]

    arts = [a for a, _ in subject_runs]
    cells = [c for _, cs in subject_runs for c in cs]
    summary_rows = _write_summary(plan, arts, cells, out_root)
    stats_rows = _write_stats(plan, arts, cells, out_root)
    return {"cells": cells, "artifacts": arts, "summary": summary_rows,
            "stats": stats_rows}


def _write_summary(plan, arts, cells, out_root: Path) -> list[dict]:
    rows = []
    for art, i in zip(arts, range(plan.n_subjects)):
        rows.append({"subject": i, "R": 1.0, "method": "reference",
                     "phase_mode": "", "ok": True,
                     "hat": art.reference_metrics.hat,
                     "md": art.reference_metrics.md,
                     "rank": art.rank,
                     "hat_bias": 0.0, "md_bias": 0.0, "error": ""})
    for c in cells:
        art = arts[c.subject]
        row = {"subject": c.subject, "R": c.R, "method": c.method,
               "phase_mode": c.phase_mode, "ok": c.ok, "rank": art.rank,
               "hat": np.nan, "md": np.nan, "hat_bias": np.nan,
               "md_bias": np.nan, "error": c.error.splitlines()[-1] if c.error else ""}
        if c.ok:
            row["hat"] = c.metrics.hat
            row["md"] = c.metrics.md
            row["hat_bias"] = stats.normalized_bias(art.reference_metrics.hat,
                                                    c.metrics.hat)
            row["md_bias"] = stats.normalized_bias(art.reference_metrics.md,
                                                   c.metrics.md)
        rows.append(row)
    fields = ["subject", "R", "method", "phase_mode", "ok", "rank", "hat", "md",
              "hat_bias", "md_bias", "error"]
    with open(out_root / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows({k: _fmt(v) for k, v in row.items()} for row in rows)
    return rows


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_stats(plan, arts, cells, out_root: Path) -> list[dict]:
    """Cohort statistics per (R, method, phase_mode, metric), mirroring
    the global bias/ICC/p tables plus regional p-maps."""
    rows = []
    by_cell = {}
    for c in cells:
        by_cell.setdefault((c.R, c.method, c.phase_mode), []).append(c)
    for (R, method, mode), group in sorted(by_cell.items()):
        group = sorted(group, key=lambda c: c.subject)
        if not all(c.ok for c in group) or len(group) < 3:
            continue
        for metric in METRICS:
            ref = np.array([getattr(arts[c.subject].reference_metrics, metric)
                            for c in group])
            rec = np.array([getattr(c.metrics, metric) for c in group])
            try:
                summary = stats.summarize(ref, rec)
            except ValidationError:
                continue
            rows.append({"R": R, "method": method, "phase_mode": mode,
                         "metric": metric,
                         "bias_mean": summary.bias_mean,
                         "bias_std": summary.bias_std,
                         "icc": summary.icc.r, "icc_band": summary.icc.band,
                         "p": summary.wilcoxon.p})
            reg_ref = [getattr(arts[c.subject].reference_metrics,
                               f"regional_{metric}") for c in group]
            reg_rec = [getattr(c.metrics, f"regional_{metric}") for c in group]
            if all(r is not None and np.isfinite(r).all()
                   for r in reg_ref + reg_rec):
                pmap = stats.regional_pmap(np.array(reg_ref).T, np.array(reg_rec).T)
                pmap_path = out_root / f"pmap_{metric}_R{R:g}_{method}_{mode}.csv"
                with open(pmap_path, "w", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["segment", "p", "significant"])
                    for s, (p, sig) in enumerate(pmap, start=1):
                        writer.writerow([s, repr(p), sig])
    fields = ["R", "method", "phase_mode", "metric", "bias_mean", "bias_std",
              "icc", "icc_band", "p"]
    with open(out_root / "stats.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows({k: _fmt(v) for k, v in row.items()} for row in rows)
    return rows
