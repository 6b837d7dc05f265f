"""Command-line interface: phantom | sample | recon | fit | metrics |
eval | run.

All array inputs and outputs use the container format; configs are JSON;
tables are CSV; previews are PGM.  Every flag can also be given in a
JSON config file (--config); explicit command-line values win.  Exit
codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datamodel as dm
from . import dti, encoding, pgm, phantom, pipeline, recon, stats
from .errors import NumericalError, ValidationError

log = logging.getLogger("lrcs_cdti")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON file with defaults for any flag")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="bound on internal parallelism "
                             "(default: LRCS_CDTI_THREADS or 1)")
    parser.add_argument("--log-level", default=None,
                        choices=["debug", "info", "warning", "error"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lrcs-cdti",
        description="Phase-corrected low-rank + group-sparse reconstruction "
                    "for cardiac diffusion tensor imaging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="build the synthetic LV phantom")
    p.add_argument("--params", help="PhantomConfig JSON file")
    p.add_argument("--out", required=True, help="ground-truth container directory")
    _add_common(p)

    p = sub.add_parser("sample", help="generate a sampling mask")
    p.add_argument("--series", required=True,
                   help="series container supplying dims and column labels")
    p.add_argument("--R", type=float, default=None)
    p.add_argument("--scheme", choices=["proposed", "lowres-lattice"], default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("recon", help="reconstruct undersampled k-space")
    p.add_argument("--kspace", required=True, help="k-space container")
    p.add_argument("--coils", required=True, help="coil-map container")
    p.add_argument("--method", choices=[m.value for m in recon.Method], default=None)
    p.add_argument("--phase", choices=[m.value for m in recon.PhaseMode], default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="absolute regularization weight")
    p.add_argument("--lambda-scale", type=float, default=None,
                   help="weight as a fraction of max |Psi A*(d)|")
    p.add_argument("--lambda-grid", action="store_true", default=None,
                   help="select the weight by the nuclear-norm criterion")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("fit", help="fit diffusion tensors")
    p.add_argument("--series", required=True)
    p.add_argument("--mask", required=True, help="container with a 'mask' array")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("metrics", help="HA/MD/FA maps, HAT table, AHA segments")
    p.add_argument("--tensors", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("eval", help="cohort statistics from metric CSVs")
    p.add_argument("--summary", required=True, help="summary.csv from a run")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("run", help="run a full experiment plan")
    p.add_argument("--plan", required=True, help="ExperimentPlan JSON")
    _add_common(p)
    return parser


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset (None) flags from the JSON config file, if given."""
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from exc
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            if getattr(args, attr, None) is None:
                setattr(args, attr, value)
    return args


def _setup(args: argparse.Namespace) -> None:
    level = (args.log_level or "info").upper()
    logging.basicConfig(level=getattr(logging, level),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads
    if threads is None:
        threads = int(os.environ.get("LRCS_CDTI_THREADS", "1"))
    encoding.set_fft_workers(threads)
    args.threads = threads


def cmd_phantom(args) -> int:
    params = {}
    if args.params:
        params = json.loads(Path(args.params).read_text())
    if args.seed is not None:
        params["seed"] = args.seed
    cfg = phantom.PhantomConfig.from_json({**phantom.PhantomConfig().to_json(),
                                           **params})
    truth = phantom.build_phantom(cfg)
    phantom.save_ground_truth(args.out, truth)
    log.info("phantom written to %s", args.out)
    return 0


def cmd_sample(args) -> int:
    series = dm.load_series(args.series)
    _, ny, nz = series.spatial_dims
    mask = encoding.make_sampling_mask(
        ny, nz, series.column_labels, R=args.R if args.R else 1.0,
        seed=args.seed or 0, scheme=args.scheme or "proposed")
    dm.save_mask(args.out, mask)
    log.info("mask written to %s (R_true = %.4f)", args.out, mask.r_true)
    return 0


def cmd_recon(args) -> int:
    d = encoding.load_kspace(args.kspace)
    coils = dm.load_coils(args.coils)
    model = encoding.EncodingModel(coils, d.mask, None)
    method = recon.Method(args.method or "lrcs")
    mode = recon.PhaseMode(args.phase or "proposed")

    if args.lam is not None:
        lam = args.lam
    elif args.lambda_grid:
        lam, _ = recon.select_lambda(d, model, recon.default_lambda_grid(d, model),
                                     recon.SolverConfig(lam=0.0, rank=1))
    else:
        scale = args.lambda_scale if args.lambda_scale is not None else 1e-2
        lam = scale * recon.lambda_base(d, model)
    iters = args.iters or 25

    prelim = recon.reconstruct_cs_only(
        d, model, recon.SolverConfig(lam=lam, max_iters=iters, rank=1))
    if method == recon.Method.CS_ONLY:
        result = prelim
    else:
        if mode == recon.PhaseMode.NONE:
            pmap = None
        elif mode == recon.PhaseMode.PROPOSED:
            pmap = recon.estimate_phase_map(prelim.series)
        else:
            pmap = recon.estimate_phase_lowres(d, model)
        rank = recon.select_rank(prelim.series,
                                 None if pmap is None else pmap,
                                 override=args.rank)
        v = recon.estimate_subspace(prelim.series, rank)
        scfg = recon.SolverConfig(lam=lam, rank=rank, max_iters=iters,
                                  method=method, phase_mode=mode)
        if method == recon.Method.LR_ONLY:
            result = recon.reconstruct_lr_only(d, model, pmap, v, scfg)
        else:
            result = recon.reconstruct_lrcs(d, model, pmap, v, scfg)
    out = Path(args.out)
    dm.save_series(out, result.series)
    (out / "run_report.json").write_text(json.dumps(result.report.to_json(),
                                                    indent=1))
    log.info("reconstruction written to %s", out)
    return 0


def cmd_fit(args) -> int:
    series = dm.load_series(args.series)
    arrays, _ = dm.read_container(args.mask)
    if "mask" not in arrays:
        raise ValidationError(f"{args.mask}: no 'mask' array in container")
    field = dti.fit_tensors(series, arrays["mask"])
    dti.save_tensors(args.out, field)
    log.info("tensors written to %s (%d clamped voxels)", args.out, field.n_clamped)
    return 0


def cmd_metrics(args) -> int:
    field = dti.load_tensors(args.tensors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask = field.mask
    ha = dti.helix_angle(field)
    md = dti.mean_diffusivity(field)
    fa = dti.fractional_anisotropy(field)
    dm.write_container(out / "maps",
                       {"ha": ha.astype(np.float64), "md": md.astype(np.float64),
                        "fa": fa.astype(np.float64), "mask": mask},
                       {"kind": "metric_maps"})
    pgm.write_map_previews(out / "previews", "ha", ha)
    pgm.write_map_previews(out / "previews", "md", md)
    pgm.write_map_previews(out / "previews", "fa", fa)

    hat = dti.compute_hat(ha, mask)
    with open(out / "hat.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slice", "ray", "slope", "r2"])
        nz, n_rays = hat.ray_slopes.shape
        for z in range(nz):
            for j in range(n_rays):
                writer.writerow([z, j, repr(hat.ray_slopes[z, j]),
                                 repr(hat.ray_r2[z, j])])
        writer.writerow(["global", "", repr(hat.global_hat), ""])

    if mask.shape[2] >= 3:
        seg = dti.segment_aha16(mask)
        reg_md = dti.regional_means(np.where(mask, md, np.nan), seg)
        with open(out / "segments.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["segment", "mean_md", "n_voxels"])
            for s in range(1, 17):
                writer.writerow([s, repr(reg_md[s - 1]),
                                 int(np.count_nonzero(seg.segments == s))])
    log.info("metrics written to %s (global HAT %.4f)", out, hat.global_hat)
    return 0


def cmd_eval(args) -> int:
    rows = []
    with open(args.summary, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(row)
    refs = {}
    for row in rows:
        if row["method"] == "reference":
            refs[int(row["subject"])] = (float(row["hat"]), float(row["md"]))
    out_rows = []
    groups = {}
    for row in rows:
        if row["method"] == "reference" or row["ok"] not in ("True", "true"):
            continue
        key = (row["R"], row["method"], row["phase_mode"])
        groups.setdefault(key, []).append(row)
    for (R, method, mode), group in sorted(groups.items()):
        group = sorted(group, key=lambda r: int(r["subject"]))
        subjects = [int(r["subject"]) for r in group]
        if len(subjects) < 3 or any(s not in refs for s in subjects):
            continue
        for metric, idx in (("hat", 0), ("md", 1)):
            ref = np.array([refs[s][idx] for s in subjects])
            rec = np.array([float(r[metric]) for r in group])
            summary = stats.summarize(ref, rec)
            out_rows.append([R, method, mode, metric,
                             repr(summary.bias_mean), repr(summary.bias_std),
                             repr(summary.icc.r), summary.icc.band,
                             repr(summary.wilcoxon.p)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["R", "method", "phase_mode", "metric", "bias_mean",
                         "bias_std", "icc", "icc_band", "p"])
        writer.writerows(out_rows)
    log.info("evaluation written to %s (%d rows)", out, len(out_rows))
    return 0


def cmd_run(args) -> int:
    plan_obj = json.loads(Path(args.plan).read_text())
    if args.threads is not None and "threads" not in plan_obj:
        plan_obj["threads"] = args.threads
    plan = pipeline.ExperimentPlan.from_json(plan_obj)
    result = pipeline.run_experiment(plan)
    n_fail = sum(1 for c in result["cells"] if not c.ok)
    log.info("experiment finished: %d cells, %d failed; outputs in %s",
             len(result["cells"]), n_fail, plan.output_dir)
    return 0


_COMMANDS = {"phantom": cmd_phantom, "sample": cmd_sample, "recon": cmd_recon,
             "fit": cmd_fit, "metrics": cmd_metrics, "eval": cmd_eval,
             "run": cmd_run}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args)
        _setup(args)
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error [{args.command}]: missing file {exc.filename}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure [{args.command}]: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
