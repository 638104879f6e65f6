"""Command-line pipeline: synth, preprocess, split, balance, stats, score, validate.

Exit codes: 0 success, 1 validation failures, 2 I/O or parse errors.
Logs go to stderr as structured ``level key=value`` lines; all outputs
are deterministic given inputs and flags, so re-runs are byte-identical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset as ds
from . import extract, metrics, synth, volume_io

DEFAULT_SEEDS = (17, 42, 1337, 2022, 31337)
SEED_ENV_VAR = "HEPACROP_SEED"


def _log(level: str, **kv) -> None:
    print(level + " " + " ".join(f"{k}={v}" for k, v in kv.items()),
          file=sys.stderr, flush=True)


def _default_seeds() -> list[int]:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw:
        return [int(s) for s in raw.replace(" ", "").split(",") if s]
    return list(DEFAULT_SEEDS)


def _parse_int_list(text: str) -> list[int]:
    return [int(s) for s in text.replace(" ", "").split(",") if s]


def _crop_filename(crop: extract.LesionCrop, resolution: int) -> str:
    return (f"{crop.patient_id}_{crop.lesion_id:03d}_"
            f"{crop.slice_index:04d}_{resolution}.png")


def _write_png(pixels: np.ndarray, path: Path) -> None:
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    cfg = synth.SynthConfig(
        n_patients=args.n_patients,
        seed=args.seed,
        lesions_per_patient=tuple(args.lesions),
        dims=tuple(args.dims),
        spacing=tuple(args.spacing),
    )
    if args.dry_run:
        print(f"dry-run: would generate {cfg.n_patients} patients "
              f"(seed {cfg.seed}) under {args.out}")
        return 0
    data = synth.synth_generate(cfg)
    synth.save_dataset(data, args.out)
    _log("info", cmd="synth", patients=cfg.n_patients, lesions=len(data.studies),
         out=args.out)
    return 0


def _preprocess_one(task):
    """Worker: extract crops for one patient at every resolution."""
    pid, vol_bytes, mask_bytes, cfg_base, resolutions = task
    vol = volume_io.parse_nifti(vol_bytes, source_id=pid)
    mask = volume_io.parse_nifti(mask_bytes, as_mask=True, source_id=pid)
    out = {}
    skipped = []
    for r in resolutions:
        cfg = extract.PreprocessConfig(
            epsilon=cfg_base.epsilon, border_mm=cfg_base.border_mm, resolution=r,
            window_center=cfg_base.window_center, window_width=cfg_base.window_width,
            mean_pre_opening=cfg_base.mean_pre_opening,
        )
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", extract.ComponentVanishedWarning)
            out[r] = extract.preprocess_patient(vol, mask, cfg, patient_id=pid)
        skipped.extend(str(w.message) for w in caught
                       if issubclass(w.category, extract.ComponentVanishedWarning))
    return pid, vol.spacing[2], out, sorted(set(skipped))


def _cmd_preprocess(args) -> int:
    indir = Path(args.volumes)
    outdir = Path(args.out)
    studies = synth.load_studies(args.studies)
    by_lesion = {(s.patient_id, s.lesion_id): s for s in studies}
    patients = sorted({s.patient_id for s in studies})

    resolutions = args.res
    cfg_base = extract.PreprocessConfig(
        epsilon=args.eps, border_mm=args.border_mm, resolution=resolutions[0],
        window_center=args.window_center, window_width=args.window_width,
        mean_pre_opening=args.mean_pre_opening,
    )

    if args.dry_run:
        print(f"dry-run: would preprocess {len(patients)} patients at "
              f"resolutions {resolutions} into {outdir}")
        return 0

    (outdir / "crops").mkdir(parents=True, exist_ok=True)

    tasks = []
    for pid in patients:
        vol_path = indir / f"{pid}_ct.nii"
        mask_path = indir / f"{pid}_mask.nii"
        if not vol_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"missing volume or mask for patient {pid}")
        tasks.append((pid, vol_path.read_bytes(), mask_path.read_bytes(),
                      cfg_base, resolutions))

    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_preprocess_one, tasks))
    else:
        results = [_preprocess_one(t) for t in tasks]

    manifests = {r: [] for r in resolutions}
    n_png = 0
    for pid, sz, crops_by_res, skipped in sorted(results):
        for msg in skipped:
            _log("warn", cmd="preprocess", patient=pid, reason="vanished", detail=repr(msg))
        for r in resolutions:
            for crop in crops_by_res[r]:
                study = by_lesion.get((pid, crop.lesion_id))
                if study is None:
                    raise KeyError(f"no study record for {pid} lesion {crop.lesion_id}")
                name = _crop_filename(crop, r)
                _write_png(crop.pixels, outdir / "crops" / name)
                n_png += 1
                manifests[r].append(ds.CropRecord(
                    patient_id=pid,
                    lesion_id=crop.lesion_id,
                    slice_index=crop.slice_index,
                    image_path=f"crops/{name}",
                    resolution=r,
                    labels=study.labels,
                    slice_spacing_mm=sz,
                    days_ct_to_biopsy=study.days_ct_to_biopsy,
                ))
    for r in resolutions:
        ds.write_manifest(manifests[r], outdir / f"manifest_{r}.jsonl")
        _log("info", cmd="preprocess", resolution=r, crops=len(manifests[r]))
    _log("info", cmd="preprocess", pngs=n_png, out=str(outdir))
    return 0


def _cmd_split(args) -> int:
    records = ds.read_manifest(args.manifest)
    outdir = Path(args.out)
    if args.dry_run:
        print(f"dry-run: would write split plans for seeds {args.seeds} into {outdir}")
        return 0
    outdir.mkdir(parents=True, exist_ok=True)
    for seed in args.seeds:
        plan = ds.make_split(records, seed, train_fraction=args.train_fraction,
                             candidates=args.candidates)
        path = outdir / f"split_{seed}.json"
        path.write_text(plan.to_json() + "\n", encoding="utf-8")
        _log("info", cmd="split", seed=seed,
             train_fraction=f"{plan.achieved_train_fraction:.4f}",
             divergence=f"{plan.label_divergence:.4f}", out=str(path))
    return 0


def _cmd_balance(args) -> int:
    records = ds.read_manifest(args.manifest)
    plan = ds.SplitPlan.from_json(Path(args.plan).read_text(encoding="utf-8"))
    seed = args.seed if args.seed is not None else plan.seed
    train = plan.side(records, "train")
    if args.dry_run:
        print(f"dry-run: would balance {len(train)} train crops (seed {seed}) "
              f"into {args.out}")
        return 0
    balanced = ds.balance_train(train, seed)
    ds.write_manifest(balanced.records, args.out)
    _log("info", cmd="balance", seed=seed, target_size=balanced.target_size,
         records=len(balanced.records), out=args.out)
    return 0


def _cmd_stats(args) -> int:
    import json

    records = ds.read_manifest(args.manifest)
    dist = ds.class_distribution(records)
    labels = ds.lesion_labels(records)
    corr = ds.label_correlation(labels) if len(labels) >= 2 else None

    print(f"{'class':<10}{'patients%':>10}{'lesions%':>10}{'images%':>10}")
    for c in ds.CLASSES_5:
        row = dist[c]
        print(f"{c:<10}{row['patients']:>10.1f}{row['lesions']:>10.1f}"
              f"{row['images']:>10.1f}")
    if corr is not None:
        print("\nlabel phi correlation (lesion level):")
        header = "".join(f"{c[:6]:>8}" for c in ds.CLASSES_5)
        print(" " * 8 + header)
        for i, c in enumerate(ds.CLASSES_5):
            cells = "".join(
                f"{corr[i, j]:>8.2f}" if np.isfinite(corr[i, j]) else f"{'-':>8}"
                for j in range(5)
            )
            print(f"{c[:6]:>8}" + cells)

    if args.out:
        payload = {
            "distribution": dist,
            "correlation": None if corr is None else
                [[None if not np.isfinite(v) else v for v in row] for row in corr.tolist()],
            "n_images": len(records),
            "n_lesions": len(labels),
            "n_patients": len({r.patient_id for r in records}),
        }
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                                  encoding="utf-8")
        _log("info", cmd="stats", out=args.out)
    return 0


def _cmd_score(args) -> int:
    records = ds.read_manifest(args.manifest)
    plans = {}
    for p in args.plan:
        plan = ds.SplitPlan.from_json(Path(p).read_text(encoding="utf-8"))
        plans[plan.seed] = plan
    reports = []
    for p in args.pred:
        preds = metrics.read_predictions(p)
        if preds.seed not in plans:
            raise KeyError(f"no split plan for prediction seed {preds.seed}")
        reports.append(metrics.score_predictions(records, plans[preds.seed],
                                                 preds, grouping=args.group))
    report = metrics.aggregate_reports(reports)
    print(report.render_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
        _log("info", cmd="score", seeds=report.n_seeds, grouping=args.group,
             out=args.out)
    return 0


def _cmd_validate(args) -> int:
    records = ds.read_manifest(args.manifest)
    violations = ds.validate_study(records)
    for v in violations:
        _log("warn", cmd="validate", kind=v.kind, patient=v.patient_id,
             lesion=v.lesion_id, slice=v.slice_index, detail=repr(v.detail))
    print(f"{len(violations)} violation(s) in {len(records)} records")
    return 1 if violations else 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hepacrop",
        description="CT lesion crop extraction, dataset construction and scoring",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-patients", type=int, default=20)
    p.add_argument("--lesions", type=_parse_int_list, default=[1, 3],
                   metavar="MIN,MAX")
    p.add_argument("--dims", type=_parse_int_list, default=[64, 64, 40],
                   metavar="NX,NY,NZ")
    p.add_argument("--spacing", type=lambda s: [float(v) for v in s.split(",")],
                   default=[1.0, 1.0, 2.0], metavar="SX,SY,SZ")
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="extract lesion crops from volumes")
    p.add_argument("--volumes", required=True, help="dir with {pid}_ct.nii / {pid}_mask.nii")
    p.add_argument("--studies", required=True, help="per-lesion study JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--eps", type=float, default=0.4)
    p.add_argument("--border-mm", type=float, default=10.0)
    p.add_argument("--res", type=_parse_int_list, default=[128], metavar="R[,R...]")
    p.add_argument("--window-center", type=float, default=40.0)
    p.add_argument("--window-width", type=float, default=400.0)
    p.add_argument("--mean-pre-opening", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("split", help="plan patient-disjoint splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seeds", type=_parse_int_list, default=None)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--candidates", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("balance", help="rebalance the train side of a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="balancing seed (defaults to the plan seed)")
    p.add_argument("--out", required=True)
    p.add_argument("--dry-run", action="store_true")
    p.set_defaults(func=_cmd_balance)

    p = sub.add_parser("stats", help="class distribution and label correlation")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("score", help="score prediction files against a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan", action="append", required=True)
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--group", type=int, choices=(5, 3), default=5)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("validate", help="check a manifest against study criteria")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seeds", "missing") is None:
        args.seeds = _default_seeds()
    try:
        return args.func(args)
    except (volume_io.ParseError, OSError, KeyError, ValueError,
            ds.SplitError, metrics.PredictionCoverageError,
            metrics.ClassSpaceError, synth.SynthPlacementError) as exc:
        _log("error", cmd=args.cmd, error=type(exc).__name__, detail=repr(str(exc)))
        return 2


if __name__ == "__main__":
    sys.exit(main())
