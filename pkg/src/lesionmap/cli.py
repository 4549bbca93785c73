"""Command-line pipeline from phantom synthesis to lesion-probability maps.

Subcommands run in acquisition order: phantom, denoise-tv, fit-met2,
fit-smt, sample, train, predict, report. Every run writes a manifest
naming its inputs, configuration, seeds and package versions, so each
output is reproducible from the manifest alone. Exit codes: 0 success,
1 usage, 2 bad input, 3 numerical failure.
"""

import argparse
import os
import sys

import numpy as np

from .core import AcquisitionMET2, Mask, Volume
from .errors import InputFormatError, NumericalError
from .io import (
    build_report,
    load_json,
    load_model,
    read_feature_table,
    read_scheme,
    render_report_text,
    save_json,
    save_model,
    save_text,
    write_feature_table,
    write_manifest,
    write_scheme,
)
from .learn import EXPERIMENTS, ExperimentConfig, probability_map, run_experiment
from .met2 import Met2Config, default_tv_weight, fit_met2_volume, tv_denoise_3d
from .nifti import read_nifti, write_nifti
from .phantom import PhantomConfig, default_scheme, make_phantom, simulate_dwi, simulate_met2
from .sampling import (
    FEATURE_NAMES,
    LesionScoreMap,
    build_feature_table,
    concat_tables,
    control_voxels,
    extract_lesion_voxels,
    nawm_ring,
)
from .smt import SmtConfig, fit_smt_volume

FEATURE_SETS = {"diff": (0, 1), "met2": (2, 3, 4), "combined": None}


class _Parser(argparse.ArgumentParser):
    # usage problems exit 1; argparse's default of 2 is reserved for input data
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _read_mask(path):
    return Mask(read_nifti(path).data)


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ------------------------------------------------------------------ phantom

def cmd_phantom(args):
    config = PhantomConfig(n_lesions=args.n_lesions)
    truth = make_phantom(size=args.size, config=config, seed=args.seed)
    acq = AcquisitionMET2(args.delta_te, args.n_echoes)
    scheme = default_scheme()
    met2 = simulate_met2(truth, acq, snr=args.snr_met2, seed=args.seed + 1)
    dwi = simulate_dwi(truth, scheme, snr=args.snr_dwi, seed=args.seed + 2)

    out = _ensure_dir(args.out_dir)
    paths = {
        "met2": os.path.join(out, "met2.nii.gz"),
        "dwi": os.path.join(out, "dwi.nii.gz"),
        "bval": os.path.join(out, "scheme.bval"),
        "bvec": os.path.join(out, "scheme.bvec"),
        "labels": os.path.join(out, "labels.nii.gz"),
        "score": os.path.join(out, "score.nii.gz"),
        "wm_mask": os.path.join(out, "wm_mask.nii.gz"),
        "brain_mask": os.path.join(out, "brain_mask.nii.gz"),
        "fa_true": os.path.join(out, "fa_true.nii.gz"),
    }
    write_nifti(met2, paths["met2"])
    write_nifti(dwi, paths["dwi"])
    write_scheme(scheme, paths["bval"], paths["bvec"])
    write_nifti(Volume(truth.labels), paths["labels"])
    write_nifti(truth.score_volume(), paths["score"])
    write_nifti(Volume(truth.wm_mask.data), paths["wm_mask"])
    write_nifti(Volume(truth.brain_mask.data), paths["brain_mask"])
    write_nifti(Volume(truth.fa_map), paths["fa_true"])
    write_manifest(
        os.path.join(out, "manifest_phantom.json"), "phantom",
        inputs={}, outputs=paths,
        config={"size": args.size, "n_lesions": args.n_lesions,
                "snr_met2": args.snr_met2, "snr_dwi": args.snr_dwi,
                "delta_te": args.delta_te, "n_echoes": args.n_echoes},
        seeds={"phantom": args.seed, "met2_noise": args.seed + 1,
               "dwi_noise": args.seed + 2})
    return 0


# --------------------------------------------------------------- denoise-tv

def cmd_denoise_tv(args):
    vol = read_nifti(args.input)
    data = vol.data if vol.data.ndim == 4 else vol.data[..., None]
    weight = args.weight
    if weight is None:
        weight = default_tv_weight(data[..., 0])
    out = np.empty(data.shape, dtype=np.float64)
    for t in range(data.shape[3]):
        frame = Volume(data[..., t], vol.spacing, vol.affine)
        out[..., t] = tv_denoise_3d(frame, weight, max_iters=args.max_iters,
                                    tol=args.tol).data
    if vol.data.ndim == 3:
        out = out[..., 0]
    write_nifti(Volume(out, vol.spacing, vol.affine), args.output)
    write_manifest(
        args.output + ".manifest.json", "denoise-tv",
        inputs={"volume": args.input}, outputs={"volume": args.output},
        config={"weight": float(weight), "max_iters": args.max_iters,
                "tol": args.tol},
        seeds={})
    return 0


# ----------------------------------------------------------------- fit-met2

def cmd_fit_met2(args):
    vol = read_nifti(args.input)
    if vol.data.ndim != 4:
        raise InputFormatError(
            f"{args.input}: multi-echo input must be 4D, got {vol.data.ndim}D")
    mask = _read_mask(args.mask)
    config = Met2Config(
        acquisition=AcquisitionMET2(args.delta_te, vol.n_frames),
        t1=args.t1)
    maps = fit_met2_volume(vol, mask, config)

    out = _ensure_dir(args.out_dir)
    paths = {
        "met2_fm": os.path.join(out, "met2_fm.nii.gz"),
        "met2_fie": os.path.join(out, "met2_fie.nii.gz"),
        "met2_fcsf": os.path.join(out, "met2_fcsf.nii.gz"),
        "fa_map": os.path.join(out, "met2_fa.nii.gz"),
    }
    write_nifti(maps.f_m, paths["met2_fm"])
    write_nifti(maps.f_ie, paths["met2_fie"])
    write_nifti(maps.f_csf, paths["met2_fcsf"])
    write_nifti(maps.fa_map, paths["fa_map"])
    write_manifest(
        os.path.join(out, "manifest_fit_met2.json"), "fit-met2",
        inputs={"volume": args.input, "mask": args.mask}, outputs=paths,
        config={"delta_te": args.delta_te, "n_echoes": vol.n_frames,
                "t1": args.t1},
        seeds={})
    return 0


# ------------------------------------------------------------------ fit-smt

def cmd_fit_smt(args):
    dwi = read_nifti(args.dwi)
    if dwi.data.ndim != 4:
        raise InputFormatError(
            f"{args.dwi}: diffusion input must be 4D, got {dwi.data.ndim}D")
    scheme = read_scheme(args.bval, args.bvec)
    mask = _read_mask(args.mask)
    maps = fit_smt_volume(dwi, scheme, mask, SmtConfig())

    out = _ensure_dir(args.out_dir)
    paths = {
        "smt_fi": os.path.join(out, "smt_fi.nii.gz"),
        "smt_fe": os.path.join(out, "smt_fe.nii.gz"),
        "lambda_par": os.path.join(out, "smt_lambda_par.nii.gz"),
    }
    write_nifti(maps.f_i, paths["smt_fi"])
    write_nifti(maps.f_e, paths["smt_fe"])
    write_nifti(maps.lambda_par, paths["lambda_par"])
    write_manifest(
        os.path.join(out, "manifest_fit_smt.json"), "fit-smt",
        inputs={"dwi": args.dwi, "bval": args.bval, "bvec": args.bvec,
                "mask": args.mask},
        outputs=paths, config={}, seeds={})
    return 0


# ------------------------------------------------------------------- sample

def cmd_sample(args):
    wm_mask = _read_mask(args.wm_mask)
    volumes = [read_nifti(p) for p in args.features]
    if args.control:
        index_sets = {"C": control_voxels(wm_mask)}
    else:
        if args.scores is None:
            raise InputFormatError(
                "lesion-subject sampling needs --scores (or pass --control)")
        scores = LesionScoreMap(read_nifti(args.scores))
        index_sets = {
            "L": extract_lesion_voxels(scores, args.threshold),
            "N": nawm_ring(scores, wm_mask, args.ring_distance),
        }
    table = build_feature_table(volumes, index_sets, args.subject)
    write_feature_table(table, args.output)
    write_manifest(
        args.output + ".manifest.json", "sample",
        inputs={"wm_mask": args.wm_mask, "scores": args.scores or "",
                **{name: p for name, p in zip(FEATURE_NAMES, args.features)}},
        outputs={"table": args.output},
        config={"subject": args.subject, "control": args.control,
                "threshold": args.threshold,
                "ring_distance": args.ring_distance,
                "rows": table.n_rows, "dropped": table.dropped},
        seeds={})
    return 0


# -------------------------------------------------------------------- train

def cmd_train(args):
    tables = [read_feature_table(p) for p in args.table]
    table = concat_tables(tables) if len(tables) > 1 else tables[0]
    config = ExperimentConfig(
        k_folds=args.k_folds, n_estimators=args.n_estimators,
        max_depth=args.max_depth, min_leaf=args.min_leaf, seed=args.seed,
        holdout_subjects=tuple(args.holdout_subject or ()),
        feature_indices=FEATURE_SETS[args.features])
    report = run_experiment(table, args.experiment, config)
    save_model(report.model, args.output, config=config.to_dict(),
               seed=args.seed)
    outputs = {"model": args.output}
    if args.report:
        save_json(report.to_dict(), args.report)
        outputs["report"] = args.report
    write_manifest(
        args.output + ".manifest.json", "train",
        inputs={f"table_{i}": p for i, p in enumerate(args.table)},
        outputs=outputs,
        config={**config.to_dict(), "experiment": args.experiment,
                "features": args.features,
                "fold_scores": [float(s) for s in report.fold_scores],
                "mean_accuracy": report.mean_accuracy},
        seeds={"train": args.seed})
    return 0


# ------------------------------------------------------------------ predict

def cmd_predict(args):
    model, _, _ = load_model(args.model)
    volumes = [read_nifti(p) for p in args.features]
    mask = _read_mask(args.mask)
    prob = probability_map(model, volumes, mask, target_class=args.target_class)
    write_nifti(prob, args.output)
    write_manifest(
        args.output + ".manifest.json", "predict",
        inputs={"model": args.model, "mask": args.mask,
                **{f"feature_{i}": p for i, p in enumerate(args.features)}},
        outputs={"probability_map": args.output},
        config={"target_class": args.target_class},
        seeds={})
    return 0


# ------------------------------------------------------------------- report

def cmd_report(args):
    crossval = {}
    for path in args.crossval:
        doc = load_json(path)
        if "experiment" not in doc:
            raise InputFormatError(f"{path}: not an experiment result document")
        crossval[doc["experiment"]] = doc
    ablation = None
    if args.ablation:
        ablation = {}
        for item in args.ablation:
            name, sep, path = item.partition("=")
            if not sep or not name or not path:
                raise InputFormatError(
                    f"--ablation expects NAME=PATH, got {item!r}")
            doc = load_json(path)
            if "experiment" not in doc or "mean_accuracy" not in doc:
                raise InputFormatError(
                    f"{path}: not an experiment result document")
            ablation.setdefault(name, {})[doc["experiment"]] = doc["mean_accuracy"]
    doc = build_report(crossval, ablation)
    save_json(doc, args.output_json)
    text = render_report_text(doc)
    outputs = {"report_json": args.output_json}
    if args.output_text:
        save_text(text, args.output_text)
        outputs["report_text"] = args.output_text
    print(text, end="")
    write_manifest(
        args.output_json + ".manifest.json", "report",
        inputs={f"crossval_{i}": p for i, p in enumerate(args.crossval)},
        outputs=outputs,
        config={"ablation": args.ablation or []},
        seeds={})
    return 0


# ------------------------------------------------------------------- parser

def _build_parser():
    parser = _Parser(prog="lesionmap",
                     description="white-matter lesion probability pipeline")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("phantom", help="synthesize a ground-truth phantom "
                       "with noisy multi-echo and diffusion acquisitions")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True,
                   help="master seed; noise streams derive from it")
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--n-lesions", type=int, default=3,
                   help="0 builds a lesion-free control subject")
    p.add_argument("--snr-met2", type=float, default=100.0)
    p.add_argument("--snr-dwi", type=float, default=50.0)
    p.add_argument("--delta-te", type=float, default=10.68)
    p.add_argument("--n-echoes", type=int, default=32)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("denoise-tv", help="total-variation denoising, "
                       "frame by frame on 4D input")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--weight", type=float, default=None,
                   help="TV weight; default derives from the noise estimate")
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_denoise_tv)

    p = sub.add_parser("fit-met2", help="voxelwise T2-spectrum fit: "
                       "compartment fractions and flip-angle map")
    p.add_argument("--input", required=True, help="4D multi-echo volume")
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--delta-te", type=float, default=10.68)
    p.add_argument("--t1", type=float, default=1000.0)
    p.set_defaults(func=cmd_fit_met2)

    p = sub.add_parser("fit-smt", help="voxelwise spherical-mean fit: "
                       "intra-neurite fraction and parallel diffusivity")
    p.add_argument("--dwi", required=True, help="4D diffusion volume")
    p.add_argument("--bval", required=True)
    p.add_argument("--bvec", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fit_smt)

    p = sub.add_parser("sample", help="gather labeled voxels into a "
                       "feature table (L+N, or C with --control)")
    p.add_argument("--subject", required=True)
    p.add_argument("--features", nargs=5, required=True,
                   metavar=tuple(n.upper() for n in FEATURE_NAMES),
                   help="the five feature maps, in this order")
    p.add_argument("--wm-mask", required=True)
    p.add_argument("--scores", default=None,
                   help="lesion score map (required unless --control)")
    p.add_argument("--threshold", type=float, default=0.75)
    p.add_argument("--ring-distance", type=float, default=6.0)
    p.add_argument("--control", action="store_true",
                   help="label every white-matter voxel C")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train", help="cross-validated boosted-tree training")
    p.add_argument("--table", action="append", required=True,
                   help="feature CSV; repeat to pool subjects")
    p.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    p.add_argument("--output", required=True, help="model JSON path")
    p.add_argument("--report", default=None, help="experiment result JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--k-folds", type=int, default=5)
    p.add_argument("--n-estimators", type=int, default=100)
    p.add_argument("--max-depth", type=int, default=2)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--holdout-subject", action="append", default=None)
    p.add_argument("--features", choices=sorted(FEATURE_SETS),
                   default="combined")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="voxelwise class-probability map")
    p.add_argument("--model", required=True)
    p.add_argument("--features", nargs=5, required=True,
                   metavar=tuple(n.upper() for n in FEATURE_NAMES))
    p.add_argument("--mask", required=True)
    p.add_argument("--target-class", default="L")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="assemble fold-score and ablation "
                       "tables from experiment results")
    p.add_argument("--crossval", action="append", required=True,
                   help="experiment result JSON; repeat per experiment")
    p.add_argument("--ablation", action="append", default=None,
                   metavar="NAME=PATH",
                   help="feature-set result, e.g. Diff=diff_lnc.json")
    p.add_argument("--output-json", required=True)
    p.add_argument("--output-text", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"lesionmap: numerical failure: {err}", file=sys.stderr)
        return 3
    except (InputFormatError, FileNotFoundError, IsADirectoryError,
            ValueError) as err:
        print(f"lesionmap: bad input: {err}", file=sys.stderr)
        return 2
