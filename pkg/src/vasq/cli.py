"""
Command-line entry point.

Every subcommand writes its outputs and a ``manifest.json`` into ``--out``.
The manifest echoes the arguments (minus ``--out``), the resolved
configuration, package versions, seeds and metric conventions, plus the
SHA-256 of every input and output, so a run can be replayed and checked
byte for byte. Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cascade import classical_segmenters, labels_from_probability, run_cascade
from .enhance import NoiseParams, VesselnessParams, add_poisson_noise, frangi_vesselness
from .io import (FormatError, RunConfig, Volume, env_threads, load_config, read_cohort_csv,
                 read_grid, read_json, read_mask, read_volume, sha256, write_cohort_csv,
                 write_json, write_rows_csv, write_volume)
from .metrics import CONVENTIONS, evaluate
from .phantom import CohortModel, TreeSpec, ctpa_to_ncct, generate_cohort, make_phantom, spec_dict
from .skeleton import (BranchLevels, build_tree, count_bifurcations, extract_skeleton,
                       skeleton_length, tree_length)
from .stats import cohort_report, report_tables
from .volume import (ARTERY, STANDARD_DIMS, STANDARD_SPACING, VEIN, GeometryError, LabelMask,
                     ProbabilityMap, VoxelGrid, _centered_origin, check_same_geometry,
                     normalize_to_standard_space, resample_labels_nearest, to_metric_space,
                     window_hu)

log = logging.getLogger("vasq")

VALIDATION_ERRORS = (ValueError, FileNotFoundError, GeometryError, FormatError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _versions() -> dict:
    return {"vasq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _strip_out(argv) -> list:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out":
            skip = True
            continue
        if a.startswith("--out="):
            continue
        out.append(a)
    return out


def _write_manifest(out: Path, command: str, argv, config: dict, seeds: dict,
                    inputs, outputs) -> Path:
    manifest = {
        "command": command,
        "argv": _strip_out(argv),
        "config": config,
        "seeds": seeds,
        "versions": _versions(),
        "conventions": dict(CONVENTIONS),
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {Path(p).relative_to(out).as_posix(): sha256(p) for p in sorted(outputs)},
    }
    return write_json(out / "manifest.json", manifest)


def _volume_files(mhd: Path) -> list:
    return [mhd, mhd.with_suffix(".raw")]


def _hints(path) -> dict:
    """Root hints from a phantom.json (or any JSON with a ``root_hints`` block)."""
    if path is None:
        return {}
    data = read_json(path)
    raw = data.get("root_hints", data)
    out = {}
    for key, voxel in raw.items():
        code = {"artery": ARTERY, "vein": VEIN, "a": ARTERY, "v": VEIN}.get(str(key).lower())
        if code is None:
            raise ValueError(f"{path}: unknown root hint class {key!r}")
        out[code] = tuple(int(c) for c in voxel)
    return out


def _run_config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _vesselness_params(args, base: VesselnessParams) -> VesselnessParams:
    changes = {}
    if args.scales is not None:
        changes["scales"] = tuple(s for group in args.scales for s in group)
    for name in ("alpha", "beta", "c"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if changes.get("c") == "auto":
        changes["c"] = None
    return replace(base, **changes) if changes else base


def _scales(text: str) -> list:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"scales must be numbers, got {text!r}") from None


def _structureness(text: str):
    if text.lower() == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--c takes a number or 'auto', got {text!r}") from None


def _vesselness_options(p):
    p.add_argument("--scales", type=_scales, nargs="+",
                   help="Gaussian scales in mm, comma- or space-separated")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--c", type=_structureness,
                   help="structureness constant, or 'auto' to derive it from the data (default)")


def _input_option(p, help=None):
    p.add_argument("--in", "--input", dest="input", required=True, help=help)


def _name_in_out(name: str) -> str:
    # extra output names stay inside --out
    path = Path(name)
    if path.is_absolute() or len(path.parts) != 1 or path.name in ("", ".", ".."):
        raise ValueError(f"output name must be a plain file name inside --out, got {name!r}")
    return path.name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_phantom(args, argv) -> None:
    out = Path(args.out)
    outputs = []
    if args.cohort:
        model = CohortModel(seed=args.seed)
        if args.betas:
            model = replace(model, betas=_read_betas(args.betas, model.betas))
        records = generate_cohort(args.cohort, model)
        outputs.append(write_cohort_csv(out / "cohort.csv", records))
        config = {"cohort": args.cohort, "model": {"betas": model.betas, "noise_sd": model.noise_sd,
                                                   "lung_volume_male": model.lung_volume_male,
                                                   "lung_volume_female": model.lung_volume_female,
                                                   "age_range": model.age_range}}
        _write_manifest(out, "phantom", argv, config, {"cohort": args.seed},
                        [args.betas] if args.betas else [], outputs)
        return
    spec = TreeSpec(generations=args.generations, root_radius=args.root_radius,
                    radius_decay=args.radius_decay, branch_length=args.branch_length,
                    length_decay=args.length_decay, branch_angle=args.branch_angle,
                    rng_seed=args.seed, jitter=args.jitter)
    case = make_phantom(spec, spacing=tuple(args.spacing), with_vein=not args.no_vein)
    if args.ncct:
        case = ctpa_to_ncct(case)
    for name, obj in (("image", case.image), ("truth", case.truth), ("lung", case.lung_mask),
                      ("heart", case.heart_mask)):
        outputs += _volume_files(write_volume(out / f"{name}.mhd", obj))
    for name, lv in (("levels_A", case.levels_A), ("levels_V", case.levels_V)):
        outputs += _volume_files(write_volume(out / f"{name}.mhd", _levels_volume(lv, case.truth)))
    info = {"spec": spec_dict(spec), "spacing": list(case.truth.spacing),
            "origin": list(case.truth.origin), "dims": list(case.truth.dims),
            "root_hints": {k: list(v) for k, v in case.root_hints.items()},
            "analytic": case.analytic, "ncct": bool(args.ncct)}
    outputs.append(write_json(out / "phantom.json", info))
    _write_manifest(out, "phantom", argv, {"spec": spec_dict(spec), "spacing": list(args.spacing),
                                           "with_vein": not args.no_vein, "ncct": bool(args.ncct)},
                    {"tree": spec.rng_seed}, [], outputs)


def _read_betas(path, defaults: dict) -> dict:
    """Per-index ``[b0, b_volume, b_sex, b_age]`` overrides from a JSON file."""
    data = read_json(path)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: betas must be a JSON object keyed by index name")
    unknown = set(data) - set(defaults)
    if unknown:
        raise ValueError(f"{path}: unknown indices {sorted(unknown)}; expected {sorted(defaults)}")
    betas = dict(defaults)
    for name, values in data.items():
        if not isinstance(values, list) or len(values) != 4:
            raise ValueError(f"{path}: {name} needs 4 coefficients (intercept, volume, sex, age)")
        betas[name] = tuple(float(v) for v in values)
    return betas


def _levels_volume(levels: BranchLevels, like: LabelMask):
    return Volume(levels.codes(), like.spacing, like.origin, "MET_UCHAR",
                  {"VasqContent": "branch level codes: 0 outside, i+1 first reached at level i"})


def _read_levels(path, like: LabelMask) -> BranchLevels:
    vol = read_volume(path)
    if vol.voxels.shape != like.dims:
        raise GeometryError(f"levels file {path}: dims={vol.voxels.shape} spacing={vol.spacing} "
                            f"vs truth dims={like.dims} spacing={like.spacing}")
    if vol.voxels.size and vol.voxels.max() > 4:
        raise ValueError(f"levels file {path} holds codes above 4")
    return BranchLevels.from_codes(vol.voxels, vol.spacing, vol.origin)


def cmd_normalize(args, argv) -> None:
    out = Path(args.out)
    dims = tuple(args.dims)
    if args.mask:
        mask = read_mask(args.input)
        result = resample_labels_nearest(mask, STANDARD_SPACING, dims,
                                          _centered_origin(mask, STANDARD_SPACING, dims))
    else:
        result = normalize_to_standard_space(read_grid(args.input), dims=dims)
    outputs = _volume_files(write_volume(out / "normalized.mhd", result))
    _write_manifest(out, "normalize", argv, {"dims": list(dims), "spacing": list(STANDARD_SPACING),
                                             "mask": bool(args.mask), "fill": "air"},
                    {}, [args.input], outputs)


def cmd_enhance(args, argv) -> None:
    out = Path(args.out)
    cfg = _run_config(args)
    params = _vesselness_params(args, cfg.vesselness)
    grid = read_grid(args.input)
    windowed = grid.units == "HU"
    if windowed:
        grid = window_hu(grid, *cfg.cascade.window)
    ves = frangi_vesselness(grid, params)
    outputs = _volume_files(write_volume(out / "vesselness.mhd", ves))
    config = cfg.to_dict()
    config["vesselness"].update(scales=list(params.scales), alpha=params.alpha, beta=params.beta,
                                c=params.c)
    config["windowed_input"] = windowed
    _write_manifest(out, "enhance", argv, config, {}, [args.input], outputs)


def cmd_noise(args, argv) -> None:
    out = Path(args.out)
    cfg = _run_config(args)
    n0 = args.n0 if args.n0 is not None else float(cfg.noise["n0"])
    seed = args.seed if args.seed is not None else int(cfg.noise["seed"])
    noisy = add_poisson_noise(read_grid(args.input), NoiseParams(n0, seed))
    outputs = _volume_files(write_volume(out / "noisy.mhd", noisy))
    _write_manifest(out, "noise", argv, {"n0": n0, "model": "single-ray Poisson"},
                    {"noise": seed}, [args.input], outputs)


def cmd_segment(args, argv) -> None:
    out = Path(args.out)
    cfg = _run_config(args)
    cascade_cfg = cfg.cascade
    hints = _hints(args.hints)
    seeds = {**{int(k) if str(k).isdigit() else k: v for k, v in cfg.seeds.items()}, **hints}
    if seeds:
        cascade_cfg = replace(cascade_cfg, seeds={**cascade_cfg.seeds, **seeds})
    for stage in args.no_gate or ():
        cascade_cfg = cascade_cfg.without_gate(stage)
    params = _vesselness_params(args, cfg.vesselness)
    grid = read_grid(args.input)
    if grid.units == "HU":
        grid = window_hu(grid, *cascade_cfg.window)
    inputs = [args.input] + ([args.hints] if args.hints else [])
    vesselness = None
    if args.vesselness:
        vesselness = read_grid(args.vesselness, units="normalized")
        check_same_geometry(vesselness, grid)
        inputs.append(args.vesselness)
    result = run_cascade(grid, classical_segmenters(cascade_cfg), kernel=cascade_cfg.kernel,
                         vesselness=vesselness, vesselness_params=params)
    labels = labels_from_probability(result.final)
    outputs = _volume_files(write_volume(out / "labels.mhd", labels))
    outputs += _volume_files(write_volume(out / "prob_A.mhd", _prob_grid(result.final, ARTERY)))
    outputs += _volume_files(write_volume(out / "prob_V.mhd", _prob_grid(result.final, VEIN)))
    stages = [{"stage": i,
               "artery_voxels": int(np.count_nonzero(labels_from_probability(s).artery)),
               "vein_voxels": int(np.count_nonzero(labels_from_probability(s).vein))}
              for i, s in enumerate(result.stages)]
    outputs.append(write_json(out / "segment.json", {"stages": stages, "flags": result.flags}))
    config = cfg.to_dict()
    config["cascade"] = cascade_cfg.to_dict()
    config["vesselness"].update(scales=list(params.scales), alpha=params.alpha, beta=params.beta,
                                c=params.c)
    config["backend"] = "classical"
    _write_manifest(out, "segment", argv, config, {}, inputs, outputs)


def _prob_grid(pm: ProbabilityMap, code: int):
    return VoxelGrid(np.asarray(pm.channel(code)), spacing=pm.spacing, origin=pm.origin,
                     units="probability")


def cmd_skeleton(args, argv) -> None:
    out = Path(args.out)
    if args.tree:
        _name_in_out(args.tree)
    mask = read_mask(args.input)
    hints = _hints(args.hints)
    if args.metric_space:
        metric = to_metric_space(mask)
        for code, h in list(hints.items()):
            phys = np.asarray(mask.origin) + np.asarray(h) * np.asarray(mask.spacing)
            hints[code] = tuple(int(i) for i in np.floor(0.5 + (phys - np.asarray(metric.origin))
                                                         / np.asarray(metric.spacing)))
        mask = metric
    classes = {"artery": [ARTERY], "vein": [VEIN], "both": [ARTERY, VEIN]}[args.cls]
    outputs, summary = [], {}
    for code in classes:
        name = "artery" if code == ARTERY else "vein"
        skel = extract_skeleton(mask, code)
        outputs += _volume_files(write_volume(out / f"skeleton_{name}.mhd",
                                              LabelMask(skel.voxels, spacing=skel.spacing,
                                                        origin=skel.origin)))
        entry = {"sl": skeleton_length(skel)}
        if skel.voxels.any():
            tree = build_tree(skel, hints.get(code))
            outputs.append(write_json(out / f"tree_{name}.json", tree.to_json()))
            if args.tree:
                stem = Path(args.tree)
                target = args.tree if len(classes) == 1 else f"{stem.stem}_{name}{stem.suffix}"
                if target != f"tree_{name}.json":
                    outputs.append(write_json(out / target, tree.to_json()))
            entry.update(bc=count_bifurcations(tree), length_mm=tree_length(tree),
                         branches=len(tree.branches), flags=tree.flags)
        else:
            entry.update(bc=0, length_mm=0.0, branches=0, flags={"empty": "no voxels of this class"})
        summary[name] = entry
    outputs.append(write_json(out / "skeleton.json", summary))
    inputs = [args.input] + ([args.hints] if args.hints else [])
    _write_manifest(out, "skeleton", argv, {"metric_space": bool(args.metric_space),
                                            "class": args.cls}, {}, inputs, outputs)


def _evaluate_case(pred_path, truth_path, la_path, lv_path, hints_path, prob_paths, abundance):
    pred, truth = read_mask(pred_path), read_mask(truth_path)
    check_same_geometry(pred, truth)
    levels_A, levels_V = _read_levels(la_path, truth), _read_levels(lv_path, truth)
    prob = None
    if prob_paths:
        a, v = (read_grid(p, units="probability") for p in prob_paths)
        check_same_geometry(a, v, truth)
        prob = ProbabilityMap(np.asarray(a.voxels), np.asarray(v.voxels), spacing=a.spacing,
                              origin=a.origin)
    report = evaluate(pred, truth, levels_A, levels_V, prob=prob, with_abundance=abundance,
                      root_hints=_hints(hints_path))
    return report.to_json()


def _case_paths(case_dir: Path) -> dict:
    paths = {"pred": case_dir / "pred.mhd", "truth": case_dir / "truth.mhd",
             "levels_A": case_dir / "levels_A.mhd", "levels_V": case_dir / "levels_V.mhd"}
    for key, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"case {case_dir.name}: missing {p.name}")
    hints = case_dir / "phantom.json"
    paths["hints"] = hints if hints.exists() else None
    probs = [case_dir / "prob_A.mhd", case_dir / "prob_V.mhd"]
    paths["prob"] = probs if all(p.exists() for p in probs) else None
    return paths


def cmd_evaluate(args, argv) -> None:
    out = Path(args.out)
    abundance = not args.no_abundance
    inputs, outputs = [], []
    if args.cases:
        root = Path(args.cases)
        case_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not case_dirs:
            raise ValueError(f"{root} contains no case directories")
        jobs = [_case_paths(d) for d in case_dirs]
        threads = env_threads()

        def run(p):
            return _evaluate_case(p["pred"], p["truth"], p["levels_A"], p["levels_V"], p["hints"],
                                  p["prob"], abundance)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(run, jobs))  # map keeps submission order
        for d, p, rep in zip(case_dirs, jobs, reports):
            outputs.append(write_json(out / "cases" / f"{d.name}.json", rep))
            inputs += [p["pred"], p["truth"], p["levels_A"], p["levels_V"]]
        rows = [{"case": d.name, **{k: v for k, v in rep.items() if not isinstance(v, dict)}}
                for d, rep in zip(case_dirs, reports)]
        outputs.append(write_rows_csv(out / "summary.csv", rows))
        config = {"cases": len(case_dirs), "threads": threads, "abundance": abundance}
    else:
        missing = [n for n in ("pred", "truth", "levels_a", "levels_v") if getattr(args, n) is None]
        if missing:
            raise UsageError(f"evaluate needs --cases or all of {', '.join('--' + m.replace('_', '-') for m in missing)}")
        probs = [args.prob_a, args.prob_v] if args.prob_a and args.prob_v else None
        rep = _evaluate_case(args.pred, args.truth, args.levels_a, args.levels_v, args.hints,
                             probs, abundance)
        outputs.append(write_json(out / "report.json", rep))
        inputs = [args.pred, args.truth, args.levels_a, args.levels_v] + (probs or []) \
            + ([args.hints] if args.hints else [])
        config = {"abundance": abundance}
    _write_manifest(out, "evaluate", argv, config, {}, inputs, outputs)


def cmd_cohort_stats(args, argv) -> None:
    out = Path(args.out)
    records = read_cohort_csv(args.input)
    report = cohort_report(records)
    outputs = [write_json(out / "report.json", report)]
    for name, rows in report_tables(report).items():
        if rows:
            outputs.append(write_rows_csv(out / f"{name}.csv", rows))
    _write_manifest(out, "cohort-stats", argv, {"sex_coding": "male = 1, female = 0",
                                                "stars": "* < 0.05, ** < 0.01, *** < 0.001, **** < 1e-4"},
                    {}, [args.input], outputs)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vasq", description="Pulmonary artery/vein analysis toolkit.")
    parser.add_argument("--version", action="version", version=f"vasq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic artery/vein phantom or cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--generations", type=int, default=TreeSpec.generations)
    p.add_argument("--root-radius", type=float, default=TreeSpec.root_radius)
    p.add_argument("--radius-decay", type=float, default=TreeSpec.radius_decay)
    p.add_argument("--branch-length", type=float, default=TreeSpec.branch_length)
    p.add_argument("--length-decay", type=float, default=TreeSpec.length_decay)
    p.add_argument("--branch-angle", type=float, default=TreeSpec.branch_angle)
    p.add_argument("--jitter", type=float, default=TreeSpec.jitter)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    p.add_argument("--no-vein", action="store_true")
    p.add_argument("--ncct", action="store_true", help="apply the non-contrast vessel transform")
    p.add_argument("--cohort", type=int, default=0, metavar="N",
                   help="write a planted cohort CSV of N subjects instead of a volume")
    p.add_argument("--betas", help="JSON of per-index [intercept, volume, sex, age] coefficients")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("normalize", help="resample into the standardized space")
    _input_option(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="store_true", help="input is a label mask (nearest neighbour)")
    p.add_argument("--dims", type=int, nargs=3, default=list(STANDARD_DIMS))
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("enhance", help="Frangi vesselness of a volume")
    _input_option(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _vesselness_options(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("noise", help="simulate low-dose Poisson noise")
    _input_option(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--n0", type=float, help="incident photons per ray")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("segment", help="four-stage cascade with the classical backend")
    _input_option(p, "CT volume (HU or already windowed)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--backend", choices=("classical",), default="classical",
                   help="stage segmenter backend")
    p.add_argument("--hints", help="JSON with root_hints (e.g. phantom.json) used as cardinal seeds")
    p.add_argument("--vesselness", help="precomputed vesselness volume")
    p.add_argument("--no-gate", type=int, action="append", metavar="STAGE",
                   help="disable prior gating at a stage (repeatable)")
    _vesselness_options(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("skeleton", help="skeleton, vessel tree and abundance counts")
    _input_option(p, "label mask")
    p.add_argument("--out", required=True)
    p.add_argument("--tree", help="extra copy of the tree JSON under this file name in --out")
    p.add_argument("--class", dest="cls", choices=("artery", "vein", "both"), default="both")
    p.add_argument("--hints")
    p.add_argument("--metric-space", action="store_true", help="resample to the metric lattice first")
    p.set_defaults(func=cmd_skeleton)

    p = sub.add_parser("evaluate", help="metrics of a prediction against truth")
    p.add_argument("--out", required=True)
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--levels-a")
    p.add_argument("--levels-v")
    p.add_argument("--prob-a")
    p.add_argument("--prob-v")
    p.add_argument("--hints")
    p.add_argument("--cases", help="directory of case folders (pred/truth/levels_A/levels_V .mhd)")
    p.add_argument("--no-abundance", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cohort-stats", help="regression and rank tests on a cohort CSV")
    p.add_argument("--in", "--cohort", dest="input", required=True, help="cohort CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cohort_stats)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    sub_argv = argv[argv.index(args.command) + 1:]
    try:
        args.func(args, sub_argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
