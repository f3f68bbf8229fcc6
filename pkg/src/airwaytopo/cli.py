"""Command-line entry point: ``airwaytopo <subcommand> ...``.

Every subcommand reads volumes or JSON and writes JSON (or a volume for
``postprocess``).  Exit codes: 0 success, 1 usage or IO error, 2 degenerate
input that was handled, 3 computation error.  Failures print one JSON object
on stderr.

``--config file.json`` supplies defaults for any flag of the chosen
subcommand (keys are flag names with dashes or underscores); flags given on
the command line win.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import losses, metrics, morphology, netshape, sampling, skeleton, testkit, tree_parsing
from .errors import AirwayTopoError, EmptyMask, EmptyMaskWarning, IoFailure
from .volume import Kind, VoxelGrid, atomic_write_bytes, load_volume, save_volume, truncate_normalize

__all__ = ["main", "main_exit", "build_parser"]

THREADS_ENV = "AIRWAYTOPO_THREADS"
# HU windows listed for the two public datasets; which belongs to which is not stated
HU_WINDOWS = {"narrow": (-1000.0, 500.0), "wide": (-1024.0, 1024.0)}
VOLUME_SUFFIXES = (".nii.gz", ".nii", ".json", ".bin")


class UsageError(AirwayTopoError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, allow_nan=False) + "\n").encode()


def _emit(obj, path):
    data = _dump(obj)
    if path is None or str(path) == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        atomic_write_bytes(path, data)


def _read_json(path):
    p = Path(path)
    if not p.is_file():
        raise IoFailure(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise IoFailure(f"{p}: invalid JSON ({exc})") from exc


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise IoFailure(f"no such file: {p}")


def _threads_default() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1")
    return n


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------


def _add_parse_flags(p):
    d = tree_parsing.ParseParams()
    p.add_argument("--smooth-window", type=int, default=d.smooth_window)
    p.add_argument("--prune-min-len", type=float, default=d.prune_min_len_vox,
                   help="leaf branches shorter than this (voxels) are pruned")
    p.add_argument("--angle-threshold", type=float, default=d.angle_threshold_deg)
    p.add_argument("--radius-ratio", type=float, default=d.radius_ratio)


def _parse_params(a) -> tree_parsing.ParseParams:
    return tree_parsing.ParseParams(
        smooth_window=a.smooth_window,
        prune_min_len_vox=a.prune_min_len,
        angle_threshold_deg=a.angle_threshold,
        radius_ratio=a.radius_ratio,
    )


def _eval_params(a) -> metrics.EvalParams:
    return metrics.EvalParams(_parse_params(a), metrics.BdParams(a.bd_threshold))


def _window(a):
    if a.window is not None and a.window_preset is not None:
        raise UsageError("give either --window or --window-preset, not both")
    if a.window is not None:
        return tuple(a.window)
    if a.window_preset is not None:
        return HU_WINDOWS[a.window_preset]
    return None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_postprocess(a) -> int:
    _require(a.input)
    grid = load_volume(a.input)
    window = _window(a)
    if window is not None:
        grid = truncate_normalize(grid, *window)
    elif grid.kind is Kind.INTENSITY:
        raise UsageError("intensity input needs --window or --window-preset")
    params = morphology.DtiParams(a.t_high, a.t_low)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyMaskWarning)
        out = morphology.postprocess(grid, params)
    save_volume(out, a.output)
    if any(issubclass(w.category, EmptyMaskWarning) for w in caught):
        _error_json(EmptyMask("post-processing produced an empty mask"), 2)
        return 2
    return 0


def cmd_parse(a) -> int:
    _require(a.input)
    grid = load_volume(a.input)
    try:
        sk = skeleton.skeletonize(grid)
    except EmptyMask as exc:
        raise UsageError(f"cannot parse an empty mask: {exc}") from exc
    tree = tree_parsing.parse_pipeline(grid, _parse_params(a), skeleton=sk)
    if a.emit_skeleton:
        _emit(sk.to_json(), a.emit_skeleton)
    _emit(tree.to_json(), a.output)
    return 0


def _case_name(path: Path) -> str:
    name = path.name
    for suf in VOLUME_SUFFIXES:
        if name.endswith(suf):
            return name[: -len(suf)]
    return path.stem


def _list_cases(folder: Path) -> dict[str, Path]:
    out = {}
    for p in sorted(folder.iterdir()):
        if p.name.endswith(".bin") or not p.name.endswith(VOLUME_SUFFIXES):
            continue
        out[_case_name(p)] = p
    return out


def _evaluate_one(job):
    name, pred_path, gt_path, params = job
    try:
        pred = load_volume(pred_path)
        gt = load_volume(gt_path)
        report = metrics.evaluate_case(pred, gt, params)
        return name, report.to_json(), None
    except AirwayTopoError as exc:
        return name, None, {"error": type(exc).__name__, "message": str(exc)}


def cmd_evaluate(a) -> int:
    if a.wms_only is not None:
        _emit({"wms": metrics.weighted_mean_score(*a.wms_only)}, a.output)
        return 0
    params = _eval_params(a)
    if a.pred_dir or a.gt_dir:
        return _evaluate_batch(a, params)
    if a.pred is None or a.gt is None:
        raise UsageError("evaluate needs PRED and GT, --pred-dir/--gt-dir, or --wms-only")
    _require(a.pred, a.gt)
    report = metrics.evaluate_case(load_volume(a.pred), load_volume(a.gt), params)
    _emit(report.to_json(), a.output)
    return 0


def _evaluate_batch(a, params) -> int:
    if not (a.pred_dir and a.gt_dir and a.out_dir):
        raise UsageError("batch mode needs --pred-dir, --gt-dir and --out-dir")
    pred_dir, gt_dir, out_dir = Path(a.pred_dir), Path(a.gt_dir), Path(a.out_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise IoFailure(f"not a directory: {d}")
    preds, gts = _list_cases(pred_dir), _list_cases(gt_dir)
    failures = {}
    for name in sorted(set(preds) ^ set(gts)):
        failures[name] = {"error": "MissingCase", "message": "case present in only one directory"}
    jobs = [(n, preds[n], gts[n], params) for n in sorted(set(preds) & set(gts))]
    workers = a.workers or _threads_default()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_evaluate_one, jobs))
    else:
        results = [_evaluate_one(j) for j in jobs]
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for name, rep, err in results:
        if err is not None:
            failures[name] = err
            continue
        atomic_write_bytes(out_dir / f"{name}.report.json", _dump(rep))
        reports.append(metrics.EvalReport(**{k: v for k, v in rep.items() if k != "per_branch"}, per_branch=[]))
    summary = {
        "n_cases": len(jobs) + len(set(preds) ^ set(gts)),
        "n_ok": len(reports),
        "metrics": metrics.summarize(reports),
        "failures": [dict(case=k, **v) for k, v in sorted(failures.items())],
    }
    atomic_write_bytes(out_dir / "summary.json", _dump(summary))
    return 3 if failures else 0


def _dims_spacing(grid: VoxelGrid):
    return grid.dims, grid.spacing


def cmd_sample(a) -> int:
    _require(a.gt, a.pred)
    gt = load_volume(a.gt)
    state = sampling.SchedulerState(stage=a.stage, params=sampling.SchedulerParams(
        boost=a.boost, hard_min=a.hard_min, hard_max=a.hard_max,
        breakage_min=a.breakage_min, breakage_max=a.breakage_max,
    ))
    missed = breaks = None
    if a.stage > 1:
        if a.pred is None:
            raise UsageError(f"stage {a.stage} needs --pred")
        pred = load_volume(a.pred).mask()
        sk = skeleton.skeletonize(gt)
        _, missed = skeleton.classify_skeleton_vs_prediction(sk, pred)
        breaks = skeleton.detect_breakages(sk, pred)
        n_brk = len(breaks.breakage_points) if a.stage == 3 else 0
        state = sampling.scheduler_update(state, len(missed), n_brk, len(sk))
    else:
        state = sampling.scheduler_update(state, 0, 0, 0)
    plan = sampling.make_batch_plan(state, a.count, a.seed)
    patches = []
    for i, tag in enumerate(plan):
        seed = [a.seed, i]
        if tag is sampling.Strategy.RANDOM:
            spec = sampling.random_crop(gt, a.size, seed)
        elif tag is sampling.Strategy.HARD_MINING:
            spec = sampling.hard_mining_crop(missed, a.size, seed)
        else:
            spec = sampling.breakage_crop(breaks, a.size, seed)
        patches.append(spec.to_json())
    if a.state_out:
        _emit(state.to_json(), a.state_out)
    _emit(patches, a.output)
    return 0


def cmd_loss(a) -> int:
    _require(a.pred, a.gt, a.tree, a.centerline)
    pred, gt = load_volume(a.pred), load_volume(a.gt)
    g = gt.mask()
    if a.tree:
        tree = tree_parsing.AirwayTree.from_json(_read_json(a.tree))
    else:
        tree = tree_parsing.parse_pipeline(gt, _parse_params(a))
    if a.centerline:
        cl = skeleton.SkeletonPointSet.from_json(_read_json(a.centerline))
    else:
        cl = skeleton.skeletonize(gt)
    breaks = skeleton.detect_breakages(cl, pred.array >= a.pred_threshold)
    gp = losses.GulParams(a.gamma, a.alpha, a.beta)
    cp = losses.CenterlineParams(a.k_cap, not a.eta_literal, a.eta_dilation)
    lp = losses.LocalWeightParams(a.kappa, a.w_cap)
    wf = losses.weight_field(g, tree, cl, breaks, lp, cp)
    p = pred.array.astype(np.float64)
    dice = losses.dice_loss(p, g)
    gul = losses.gul(p, g, wf.w_l, gp)
    atrl = losses.atrl(p, g, cl, wf)
    _emit({
        "dice": dice,
        "gul": gul,
        "atrl": atrl,
        "stage3": gul + atrl,
        "params": {
            "gamma": gp.gamma, "alpha": gp.alpha, "beta": gp.beta,
            "k_cap": cp.k_cap, "eta_term_clamped_nonneg": cp.eta_term_clamped_nonneg,
            "eta_dilation": cp.eta_dilation, "kappa": lp.kappa, "w_cap": lp.w_cap,
            "n_centerline": len(cl), "n_breakage_points": int(len(breaks.breakage_points)),
        },
    }, a.output)
    return 0


def cmd_synth(a) -> int:
    overrides = {}
    if a.dims:
        overrides["dims"] = tuple(a.dims)
    if a.spacing:
        overrides["spacing"] = tuple(a.spacing)
    if a.root_radius is not None:
        overrides["root_radius_vox"] = a.root_radius
    if a.branch_angle is not None:
        overrides["branch_angle_deg"] = a.branch_angle
    spec = testkit.random_spec(a.generations, a.seed, **overrides)
    bundle = testkit.generate(spec)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(bundle.mask, out / "mask.nii.gz")
    if a.probability:
        prob = testkit.to_probability(bundle.mask, a.p_fg, a.p_bg, a.blur_radius)
        save_volume(prob, out / "prob.nii.gz")
    atomic_write_bytes(out / "tree.json", _dump(bundle.tree.to_json()))
    atomic_write_bytes(out / "centerline.json", _dump(bundle.centerline.to_json()))
    return 0


NETSHAPE_FIELDS = ("encoder_dies", "decoder_dies", "die_out_channels", "residual_channels")


def cmd_netshape(a) -> int:
    kwargs = dict(input_size=a.input_size, input_channels=a.input_channels, n_classes=a.n_classes)
    for name in NETSHAPE_FIELDS:
        val = getattr(a, name)
        if val is not None:
            kwargs[name] = json.loads(val) if isinstance(val, str) else val
    cfg = netshape.NetConfig(**kwargs)
    _emit(netshape.describe(cfg), a.output)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="airwaytopo", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON file with defaults for this subcommand's flags")
        p.set_defaults(func=func)
        return p

    p = add("postprocess", cmd_postprocess, "dual-threshold iteration, hole fill, largest component")
    p.add_argument("input")
    p.add_argument("output")
    d = morphology.DtiParams()
    p.add_argument("--t-high", type=float, default=d.t_high)
    p.add_argument("--t-low", type=float, default=d.t_low)
    p.add_argument("--window", type=float, nargs=2, metavar=("LO", "HI"),
                   help="HU truncation window for intensity input")
    p.add_argument("--window-preset", choices=sorted(HU_WINDOWS),
                   help="narrow = [-1000, 500], wide = [-1024, 1024]")

    p = add("parse", cmd_parse, "parse a binary mask into a labelled airway tree")
    p.add_argument("input")
    p.add_argument("output", nargs="?")
    p.add_argument("--emit-skeleton", metavar="PATH")
    _add_parse_flags(p)

    p = add("evaluate", cmd_evaluate, "TD, BD, DSC, precision and hierarchical metrics")
    p.add_argument("pred", nargs="?")
    p.add_argument("gt", nargs="?")
    p.add_argument("-o", "--output")
    p.add_argument("--pred-dir")
    p.add_argument("--gt-dir")
    p.add_argument("--out-dir")
    p.add_argument("--workers", type=int, default=None,
                   help=f"process pool size (default ${THREADS_ENV} or 1)")
    p.add_argument("--bd-threshold", type=float, default=metrics.BdParams().branch_detect_threshold)
    p.add_argument("--wms-only", type=float, nargs=4, metavar=("TD", "BD", "DSC", "PRE"))
    _add_parse_flags(p)

    p = add("sample", cmd_sample, "curriculum patch specifications")
    p.add_argument("gt")
    p.add_argument("-o", "--output")
    p.add_argument("--pred")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=1)
    p.add_argument("--size", type=int, default=sampling.DEFAULT_PATCH)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-out")
    s = sampling.SchedulerParams()
    p.add_argument("--boost", type=float, default=s.boost)
    p.add_argument("--hard-min", type=float, default=s.hard_min)
    p.add_argument("--hard-max", type=float, default=s.hard_max)
    p.add_argument("--breakage-min", type=float, default=s.breakage_min)
    p.add_argument("--breakage-max", type=float, default=s.breakage_max)

    p = add("loss", cmd_loss, "Dice, GUL, ATRL and stage-3 loss values")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("-o", "--output")
    p.add_argument("--tree", help="ground-truth tree JSON (parsed from GT if absent)")
    p.add_argument("--centerline", help="skeleton JSON (skeletonized from GT if absent)")
    g = losses.GulParams()
    p.add_argument("--gamma", type=float, default=g.gamma)
    p.add_argument("--alpha", type=float, default=g.alpha)
    p.add_argument("--beta", type=float, default=g.beta)
    c = losses.CenterlineParams()
    p.add_argument("--k-cap", type=float, default=c.k_cap)
    p.add_argument("--eta-literal", action="store_true",
                   help="do not floor the breakage term at zero")
    p.add_argument("--eta-dilation", type=int, default=c.eta_dilation)
    lw = losses.LocalWeightParams()
    p.add_argument("--kappa", type=float, default=lw.kappa)
    p.add_argument("--w-cap", type=float, default=lw.w_cap)
    p.add_argument("--pred-threshold", type=float, default=0.5,
                   help="binarization level used to find breakages")
    _add_parse_flags(p)

    p = add("synth", cmd_synth, "write a synthetic airway tree with exact ground truth")
    p.add_argument("out_dir")
    p.add_argument("--generations", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3)
    p.add_argument("--spacing", type=float, nargs=3)
    p.add_argument("--root-radius", type=float)
    p.add_argument("--branch-angle", type=float)
    p.add_argument("--probability", action="store_true", help="also write prob.nii.gz")
    p.add_argument("--p-fg", type=float, default=0.9)
    p.add_argument("--p-bg", type=float, default=0.05)
    p.add_argument("--blur-radius", type=int, default=0)

    p = add("netshape", cmd_netshape, "shape and parameter accounting for the SE-UNet")
    p.add_argument("-o", "--output")
    nd = netshape.NetConfig()
    p.add_argument("--input-size", type=int, default=nd.input_size)
    p.add_argument("--input-channels", type=int, default=nd.input_channels)
    p.add_argument("--n-classes", type=int, default=nd.n_classes)
    for name in NETSHAPE_FIELDS:
        p.add_argument("--" + name.replace("_", "-"), default=None, help="JSON list")
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise UsageError(f"unknown command {command}")


def _apply_config(parser, argv, args):
    if not getattr(args, "config", None):
        return args
    cfg = _read_json(args.config)
    if not isinstance(cfg, dict):
        raise UsageError("--config must hold a JSON object")
    sp = _subparser(parser, args.command)
    dests = {a.dest for a in sp._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, val in cfg.items():
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        defaults[dest] = val
    sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _error_json(exc, code):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        args = _apply_config(parser, argv, args)
        return args.func(args)
    except AirwayTopoError as exc:
        _error_json(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        _error_json(exc, 1)
        return 1


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
