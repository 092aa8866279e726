"""``carmreg`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error. Option precedence is
command-line flag, then ``--config`` JSON file, then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _backend
from .drr import DRRRenderer, Image2, RenderConfig, crop_indices, load_image, normalize_image, save_image
from .errors import CarmRegError
from .geom import DetectorSpec, load_pose, read_json_record
from .landmarks import load_landmarks, save_landmarks
from .metrics import METRICS
from .register import (INITIALIZERS, PATIENT_KEYS, PatientPose, RegistrationConfig, posed_model,
                       register, save_patient_pose)
from .volume import PhantomSpec, load_volume, make_phantom, save_volume, threshold_segment

log = logging.getLogger("carmreg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _metric(value: str) -> str:
    if value not in METRICS:
        raise argparse.ArgumentTypeError(
            f"unknown metric {value!r}; valid options: {', '.join(METRICS)}")
    return value


def _positive_int(value: str) -> int:
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {value!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _methods(value: str) -> list[str]:
    from .evaluation import parse_method
    out = [m.strip() for m in value.split(",") if m.strip()]
    if not out:
        raise argparse.ArgumentTypeError("need at least one method")
    for m in out:
        try:
            parse_method(m)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad method {m!r}: {exc}") from None
    return out


def _add_detector(p):
    p.add_argument("--width", type=_positive_int, default=512, help="detector columns")
    p.add_argument("--height", type=_positive_int, default=512, help="detector rows")
    p.add_argument("--pitch", type=float, default=0.5, help="detector pixel pitch (mm)")
    p.add_argument("--step", type=float, default=None, help="ray step (mm); default half the voxel spacing")


def _common(suppress: bool) -> _Parser:
    # subcommand copies use SUPPRESS so a global flag given before the
    # subcommand is not reset by the subparser's default
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=d(None),
                        help="render worker threads (fallback: CARMREG_THREADS, then CPU count)")
    common.add_argument("--seed", type=int, default=d(0), help="seed for every random draw")
    common.add_argument("--verbose", "-v", action="store_true", default=d(False),
                        help="log progress to stderr")
    common.add_argument("--config", default=d(None), help="JSON file of option defaults")
    return common


GLOBAL_DESTS = {"threads", "seed", "verbose", "config"}


def build_parser() -> _Parser:
    top = _common(False)
    common = _common(True)
    parser = _Parser(prog="carmreg", description="C-arm X-ray to CT registration toolkit",
                     parents=[top])
    parser.add_argument("--version", action="version", version=f"carmreg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("phantom", parents=[common], help="write the synthetic thorax phantom")
    p.add_argument("--out", required=True, help="volume header path")
    p.add_argument("--size", type=_positive_int, default=256, help="voxels per axis")
    p.add_argument("--spacing", type=float, default=None,
                   help="voxel spacing (mm); default keeps a 382.5 mm field of view")
    p.add_argument("--landmarks", default=None, help="landmark CSV path (default next to the volume)")
    p.add_argument("--dtype", choices=("f32", "i16"), default="f32")

    p = sub.add_parser("render", parents=[common], help="render a DRR")
    p.add_argument("--volume", required=True)
    p.add_argument("--pose", required=True, help="pose JSON (device record, optional patient keys)")
    p.add_argument("--out", required=True, help="image header path")
    p.add_argument("--crop", action="store_true", help="keep the upper 352x512 crop")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--mask-mode", action="store_true", help="render the bone mask instead of HU")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    _add_detector(p)

    p = sub.add_parser("segment", parents=[common], help="threshold bone segmentation")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=300.0, help="bone threshold (HU)")

    p = sub.add_parser("gen-dataset", parents=[common], help="generate virtual X-rays")
    p.add_argument("--volume", default=None, help="volume header (default: the phantom at --seed)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", default="dataset")
    p.add_argument("--ranges", default=None, help="JSON parameter ranges")
    p.add_argument("--mask-mode", action="store_true", help="also write skeleton-mask X-rays")
    p.add_argument("--workers", type=_positive_int, default=1, help="samples rendered concurrently")
    p.add_argument("--phantom-size", type=_positive_int, default=256)
    _add_detector(p)

    p = sub.add_parser("register", parents=[common], help="register a fixed image to a volume")
    p.add_argument("--metric", type=_metric, default="cc", help="cc or nmi")
    p.add_argument("--fixed", required=True, help="fixed image header (352x512 crop)")
    p.add_argument("--volume", required=True)
    p.add_argument("--pose", required=True, help="device pose JSON")
    p.add_argument("--init", choices=INITIALIZERS, default="identity")
    p.add_argument("--init-pose", default=None, help="pose JSON for --init external")
    p.add_argument("--out", required=True, help="result JSON")
    p.add_argument("--pose-out", default=None, help="estimated pose JSON")
    p.add_argument("--mask-mode", action="store_true")
    p.add_argument("--x-tol", type=float, default=None, help="parameter tolerance (deg and mm)")
    p.add_argument("--max-evals", type=_positive_int, default=None)
    p.add_argument("--bins", type=_positive_int, default=32, help="NMI histogram bins")
    _add_detector(p)

    p = sub.add_parser("eval", parents=[common], help="run the registration benchmark")
    p.add_argument("--volume", default=None, help="volume header (default: the phantom at --seed)")
    p.add_argument("--landmarks", default=None, help="landmark CSV (required with --volume)")
    p.add_argument("--trials", type=_positive_int, default=20)
    p.add_argument("--methods", type=_methods, default=["cc", "nmi", "grid+cc", "grid+nmi"])
    p.add_argument("--rot-deg", type=float, default=5.0)
    p.add_argument("--trans-mm", type=float, default=10.0)
    p.add_argument("--external-dir", default=None, help="trial_XXX.json poses for external methods")
    p.add_argument("--mask-mode", action="store_true")
    p.add_argument("--out", default="eval_out")
    p.add_argument("--phantom-size", type=_positive_int, default=256)

    p = sub.add_parser("encode", parents=[common], help="encoder forward pass")
    p.add_argument("--input", required=True, help="image or volume header")
    p.add_argument("--mode", choices=("2d", "3d"), required=True)
    p.add_argument("--weights", default=None, help="weight index JSON (default: seeded random)")
    p.add_argument("--save-weights", default=None, help="write the weights used to this index path")
    p.add_argument("--out", required=True, help="feature map .npy")
    return parser


def _apply_config(parser: _Parser, path: str) -> None:
    data = read_json_record(path)
    known = set()
    subparsers = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)][0]
    parsers = [parser] + list(subparsers.choices.values())
    for p in parsers:
        known |= {a.dest for a in p._actions}
    unknown = sorted(set(k.replace("-", "_") for k in data) - known)
    if unknown:
        raise UsageError(f"carmreg: error: unknown config keys: {', '.join(unknown)}")
    defaults = {k.replace("-", "_"): v for k, v in data.items()}
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in GLOBAL_DESTS})
    for p in parsers[1:]:
        dests = {a.dest for a in p._actions} - GLOBAL_DESTS
        p.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
        for a in p._actions:
            # a config value satisfies a required option
            if a.dest in defaults:
                a.required = False


def _detector(args) -> DetectorSpec:
    return DetectorSpec(args.width, args.height, args.pitch)


def _threads(args) -> int:
    return args.threads or _backend.default_threads()


def _default_phantom(size: int, seed: int):
    spacing = 382.5 / (size - 1) if size > 1 else 1.5
    return make_phantom(PhantomSpec(dims=(size,) * 3, spacing_mm=(spacing,) * 3), seed)


def cmd_phantom(args) -> None:
    spacing = args.spacing or (382.5 / (args.size - 1) if args.size > 1 else 1.5)
    vol, lm = make_phantom(PhantomSpec(dims=(args.size,) * 3, spacing_mm=(spacing,) * 3), args.seed)
    save_volume(vol, args.out, args.dtype)
    lpath = args.landmarks or str(Path(args.out).with_suffix(".landmarks.csv"))
    save_landmarks(lm, lpath)
    print(f"wrote {args.out} and {lpath}")


def _patient_from(rec: dict) -> PatientPose:
    # absent patient keys default to zero
    return PatientPose.from_record({k: rec.get(k, 0.0) for k in PATIENT_KEYS})


def cmd_render(args) -> None:
    vol = load_volume(args.volume)
    if args.mask_mode:
        vol = threshold_segment(vol)
    device = load_pose(args.pose)
    patient = _patient_from(read_json_record(args.pose))
    model = posed_model(device, patient, _detector(args))
    renderer = DRRRenderer(vol, RenderConfig(step_mm=args.step, threads=_threads(args)))
    det = model.detector
    if args.crop:
        rows, cols = crop_indices(det.height_px, det.width_px)
    else:
        rows, cols = np.arange(det.height_px), np.arange(det.width_px)
    img = Image2(renderer.render_pixels(model, rows, cols))
    if args.normalize:
        img = normalize_image(img)
    save_image(img, args.out, args.dtype)
    print(f"wrote {args.out} ({img.height_px}x{img.width_px})")


def cmd_segment(args) -> None:
    mask = threshold_segment(load_volume(args.volume), args.threshold)
    save_volume(mask, args.out)
    print(f"wrote {args.out} ({int(mask.voxels.sum())} bone voxels)")


def cmd_gen_dataset(args) -> None:
    from .dataset import ParamRanges, generate_dataset, load_ranges
    if args.n < 0:
        raise UsageError("carmreg gen-dataset: error: --n must be >= 0")
    if args.volume:
        vol, ref = load_volume(args.volume), str(args.volume)
    else:
        vol, _ = _default_phantom(args.phantom_size, args.seed)
        ref = f"phantom:{args.phantom_size}:seed={args.seed}"
    ranges = load_ranges(args.ranges) if args.ranges else ParamRanges()
    m = generate_dataset(vol, ranges, args.n, args.out, args.seed, mask_mode=args.mask_mode,
                         detector=_detector(args), render=RenderConfig(step_mm=args.step),
                         workers=args.workers, threads=_threads(args), volume_ref=ref)
    print(f"wrote {len(m.records)} samples to {args.out}")


def cmd_register(args) -> None:
    if args.init == "external" and not args.init_pose:
        raise UsageError("carmreg register: error: --init external needs --init-pose")
    if args.init_pose and args.init != "external":
        raise UsageError("carmreg register: error: --init-pose only applies with --init external")
    fixed = load_image(args.fixed)
    vol = load_volume(args.volume)
    device = load_pose(args.pose)
    cfg = RegistrationConfig(device=device, metric=args.metric, detector=_detector(args),
                             render=RenderConfig(step_mm=args.step, threads=_threads(args)),
                             initializer=args.init, init_path=args.init_pose,
                             mask_mode=args.mask_mode, bins=args.bins)
    optim = cfg.optim
    if args.x_tol is not None:
        optim = replace(optim, x_tol=(args.x_tol,) * 6)
    if args.max_evals is not None:
        optim = replace(optim, max_evals=args.max_evals)
    cfg = replace(cfg, optim=optim)
    res = register(fixed, vol, cfg)
    res.save(args.out)
    if args.pose_out:
        save_patient_pose(res.pose, args.pose_out, device)
    print(json.dumps({"pose": res.pose.to_record(), "similarity": res.similarity_final,
                      "evals": res.evals, "init_evals": res.init_evals,
                      "wall_time_s": round(res.wall_time_s, 3)}))


def cmd_eval(args) -> None:
    from .evaluation import PerturbationSpec, format_table, run_benchmark, write_report
    if args.volume:
        if not args.landmarks:
            raise UsageError("carmreg eval: error: --volume needs --landmarks")
        vol, lm = load_volume(args.volume), load_landmarks(args.landmarks)
    else:
        vol, lm = _default_phantom(args.phantom_size, args.seed)
        if args.landmarks:
            lm = load_landmarks(args.landmarks)
    cfg = RegistrationConfig(render=RenderConfig(threads=_threads(args)), mask_mode=args.mask_mode)

    def progress(rec):
        log.info("trial %d %s: mTRE %.2f mm in %.1f s", rec["trial"], rec["method"],
                 rec["mtre_mm"], rec["reg_time_s"])

    report = run_benchmark(vol, lm, PerturbationSpec(args.rot_deg, args.trans_mm), cfg, args.trials,
                           args.seed, methods=args.methods, external_dir=args.external_dir,
                           progress=progress)
    jp, tp = write_report(report, args.out)
    sys.stdout.write(format_table(report))
    print(f"wrote {jp} and {tp}")


def cmd_encode(args) -> None:
    from .encoders import (EncoderSpec2D, EncoderSpec3D, forward_2d, forward_3d, load_weights,
                           random_weights, save_weights)
    spec = EncoderSpec2D() if args.mode == "2d" else EncoderSpec3D()
    weights = load_weights(args.weights, spec) if args.weights else random_weights(spec, args.seed)
    if args.save_weights:
        save_weights(weights, args.save_weights)
    if args.mode == "2d":
        feats = forward_2d(spec, weights, load_image(args.input).pixels)
    else:
        vol = load_volume(args.input)
        # volumes are stored [z, y, x]; the encoder takes H x W x D = x, y, z order
        feats = forward_3d(spec, weights, vol.voxels.transpose(2, 1, 0))
    np.save(args.out, feats)
    print(f"wrote {args.out} {tuple(feats.shape)}")


COMMANDS = {
    "phantom": cmd_phantom, "render": cmd_render, "segment": cmd_segment,
    "gen-dataset": cmd_gen_dataset, "register": cmd_register, "eval": cmd_eval, "encode": cmd_encode,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = _Parser(add_help=False)
        pre.add_argument("--config", default=None)
        known, _ = pre.parse_known_args(argv)
        if known.config:
            _apply_config(parser, known.config)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (CarmRegError, OSError, ValueError) as exc:
        print(f"carmreg: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    print(f"seed: {args.seed}")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (CarmRegError, OSError, ValueError, ArithmeticError) as exc:
        print(f"carmreg: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
