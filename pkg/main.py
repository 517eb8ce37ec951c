#!/usr/bin/env python3
"""keyreg CLI - keypoint registration in world coordinates

Usage:
    python main.py register --moving m.nii.gz --fixed f.nii.gz --transform affine --out-dir out/
    python main.py warp --moving m.nii.gz --fixed f.nii.gz --transform out/transform.txt --out w.nii.gz
    python main.py keypoints --volume m.nii.gz --out m_keypoints.txt [--activations m.rkmact]
    python main.py eval --a out/warped.nii.gz --b f.nii.gz --a-labels ... --b-labels ...
    python main.py phantom --spec data/quickstart_phantom.txt --translate 10 -5 3 --out-dir pair/

Global flags (before the subcommand): --threads N, --seed S, --verbose.
Errors are reported on stderr as a single line ``code=<N> msg=<text>``;
exit codes: 0 ok, 2 input/output, 3 degenerate solve, 4 detector failure.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from pydantic import ValidationError

from errors import KeyregError
from keypoints import DetectorConfig
from metrics import format_report
from objective import RefinementConfig
from orchestrator import RegistrationOrchestrator, RunManifest
from phantom import ORIENTATIONS
from volio import format_keypoints

logger = logging.getLogger("keyreg")

EXIT_OK = 0
EXIT_INPUT = 2


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _terms(text: str) -> Dict[str, float]:
    """``"ssim=1,dice=0.5"`` -> {"ssim": 1.0, "dice": 0.5}."""
    out: Dict[str, float] = {}
    for item in text.split(","):
        name, _, weight = item.partition("=")
        out[name.strip()] = float(weight) if weight else 1.0
    return out


def _detector(args: argparse.Namespace) -> DetectorConfig:
    kwargs = {"n_keypoints": args.n_keypoints, "response_floor": args.response_floor}
    if args.blob_scales:
        kwargs["blob_scales"] = _floats(args.blob_scales)
    return DetectorConfig(**kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyreg", description="Resolution-agnostic keypoint registration")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default: KEYREG_THREADS or CPU count)")
    parser.add_argument("--seed", type=int, default=None, help="seed for refinement and phantom noise")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def detector_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--n-keypoints", type=int, default=8)
        p.add_argument("--blob-scales", default=None, help="comma-separated sigmas in mm")
        p.add_argument("--response-floor", type=float, default=0.05)

    reg = sub.add_parser("register", help="register a moving volume onto a fixed volume")
    reg.add_argument("--moving", required=True)
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--moving-labels")
    reg.add_argument("--fixed-labels")
    reg.add_argument("--transform", default="affine", help="rigid, affine or tps")
    reg.add_argument("--lambda", dest="lam", type=float, default=None, help="TPS rigidity (required for tps)")
    reg.add_argument("--unweighted", action="store_true", help="ignore keypoint confidences")
    reg.add_argument("--moving-keypoints", help="keypoint file; skips detection")
    reg.add_argument("--fixed-keypoints", help="keypoint file paired row by row with --moving-keypoints")
    detector_flags(reg)
    reg.add_argument("--refine", action="store_true", help="pattern-search the moving keypoints first")
    reg.add_argument("--terms", default=None, help="similarity terms, e.g. ssim=1,dice=1")
    reg.add_argument("--max-iters", type=int, default=30)
    reg.add_argument("--step-mm", type=float, default=2.0)
    reg.add_argument("--hd-percentile", type=float, default=100.0)
    reg.add_argument("--out-dir", default=".")
    reg.add_argument("--format", dest="out_format", default="nifti", choices=("nifti", "raw"))

    warp = sub.add_parser("warp", help="warp a volume with a transform file")
    warp.add_argument("--moving", required=True)
    warp.add_argument("--fixed", required=True, help="volume whose grid is the target")
    warp.add_argument("--transform", required=True)
    warp.add_argument("--out", required=True)
    warp.add_argument("--labels", action="store_true", help="warp the label grid by nearest neighbour")
    warp.add_argument("--moving-labels")

    kp = sub.add_parser("keypoints", help="detect keypoints in a volume")
    kp.add_argument("--volume", required=True)
    kp.add_argument("--out", default=None, help="keypoint file (default: stdout)")
    kp.add_argument("--activations", default=None, help="RKMACT1 activation maps on the volume grid; skips detection")
    detector_flags(kp)

    ev = sub.add_parser("eval", help="metrics between two volumes on one grid")
    ev.add_argument("--a", required=True)
    ev.add_argument("--b", required=True)
    ev.add_argument("--a-labels")
    ev.add_argument("--b-labels")
    ev.add_argument("--labels", default=None, help="comma-separated label ids (default: all present)")
    ev.add_argument("--hd-percentile", type=float, default=100.0)
    ev.add_argument("--out", default=None, help="report file (default: stdout)")

    ph = sub.add_parser("phantom", help="render a ground-truth phantom pair")
    ph.add_argument("--spec", required=True)
    ph.add_argument("--out-dir", required=True)
    g = ph.add_mutually_exclusive_group()
    g.add_argument("--translate", type=float, nargs=3, metavar=("X", "Y", "Z"))
    g.add_argument("--transform", help="affine transform file (moving -> fixed)")
    g.add_argument("--mild-tps", type=float, metavar="MM", help="random TPS with displacements up to MM")
    ph.add_argument("--spacing-m", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    ph.add_argument("--spacing-f", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    ph.add_argument("--orientation-m", default="axial", choices=sorted(ORIENTATIONS))
    ph.add_argument("--orientation-f", default="axial", choices=sorted(ORIENTATIONS))
    ph.add_argument("--format", dest="out_format", default="nifti", choices=("nifti", "raw"))
    return parser


def configure_logging(verbose: bool) -> None:
    level = logging.DEBUG if verbose else os.getenv("LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(
        level=level,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _print_artifacts(artifacts: Dict[str, str]) -> None:
    for key in sorted(artifacts):
        print(f"{key} {artifacts[key]}")


def cmd_register(orch: RegistrationOrchestrator, args: argparse.Namespace) -> int:
    manifest = RunManifest(
        moving=args.moving,
        fixed=args.fixed,
        moving_labels=args.moving_labels,
        fixed_labels=args.fixed_labels,
        transform=args.transform,
        lam=args.lam,
        weighted=not args.unweighted,
        moving_keypoints=args.moving_keypoints,
        fixed_keypoints=args.fixed_keypoints,
        detector=_detector(args),
        terms=_terms(args.terms) if args.terms else None,
        refine=args.refine,
        refinement=RefinementConfig(max_iters=args.max_iters, step_mm=args.step_mm),
        hd_percentile=args.hd_percentile,
        out_dir=args.out_dir,
        out_format=args.out_format,
        seed=args.seed if args.seed is not None else 0,
    )
    record = orch.register(manifest)
    _print_artifacts(record.artifacts)
    return EXIT_OK


def cmd_warp(orch: RegistrationOrchestrator, args: argparse.Namespace) -> int:
    written = orch.warp(args.moving, args.fixed, args.transform, args.out, args.labels, args.moving_labels)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_keypoints(orch: RegistrationOrchestrator, args: argparse.Namespace) -> int:
    ks = orch.keypoints(args.volume, args.out, _detector(args), args.activations)
    if args.out is None:
        sys.stdout.write(format_keypoints(ks))
    else:
        print(args.out)
    return EXIT_OK


def cmd_eval(orch: RegistrationOrchestrator, args: argparse.Namespace) -> int:
    labels = [int(v) for v in args.labels.split(",")] if args.labels else None
    report = orch.evaluate(args.a, args.b, args.out, args.a_labels, args.b_labels, labels, args.hd_percentile)
    if args.out is None:
        sys.stdout.write(format_report(report))
    else:
        print(args.out)
    return EXIT_OK


def cmd_phantom(orch: RegistrationOrchestrator, args: argparse.Namespace) -> int:
    artifacts = orch.phantom(
        args.spec,
        args.out_dir,
        translate=args.translate,
        transform_path=args.transform,
        mild_tps_mm=args.mild_tps,
        spacing_m=args.spacing_m,
        spacing_f=args.spacing_f,
        orientation_m=args.orientation_m,
        orientation_f=args.orientation_f,
        seed=args.seed,
        out_format=args.out_format,
    )
    _print_artifacts(artifacts)
    return EXIT_OK


COMMANDS = {
    "register": cmd_register,
    "warp": cmd_warp,
    "keypoints": cmd_keypoints,
    "eval": cmd_eval,
    "phantom": cmd_phantom,
}


def _fail(code: int, message: str) -> int:
    print(f"code={code} msg={' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    logger.debug("command %s with %s threads", args.command, args.threads or "default")
    try:
        orch = RegistrationOrchestrator(threads=args.threads)
        return COMMANDS[args.command](orch, args)
    except KeyregError as exc:
        return _fail(exc.exit_code, exc)
    except ValidationError as exc:
        err = exc.errors()[0]
        where = ".".join(str(p) for p in err["loc"])
        return _fail(EXIT_INPUT, f"invalid {where}: {err['msg']}" if where else err["msg"])
    except (ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)


if __name__ == "__main__":
    sys.exit(main())
