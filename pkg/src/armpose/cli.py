"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .geometry import CameraIntrinsics, solve_pnp
from .kinematics import forward_kinematics, get_chain
from .losses import JointNormalizer

log = logging.getLogger("armpose")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _config(args):
    from .harness.config import load_config

    return load_config(args.config)


def cmd_gen_data(args) -> None:
    from .harness.config import CameraDistribution
    from .harness.scene import generate_synthetic_dataset

    cfg = _config(args)
    chain = get_chain(args.chain or cfg.data.chain)
    cam = cfg.data.camera
    if args.camera:
        from .harness.config import _build

        cam = _build(CameraDistribution, json.loads(Path(args.camera).read_text()), "camera")
    count = args.count if args.count is not None else cfg.data.train_count
    seed = cfg.seed if args.seed is None else args.seed
    generate_synthetic_dataset(args.out, chain, count, cam, seed, args.prefix, cfg.data.joint_min_bend)
    print(f"wrote {count} samples to {args.out}")


def cmd_pretrain(args) -> None:
    from .harness.scene import load_dataset
    from .harness.train import run_pretrain

    cfg = _config(args)
    model = run_pretrain(load_dataset(args.data), cfg, args.out)
    print(json.dumps(model.manifest.history[-1]))


def cmd_finetune(args) -> None:
    from .harness.scene import load_dataset
    from .harness.train import load_trained, run_finetune

    cfg = _config(args)
    init = load_trained(args.init).net if args.init else None
    model = run_finetune(load_dataset(args.data), cfg, init, args.out)
    print(json.dumps(model.manifest.history[-1]))


def cmd_sim2real(args) -> None:
    from .harness.scene import load_dataset
    from .harness.train import load_trained, run_sim2real

    cfg = _config(args)
    model = run_sim2real(load_dataset(args.data), cfg, load_trained(args.model), args.out)
    h = model.manifest.history
    print(json.dumps({"ssl_initial": h[0]["ssl_loss"], "ssl_final": h[-1]["ssl_loss"]}))


def cmd_eval(args) -> None:
    from .harness.evaluate import load_occlusions, run_eval, save_eval
    from .harness.scene import load_dataset
    from .harness.train import load_trained

    cfg = _config(args)
    opts = cfg.eval
    if args.no_filter:
        from dataclasses import replace

        opts = replace(opts, filtering=False)
    model = load_trained(args.model)
    if model.normalizer is None:
        raise ConfigError(f"{args.model} holds no joint normalizer; evaluate a fine-tuned model")
    occ = load_occlusions(args.occlusions) if args.occlusions else None
    report, rows = run_eval(load_dataset(args.data), model.net, model.normalizer, opts, occ)
    save_eval(args.out, report, rows, opts.pck_thresholds)
    print(json.dumps(report.to_dict(), indent=2))


def cmd_occlude(args) -> None:
    from .harness.evaluate import make_occlusions, save_occlusions
    from .harness.scene import load_dataset

    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    occ = make_occlusions(load_dataset(args.data), args.ratio, seed, args.shape)
    save_occlusions(args.out, occ)
    print(f"wrote {len(occ)} occluders to {args.out}")


def cmd_solve(args) -> None:
    """Pose from a keypoint file: JSON with ``keypoints`` (k x 2), ``joints`` and ``intrinsics``."""
    try:
        spec = json.loads(Path(args.keypoints).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {args.keypoints}: {exc}") from exc
    chain = get_chain(args.chain)
    try:
        kp = np.asarray(spec["keypoints"], dtype=np.float64)
        joints = np.asarray(spec["joints"], dtype=np.float64)
        intr = CameraIntrinsics.from_dict(spec["intrinsics"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{args.keypoints}: {exc}") from exc
    ids = np.asarray(spec.get("keypoint_ids", range(len(kp))), dtype=int)
    pose = solve_pnp(forward_kinematics(chain, joints)[ids], kp, intr)
    print(json.dumps(pose.to_dict(), indent=2))


def cmd_report(args) -> None:
    from .harness.report import accuracy_report, occlusion_report

    if args.kind == "accuracy":
        runs = dict(item.split("=", 1) if "=" in item else (Path(item).parent.name, item) for item in args.inputs)
        accuracy_report(runs, args.out)
    else:
        sweeps = {}
        for item in args.inputs:
            label, path = item.split("=", 1) if "=" in item else (Path(item).stem, item)
            try:
                sweeps[label] = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read sweep {path}: {exc}") from exc
        occlusion_report(sweeps, args.out)
    print(f"wrote {args.out}.csv and {args.out}.svg")


def cmd_sweep(args) -> None:
    from .harness.evaluate import occlusion_sweep
    from .harness.scene import load_dataset
    from .harness.train import load_trained

    cfg = _config(args)
    model = load_trained(args.model)
    sweep = occlusion_sweep(load_dataset(args.data), model.net, model.normalizer, args.ratios, cfg.seed, cfg.eval, args.shape)
    Path(args.out).write_text(json.dumps(sweep, indent=2) + "\n")
    print(json.dumps(sweep, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="armpose", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config (defaults when omitted)")
        return sp

    g = with_config(sub.add_parser("gen-data", help="render a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--chain", help="built-in chain name or chain JSON file")
    g.add_argument("--camera", help="JSON file overriding the camera distribution")
    g.add_argument("--prefix", default="s", help="image id prefix")
    g.set_defaults(func=cmd_gen_data)

    g = with_config(sub.add_parser("pretrain", help="embedding-predictive pre-training"))
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_pretrain)

    g = with_config(sub.add_parser("finetune", help="supervised joint and keypoint training"))
    g.add_argument("--data", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--init", help="run directory of a pre-trained model")
    g.set_defaults(func=cmd_finetune)

    g = with_config(sub.add_parser("sim2real", help="self-supervised adaptation on unlabeled images"))
    g.add_argument("--data", required=True)
    g.add_argument("--model", required=True, help="fine-tuned run directory")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sim2real)

    g = with_config(sub.add_parser("eval", help="ADD/AUC/PCK evaluation"))
    g.add_argument("--data", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--occlusions", help="occluder manifest from `occlude`")
    g.add_argument("--no-filter", action="store_true", help="hand every peak to the pose solver")
    g.set_defaults(func=cmd_eval)

    g = with_config(sub.add_parser("occlude", help="write an occluder manifest"))
    g.add_argument("--data", required=True)
    g.add_argument("--ratio", type=float, required=True)
    g.add_argument("--shape", choices=("rect", "circle"), default="rect")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_occlude)

    g = with_config(sub.add_parser("sweep", help="evaluate across occlusion ratios"))
    g.add_argument("--data", required=True)
    g.add_argument("--model", required=True)
    g.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.4])
    g.add_argument("--shape", choices=("rect", "circle"), default="rect")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_sweep)

    g = sub.add_parser("solve", help="camera pose from 2D keypoints and joint angles")
    g.add_argument("--keypoints", required=True)
    g.add_argument("--chain", default="planar3")
    g.set_defaults(func=cmd_solve)

    g = sub.add_parser("report", help="CSV and SVG curves")
    g.add_argument("kind", choices=("accuracy", "occlusion"))
    g.add_argument("inputs", nargs="+", help="[label=]samples.csv or [label=]sweep.json")
    g.add_argument("--out", required=True, help="output path prefix")
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
