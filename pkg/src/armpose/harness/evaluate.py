"""Evaluation runner and the occlusion benchmark."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import ConfigError, InfeasiblePlacement, NumericalError
from ..geometry import solve_pnp
from ..kinematics import complete_joints, forward_kinematics
from ..losses import JointNormalizer
from ..masking import Occluder, generate_occlusion
from ..metrics import AddSample, EvalReport, add, auc_of_add, keypoint_errors, mean_add, write_sample_csv
from ..refnet.model import PoseNet
from .config import EvalOptions
from .pipeline import batches, prepare
from .scene import Dataset
from .train import predict, select_keypoints

OCCLUSION_STREAM = 4


def run_eval(
    dataset: Dataset,
    net: PoseNet,
    normalizer: JointNormalizer,
    options: EvalOptions = EvalOptions(),
    occluders: dict[str, Occluder] | None = None,
    batch_size: int = 64,
) -> tuple[EvalReport, list[dict]]:
    """Crop, predict, filter peaks, solve pose and score every image.

    Images whose pose cannot be solved count with ADD = inf and a reason
    code. PCK is scored on all peaks mapped back to original image pixels.
    Returns the report and per-image rows.
    """
    chain = dataset.chain
    size = net.cfg.image_size
    rows, samples, all_err = [], [], []
    failures: dict[str, int] = {}
    joint_err = []
    for idx in batches(np.arange(len(dataset)), batch_size):
        items = []
        for i in idx:
            rec = dataset.records[int(i)]
            occ = None if occluders is None else occluders.get(rec.image_id)
            items.append(prepare(dataset, int(i), size, occluder=occ))
        phi, _, pos, conf = predict(net, np.stack([it.image for it in items]))
        for b, i in enumerate(idx):
            rec, it = dataset.records[int(i)], items[b]
            joints = complete_joints(chain, normalizer.denormalize(phi[b]))
            raw_kp = it.transform.inverse(pos[b])
            errs = keypoint_errors(list(raw_kp), list(rec.gt_keypoints_2d))
            all_err.append(errs)
            if rec.gt_joints:
                joint_err.append(np.abs(joints[: chain.n - 1] - np.asarray(rec.gt_joints[: chain.n - 1])))
            ids = select_keypoints(pos[b], conf[b], options.filtering, options.epsilon0, options.epsilon_step, options.min_keypoints)
            pts = forward_kinematics(chain, joints)
            row = {"image_id": rec.image_id, "keypoints_used": len(ids)}
            try:
                pose = solve_pnp(pts[ids], raw_kp[ids], it.intrinsics)
                sample = add(pose, pts, rec.gt_pose.apply(forward_kinematics(chain, rec.gt_joints)), rec.image_id)
            except NumericalError as exc:
                reason = type(exc).__name__
                failures[reason] = failures.get(reason, 0) + 1
                sample = AddSample(float("inf"), rec.image_id)
                row["failure"] = reason
            samples.append(sample)
            row["add_m"] = sample.value
            row["pck_flags"] = [int(np.all(errs <= t)) if errs.size else "" for t in options.pck_thresholds]
            rows.append(row)
    errors = np.concatenate(all_err) if all_err else np.zeros(0)
    pck = {t: float(np.mean(errors <= t)) if errors.size else 0.0 for t in options.pck_thresholds}
    extra = {"keypoint_count": int(errors.size), "filtering": options.filtering}
    if joint_err:
        extra["joint_mae_deg"] = [float(v) for v in np.rad2deg(np.mean(joint_err, axis=0))]
    report = EvalReport(
        auc_of_add(samples, options.auc_max),
        mean_add(samples),
        pck,
        len(samples),
        sum(failures.values()),
        options.auc_max,
        failures=failures,
        extra=extra,
    )
    return report, rows


# --------------------------------------------------------------------------
# Occlusion benchmark
# --------------------------------------------------------------------------


def make_occlusions(dataset: Dataset, ratio: float, seed: int, shape: str = "rect") -> dict[str, Occluder]:
    """One occluder per image covering ``ratio`` of its RoI, seeded per image."""
    out = {}
    for i, rec in enumerate(dataset.records):
        rng = np.random.default_rng([seed, OCCLUSION_STREAM, i, int(round(ratio * 1000))])
        size = (rec.intrinsics.height, rec.intrinsics.width)
        try:
            out[rec.image_id] = generate_occlusion(list(rec.gt_keypoints_2d), rec.bbox, ratio, shape, rng, size)
        except InfeasiblePlacement:
            continue
    return out


def save_occlusions(path, occluders: dict[str, Occluder]) -> None:
    payload = {k: v.to_dict() for k, v in sorted(occluders.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_occlusions(path) -> dict[str, Occluder]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read occlusion manifest {path}: {exc}") from exc
    return {k: Occluder.from_dict(v) for k, v in raw.items()}


def occlusion_sweep(
    dataset: Dataset,
    net: PoseNet,
    normalizer: JointNormalizer,
    ratios=(0.0, 0.1, 0.2, 0.3, 0.4),
    seed: int = 0,
    options: EvalOptions = EvalOptions(),
    shape: str = "rect",
) -> list[dict]:
    """AUC, mean ADD and failures at each occlusion ratio (0 means no occluder)."""
    out = []
    for r in ratios:
        occ = None if r == 0 else make_occlusions(dataset, r, seed, shape)
        report, _ = run_eval(dataset, net, normalizer, options, occ)
        out.append({"ratio": float(r), "auc": report.auc, "mean_add_m": report.mean_add, "failures": report.failure_count})
    return out


def relative_drop(sweep: list[dict]) -> float:
    """Fractional AUC loss from the first to the last ratio of a sweep."""
    a0, a1 = sweep[0]["auc"], sweep[-1]["auc"]
    return (a0 - a1) / a0 if a0 > 0 else float("nan")


def save_eval(out_dir, report: EvalReport, rows, thresholds) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    write_sample_csv(out / "samples.csv", rows, thresholds)
