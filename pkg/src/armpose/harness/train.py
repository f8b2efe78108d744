"""Pre-training, supervised fine-tuning and self-supervised sim-to-real loops."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, NumericalError
from ..heatmap import filter_keypoints, Keypoint2D, peak_arrays
from ..kinematics import complete_joints
from ..losses import JointNormalizer, curriculum_weight, focal_loss_batch, joint_mse, pretrain_l1_batch, ssl_reprojection
from ..masking import jitter_lambda, sample_joint_masks, sample_random_mask
from ..refnet.checkpoint import dump_bytes, load_checkpoint, parse_bytes
from ..refnet.ema import EmaState, ema_update, momentum_schedule
from ..refnet.model import Encoder, PoseNet
from ..refnet.optim import AdamW
from .config import RunConfig, save_config
from .pipeline import SampleCache, batches, grid_for, target_heatmaps, to_patches
from .scene import Dataset

log = logging.getLogger(__name__)

PRETRAIN_STREAM, FINETUNE_STREAM, SIM2REAL_STREAM = 1, 2, 3


@dataclass
class RunManifest:
    stage: str
    config: dict
    seeds: dict
    dataset: dict
    normalizer: dict | None = None
    schedule: list = field(default_factory=list)
    history: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "config": self.config,
            "seeds": self.seeds,
            "dataset": self.dataset,
            "normalizer": self.normalizer,
            "schedule": self.schedule,
            "history": self.history,
            "checkpoints": self.checkpoints,
            "notes": self.notes,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


@dataclass
class TrainedModel:
    net: PoseNet
    normalizer: JointNormalizer | None
    manifest: RunManifest
    target: Encoder | None = None


def dataset_fingerprint(ds: Dataset) -> dict:
    digest = hashlib.sha256((ds.root / "annotations.jsonl").read_bytes()).hexdigest()
    return {"annotations_sha256": digest, "count": len(ds), "chain": ds.chain.name}


def cosine_lr(step: int, total: int, lr: float, lr_final: float) -> float:
    if total <= 1:
        return lr
    return lr_final + 0.5 * (lr - lr_final) * (1.0 + math.cos(math.pi * step / (total - 1)))


def _order(seed: int, stream: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stream, epoch]).permutation(n)


def _save(out_dir, name: str, layer, cfg, extra: dict, manifest: RunManifest) -> bytes:
    blob = dump_bytes(layer, cfg, extra)
    if out_dir is not None:
        Path(out_dir, name).write_bytes(blob)
    manifest.checkpoints[name] = hashlib.sha256(blob).hexdigest()
    return blob


def _finish(out_dir, cfg: RunConfig, manifest: RunManifest) -> None:
    if out_dir is None:
        return
    save_config(cfg, Path(out_dir) / "config.json")
    manifest.save(Path(out_dir) / "manifest.json")


# --------------------------------------------------------------------------
# Embedding-predictive pre-training
# --------------------------------------------------------------------------


def run_pretrain(dataset: Dataset, cfg: RunConfig, out_dir=None, resample_masks: bool = True) -> TrainedModel:
    """Train encoder and predictor to predict EMA-target embeddings of joint-masked patches.

    Masks are drawn per sample from the stream ``(seed, index, epoch)``; with
    ``resample_masks=False`` each sample keeps one mask for the whole run.
    The heads are untouched.
    """
    sch = cfg.pretrain
    ncfg = cfg.net
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    net = PoseNet(ncfg, seed=cfg.seed)
    target = Encoder(ncfg, np.random.default_rng(0))
    target.load_state_dict(net.encoder.state_dict())
    ema = EmaState(net.encoder.flat(), sch.momentum_start)
    opt = AdamW(net, sch.lr, sch.weight_decay, lr_scale={"joint_head": 0.0, "keypoint_head": 0.0})
    cache = SampleCache(dataset, ncfg.image_size)
    grid = grid_for(ncfg)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / sch.batch_size)
    total = sch.epochs * steps_per_epoch
    manifest = RunManifest(
        "pretrain", cfg.to_dict(), {"run": cfg.seed, "init": cfg.seed, "stream": PRETRAIN_STREAM}, dataset_fingerprint(dataset)
    )
    step = 0
    for epoch in range(sch.epochs):
        per_sample = np.zeros(n)
        mom_first = momentum_schedule(step, total, sch.momentum_start)
        for idx in batches(_order(cfg.seed, PRETRAIN_STREAM, epoch, n), sch.batch_size):
            items = [cache.get(int(i)) for i in idx]
            masks = [
                sample_joint_masks(
                    grid,
                    [p for p in it.keypoints if p is not None],
                    sch.masks_per_image,
                    np.random.default_rng([cfg.seed, PRETRAIN_STREAM, int(i), epoch if resample_masks else 0]),
                )
                for i, it in zip(idx, items)
            ]
            patches = to_patches([it.image for it in items], ncfg)
            ctx = np.stack([m.context_flags for m in masks])
            vbar, _ = target.forward(patches)
            net.zero_grad()
            v, cache_embed = net.embed(patches, ctx)
            loss, grad = pretrain_l1_batch(v, vbar, ~ctx)
            diff = np.abs((v - vbar) * (~ctx)[..., None]).sum(axis=(1, 2)) / (~ctx).sum(axis=1)
            per_sample[idx] = diff
            net.embed_backward(grad, cache_embed)
            opt.lr = cosine_lr(step, total, sch.lr, sch.lr * 0.01)
            opt.step()
            m = momentum_schedule(step + 1, total, sch.momentum_start)
            ema = ema_update(ema, net.encoder.flat(), m)
            target.load_flat(ema.target_weights)
            step += 1
        epoch_loss = float(np.sum(per_sample) / n)
        manifest.history.append({"epoch": epoch, "loss": epoch_loss})
        manifest.schedule.append(
            {"epoch": epoch, "momentum_start": mom_first, "momentum_end": ema.momentum, "lr_end": opt.lr}
        )
        log.info("pretrain epoch %d loss %.5f", epoch, epoch_loss)
    _save(out_dir, "model.bin", net, ncfg, {"stage": "pretrain"}, manifest)
    _save(out_dir, "target.bin", target, ncfg, {"stage": "pretrain-target"}, manifest)
    _finish(out_dir, cfg, manifest)
    return TrainedModel(net, None, manifest, target)


# --------------------------------------------------------------------------
# Supervised fine-tuning
# --------------------------------------------------------------------------


def schedule_epoch(epoch: int, stretch: float) -> int:
    """Schedule epoch reached after ``epoch`` toy epochs."""
    return int(math.floor(epoch * stretch + 1e-9))


def run_finetune(dataset: Dataset, cfg: RunConfig, init: PoseNet | None = None, out_dir=None) -> TrainedModel:
    """Joint-angle MSE plus curriculum-weighted focal loss, with random masks and RoI jitter.

    ``init`` supplies pre-trained weights; without it (or with
    ``use_pretrained`` off) the network starts from its seeded init.
    """
    sch = cfg.finetune
    ncfg = cfg.net
    chain = dataset.chain
    if chain.k != ncfg.k or chain.n != ncfg.n:
        raise ConfigError(f"network predicts k={ncfg.k}, n={ncfg.n}; chain {chain.name} has k={chain.k}, n={chain.n}")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    net = PoseNet(ncfg, seed=cfg.seed)
    pretrained = init is not None and sch.use_pretrained
    if pretrained:
        # heads keep their fresh init; only the backbone is transferred
        state = net.state_dict()
        for name, value in init.state_dict().items():
            if name.startswith(("encoder.", "predictor.")):
                state[name][...] = value
    joints = np.array([r.gt_joints for r in dataset.records])[:, : ncfg.n_pred]
    normalizer = JointNormalizer.fit(joints)
    opt = AdamW(net, sch.lr, sch.weight_decay)
    cache = SampleCache(dataset, ncfg.image_size)
    grid = grid_for(ncfg)
    n = len(dataset)
    total = sch.epochs * math.ceil(n / sch.batch_size)
    manifest = RunManifest(
        "finetune",
        cfg.to_dict(),
        {"run": cfg.seed, "init": cfg.seed, "stream": FINETUNE_STREAM},
        dataset_fingerprint(dataset),
        normalizer.to_dict(),
        notes={"pretrained": pretrained},
    )
    step = 0
    for epoch in range(sch.epochs):
        t_sched = schedule_epoch(epoch, sch.schedule_stretch)
        alpha = curriculum_weight(t_sched)
        lam = jitter_lambda(t_sched) * sch.jitter_scale
        sums = {"joint": 0.0, "keypoint": 0.0, "total": 0.0}
        n_batches = 0
        for idx in batches(_order(cfg.seed, FINETUNE_STREAM, epoch, n), sch.batch_size):
            items, masks = [], []
            for i in idx:
                rng = np.random.default_rng([cfg.seed, FINETUNE_STREAM, int(i), epoch])
                items.append(cache.jittered(int(i), t_sched, rng, sch.jitter_scale))
                masks.append(sample_random_mask(grid, sch.mask_fraction, rng))
            patches = to_patches([it.image for it in items], ncfg)
            ctx = np.stack([m.context_flags for m in masks])
            gt_heat = np.stack([target_heatmaps(it.keypoints, ncfg.image_size, sch.heatmap_sigma) for it in items])
            net.zero_grad()
            phi, heat, fcache = net.forward(patches, ctx)
            l_joint, g_joint = joint_mse(phi, joints[idx], normalizer)
            l_kp, g_kp = focal_loss_batch(heat, gt_heat)
            net.backward(g_joint.astype(phi.dtype), (alpha * g_kp).astype(heat.dtype), fcache)
            opt.lr = cosine_lr(step, total, sch.lr, sch.lr_final)
            opt.step()
            step += 1
            sums["joint"] += l_joint
            sums["keypoint"] += l_kp
            sums["total"] += l_joint + alpha * l_kp
            n_batches += 1
        row = {"epoch": epoch, **{f"{k}_loss": v / n_batches for k, v in sums.items()}}
        manifest.history.append(row)
        manifest.schedule.append({"epoch": epoch, "schedule_epoch": t_sched, "alpha": alpha, "lambda_px": lam, "lr_end": opt.lr})
        log.info("finetune epoch %d joint %.4f kp %.4f alpha %g", epoch, row["joint_loss"], row["keypoint_loss"], alpha)
    extra = {"stage": "finetune", "normalizer": normalizer.to_dict(), "chain": chain.to_dict()}
    _save(out_dir, "model.bin", net, ncfg, extra, manifest)
    _finish(out_dir, cfg, manifest)
    return TrainedModel(net, normalizer, manifest)


# --------------------------------------------------------------------------
# Inference shared by evaluation and sim-to-real
# --------------------------------------------------------------------------


def predict(net: PoseNet, images: np.ndarray):
    """Normalized joint outputs ``(B, n-1)``, heatmaps, peak positions ``(B, k, 2)`` and confidences."""
    phi, heat, _ = net.forward(to_patches(images, net.cfg))
    pos, conf = peak_arrays(heat)
    return phi, heat, pos, conf


def select_keypoints(pos: np.ndarray, conf: np.ndarray, filtering: bool, epsilon0=0.5, step=0.025, min_count=4):
    """Ids of the keypoints handed to the pose solver."""
    if not filtering:
        return np.arange(len(conf))
    kps = [Keypoint2D((float(p[0]), float(p[1])), float(c), j) for j, (p, c) in enumerate(zip(pos, conf))]
    return np.array([kp.index for kp in filter_keypoints(kps, epsilon0, step, min_count)], dtype=int)


# --------------------------------------------------------------------------
# Self-supervised sim-to-real
# --------------------------------------------------------------------------


def ssl_terms(net: PoseNet, normalizer: JointNormalizer, chain, items, eval_cfg):
    """Per-sample reprojection losses and the gradient w.r.t. the normalized joint outputs.

    Samples whose keypoints cannot support a pose solve are skipped and counted.
    """
    images = np.stack([it.image for it in items])
    patches = to_patches(images, net.cfg)
    phi, heat, fcache = net.forward(patches)
    pos, conf = peak_arrays(heat)
    values = np.full(len(items), np.nan)
    dphi = np.zeros((len(items), phi.shape[1]))
    skipped = {}
    for b, it in enumerate(items):
        ids = select_keypoints(pos[b], conf[b], eval_cfg.filtering, eval_cfg.epsilon0, eval_cfg.epsilon_step, eval_cfg.min_keypoints)
        joints = complete_joints(chain, normalizer.denormalize(phi[b]))
        try:
            value, grad, _ = ssl_reprojection(it.transform.inverse(pos[b, ids]), joints, chain, it.intrinsics, ids)
        except NumericalError as exc:
            skipped[type(exc).__name__] = skipped.get(type(exc).__name__, 0) + 1
            continue
        values[b] = value
        dphi[b] = grad[: phi.shape[1]] * normalizer.std
    return values, dphi, fcache, skipped


def run_sim2real(dataset: Dataset, cfg: RunConfig, model: TrainedModel, out_dir=None) -> TrainedModel:
    """Adapt to unlabeled images by minimizing the self-supervised reprojection loss.

    Keypoints come from heatmap peaks and carry no gradient; the pose is
    re-solved per sample. Per-group learning-rate scales come from the
    schedule (keypoint head at 0 by default). ``history[0]`` is the loss of
    the incoming model, ``history[e]`` the loss after epoch ``e``.
    """
    sch = cfg.sim2real
    if model.normalizer is None:
        raise NumericalError("sim-to-real needs a fine-tuned model with a joint normalizer")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    net = PoseNet(model.net.cfg, seed=cfg.seed)
    net.load_state_dict(model.net.state_dict())
    chain = dataset.chain
    cache = SampleCache(dataset, net.cfg.image_size)
    n = len(dataset)
    opt = AdamW(net, sch.lr, 0.0, lr_scale=sch.lr_scale)
    manifest = RunManifest(
        "sim2real",
        cfg.to_dict(),
        {"run": cfg.seed, "stream": SIM2REAL_STREAM},
        dataset_fingerprint(dataset),
        model.normalizer.to_dict(),
    )

    def measure() -> tuple[float, dict]:
        vals, skipped = [], {}
        for idx in batches(np.arange(n), 64):
            v, _, _, sk = ssl_terms(net, model.normalizer, chain, [cache.get(int(i)) for i in idx], cfg.eval)
            vals.append(v)
            for key, c in sk.items():
                skipped[key] = skipped.get(key, 0) + c
        allv = np.concatenate(vals)
        return float(np.nanmean(allv)) if np.isfinite(allv).any() else float("nan"), skipped

    loss0, skipped0 = measure()
    manifest.history.append({"epoch": 0, "ssl_loss": loss0, "skipped": skipped0})
    total = sch.epochs * math.ceil(n / sch.batch_size)
    step = 0
    for epoch in range(1, sch.epochs + 1):
        for idx in batches(_order(cfg.seed, SIM2REAL_STREAM, epoch, n), sch.batch_size):
            items = [cache.get(int(i)) for i in idx]
            net.zero_grad()
            values, dphi, fcache, _ = ssl_terms(net, model.normalizer, chain, items, cfg.eval)
            used = np.isfinite(values)
            if not used.any():
                continue
            dphi = dphi / used.sum()
            s = net.cfg.image_size
            no_heat_grad = np.zeros((len(items), s, s, net.cfg.k), net.cfg.np_dtype)
            net.backward(dphi.astype(net.cfg.np_dtype), no_heat_grad, fcache)
            opt.lr = cosine_lr(step, total, sch.lr, sch.lr * 0.1)
            opt.step()
            step += 1
        loss, skipped = measure()
        manifest.history.append({"epoch": epoch, "ssl_loss": loss, "skipped": skipped})
        log.info("sim2real epoch %d ssl %.4f", epoch, loss)
    extra = {"stage": "sim2real", "normalizer": model.normalizer.to_dict(), "chain": chain.to_dict()}
    _save(out_dir, "model.bin", net, net.cfg, extra, manifest)
    _finish(out_dir, cfg, manifest)
    return TrainedModel(net, model.normalizer, manifest)


def load_trained(run_dir) -> TrainedModel:
    """Model, normalizer and manifest from a run directory written by one of the loops."""
    run_dir = Path(run_dir)
    net, extra = load_checkpoint(run_dir / "model.bin")
    normalizer = JointNormalizer.from_dict(extra["normalizer"]) if "normalizer" in extra else None
    manifest_path = run_dir / "manifest.json"
    manifest = RunManifest.load(manifest_path) if manifest_path.exists() else RunManifest(extra.get("stage", "?"), {}, {}, {})
    target = None
    if (run_dir / "target.bin").exists():
        _, state, _ = parse_bytes((run_dir / "target.bin").read_bytes())
        target = Encoder(net.cfg, np.random.default_rng(0))
        target.load_state_dict(state)
    return TrainedModel(net, normalizer, manifest, target)
