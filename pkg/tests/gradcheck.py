"""Finite-difference helpers shared by the network gradient tests."""

import numpy as np

from armpose.heatmap import gaussian_heatmap
from armpose.losses import JointNormalizer, focal_loss_batch, joint_mse
from armpose.refnet import NetConfig, PoseNet, patchify

TINY = NetConfig(
    image_size=16,
    patch_size=4,
    embed_dim=8,
    predictor_dim=8,
    encoder_blocks=1,
    predictor_blocks=1,
    mlp_ratio=2,
    decoder_channels=(8, 4),
    k=2,
    n=3,
    refine_steps=3,
    joint_hidden=8,
    dtype="float64",
)


def close(analytic, numeric, rel=1e-3, floor=1e-7):
    """Relative error with an absolute floor for entries whose true gradient is zero."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.all(np.abs(analytic - numeric) <= rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor)


def toy_problem(rng, cfg=TINY, batch=2, masked=True):
    net = PoseNet(cfg, int(rng.integers(1 << 30)))
    # move every parameter off its initial value so no gradient vanishes by symmetry
    for _, p, _ in net.named_parameters():
        p += rng.normal(scale=0.05, size=p.shape)
    patches = patchify(rng.random((batch, cfg.image_size, cfg.image_size)), cfg.patch_size)
    context = None
    if masked:
        context = rng.random((batch, cfg.M)) > 0.3
        context[:, 0] = True
    s = cfg.image_size
    gt_heat = np.stack([gaussian_heatmap([tuple(rng.integers(0, s, 2)) for _ in range(cfg.k)], s, s, 1.5) for _ in range(batch)])
    gt_joints = rng.normal(size=(batch, cfg.n_pred))
    norm = JointNormalizer(np.zeros(cfg.n_pred), np.ones(cfg.n_pred))

    def loss():
        phi, heat, cache = net.forward(patches, context)
        lj, dphi = joint_mse(phi, gt_joints, norm)
        lk, dheat = focal_loss_batch(heat, gt_heat)
        return lj + lk, dphi, dheat, cache

    def grads():
        net.zero_grad()
        _, dphi, dheat, cache = loss()
        net.backward(dphi, dheat, cache)
        return np.concatenate([g.ravel() for _, _, g in net.named_parameters()])

    return net, loss, grads


def directional_check(net, loss, grads, rng, h=1e-5):
    """Compare <grad, d> with a central difference along a random unit direction."""
    g = grads()
    w = net.flat()
    d = rng.normal(size=w.size)
    d /= np.linalg.norm(d)
    net.load_flat(w + h * d)
    lp = loss()[0]
    net.load_flat(w - h * d)
    lm = loss()[0]
    net.load_flat(w)
    return float(g @ d), (lp - lm) / (2 * h)
