"""Encoder, predictor, joint head and keypoint head.

A scaled-down version of the pose network: a patch transformer encoder,
a transformer predictor that fills masked patches with learned mask tokens,
an iterative joint-angle MLP and a transpose-convolution heatmap decoder.

Masked encoder tokens are never used as attention keys, which makes the
context outputs identical to running the encoder on the context patches
alone while keeping batches rectangular.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, NonSquarePatchCount, ShapeMismatch
from ..masking import PatchMask
from .layers import Block, Layer, LayerNorm, Linear, TransposeConv2x, gelu, gelu_backward, relu, relu_backward, sigmoid

HEATMAP_PRIOR = 0.01


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 1
    embed_dim: int = 32
    predictor_dim: int = 16
    encoder_blocks: int = 2
    predictor_blocks: int = 2
    mlp_ratio: int = 2
    decoder_channels: tuple[int, ...] = (32, 16, 16)
    k: int = 4
    n: int = 3
    refine_steps: int = 4
    joint_hidden: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.grid_size * 2 ** len(self.decoder_channels) != self.image_size:
            raise ConfigError(
                f"{len(self.decoder_channels)} upsampling stages take a {self.grid_size}x{self.grid_size} grid "
                f"to {self.grid_size * 2 ** len(self.decoder_channels)}, not {self.image_size}"
            )
        if self.refine_steps < 1:
            raise ConfigError("refine_steps must be at least 1")
        if self.embed_dim % 4 or self.predictor_dim % 4:
            raise ConfigError("embedding sizes must be divisible by 4 for 2D sin-cos positions")
        if self.n < 2 or self.k < 1:
            raise ConfigError("need at least two joints and one keypoint")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def M(self) -> int:
        return self.grid_size**2

    @property
    def n_pred(self) -> int:
        return self.n - 1

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network settings: {sorted(unknown)}")
        return cls(**d)


def sincos_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2D sin-cos position table, shape ``(grid * grid, dim)``."""

    def one_axis(d, pos):
        omega = 1.0 / 10000 ** (np.arange(d // 2) / (d / 2.0))
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    rows, cols = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    return np.concatenate([one_axis(dim // 2, rows.ravel()), one_axis(dim // 2, cols.ravel())], axis=1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, S, S)`` or ``(B, S, S, C)`` images to ``(B, M, patch*patch*C)``."""
    if images.ndim == 3:
        images = images[..., None]
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


class Encoder(Layer):
    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.cfg = cfg
        self.embed = self.add_child("patch_embed", Linear(cfg.patch_size**2 * cfg.in_channels, cfg.embed_dim, rng, dt))
        self.add_param("pos", sincos_2d(cfg.embed_dim, cfg.grid_size).astype(dt))
        self.blocks = [
            self.add_child(f"block{i}", Block(cfg.embed_dim, cfg.mlp_ratio * cfg.embed_dim, rng, dt))
            for i in range(cfg.encoder_blocks)
        ]
        self.norm = self.add_child("norm", LayerNorm(cfg.embed_dim, dt))

    def forward(self, patches, context=None):
        """Embeddings ``(B, M, d)``; rows outside ``context`` are zero."""
        if patches.shape[1:] != (self.cfg.M, self.embed.params["W"].shape[0]):
            raise ShapeMismatch(f"patch tensor {patches.shape} does not match the network config")
        x, c_embed = self.embed.forward(patches)
        x = x + self.params["pos"]
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x, context)
            caches.append(c)
        out, c_norm = self.norm.forward(x)
        if context is not None:
            out = out * context[..., None]
        return out, (c_embed, caches, c_norm, context)

    def backward(self, dy, cache):
        c_embed, caches, c_norm, context = cache
        if context is not None:
            dy = dy * context[..., None]
        dx = self.norm.backward(dy, c_norm)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(dx, c)
        self.grads["pos"] += dx.sum(axis=0)
        return self.embed.backward(dx, c_embed)


class Predictor(Layer):
    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.cfg = cfg
        self.inp = self.add_child("in_proj", Linear(cfg.embed_dim, cfg.predictor_dim, rng, dt))
        self.add_param("mask_token", rng.uniform(-0.02, 0.02, size=cfg.predictor_dim).astype(dt))
        self.add_param("pos", sincos_2d(cfg.predictor_dim, cfg.grid_size).astype(dt))
        self.blocks = [
            self.add_child(f"block{i}", Block(cfg.predictor_dim, cfg.mlp_ratio * cfg.predictor_dim, rng, dt))
            for i in range(cfg.predictor_blocks)
        ]
        self.norm = self.add_child("norm", LayerNorm(cfg.predictor_dim, dt))
        self.out = self.add_child("out_proj", Linear(cfg.predictor_dim, cfg.embed_dim, rng, dt))

    def forward(self, w, context=None):
        h, c_in = self.inp.forward(w)
        if context is not None:
            h = np.where(context[..., None], h, self.params["mask_token"])
        x = h + self.params["pos"]
        caches = []
        for blk in self.blocks:
            x, c = blk.forward(x)
            caches.append(c)
        x, c_norm = self.norm.forward(x)
        v, c_out = self.out.forward(x)
        return v, (c_in, caches, c_norm, c_out, context)

    def backward(self, dv, cache):
        c_in, caches, c_norm, c_out, context = cache
        dx = self.out.backward(dv, c_out)
        dx = self.norm.backward(dx, c_norm)
        for blk, c in zip(reversed(self.blocks), reversed(caches)):
            dx = blk.backward(dx, c)
        self.grads["pos"] += dx.sum(axis=0)
        if context is not None:
            self.grads["mask_token"] += (dx * ~context[..., None]).reshape(-1, dx.shape[-1]).sum(axis=0)
            dx = dx * context[..., None]
        return self.inp.backward(dx, c_in)


class JointHead(Layer):
    """Global average pool, then ``G`` residual refinements with one shared MLP."""

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.steps = cfg.refine_steps
        self.n_out = cfg.n_pred
        self.fc1 = self.add_child("fc1", Linear(cfg.embed_dim + self.n_out, cfg.joint_hidden, rng, dt))
        self.fc2 = self.add_child("fc2", Linear(cfg.joint_hidden, self.n_out, rng, dt))

    def mlp(self, x):
        h, c1 = self.fc1.forward(x)
        a, c2 = gelu(h)
        y, c3 = self.fc2.forward(a)
        return y, (c1, c2, c3)

    def mlp_backward(self, dy, cache):
        c1, c2, c3 = cache
        return self.fc1.backward(gelu_backward(self.fc2.backward(dy, c3), c2), c1)

    def forward_pooled(self, vg):
        phi = np.zeros((vg.shape[0], self.n_out), dtype=vg.dtype)
        caches = []
        for _ in range(self.steps):
            delta, c = self.mlp(np.concatenate([vg, phi], axis=1))
            caches.append(c)
            phi = phi + delta
        return phi, caches

    def backward_pooled(self, dphi, caches):
        d = self.fc1.params["W"].shape[0] - self.n_out
        dvg = 0.0
        for c in reversed(caches):
            dinp = self.mlp_backward(dphi, c)
            dvg = dvg + dinp[:, :d]
            dphi = dphi + dinp[:, d:]
        return dvg

    def forward(self, v):
        vg = v.mean(axis=1)
        phi, caches = self.forward_pooled(vg)
        return phi, (caches, v.shape)

    def backward(self, dphi, cache):
        caches, shape = cache
        dvg = self.backward_pooled(dphi, caches)
        return np.broadcast_to(dvg[:, None, :] / shape[1], shape).copy()


class KeypointHead(Layer):
    """Reshape patch embeddings to a grid, upsample x2 per stage, 1x1 to k maps, sigmoid."""

    def __init__(self, cfg: NetConfig, rng):
        super().__init__()
        dt = cfg.np_dtype
        self.grid = cfg.grid_size
        chans = [cfg.embed_dim, *cfg.decoder_channels]
        self.stages = [
            self.add_child(f"up{i}", TransposeConv2x(chans[i], chans[i + 1], rng, dt))
            for i in range(len(cfg.decoder_channels))
        ]
        self.head = self.add_child("linear", Linear(chans[-1], cfg.k, rng, dt))
        self.head.params["b"][...] = np.log(HEATMAP_PRIOR / (1 - HEATMAP_PRIOR))

    @staticmethod
    def layer_shapes(cfg: NetConfig) -> list[tuple[str, int, int]]:
        """(layer, spatial size, channels) for each decoder stage."""
        m = int(round(np.sqrt(cfg.M)))
        if m * m != cfg.M:
            raise NonSquarePatchCount(f"M={cfg.M} is not a perfect square")
        shapes = [("input", m, cfg.embed_dim)]
        size = m
        for i, c in enumerate(cfg.decoder_channels):
            size *= 2
            shapes.append((f"upsample{i + 1}", size, c))
        shapes.append(("linear", size, cfg.k))
        return shapes

    def forward(self, v):
        b, m_tokens, d = v.shape
        m = int(round(np.sqrt(m_tokens)))
        if m * m != m_tokens:
            raise NonSquarePatchCount(f"{m_tokens} patch embeddings cannot form a square grid")
        x = v.reshape(b, m, m, d)
        caches = []
        for stage in self.stages:
            x, c_conv = stage.forward(x)
            x, c_relu = relu(x)
            caches.append((c_conv, c_relu))
        logits, c_head = self.head.forward(x)
        prob = sigmoid(logits)
        return prob, (caches, c_head, prob, v.shape)

    def backward(self, dprob, cache):
        caches, c_head, prob, shape = cache
        dx = self.head.backward(dprob * prob * (1.0 - prob), c_head)
        for stage, (c_conv, c_relu) in zip(reversed(self.stages), reversed(caches)):
            dx = stage.backward(relu_backward(dx, c_relu), c_conv)
        return dx.reshape(shape)


GROUPS = ("encoder", "predictor", "joint_head", "keypoint_head")


class PoseNet(Layer):
    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = self.add_child("encoder", Encoder(cfg, rng))
        self.predictor = self.add_child("predictor", Predictor(cfg, rng))
        self.joint_head = self.add_child("joint_head", JointHead(cfg, rng))
        self.keypoint_head = self.add_child("keypoint_head", KeypointHead(cfg, rng))

    def embed(self, patches, context=None):
        w, c_enc = self.encoder.forward(patches, context)
        v, c_pred = self.predictor.forward(w, context)
        return v, (c_enc, c_pred)

    def embed_backward(self, dv, cache):
        c_enc, c_pred = cache
        dw = self.predictor.backward(dv, c_pred)
        return self.encoder.backward(dw, c_enc)

    def forward(self, patches, context=None):
        """Joint predictions ``(B, n-1)`` in normalized space and heatmaps ``(B, S, S, k)``."""
        v, c_embed = self.embed(patches, context)
        phi, c_joint = self.joint_head.forward(v)
        heat, c_kp = self.keypoint_head.forward(v)
        return phi, heat, (c_embed, c_joint, c_kp)

    def backward(self, dphi, dheat, cache):
        c_embed, c_joint, c_kp = cache
        dv = self.joint_head.backward(dphi, c_joint) + self.keypoint_head.backward(dheat, c_kp)
        return self.embed_backward(dv, c_embed)


def new_target_encoder(net: PoseNet) -> Encoder:
    target = Encoder(net.cfg, np.random.default_rng(0))
    target.load_state_dict(net.encoder.state_dict())
    return target


# --------------------------------------------------------------------------
# Single-image helpers on index sets
# --------------------------------------------------------------------------


def encode(encoder: Encoder, patches: np.ndarray, mask: PatchMask) -> np.ndarray:
    """Context embeddings ``(L, d)`` in ``mask.context`` order for one image."""
    ctx = mask.context_flags[None]
    out, _ = encoder.forward(patches[None].astype(encoder.cfg.np_dtype), ctx)
    return out[0, list(mask.context)]


def predict_embeddings(predictor: Predictor, context: np.ndarray, mask: PatchMask, positions=None) -> np.ndarray:
    """All ``M`` patch embeddings from ``L`` context rows at patch ids ``positions``."""
    positions = list(mask.context) if positions is None else list(positions)
    if context.shape[0] != len(positions) or sorted(positions) != list(mask.context):
        raise ShapeMismatch(f"{context.shape[0]} context rows for {len(mask.context)} context patches")
    full = np.zeros((predictor.cfg.M, context.shape[1]), dtype=context.dtype)
    full[positions] = context
    v, _ = predictor.forward(full[None], mask.context_flags[None])
    return v[0]


def joint_head(head: JointHead, vg: np.ndarray) -> np.ndarray:
    """Refined normalized joint vector from one pooled ``d``-vector."""
    phi, _ = head.forward_pooled(np.asarray(vg)[None])
    return phi[0]
