"""Minimal layers with explicit backward passes.

``forward`` returns ``(output, cache)`` and ``backward(dout, cache)`` returns
the input gradient while accumulating parameter gradients into ``grads``.
Keeping the cache outside the layer lets one layer be applied several times
in a single graph (the joint head reuses its MLP).
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

GELU_C = np.sqrt(2.0 / np.pi)


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Layer] = {}

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self.children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def zero_grad(self) -> None:
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p, _ in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ValueError(f"{name}: shape {src.shape} != {p.shape}")
            p[...] = src

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p, _ in self.named_parameters()]).astype(np.float64)

    def load_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for _, p, _ in self.named_parameters():
            p[...] = vec[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, layer needs {offset}")

    @property
    def num_params(self) -> int:
        return sum(p.size for _, p, _ in self.named_parameters())


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.add_param("W", uniform_init(rng, (n_in, n_out), n_in, dtype))
        self.add_param("b", uniform_init(rng, (n_out,), n_in, dtype))

    def forward(self, x):
        return x @ self.params["W"] + self.params["b"], x

    def backward(self, dy, x):
        n_in, n_out = self.params["W"].shape
        self.grads["W"] += x.reshape(-1, n_in).T @ dy.reshape(-1, n_out)
        self.grads["b"] += dy.reshape(-1, n_out).sum(axis=0)
        return dy @ self.params["W"].T


class LayerNorm(Layer):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.add_param("beta", np.zeros(dim, dtype=dtype))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        return self.params["gamma"] * xhat + self.params["beta"], (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        d = xhat.shape[-1]
        self.grads["gamma"] += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.grads["beta"] += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.params["gamma"]
        return inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


def gelu(x):
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner)


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Attention(Layer):
    """Single-head scaled dot-product self-attention."""

    def __init__(self, dim: int, rng, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.qkv = self.add_child("qkv", Linear(dim, 3 * dim, rng, dtype))
        self.proj = self.add_child("proj", Linear(dim, dim, rng, dtype))

    def forward(self, x, key_mask=None):
        qkv, c_qkv = self.qkv.forward(x)
        q, k, v = np.split(qkv, 3, axis=-1)
        scale = 1.0 / np.sqrt(self.dim)
        scores = (q @ np.swapaxes(k, -1, -2)) * scale
        if key_mask is not None:
            scores = np.where(key_mask[:, None, :], scores, -1e30)
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        attn = e / e.sum(axis=-1, keepdims=True)
        out = attn @ v
        y, c_proj = self.proj.forward(out)
        return y, (c_qkv, q, k, v, attn, c_proj, scale)

    def backward(self, dy, cache):
        c_qkv, q, k, v, attn, c_proj, scale = cache
        dout = self.proj.backward(dy, c_proj)
        dattn = dout @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(attn, -1, -2) @ dout
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (np.swapaxes(dscores, -1, -2) @ q) * scale
        return self.qkv.backward(np.concatenate([dq, dk, dv], axis=-1), c_qkv)


class Block(Layer):
    """Pre-norm transformer block: attention and a GELU feed-forward, both residual."""

    def __init__(self, dim: int, hidden: int, rng, dtype=np.float64):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(dim, dtype))
        self.attn = self.add_child("attn", Attention(dim, rng, dtype))
        self.ln2 = self.add_child("ln2", LayerNorm(dim, dtype))
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng, dtype))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng, dtype))

    def forward(self, x, key_mask=None):
        h, c1 = self.ln1.forward(x)
        a, c2 = self.attn.forward(h, key_mask)
        x1 = x + a
        h2, c3 = self.ln2.forward(x1)
        f1, c4 = self.fc1.forward(h2)
        g, c5 = gelu(f1)
        f2, c6 = self.fc2.forward(g)
        return x1 + f2, (c1, c2, c3, c4, c5, c6)

    def backward(self, dy, cache):
        c1, c2, c3, c4, c5, c6 = cache
        dg = self.fc2.backward(dy, c6)
        dh2 = self.fc1.backward(gelu_backward(dg, c5), c4)
        dx1 = dy + self.ln2.backward(dh2, c3)
        dh = self.attn.backward(dx1, c2)
        return dx1 + self.ln1.backward(dh, c1)


class TransposeConv2x(Layer):
    """Transpose convolution, kernel 4, stride 2, padding 1, NHWC layout.

    Output pixel ``y`` receives input ``i`` through tap ``y - 2 i + 1``, so
    the spatial size exactly doubles.
    """

    def __init__(self, c_in: int, c_out: int, rng, dtype=np.float64):
        super().__init__()
        # every output pixel sums 2x2 taps over c_in channels
        self.add_param("W", uniform_init(rng, (4, 4, c_in, c_out), 4 * c_in, dtype))
        self.add_param("b", uniform_init(rng, (c_out,), 4 * c_in, dtype))

    def forward(self, x):
        b, h, w, c_in = x.shape
        wt = self.params["W"]
        c_out = wt.shape[-1]
        taps = (x.reshape(-1, c_in) @ wt.transpose(2, 0, 1, 3).reshape(c_in, 16 * c_out))
        taps = taps.reshape(b, h, w, 4, 4, c_out)
        buf = np.zeros((b, 2 * h + 2, 2 * w + 2, c_out), dtype=taps.dtype)
        for ky in range(4):
            for kx in range(4):
                buf[:, ky : ky + 2 * h : 2, kx : kx + 2 * w : 2] += taps[:, :, :, ky, kx]
        return buf[:, 1 : 2 * h + 1, 1 : 2 * w + 1] + self.params["b"], x

    def backward(self, dy, x):
        b, h, w, c_in = x.shape
        wt = self.params["W"]
        c_out = wt.shape[-1]
        gbuf = np.zeros((b, 2 * h + 2, 2 * w + 2, c_out), dtype=dy.dtype)
        gbuf[:, 1 : 2 * h + 1, 1 : 2 * w + 1] = dy
        g = np.empty((b, h, w, 4, 4, c_out), dtype=dy.dtype)
        for ky in range(4):
            for kx in range(4):
                g[:, :, :, ky, kx] = gbuf[:, ky : ky + 2 * h : 2, kx : kx + 2 * w : 2]
        g = g.reshape(-1, 16 * c_out)
        xf = x.reshape(-1, c_in)
        self.grads["W"] += (xf.T @ g).reshape(c_in, 4, 4, c_out).transpose(1, 2, 0, 3)
        self.grads["b"] += dy.reshape(-1, c_out).sum(axis=0)
        return (g @ wt.transpose(2, 0, 1, 3).reshape(c_in, 16 * c_out).T).reshape(b, h, w, c_in)
