"""Small numpy networks with hand-written backward passes, plus Adam.

Layouts: dense inputs are (N, features); conv inputs are NHWC. Conv weights
are stored out x in x 3 x 3 and applied as cross-correlation with
reflect padding, so spatial size is preserved.
"""
from __future__ import annotations

import json
import math

import numpy as np

SCHEMA = 1


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------- elementwise

def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    """Gradient wrt logits given softmax output p and upstream gp (last axis)."""
    return p * (gp - (gp * p).sum(axis=-1, keepdims=True))


def softplus(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # log1p(exp(x)) overflows for large x; use x + log1p(exp(-x)) there
    return np.where(x > 30.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def l1_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean absolute error and its (sub)gradient wrt pred; sign(0) = 0."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def glorot(rng, fan_in, fan_out, shape) -> np.ndarray:
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


# ---------------------------------------------------------------- MLP

class Mlp:
    """Stack of dense layers; `acts[i]` is 'relu' or 'none'."""

    kind = "mlp"

    def __init__(self, dims, acts=None, seed: int = 0, init: str = "glorot"):
        dims = [int(d) for d in dims]
        if len(dims) < 2:
            raise ShapeError("an Mlp needs at least input and output dims")
        n = len(dims) - 1
        self.acts = list(acts) if acts is not None else ["relu"] * (n - 1) + ["none"]
        if len(self.acts) != n:
            raise ShapeError("one activation per layer")
        rng = np.random.default_rng(seed)
        self.W, self.b = [], []
        for i in range(n):
            if init == "zeros":
                w = np.zeros((dims[i + 1], dims[i]))
            else:
                w = glorot(rng, dims[i], dims[i + 1], (dims[i + 1], dims[i]))
            self.W.append(w)
            self.b.append(np.zeros(dims[i + 1]))
        self.grads = None
        self._cache = None

    @property
    def dims(self) -> list[int]:
        return [self.W[0].shape[1]] + [w.shape[0] for w in self.W]

    @property
    def input_dim(self) -> int:
        return self.W[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.W[-1].shape[0]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"Mlp expects {self.input_dim} inputs, got {x.shape[-1]}")
        cache = []
        h = x
        for w, b, act in zip(self.W, self.b, self.acts):
            cache.append(h)
            h = h @ w.T + b
            if act == "relu":
                h = np.maximum(h, 0.0)
        self._cache = (cache, h, squeeze)
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, gy) -> np.ndarray:
        """Back-propagate `gy`; stores parameter grads in `self.grads`, returns input grad."""
        cache, out, squeeze = self._cache
        g = np.asarray(gy, dtype=np.float64)
        if squeeze:
            g = g[None]
        grads = [None] * (2 * len(self.W))
        h_out = out
        for i in range(len(self.W) - 1, -1, -1):
            if self.acts[i] == "relu":
                g = g * (h_out > 0)
            x = cache[i]
            grads[2 * i] = g.T @ x
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.W[i]
            h_out = x
        self.grads = grads
        return g[0] if squeeze else g

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "kind": self.kind, "dims": self.dims,
                "layers": [{"w": w.tolist(), "b": b.tolist(), "act": a}
                           for w, b, a in zip(self.W, self.b, self.acts)]}

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        _check_schema(d, cls.kind)
        net = cls(d["dims"], [l["act"] for l in d["layers"]], init="zeros")
        net.W = [np.asarray(l["w"], dtype=np.float64) for l in d["layers"]]
        net.b = [np.asarray(l["b"], dtype=np.float64) for l in d["layers"]]
        return net


# ---------------------------------------------------------------- ConvNet

def _pad1(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")


def _unpad1(gp):
    g = gp[:, 1:-1].copy()
    g[:, 1] += gp[:, 0]
    g[:, -2] += gp[:, -1]
    out = g[:, :, 1:-1].copy()
    out[:, :, 1] += g[:, :, 0]
    out[:, :, -2] += g[:, :, -1]
    return out


def _im2col(x):
    n, h, w, c = x.shape
    p = _pad1(x)
    return np.concatenate([p[:, i:i + h, j:j + w, :] for i in range(3) for j in range(3)], axis=-1)


class ConvNet:
    """3x3 conv stack with ReLU between layers (none after the last)."""

    kind = "convnet"

    def __init__(self, channels=(3, 16, 16, 3), seed: int = 0, init: str = "glorot",
                 zero_last: bool = False):
        channels = [int(c) for c in channels]
        rng = np.random.default_rng(seed)
        self.W, self.b = [], []
        for i, (cin, cout) in enumerate(zip(channels, channels[1:])):
            if init == "zeros" or (zero_last and i == len(channels) - 2):
                w = np.zeros((cout, cin, 3, 3))
            else:
                w = glorot(rng, cin * 9, cout * 9, (cout, cin, 3, 3))
            self.W.append(w)
            self.b.append(np.zeros(cout))
        self.grads = None
        self._cache = None

    @property
    def channels(self) -> list[int]:
        return [self.W[0].shape[1]] + [w.shape[0] for w in self.W]

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.W, self.b) for p in pair]

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x)
        if x.dtype not in (np.float32, np.float64):
            x = x.astype(np.float64)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[-1] != self.channels[0]:
            raise ShapeError(f"ConvNet expects NHWC with {self.channels[0]} channels, got {x.shape}")
        if x.shape[1] < 2 or x.shape[2] < 2:
            raise ShapeError("spatial size must be at least 2x2 for reflect padding")
        dt = x.dtype
        cache = []
        h = x
        last = len(self.W) - 1
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            cols = _im2col(h)
            n, hh, ww, k = cols.shape
            wm = w.transpose(2, 3, 1, 0).reshape(k, -1).astype(dt, copy=False)
            out = (cols.reshape(-1, k) @ wm).reshape(n, hh, ww, -1) + b.astype(dt, copy=False)
            if i < last:
                out = np.maximum(out, 0)
            cache.append((cols, out))
            h = out
        self._cache = (cache, squeeze)
        return h[0] if squeeze else h

    __call__ = forward

    def backward(self, gy, input_grad: bool = True) -> np.ndarray | None:
        """Back-propagate `gy`; parameter grads land in `self.grads`.

        With input_grad=False the (unused) gradient wrt the network input is skipped.
        """
        cache, squeeze = self._cache
        g = np.asarray(gy)
        if squeeze:
            g = g[None]
        grads = [None] * (2 * len(self.W))
        last = len(self.W) - 1
        for i in range(last, -1, -1):
            cols, out = cache[i]
            if i < last:
                g = g * (out > 0)
            n, hh, ww, k = cols.shape
            cout = g.shape[-1]
            cin = k // 9
            g2 = g.reshape(-1, cout)
            dwm = cols.reshape(-1, k).T @ g2
            grads[2 * i] = dwm.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1).astype(np.float64)
            grads[2 * i + 1] = g2.sum(axis=0).astype(np.float64)
            if i == 0 and not input_grad:
                g = None
                break
            wm = self.W[i].transpose(2, 3, 1, 0).reshape(k, cout).astype(g.dtype, copy=False)
            dcols = (g2 @ wm.T).reshape(n, hh, ww, 9, cin)
            gp = np.zeros((n, hh + 2, ww + 2, cin), dtype=g.dtype)
            for t in range(9):
                a, c = divmod(t, 3)
                gp[:, a:a + hh, c:c + ww, :] += dcols[..., t, :]
            g = _unpad1(gp)
        self.grads = grads
        if g is None:
            return None
        return g[0] if squeeze else g

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "kind": self.kind, "dims": self.channels,
                "layers": [{"w": w.tolist(), "b": b.tolist(),
                            "act": "relu" if i < len(self.W) - 1 else "none"}
                           for i, (w, b) in enumerate(zip(self.W, self.b))]}

    @classmethod
    def from_dict(cls, d) -> "ConvNet":
        _check_schema(d, cls.kind)
        net = cls(d["dims"], init="zeros")
        net.W = [np.asarray(l["w"], dtype=np.float64) for l in d["layers"]]
        net.b = [np.asarray(l["b"], dtype=np.float64) for l in d["layers"]]
        return net


def _check_schema(d, kind):
    if d.get("schema") != SCHEMA:
        raise ValueError(f"unsupported weights schema {d.get('schema')!r}")
    if d.get("kind") != kind:
        raise ValueError(f"expected {kind} weights, got {d.get('kind')!r}")


def save_weights(net, path) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh)


def load_weights(path):
    with open(path) as fh:
        d = json.load(fh)
    return {"mlp": Mlp, "convnet": ConvNet}[d["kind"]].from_dict(d)


# ---------------------------------------------------------------- optimizers

class Adam:
    """Bias-corrected Adam updating a list of parameter arrays in place."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at step `total`."""
    if total <= 0:
        return base_lr
    t = min(max(step, 0), total)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total))
