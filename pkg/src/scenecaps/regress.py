"""Minimal trainable regression models on numpy.

Two architectures: a dense network with four weight layers and tanh hidden
units (semantic encoders/decoders), and a small convolutional encoder for
28x28 patches (primitive capsules).  Both expose forward, a backward pass
producing parameter gradients, minibatch gradient descent (momentum SGD or
bias-corrected adaptive moments, with an optional cosine step-size decay),
central-finite-difference gradient verification, and a versioned binary
weight format with a JSON sidecar.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SCPW"
VERSION = 1


def clamp01(x):
    return np.clip(x, 0.0, 1.0)


def _init(rng, shape, fan_in, dtype, gain: float = 1.0):
    bound = gain / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# uniform bound sqrt(6/fan) for the ReLU conv stack; the tanh dense layers
# keep the narrower 1/sqrt(fan).  Narrow conv weights attenuate activations
# roughly 2x per stage, and the resulting gradient imbalance between head
# and stack stalls feature learning long before the error bound.
RELU_GAIN = float(np.sqrt(6.0))


class DenseModel:
    """Four weight layers, tanh hidden activations, linear output.

    predict() additionally clamps to [0, 1]; training uses the raw linear
    output so gradients stay honest.
    """

    kind = "dense"

    def __init__(self, sizes, seed: int = 0, dtype=np.float64):
        sizes = [int(s) for s in sizes]
        if len(sizes) != 5:
            raise ValueError("dense model needs [in, h1, h2, h3, out]")
        self.sizes = sizes
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.W = [_init(rng, (sizes[i], sizes[i + 1]), sizes[i], self.dtype)
                  for i in range(4)]
        self.b = [np.zeros(sizes[i + 1], dtype=self.dtype) for i in range(4)]
        self._cache = None

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def params(self):
        out = []
        for i in range(4):
            out.append((f"W{i}", self.W[i]))
            out.append((f"b{i}", self.b[i]))
        return out

    def forward(self, x, train: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input dim {self.sizes[0]}, got {x.shape[1]}")
        hs = [x]
        h = x
        for i in range(3):
            h = np.tanh(h @ self.W[i] + self.b[i])
            hs.append(h)
        y = h @ self.W[3] + self.b[3]
        if train:
            self._cache = hs
        return y[0] if squeeze else y

    def predict(self, x):
        return clamp01(self.forward(x))

    def backward(self, dy):
        """Parameter gradients for the last train-mode forward; dy matches its output."""
        if self._cache is None:
            raise RuntimeError("call forward(train=True) first")
        hs = self._cache
        dy = np.asarray(dy, dtype=self.dtype)
        if dy.ndim == 1:
            dy = dy[None, :]
        grads = {}
        grads["W3"] = hs[3].T @ dy
        grads["b3"] = dy.sum(axis=0)
        d = dy @ self.W[3].T
        for i in (2, 1, 0):
            d = d * (1.0 - hs[i + 1] ** 2)
            grads[f"W{i}"] = hs[i].T @ d
            grads[f"b{i}"] = d.sum(axis=0)
            if i > 0:
                d = d @ self.W[i].T
        return grads

    def arch_dims(self):
        return list(self.sizes)

    def meta(self):
        return {"kind": self.kind, "sizes": self.sizes}


def _im2col(x, k, pad):
    """(B,C,H,W) -> (B, H*W, C*k*k) for stride-1 same convolution."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    # (B,C,H,W,k,k) -> (B,H,W,C,k,k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, h * w, c * k * k)


class ConvModel:
    """Conv encoder for square patches: three 3x3 conv stages with 2x2 max
    pooling, then a tanh dense layer and a linear head."""

    kind = "conv"

    def __init__(self, in_size: int = 28, channels=(16, 32, 32), hidden: int = 128,
                 out_dim: int = 7, kernel: int = 3, seed: int = 0, dtype=np.float64):
        if not 2 <= len(channels) <= 3:
            raise ValueError("2 or 3 conv stages")
        self.in_size = int(in_size)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = int(hidden)
        self.out = int(out_dim)
        self.k = int(kernel)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.Wc, self.bc = [], []
        c_in, size = 1, self.in_size
        for c_out in self.channels:
            fan = c_in * self.k * self.k
            self.Wc.append(_init(rng, (c_out, c_in, self.k, self.k), fan,
                                 self.dtype, gain=RELU_GAIN))
            self.bc.append(np.zeros(c_out, dtype=self.dtype))
            c_in = c_out
            size = size // 2
        self.flat = size * size * c_in
        self.W1 = _init(rng, (self.flat, self.hidden), self.flat, self.dtype)
        self.b1 = np.zeros(self.hidden, dtype=self.dtype)
        self.W2 = _init(rng, (self.hidden, self.out), self.hidden, self.dtype)
        self.b2 = np.zeros(self.out, dtype=self.dtype)
        self._cache = None

    @property
    def in_dim(self):
        return self.in_size * self.in_size

    @property
    def out_dim(self):
        return self.out

    def n_params(self):
        return sum(p.size for _, p in self.params())

    def params(self):
        out = []
        for i in range(len(self.channels)):
            out.append((f"Wc{i}", self.Wc[i]))
            out.append((f"bc{i}", self.bc[i]))
        out.extend([("W1", self.W1), ("b1", self.b1), ("W2", self.W2), ("b2", self.b2)])
        return out

    def forward(self, x, train: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None, :, :]
        if x.shape[1] != self.in_size or x.shape[2] != self.in_size:
            raise ValueError(f"expected {self.in_size}x{self.in_size} patches")
        b = x.shape[0]
        h = x[:, None, :, :]
        cache = {"stages": []}
        pad = self.k // 2
        for i, c_out in enumerate(self.channels):
            _, c_in, hh, ww = h.shape
            cols = _im2col(h, self.k, pad)
            wmat = self.Wc[i].transpose(1, 2, 3, 0).reshape(-1, c_out)
            z = cols @ wmat + self.bc[i]
            z = z.reshape(b, hh, ww, c_out).transpose(0, 3, 1, 2)
            a = np.maximum(z, 0.0)
            h2 = hh // 2 * 2
            w2 = ww // 2 * 2
            pooled_view = a[:, :, :h2, :w2].reshape(b, c_out, h2 // 2, 2, w2 // 2, 2)
            flatwin = pooled_view.transpose(0, 1, 2, 4, 3, 5).reshape(b, c_out, h2 // 2, w2 // 2, 4)
            arg = flatwin.argmax(axis=-1)
            pooled = np.take_along_axis(flatwin, arg[..., None], axis=-1)[..., 0]
            cache["stages"].append({"cols": cols, "z": z, "a_shape": a.shape, "arg": arg,
                                    "in_shape": h.shape})
            h = pooled
        flat = h.reshape(b, -1)
        h1 = np.tanh(flat @ self.W1 + self.b1)
        y = h1 @ self.W2 + self.b2
        if train:
            cache["flat"] = flat
            cache["h1"] = h1
            cache["pooled_shape"] = h.shape
            self._cache = cache
        return y[0] if squeeze else y

    def predict(self, x):
        return clamp01(self.forward(x))

    def backward(self, dy):
        if self._cache is None:
            raise RuntimeError("call forward(train=True) first")
        c = self._cache
        dy = np.asarray(dy, dtype=self.dtype)
        if dy.ndim == 1:
            dy = dy[None, :]
        grads = {}
        grads["W2"] = c["h1"].T @ dy
        grads["b2"] = dy.sum(axis=0)
        dh1 = dy @ self.W2.T
        dflat = dh1 * (1.0 - c["h1"] ** 2)
        grads["W1"] = c["flat"].T @ dflat
        grads["b1"] = dflat.sum(axis=0)
        d = (dflat @ self.W1.T).reshape(c["pooled_shape"])
        pad = self.k // 2
        for i in reversed(range(len(self.channels))):
            st = c["stages"][i]
            b, c_out, hh, ww = st["a_shape"]
            h2, w2 = hh // 2 * 2, ww // 2 * 2
            # unpool: route gradient to the argmax cell of each 2x2 window
            dwin = np.zeros((b, c_out, h2 // 2, w2 // 2, 4), dtype=self.dtype)
            np.put_along_axis(dwin, st["arg"][..., None], d[..., None], axis=-1)
            da = np.zeros(st["a_shape"], dtype=self.dtype)
            da[:, :, :h2, :w2] = (dwin.reshape(b, c_out, h2 // 2, w2 // 2, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(b, c_out, h2, w2))
            dz = da * (st["z"] > 0)
            dzf = dz.transpose(0, 2, 3, 1).reshape(b, hh * ww, c_out)
            wg = np.einsum("bpk,bpo->ko", st["cols"], dzf)
            grads[f"Wc{i}"] = wg.reshape(self.Wc[i].shape[1], self.k, self.k, c_out) \
                                .transpose(3, 0, 1, 2)
            grads[f"bc{i}"] = dzf.sum(axis=(0, 1))
            if i > 0:
                c_in = st["in_shape"][1]
                cols_d = _im2col(dz, self.k, pad)
                # correlate with the 180-degree-flipped kernels, channels swapped
                m = self.Wc[i][:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(-1, c_in)
                dxf = cols_d @ m
                d = dxf.reshape(b, hh, ww, c_in).transpose(0, 3, 1, 2)
        return grads

    def arch_dims(self):
        return [self.in_size, self.k, self.hidden, self.out,
                len(self.channels), *self.channels]

    def meta(self):
        return {"kind": self.kind, "in_size": self.in_size, "channels": list(self.channels),
                "hidden": self.hidden, "out": self.out, "kernel": self.k}


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch: int = 64
    steps: int = 2000
    seed: int = 0
    momentum: float = 0.9
    optimizer: str = "sgd"     # "sgd" or "adam"
    lr_floor: float = 0.0      # > 0 enables cosine decay from lr down to this

    def __post_init__(self):
        if self.lr <= 0 or self.batch <= 0 or self.steps <= 0:
            raise ValueError("lr, batch and steps must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.lr_floor <= self.lr:
            raise ValueError("lr_floor must lie in [0, lr]")


@dataclass
class TrainResult:
    model: object
    final_loss: float
    losses: list = field(default_factory=list)


def train(model, X, Y, config: TrainConfig) -> TrainResult:
    """Minibatch gradient descent on mean squared error.

    The update rule is momentum SGD or bias-corrected adaptive moments
    per the config; a positive lr_floor turns on cosine decay of the step
    size across the run.  Deterministic under the config seed.  Raises on
    an empty dataset and aborts with a diagnostic if the loss goes
    non-finite.
    """
    X = np.asarray(X, dtype=model.dtype)
    Y = np.asarray(Y, dtype=model.dtype)
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if Y.shape[0] != n:
        raise ValueError("inputs and targets disagree on sample count")
    rng = np.random.default_rng(config.seed)
    adam = config.optimizer == "adam"
    b1, b2, eps = 0.9, 0.999, 1e-8
    vel = {name: np.zeros_like(p) for name, p in model.params()}
    sq = {name: np.zeros_like(p) for name, p in model.params()} if adam else None
    order = rng.permutation(n)
    cursor = 0
    losses = []
    for step in range(config.steps):
        if config.lr_floor > 0.0:
            frac = (1.0 + np.cos(np.pi * (step + 1) / config.steps)) / 2.0
            lr = config.lr_floor + (config.lr - config.lr_floor) * frac
        else:
            lr = config.lr
        if cursor + config.batch > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + min(config.batch, n)]
        cursor += config.batch
        xb, yb = X[idx], Y[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            out = model.forward(xb, train=True)
            diff = out - yb
            loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"training diverged at step {step}: loss={loss!r}, lr={config.lr}")
        losses.append(loss)
        dy = (2.0 / diff.size) * diff
        grads = model.backward(dy)
        if adam:
            c1 = 1.0 - b1 ** (step + 1)
            c2 = 1.0 - b2 ** (step + 1)
            for name, p in model.params():
                g = grads[name]
                m = vel[name]
                v = sq[name]
                m += (1.0 - b1) * (g - m)
                v += (1.0 - b2) * (g * g - v)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        else:
            for name, p in model.params():
                v = vel[name]
                v *= config.momentum
                v -= lr * grads[name]
                p += v
    tail = losses[-max(1, len(losses) // 20):]
    return TrainResult(model=model, final_loss=float(np.mean(tail)), losses=losses)


def grad_check(model, x, y, epsilon: float = 1e-5, max_per_param: int = 40,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples up to max_per_param coordinates per parameter array so conv
    models stay cheap; sampling is seeded and deterministic.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError("epsilon outside [1e-6, 1e-3]")
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=model.dtype)

    def loss_fn():
        out = model.forward(x if x.ndim > 1 else x[None, ...], train=False)
        return float(np.mean((out - y) ** 2))

    out = model.forward(x if x.ndim > 1 else x[None, ...], train=True)
    diff = out - y
    grads = model.backward((2.0 / diff.size) * diff)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in model.params():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        if flat.size <= max_per_param:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, size=max_per_param, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + epsilon
            lp = loss_fn()
            flat[j] = orig - epsilon
            lm = loss_fn()
            flat[j] = orig
            fd = (lp - lm) / (2 * epsilon)
            denom = max(abs(fd) + abs(g[j]), 1e-8)
            worst = max(worst, abs(fd - g[j]) / denom)
    return worst


# ---------------------------------------------------------------------------
# weight files: binary header + little-endian float32 params + JSON sidecar


def save_weights(model, path) -> None:
    path = str(path)
    dims = model.arch_dims()
    kind_code = 0 if model.kind == "dense" else 1
    blobs = [np.ascontiguousarray(p, dtype="<f4").tobytes() for _, p in model.params()]
    total = sum(len(b) for b in blobs) // 4
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBxxx", VERSION, kind_code))
        f.write(struct.pack("<I", len(dims)))
        f.write(struct.pack(f"<{len(dims)}I", *dims))
        f.write(struct.pack("<Q", total))
        for b in blobs:
            f.write(b)
    with open(path + ".json", "w") as f:
        json.dump(model.meta(), f, indent=2, sort_keys=True)


def load_weights(path, dtype=np.float64):
    path = str(path)
    with open(path + ".json") as f:
        meta = json.load(f)
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError("bad magic in weights file")
        version, kind_code = struct.unpack("<IBxxx", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported weights version {version}")
        (ndims,) = struct.unpack("<I", f.read(4))
        dims = list(struct.unpack(f"<{ndims}I", f.read(4 * ndims)))
        (total,) = struct.unpack("<Q", f.read(8))
        raw = np.frombuffer(f.read(4 * total), dtype="<f4")
    if meta["kind"] == "dense":
        model = DenseModel(dims, dtype=dtype)
    elif meta["kind"] == "conv":
        in_size, k, hidden, out, n_stages = dims[:5]
        channels = dims[5:5 + n_stages]
        model = ConvModel(in_size=in_size, channels=channels, hidden=hidden,
                          out_dim=out, kernel=k, dtype=dtype)
    else:
        raise ValueError(f"unknown model kind {meta['kind']!r}")
    off = 0
    for _, p in model.params():
        n = p.size
        p[...] = raw[off:off + n].astype(dtype).reshape(p.shape)
        off += n
    if off != total:
        raise ValueError("weights payload size mismatch")
    return model
