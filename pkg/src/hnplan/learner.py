"""Small numpy networks with hand-written reverse mode, Adam, and checkpoints."""
from __future__ import annotations

import io
import math
import struct

import numpy as np

from .errors import FormatError, NonFiniteGradient, ShapeMismatch
from .rng import Stream
from .trajectory import DIFF_DIM, Standardizer

PEAK_LR = 2e-4
WARMUP_EPOCHS = 3
TOTAL_EPOCHS = 100
BATCH_SIZE = 32
BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
TIME_FREQS = (1.0, 2.0, 4.0, 8.0)
MAGIC = b"HNPL1"
KIND_GENERATOR = 0x01
KIND_POLICY = 0x02


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t) -> np.ndarray:
    """(B,) times in [0, 1] -> (B, 8) sinusoidal features."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ang = 2.0 * np.pi * t[:, None] * np.array(TIME_FREQS)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Mlp:
    """Fully connected net: SiLU on hidden layers, identity on the output."""

    def __init__(self, weights: list, biases: list):
        for i in range(1, len(weights)):
            if weights[i].shape[0] != weights[i - 1].shape[1]:
                raise ShapeMismatch(f"layer {i} expects {weights[i].shape[0]} inputs, "
                                    f"previous layer gives {weights[i - 1].shape[1]}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, widths, stream: Stream, out_scale: float = 1.0) -> "Mlp":
        ws, bs = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            scale = 1.0 / math.sqrt(a)
            if i == len(widths) - 2:
                scale *= out_scale
            ws.append(stream.normal((a, b)) * scale)
            bs.append(np.zeros(b))
        return cls(ws, bs)

    @classmethod
    def zeros(cls, widths) -> "Mlp":
        return cls([np.zeros((a, b)) for a, b in zip(widths[:-1], widths[1:])],
                   [np.zeros(b) for b in widths[1:]])

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def set_params(self, flat: list) -> None:
        self.weights = list(flat[0::2])
        self.biases = list(flat[1::2])

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x) -> tuple[np.ndarray, list]:
        """Returns ``(output, cache)``; the last cache entry is the final hidden activation."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"expected input width {self.widths[0]}, got {x.shape[-1]}")
        cache = [x]
        h = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i < n - 1:
                cache.append(z)
                h = silu(z)
            else:
                h = z
        out = h[0] if squeeze else h
        return out, cache

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def hidden(self, cache) -> np.ndarray:
        """Final hidden activation recorded in ``cache``."""
        return silu(cache[-1]) if len(cache) > 1 else cache[0]

    def backward(self, cache, grad_out, grad_hidden=None) -> tuple[list, np.ndarray]:
        """Reverse pass for the forward that produced ``cache``.

        ``grad_hidden`` adds an extra upstream gradient at the final hidden
        activation (used by auxiliary heads). Returns ``(param_grads, grad_input)``
        with parameter gradients ordered like ``params()``.
        """
        g = np.asarray(grad_out, dtype=float)
        if g.ndim == 1:
            g = g[None]
        x = cache[0]
        if g.shape != (x.shape[0], self.widths[-1]):
            raise ShapeMismatch(f"upstream gradient shape {g.shape} does not match output")
        n = len(self.weights)
        grads = [None] * (2 * n)
        for i in range(n - 1, -1, -1):
            h_in = x if i == 0 else silu(cache[i])
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i == 0:
                g = g @ self.weights[0].T
                break
            gh = g @ self.weights[i].T
            if i == n - 1 and grad_hidden is not None:
                gh = gh + grad_hidden
            g = gh * silu_grad(cache[i])
        return grads, g


def lr_at(epoch: float, peak: float = PEAK_LR, warmup: float = WARMUP_EPOCHS,
          total: float = TOTAL_EPOCHS) -> float:
    """Linear warmup to ``peak`` then half-cosine decay to zero at ``total``."""
    if epoch < warmup:
        return peak * epoch / warmup
    frac = min(max((epoch - warmup) / (total - warmup), 0.0), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class Adam:
    def __init__(self, params: list, peak_lr: float = PEAK_LR, warmup: float = WARMUP_EPOCHS,
                 total: float = TOTAL_EPOCHS):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0
        self.peak_lr = peak_lr
        self.warmup = warmup
        self.total = total

    def lr(self, epoch: float) -> float:
        return lr_at(epoch, self.peak_lr, self.warmup, self.total)

    def step(self, params: list, grads: list, epoch: float) -> None:
        """In-place bias-corrected Adam update at the scheduled learning rate."""
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient("gradient contains NaN or Inf")
        self.t += 1
        lr = self.lr(epoch)
        c1 = 1.0 - BETA1 ** self.t
        c2 = 1.0 - BETA2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= BETA1
            m += (1.0 - BETA1) * g
            v *= BETA2
            v += (1.0 - BETA2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


def round_to_f32(net: Mlp) -> Mlp:
    """Parameters as they will read back from a checkpoint."""
    return Mlp([w.astype(np.float32).astype(float) for w in net.weights],
               [b.astype(np.float32).astype(float) for b in net.biases])


# ---------------------------------------------------------------- checkpoints
#
# Layout (little endian):
#   b"HNPL1", kind byte
#   main chain:  int32 layer count L, int32 widths[L+1], then per layer
#                float32 W (row-major, in x out) followed by float32 b
#   aux chain:   same layout
#   standardizer: float32 mean[32], float32 std[32]
#   metadata:    int32 epoch, int32 seed


def _write_chain(buf, net: Mlp) -> None:
    widths = net.widths
    buf.write(struct.pack("<i", len(net.weights)))
    buf.write(struct.pack(f"<{len(widths)}i", *widths))
    for w, b in zip(net.weights, net.biases):
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())


def _read_chain(buf) -> Mlp:
    (n,) = struct.unpack("<i", _read(buf, 4))
    if not 0 < n < 64:
        raise FormatError(f"implausible layer count {n}")
    widths = struct.unpack(f"<{n + 1}i", _read(buf, 4 * (n + 1)))
    ws, bs = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        ws.append(np.frombuffer(_read(buf, 4 * a * b), dtype="<f4").reshape(a, b).astype(float))
        bs.append(np.frombuffer(_read(buf, 4 * b), dtype="<f4").astype(float))
    return Mlp(ws, bs)


def _read(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("checkpoint truncated")
    return data


def checkpoint_bytes(kind: int, main: Mlp, aux: Mlp, standardizer: Standardizer, epoch: int,
                     seed: int) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(bytes([kind]))
    _write_chain(buf, main)
    _write_chain(buf, aux)
    buf.write(np.ascontiguousarray(standardizer.mean, dtype="<f4").tobytes())
    buf.write(np.ascontiguousarray(standardizer.std, dtype="<f4").tobytes())
    buf.write(struct.pack("<ii", int(epoch), int(seed)))
    return buf.getvalue()


def parse_checkpoint(data: bytes) -> dict:
    buf = io.BytesIO(data)
    if _read(buf, len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    kind = _read(buf, 1)[0]
    main = _read_chain(buf)
    aux = _read_chain(buf)
    mean = np.frombuffer(_read(buf, 4 * DIFF_DIM), dtype="<f4").astype(float)
    std = np.frombuffer(_read(buf, 4 * DIFF_DIM), dtype="<f4").astype(float)
    epoch, seed = struct.unpack("<ii", _read(buf, 8))
    if buf.read(1):
        raise FormatError("trailing bytes after checkpoint metadata")
    return {"kind": kind, "main": main, "aux": aux, "standardizer": Standardizer(mean, std),
            "epoch": epoch, "seed": seed}


def round_standardizer(st: Standardizer) -> Standardizer:
    return Standardizer(st.mean.astype(np.float32).astype(float),
                        st.std.astype(np.float32).astype(float))
