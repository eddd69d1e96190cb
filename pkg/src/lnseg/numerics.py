"""Small deterministic tensor toolkit for the fixed autoencoder architecture.

Arrays are plain ``numpy.ndarray`` values in NCHW layout. Every layer has an
explicit forward and backward function; there is no autograd graph.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

# (kernel, stride, padding) triples used by the architecture
ALLOWED_CONV_GEOMETRY = {(3, 1, 1), (4, 2, 1), (4, 1, 0)}


class NumericalError(RuntimeError):
    """Raised when a NaN/Inf shows up where finite values are required."""


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------

def _stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Counter-based generator (Philox) with named, independent sub-streams.

    ``Rng(seed).stream("weights")`` and ``Rng(seed).stream("noise", 3)`` never
    overlap, and the same (seed, path) always yields the same numbers.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def stream(self, *names: str | int) -> "Rng":
        return Rng(self.seed, self.path + tuple(_stream_key(n) for n in names))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        return gaussian_sample(self, shape, mean, std, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state


def gaussian_sample(rng: Rng, shape, mean: float = 0.0, std: float = 1.0, dtype=np.float64) -> np.ndarray:
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    out = rng.generator.standard_normal(shape)
    out *= std
    out += mean
    return out.astype(dtype, copy=False)


def check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# Convolution helpers
# ---------------------------------------------------------------------------

def conv_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_out_size(n: int, k: int, s: int, p: int) -> int:
    return (n - 1) * s - 2 * p + k


def _check_geometry(k: int, stride: int, padding: int, layer: str) -> None:
    if (k, stride, padding) not in ALLOWED_CONV_GEOMETRY:
        raise ShapeError(f"{layer}: unsupported kernel/stride/padding {(k, stride, padding)}")


def _pad_cb(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded (C, B, Hp, Wp) -> (C*k*k, B*Ho*Wo) patch matrix."""
    c, b = xp.shape[:2]
    cols = np.empty((c, k, k, b, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols.reshape(c * k * k, b * ho * wo)


def _col2im(cols: np.ndarray, c: int, k: int, b: int, h: int, w: int, stride: int, padding: int, out_hw) -> np.ndarray:
    """Scatter-add a (C*k*k, B*H*W) patch matrix into a (C, B, Ho, Wo) map."""
    cols = cols.reshape(c, k, k, b, h, w)
    full = np.zeros((c, b, (h - 1) * stride + k, (w - 1) * stride + k), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            full[:, :, i : i + stride * (h - 1) + 1 : stride, j : j + stride * (w - 1) + 1 : stride] += cols[:, i, j]
    ho, wo = out_hw
    return full[:, :, padding : padding + ho, padding : padding + wo]


# Channel-major kernels: activations are (C, B, H, W). The model runs on these
# directly; the NCHW functions further down wrap them.

def conv2d_forward_cb(x, weight, bias, stride: int, padding: int, layer: str = "conv2d"):
    """Returns (y, cols); ``cols`` is the patch matrix reused by the backward pass."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[0] != weight.shape[1]:
        raise ShapeError(f"{layer}: input of shape {x.shape} (channels first) incompatible with weight {weight.shape}")
    o, c, k, _ = weight.shape
    _check_geometry(k, stride, padding, layer)
    b = x.shape[1]
    ho = conv_out_size(x.shape[2], k, stride, padding)
    wo = conv_out_size(x.shape[3], k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{layer}: input spatial size {x.shape[2:]} too small for kernel {k}")
    cols = _im2col(_pad_cb(x, padding), k, stride, ho, wo)
    y = weight.reshape(o, -1) @ cols
    y += bias[:, None]
    return y.reshape(o, b, ho, wo), cols


def conv2d_backward_cb(dy, cols, x_shape, weight, stride: int, padding: int, need_dx: bool = True):
    o, c, k, _ = weight.shape
    _, b, h, w = x_shape
    dy2 = dy.reshape(o, -1)
    dweight = (dy2 @ cols.T).reshape(weight.shape)
    dbias = dy2.sum(axis=1)
    dx = None
    if need_dx:
        dcols = weight.reshape(o, -1).T @ dy2
        dx = _col2im(dcols, c, k, b, dy.shape[2], dy.shape[3], stride, padding, (h, w))
    return dx, dweight, dbias


def conv_transpose2d_forward_cb(x, weight, bias, stride: int, padding: int, layer: str = "conv_transpose2d"):
    if x.ndim != 4 or weight.ndim != 4 or x.shape[0] != weight.shape[0]:
        raise ShapeError(f"{layer}: input of shape {x.shape} (channels first) incompatible with weight {weight.shape}")
    cin, cout, k, _ = weight.shape
    _check_geometry(k, stride, padding, layer)
    _, b, h, w = x.shape
    ho = conv_transpose_out_size(h, k, stride, padding)
    wo = conv_transpose_out_size(w, k, stride, padding)
    cols = weight.reshape(cin, -1).T @ x.reshape(cin, -1)
    y = _col2im(cols, cout, k, b, h, w, stride, padding, (ho, wo))
    y += bias[:, None, None, None]
    return y


def conv_transpose2d_backward_cb(dy, x, weight, stride: int, padding: int):
    cin, cout, k, _ = weight.shape
    _, b, h, w = x.shape
    cols = _im2col(_pad_cb(dy, padding), k, stride, h, w)
    dx = (weight.reshape(cin, -1) @ cols).reshape(cin, b, h, w)
    dweight = (x.reshape(cin, -1) @ cols.T).reshape(weight.shape)
    dbias = dy.sum(axis=(1, 2, 3))
    return dx, dweight, dbias


def _cb(x):
    return np.ascontiguousarray(x.transpose(1, 0, 2, 3))


def conv2d_forward(x, weight, bias, stride: int, padding: int, layer: str = "conv2d"):
    """Cross-correlation. x: (B, C, H, W); weight: (O, C, k, k); bias: (O,)."""
    if x.ndim != 4:
        raise ShapeError(f"{layer}: expected a 4-D input, got shape {x.shape}")
    y, _ = conv2d_forward_cb(_cb(x), weight, bias, stride, padding, layer)
    return _cb(y)


def conv2d_backward(dy, x, weight, stride: int, padding: int):
    """Returns (dx, dweight, dbias) for ``conv2d_forward``."""
    xc = _cb(x)
    k = weight.shape[2]
    cols = _im2col(_pad_cb(xc, padding), k, stride, dy.shape[2], dy.shape[3])
    dx, dw, db = conv2d_backward_cb(_cb(dy), cols, xc.shape, weight, stride, padding)
    return _cb(dx), dw, db


def conv_transpose2d_forward(x, weight, bias, stride: int, padding: int, layer: str = "conv_transpose2d"):
    """Adjoint of conv2d. x: (B, Cin, H, W); weight: (Cin, Cout, k, k); bias: (Cout,)."""
    if x.ndim != 4:
        raise ShapeError(f"{layer}: expected a 4-D input, got shape {x.shape}")
    return _cb(conv_transpose2d_forward_cb(_cb(x), weight, bias, stride, padding, layer))


def conv_transpose2d_backward(dy, x, weight, stride: int, padding: int):
    dx, dw, db = conv_transpose2d_backward_cb(_cb(dy), _cb(x), weight, stride, padding)
    return _cb(dx), dw, db


def linear_forward(x, weight, bias, layer: str = "linear"):
    """x: (B, in); weight: (out, in)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"{layer}: input {x.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def linear_backward(dy, x, weight):
    return dy @ weight, dy.T @ x, dy.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    # subgradient at exactly 0 is 0
    return dy * (x > 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, **kwargs) -> "AdamState":
        st = cls(**kwargs)
        st.m = {k: np.zeros_like(v) for k, v in params.items()}
        st.v = {k: np.zeros_like(v) for k, v in params.items()}
        return st


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params`` and ``state``."""
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r} at step {state.step}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        params[name] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params[name].dtype, copy=False)
