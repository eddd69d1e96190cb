"""Convolutional AE/VAE, its losses, GECO, and the LNSC tensor container."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import crcmod
import numpy as np

from . import numerics as nx

LATENT_DIM = 15
IMAGE_SHAPE = (64, 64, 3)  # H, W, C
LOGVAR_CLAMP = 10.0
BETA_MIN, BETA_MAX = 1e-6, 1e4

# (out_channels, kernel, stride, padding); every conv is followed by ReLU
ENCODER_CONVS = [
    (32, 3, 1, 1),
    (64, 4, 2, 1),
    (64, 4, 2, 1),
    (128, 4, 2, 1),
    (128, 4, 2, 1),
    (256, 4, 1, 0),
]
HIDDEN = 128


class VariantError(ValueError):
    pass


class CheckpointError(IOError):
    pass


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def layer_plan(latent_dim: int = LATENT_DIM, variant: str = "AE"):
    """Ordered (name, kind, geometry) list for encoder then decoder."""
    head = latent_dim * (2 if variant == "VAE" else 1)
    plan = []
    cin = IMAGE_SHAPE[2]
    for i, (cout, k, s, p) in enumerate(ENCODER_CONVS):
        plan.append((f"enc.conv{i}", "conv", (cin, cout, k, s, p)))
        cin = cout
    plan.append(("enc.fc0", "linear", (cin, HIDDEN)))
    plan.append(("enc.fc1", "linear", (HIDDEN, head)))
    plan.append(("dec.fc0", "linear", (latent_dim, HIDDEN)))
    plan.append(("dec.fc1", "linear", (HIDDEN, ENCODER_CONVS[-1][0])))
    chans = [IMAGE_SHAPE[2]] + [c[0] for c in ENCODER_CONVS]
    for i in reversed(range(len(ENCODER_CONVS))):
        _, k, s, p = ENCODER_CONVS[i]
        plan.append((f"dec.deconv{len(ENCODER_CONVS) - 1 - i}", "deconv", (chans[i + 1], chans[i], k, s, p)))
    return plan


def init_params(rng: nx.Rng, variant: str = "AE", latent_dim: int = LATENT_DIM, dtype=np.float32) -> dict:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    if variant not in ("AE", "VAE"):
        raise VariantError(f"unknown variant {variant!r}")
    params = {}
    for name, kind, geo in layer_plan(latent_dim, variant):
        r = rng.stream(name)
        if kind == "conv":
            cin, cout, k, _, _ = geo
            fan_in = cin * k * k
            shape = (cout, cin, k, k)
            nbias = cout
        elif kind == "deconv":
            cin, cout, k, s, _ = geo
            fan_in = cin * k * k / (s * s)
            shape = (cin, cout, k, k)
            nbias = cout
        else:
            fin, fout = geo
            fan_in = fin
            shape = (fout, fin)
            nbias = fout
        bound = math.sqrt(6.0 / fan_in)
        params[name + ".w"] = r.uniform(-bound, bound, shape).astype(dtype)
        params[name + ".b"] = np.zeros(nbias, dtype=dtype)
    return params


@dataclass
class Model:
    params: dict
    variant: str = "AE"
    latent_dim: int = LATENT_DIM

    @classmethod
    def create(cls, seed: int, variant: str = "AE", latent_dim: int = LATENT_DIM, dtype=np.float32) -> "Model":
        rng = nx.Rng(seed).stream("weights")
        return cls(init_params(rng, variant, latent_dim, dtype), variant, latent_dim)

    def astype(self, dtype) -> "Model":
        return Model({k: v.astype(dtype) for k, v in self.params.items()}, self.variant, self.latent_dim)

    @property
    def plan(self):
        return layer_plan(self.latent_dim, self.variant)

    # -- forward -----------------------------------------------------------

    def encode_batch(self, x: np.ndarray, cache: list | None = None):
        """x: (B, 3, 64, 64). Returns (mu, logvar) with logvar None for the AE."""
        if x.ndim != 4 or x.shape[1:] != (IMAGE_SHAPE[2], IMAGE_SHAPE[0], IMAGE_SHAPE[1]):
            raise nx.ShapeError(f"encoder expects (B, 3, 64, 64) input, got {x.shape}")
        p = self.params
        h = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        for name, kind, geo in self.plan:
            if not name.startswith("enc."):
                continue
            if kind == "conv":
                _, _, _, s, pad = geo
                pre, cols = nx.conv2d_forward_cb(h, p[name + ".w"], p[name + ".b"], s, pad, layer=name)
                if cache is not None:
                    cache.append((name, h.shape, pre, cols))
                h = nx.relu_forward(pre)
            else:
                if h.ndim == 4:
                    h = h.reshape(h.shape[0], -1).T  # (256, B, 1, 1) -> (B, 256)
                pre = nx.linear_forward(h, p[name + ".w"], p[name + ".b"], layer=name)
                if cache is not None:
                    cache.append((name, h.shape, pre, h))
                h = pre if name == "enc.fc1" else nx.relu_forward(pre)
        d = self.latent_dim
        if self.variant == "VAE":
            return h[:, :d], np.clip(h[:, d:], -LOGVAR_CLAMP, LOGVAR_CLAMP)
        return h, None

    def decode_batch(self, z: np.ndarray, cache: list | None = None) -> np.ndarray:
        """z: (B, latent_dim) -> (B, 3, 64, 64) in [0, 1]."""
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise nx.ShapeError(f"decoder expects (B, {self.latent_dim}) latents, got {z.shape}")
        p = self.params
        h = z.astype(p["dec.fc0.w"].dtype, copy=False)
        last = f"dec.deconv{len(ENCODER_CONVS) - 1}"
        for name, kind, geo in self.plan:
            if not name.startswith("dec."):
                continue
            if kind == "linear":
                pre = nx.linear_forward(h, p[name + ".w"], p[name + ".b"], layer=name)
            else:
                if h.ndim == 2:
                    h = np.ascontiguousarray(h.T).reshape(h.shape[1], h.shape[0], 1, 1)
                _, _, _, s, pad = geo
                pre = nx.conv_transpose2d_forward_cb(h, p[name + ".w"], p[name + ".b"], s, pad, layer=name)
            if cache is not None:
                cache.append((name, h.shape, pre, h))
            h = nx.sigmoid(pre) if name == last else nx.relu_forward(pre)
        return np.ascontiguousarray(h.transpose(1, 0, 2, 3))

    # -- backward ----------------------------------------------------------

    def _backward(self, cache: list, g: np.ndarray, grads: dict, y_last=None):
        """Backprop through cached layers in reverse; returns grad w.r.t. the first input.

        ``y_last`` marks a sigmoid output layer (decoder); otherwise the last
        cached layer has no activation (encoder head).
        """
        p = self.params
        for idx in range(len(cache) - 1, -1, -1):
            name, in_shape, pre, saved = cache[idx]
            if idx == len(cache) - 1:
                if y_last is not None:
                    g = nx.sigmoid_backward(g, y_last)
            else:
                g = nx.relu_backward(g.reshape(pre.shape), pre)
            w = p[name + ".w"]
            if ".fc" in name:
                if g.ndim == 4:
                    g = g.reshape(g.shape[0], -1).T
                dx, dw, db = nx.linear_backward(g, saved, w)
                if len(in_shape) == 2 and idx > 0 and cache[idx - 1][2].ndim == 4:
                    dx = np.ascontiguousarray(dx.T)  # back to channel-major (C, B)
            elif "deconv" in name:
                _, _, _, s, pad = _geo(self.plan, name)
                if g.ndim == 2:
                    g = g.T
                dx, dw, db = nx.conv_transpose2d_backward_cb(g.reshape(pre.shape), saved, w, s, pad)
                if idx > 0 and cache[idx - 1][2].ndim == 2:
                    dx = dx.reshape(dx.shape[0], dx.shape[1]).T
            else:
                _, _, _, s, pad = _geo(self.plan, name)
                dx, dw, db = nx.conv2d_backward_cb(g.reshape(pre.shape), saved, in_shape, w, s, pad, need_dx=idx > 0)
            grads[name + ".w"] = dw
            grads[name + ".b"] = db
            g = dx
        return g

    def backward_decoder(self, cache: list, x_hat: np.ndarray, d_xhat: np.ndarray, grads: dict) -> np.ndarray:
        """x_hat, d_xhat in NCHW; returns dL/dz of shape (B, latent_dim)."""
        cb = lambda a: np.ascontiguousarray(a.transpose(1, 0, 2, 3))
        return self._backward(cache, cb(d_xhat), grads, y_last=cb(x_hat))

    def backward_encoder(self, cache: list, d_head: np.ndarray, grads: dict) -> None:
        self._backward(cache, d_head, grads)

    # -- single-image convenience -----------------------------------------

    def encode(self, image: np.ndarray):
        """image: (64, 64, 3) HWC in [0, 1] -> (mu, logvar|None) as 1-D arrays."""
        if image.shape != IMAGE_SHAPE:
            raise nx.ShapeError(f"expected image of shape {IMAGE_SHAPE}, got {image.shape}")
        x = image.transpose(2, 0, 1)[None].astype(self.params["enc.conv0.w"].dtype)
        mu, logvar = self.encode_batch(x)
        return mu[0], (None if logvar is None else logvar[0])

    def decode(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        if z.shape != (self.latent_dim,):
            raise nx.ShapeError(f"expected latent of length {self.latent_dim}, got shape {z.shape}")
        return self.decode_batch(z[None])[0].transpose(1, 2, 0)


def _geo(plan, name):
    for n, _, g in plan:
        if n == name:
            return g
    raise KeyError(name)


def to_nchw(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I)), summed over latent dims."""
    return 0.5 * np.sum(mu**2 + np.exp(logvar) - 1.0 - logvar, axis=-1)


def loss_ae(model: Model, batch: np.ndarray):
    """Mean squared error over every pixel of an NCHW batch; returns (loss, grads)."""
    enc_cache, dec_cache = [], []
    z, _ = model.encode_batch(batch, enc_cache)
    x_hat = model.decode_batch(z, dec_cache)
    diff = x_hat - batch
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not math.isfinite(loss):
        raise nx.NumericalError("AE loss is not finite")
    grads: dict = {}
    d_xhat = (2.0 / diff.size) * diff
    dz = model.backward_decoder(dec_cache, x_hat, d_xhat, grads)
    model.backward_encoder(enc_cache, dz, grads)
    return loss, grads


@dataclass
class GecoState:
    """Multiplicative Lagrange multiplier on the KL term.

    The reconstruction error is the per-image sum of squared errors; the goal
    is ``g_goal`` per pixel times the number of pixel values.
    """

    g_goal: float = 0.0006
    beta: float = 1.0
    ema_decay: float = 0.99
    step_size: float = 1e-5
    err_ema: float | None = None
    n_values: int = int(np.prod(IMAGE_SHAPE))

    @property
    def goal(self) -> float:
        return self.g_goal * self.n_values

    @property
    def constraint_ema(self) -> float:
        """Positive when reconstruction is worse than the goal (per pixel units)."""
        if self.err_ema is None:
            return 0.0
        return (self.err_ema - self.goal) / self.n_values

    def update(self, err: float) -> None:
        if self.err_ema is None:
            self.err_ema = err
        else:
            self.err_ema = self.ema_decay * self.err_ema + (1.0 - self.ema_decay) * err
        factor = math.exp(self.step_size * (self.goal - self.err_ema))
        self.beta = min(max(self.beta * factor, BETA_MIN), BETA_MAX)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("g_goal", "beta", "ema_decay", "step_size", "err_ema", "n_values")}


def loss_vae_geco(model: Model, geco: GecoState, batch: np.ndarray, rng: nx.Rng):
    """GECO-weighted negative ELBO; returns (loss, grads, stats) and updates ``geco``.

    loss = err + beta * KL with err the per-image summed squared error and both
    terms averaged over the batch.
    """
    if model.variant != "VAE":
        raise VariantError("loss_vae_geco needs a VAE model")
    b = batch.shape[0]
    enc_cache, dec_cache = [], []
    mu, logvar = model.encode_batch(batch, enc_cache)
    eps = rng.normal(mu.shape).astype(mu.dtype)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    x_hat = model.decode_batch(z, dec_cache)
    diff = x_hat - batch
    err = float(np.sum(diff.astype(np.float64) ** 2)) / b
    kl = float(np.mean(kl_divergence(mu.astype(np.float64), logvar.astype(np.float64))))
    beta = geco.beta
    loss = err + beta * kl
    if not math.isfinite(loss):
        raise nx.NumericalError(f"VAE loss is not finite; GECO state: {json.dumps(geco.to_dict())}")
    grads: dict = {}
    d_xhat = (2.0 / b) * diff
    dz = model.backward_decoder(dec_cache, x_hat, d_xhat, grads)
    d_mu = dz + (beta / b) * mu
    d_logvar = dz * eps * 0.5 * std + (beta / b) * 0.5 * (np.exp(logvar) - 1.0)
    raw = enc_cache[-1][2]
    # clamp has zero gradient outside the band
    d_logvar = d_logvar * (np.abs(raw[:, model.latent_dim :]) < LOGVAR_CLAMP)
    model.backward_encoder(enc_cache, np.concatenate([d_mu, d_logvar], axis=1), grads)
    geco.update(err)
    stats = {"err": err, "kl": kl, "beta": beta, "mse": err / geco.n_values}
    return loss, grads, stats


# ---------------------------------------------------------------------------
# LNSC container
# ---------------------------------------------------------------------------

MAGIC = b"LNSC"
VERSION = 1
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, xorOut=0xFFFFFFFFFFFFFFFF, rev=True)
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected)."""
    return _crc64(data)


def write_container(path, tensors: dict, meta: dict) -> None:
    """Write named arrays to an LNSC file.

    Layout: magic, u32 version, u64 header length, UTF-8 JSON header, raw
    little-endian payload, trailing u64 CRC-64 over everything before it.
    """
    entries = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            tag = "u8"
        else:
            tag = "f32"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"tensors": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    crc = crcmod.Crc(0x142F0E1EBA9EA3693, initCrc=0, xorOut=0xFFFFFFFFFFFFFFFF, rev=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        for chunk in (MAGIC, struct.pack("<IQ", VERSION, len(header)), header, *blobs):
            fh.write(chunk)
            crc.update(chunk)
        fh.write(struct.pack("<Q", crc.crcValue))
    tmp.replace(path)


def read_container(path):
    """Inverse of ``write_container``; returns (tensors, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an LNSC file (bad magic or too short)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    (stored,) = struct.unpack_from("<Q", raw, len(raw) - 8)
    if crc64(raw[:-8]) != stored:
        raise CheckpointError(f"{path}: checksum mismatch (file truncated or corrupted)")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return tensors, header["meta"]


def save_checkpoint(model: Model, meta: dict, path, adam: nx.AdamState | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in model.params.items()}
    meta = dict(meta)
    meta.update(variant=model.variant, latent_dim=model.latent_dim)
    if adam is not None:
        tensors.update({f"adam_m/{k}": v for k, v in adam.m.items()})
        tensors.update({f"adam_v/{k}": v for k, v in adam.v.items()})
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps, "step": adam.step}
    write_container(path, tensors, meta)


def load_checkpoint(path, variant: str | None = None):
    """Returns (model, meta, adam_state_or_None). ``variant`` asserts the model kind."""
    tensors, meta = read_container(path)
    if variant is not None and meta.get("variant") != variant:
        raise VariantError(f"{path}: checkpoint holds a {meta.get('variant')} model, expected {variant}")
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    model = Model(params, meta["variant"], int(meta["latent_dim"]))
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = nx.AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        adam.m = {k[len("adam_m/") :]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        adam.v = {k[len("adam_v/") :]: v for k, v in tensors.items() if k.startswith("adam_v/")}
    return model, meta, adam
