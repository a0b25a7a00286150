"""Reference descriptor network with hand-written forward and backward passes.

Layout: conv5x5(8) -> ReLU -> maxpool2 -> conv5x5(16) -> ReLU -> maxpool2
-> fc(64) -> ReLU -> fc(d). Parameters are stored as float32; the passes
run in ``compute_dtype`` (float64 by default).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DESCRIPTOR_DIMS = (3, 16, 32)
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")
MAGIC = b"PMNET1"


class NetConfigError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _conv_out(size, k):
    return size - k + 1


class EmbeddingNet:
    def __init__(self, in_channels: int, size: int, dim: int = 16, filters=(8, 16),
                 hidden: int = 64, kernel: int = 5, compute_dtype=np.float64,
                 allow_any_dim: bool = False):
        if dim not in DESCRIPTOR_DIMS and not allow_any_dim:
            raise NetConfigError(f"descriptor dim must be one of {DESCRIPTOR_DIMS}, got {dim}")
        s1 = _conv_out(size, kernel) // 2
        s2 = _conv_out(s1, kernel) // 2
        if s2 < 1:
            raise NetConfigError(f"input size {size} too small for two 5x5 conv + pool stages")
        self.in_channels = int(in_channels)
        self.size = int(size)
        self.dim = int(dim)
        self.filters = tuple(int(f) for f in filters)
        self.hidden = int(hidden)
        self.kernel = int(kernel)
        self.flat = self.filters[1] * s2 * s2
        self.compute_dtype = compute_dtype
        self.frozen: set = set()
        self.version = 0
        f1, f2, k = self.filters[0], self.filters[1], self.kernel
        self.shapes = {
            "conv1_w": (f1, self.in_channels, k, k), "conv1_b": (f1,),
            "conv2_w": (f2, f1, k, k), "conv2_b": (f2,),
            "fc1_w": (self.flat, self.hidden), "fc1_b": (self.hidden,),
            "fc2_w": (self.hidden, self.dim), "fc2_b": (self.dim,),
        }
        self.params: Dict[str, np.ndarray] = {n: np.zeros(s, dtype=np.float32)
                                              for n, s in self.shapes.items()}

    # -- parameters ---------------------------------------------------------

    def fan_in(self, name: str) -> int:
        shape = self.shapes[name.replace("_b", "_w")]
        return int(np.prod(shape[1:])) if name.startswith("conv") else int(shape[0])

    def init_params(self, seed: int) -> "EmbeddingNet":
        """Fan-in scaled uniform weights in +-sqrt(6 / fan_in), zero biases."""
        rng = np.random.default_rng(seed)
        for name in PARAM_ORDER:
            if name.endswith("_b"):
                self.params[name] = np.zeros(self.shapes[name], dtype=np.float32)
            else:
                bound = np.sqrt(6.0 / self.fan_in(name))
                self.params[name] = rng.uniform(-bound, bound, self.shapes[name]).astype(np.float32)
        self.touch()
        return self

    def touch(self) -> None:
        """Mark parameters as modified; caches from earlier forwards become stale."""
        self.version += 1

    def copy(self) -> "EmbeddingNet":
        net = EmbeddingNet(self.in_channels, self.size, self.dim, self.filters, self.hidden,
                           self.kernel, self.compute_dtype, allow_any_dim=True)
        net.params = {k: v.copy() for k, v in self.params.items()}
        net.frozen = set(self.frozen)
        return net

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- passes -------------------------------------------------------------

    def _check_input(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (self.in_channels, self.size, self.size):
            raise NetConfigError(f"expected input (B, {self.in_channels}, {self.size}, {self.size}), "
                                 f"got {x.shape}")
        return x.astype(self.compute_dtype, copy=False)

    def forward(self, x, keep_cache: bool = True):
        """Descriptors (B, d) and, if ``keep_cache``, the activations needed by ``backward``."""
        x = self._check_input(x)
        dt = self.compute_dtype
        p = {k: v.astype(dt, copy=False) for k, v in self.params.items()}
        c1, cols1 = _conv_forward(x, p["conv1_w"], p["conv1_b"])
        a1 = np.maximum(c1, 0)
        m1, arg1 = _pool_forward(a1)
        c2, cols2 = _conv_forward(m1, p["conv2_w"], p["conv2_b"])
        a2 = np.maximum(c2, 0)
        m2, arg2 = _pool_forward(a2)
        flat = m2.reshape(len(x), -1)
        h = flat @ p["fc1_w"] + p["fc1_b"]
        hr = np.maximum(h, 0)
        out = hr @ p["fc2_w"] + p["fc2_b"]
        if not keep_cache:
            return out, None
        cache = dict(version=self.version, x_shape=x.shape, cols1=cols1, c1=c1, a1_shape=a1.shape,
                     arg1=arg1, m1_shape=m1.shape, cols2=cols2, c2=c2, a2_shape=a2.shape,
                     arg2=arg2, m2_shape=m2.shape, flat=flat, h=h, hr=hr, p=p)
        return out, cache

    def embed(self, x, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        outs = [self.forward(x[i:i + batch_size], keep_cache=False)[0]
                for i in range(0, len(x), batch_size)]
        if not outs:
            return np.zeros((0, self.dim))
        return np.concatenate(outs).astype(np.float64)

    def backward(self, dout, cache, need_input_grad: bool = False):
        """Parameter gradients (and optionally d loss / d input) for upstream ``dout`` (B, d)."""
        if cache is None or cache["version"] != self.version:
            raise StaleCacheError("cache does not belong to the current parameters")
        p = cache["p"]
        dout = np.asarray(dout, dtype=self.compute_dtype)
        g = {}
        g["fc2_w"] = cache["hr"].T @ dout
        g["fc2_b"] = dout.sum(axis=0)
        dh = (dout @ p["fc2_w"].T) * (cache["h"] > 0)
        g["fc1_w"] = cache["flat"].T @ dh
        g["fc1_b"] = dh.sum(axis=0)
        dm2 = (dh @ p["fc1_w"].T).reshape(cache["m2_shape"])
        da2 = _pool_backward(dm2, cache["arg2"], cache["a2_shape"])
        dc2 = da2 * (cache["c2"] > 0)
        g["conv2_w"], g["conv2_b"], dm1 = _conv_backward(dc2, cache["cols2"], p["conv2_w"],
                                                         cache["m1_shape"], True)
        da1 = _pool_backward(dm1, cache["arg1"], cache["a1_shape"])
        dc1 = da1 * (cache["c1"] > 0)
        g["conv1_w"], g["conv1_b"], dx = _conv_backward(dc1, cache["cols1"], p["conv1_w"],
                                                        cache["x_shape"], need_input_grad)
        for name in self.frozen:
            g[name] = np.zeros_like(g[name])
        return g, dx

    # -- checkpoints --------------------------------------------------------

    def config(self) -> dict:
        return dict(in_channels=self.in_channels, size=self.size, dim=self.dim,
                    filters=list(self.filters), hidden=self.hidden, kernel=self.kernel)

    def save(self, path) -> None:
        header = dict(config=self.config(),
                      layers=[dict(name=n, shape=list(self.shapes[n]), dtype="<f4") for n in PARAM_ORDER])
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", len(hb)) + hb)
            for n in PARAM_ORDER:
                fh.write(self.params[n].astype("<f4").tobytes())

    @classmethod
    def load(cls, path, compute_dtype=np.float64) -> "EmbeddingNet":
        raw = Path(path).read_bytes()
        if raw[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a network checkpoint (bad magic)")
        try:
            (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
            off = len(MAGIC) + 4
            header = json.loads(raw[off:off + hlen])
            off += hlen
            cfg = header["config"]
            net = cls(cfg["in_channels"], cfg["size"], cfg["dim"], cfg["filters"], cfg["hidden"],
                      cfg["kernel"], compute_dtype, allow_any_dim=True)
            for layer in header["layers"]:
                n, shape = layer["name"], tuple(layer["shape"])
                count = int(np.prod(shape))
                if off + 4 * count > len(raw):
                    raise CheckpointError(f"{path}: truncated tensor {n}")
                net.params[n] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float32)
                off += 4 * count
        except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
        net.touch()
        return net


# --- layer primitives ------------------------------------------------------

def _im2col(x, k):
    b, c, h, w = x.shape
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (B, C, Ho, Wo, k, k)
    ho, wo = h - k + 1, w - k + 1
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k), ho, wo


def _conv_forward(x, w, bias):
    f, c, k, _ = w.shape
    cols, ho, wo = _im2col(x, k)
    out = cols @ w.reshape(f, -1).T + bias
    return out.reshape(len(x), ho, wo, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, cols, w, x_shape, need_dx: bool):
    f, c, k, _ = w.shape
    b, _, ho, wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return dw, db, None
    dcols = (d2 @ w.reshape(f, -1)).reshape(b, ho, wo, c, k, k)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dw, db, dx


def _pool_forward(a):
    b, c, h, w = a.shape
    h2, w2 = h // 2, w // 2
    blocks = a[:, :, :2 * h2, :2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout, arg, a_shape):
    b, c, h, w = a_shape
    h2, w2 = dout.shape[2:]
    blocks = np.zeros((b, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    blocks = blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
    da = np.zeros(a_shape, dtype=dout.dtype)
    da[:, :, :2 * h2, :2 * w2] = blocks
    return da
