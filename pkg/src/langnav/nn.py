"""Minimal numerical kernel: flat-buffer parameter sets, layer forward/backward
passes with analytic gradients, Adam with the annealed learning-rate schedule,
and the checkpoint format.

Tensors are plain numpy arrays (shape-tagged dense storage). Every op runs in
the dtype of its inputs: float32 is the training path, float64 the gradient
verification path, through the same code.

Conventions: images are channels-last (H, W, C) with an optional leading batch
axis; convolutions use valid padding and cross-correlation.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

CHECKPOINT_MAGIC = b"LNCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class ParamSet:
    """Named parameters plus matching gradient accumulators.

    All tensors are views into two flat buffers so that worker-to-global
    copies, gradient clipping and Adam updates are single vector operations.
    """

    def __init__(self, spec: list[tuple[str, tuple[int, ...]]], dtype=np.float32,
                 flat: np.ndarray | None = None):
        self.spec = [(name, tuple(shape)) for name, shape in spec]
        sizes = [int(np.prod(shape)) if shape else 1 for _, shape in self.spec]
        self.total = int(sum(sizes))
        self.flat = np.zeros(self.total, dtype=dtype) if flat is None else flat
        if self.flat.shape != (self.total,):
            raise ShapeError(f"flat buffer has {self.flat.shape}, need ({self.total},)")
        self.grad_flat = np.zeros(self.total, dtype=self.flat.dtype)
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        offset = 0
        for (name, shape), size in zip(self.spec, sizes):
            self.params[name] = self.flat[offset : offset + size].reshape(shape)
            self.grads[name] = self.grad_flat[offset : offset + size].reshape(shape)
            offset += size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return [name for name, _ in self.spec]

    @property
    def dtype(self):
        return self.flat.dtype

    def zero_grads(self) -> None:
        self.grad_flat[:] = 0

    def copy_from(self, other: "ParamSet") -> None:
        self.flat[:] = other.flat

    def clone(self, dtype=None) -> "ParamSet":
        out = ParamSet(self.spec, dtype=dtype or self.flat.dtype)
        out.flat[:] = self.flat.astype(out.flat.dtype)
        return out


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int, dtype,
                  gain: float = 1.0) -> np.ndarray:
    """Uniform init with std = gain / sqrt(fan_in); gain sqrt(2) suits PReLU."""
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    rows, cols = shape
    n = max(rows, cols)
    a = rng.standard_normal((n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    return q[:rows, :cols].astype(dtype)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def prelu(z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """PReLU with one learnable slope per layer; a=0 degenerates to ReLU."""
    return np.where(z > 0, z, a.reshape(-1)[0] * z)


def prelu_backward(dy: np.ndarray, z: np.ndarray, a: np.ndarray):
    neg = z <= 0
    dz = np.where(neg, a.reshape(-1)[0] * dy, dy)
    da = np.array([(dy * z * neg).sum()], dtype=z.dtype)
    return dz, da


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0)


def relu_backward(dy: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, dy, 0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


@lru_cache(maxsize=64)
def _conv_index(h: int, w: int, c: int, k: int, stride: int):
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {k} with stride {stride} exceeds input {h}x{w}")
    ky, kx = np.mgrid[0:k, 0:k]
    base = (ky[..., None] * w + kx[..., None]) * c + np.arange(c)  # (K,K,C)
    i0 = np.arange(oh) * stride
    j0 = np.arange(ow) * stride
    starts = (i0[:, None] * w + j0[None, :]) * c  # (OH,OW)
    idx = starts[..., None, None, None] + base
    return np.ascontiguousarray(idx.reshape(oh * ow, k * k * c), dtype=np.int32), oh, ow


def _as_batched(x: np.ndarray, ndim: int):
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeError(f"expected {ndim} or {ndim + 1} dims, got {x.shape}")


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid-padding cross-correlation. x: (N,)H,W,C; w: K,K,C,F; b: F."""
    xb, squeeze = _as_batched(x, 3)
    n, h, wd, c = xb.shape
    k, k2, cw, f = w.shape
    if k != k2 or cw != c:
        raise ShapeError(f"filters {w.shape} incompatible with input {x.shape}")
    idx, oh, ow = _conv_index(h, wd, c, k, stride)
    cols = np.take(xb.reshape(n, -1), idx, axis=1)  # (N, P, KKC)
    y = cols.reshape(n * oh * ow, -1) @ w.reshape(-1, f)
    y += b
    return y.reshape(oh, ow, f) if squeeze else y.reshape(n, oh, ow, f)


def conv2d_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1,
                    need_dx: bool = True):
    """Gradients (dx, dw, db) for conv2d_forward; dx is skipped (None) when the
    caller does not need gradients past this layer."""
    xb, squeeze = _as_batched(x, 3)
    dyb, _ = _as_batched(dy, 3)
    n, h, wd, c = xb.shape
    k, _, _, f = w.shape
    idx, oh, ow = _conv_index(h, wd, c, k, stride)
    cols = np.take(xb.reshape(n, -1), idx, axis=1).reshape(n * oh * ow, -1)
    dy_mat = dyb.reshape(n * oh * ow, f)
    dw = (cols.T @ dy_mat).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy_mat @ w.reshape(-1, f).T).reshape(n, oh, ow, k, k, c)
    dxb = np.zeros_like(xb)
    for ky in range(k):
        for kx in range(k):
            dxb[:, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride, :] += \
                dcols[:, :, :, ky, kx, :]
    return (dxb[0] if squeeze else dxb), dw, db


def fc_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"fc input {x.shape} incompatible with weight {w.shape}")
    return x @ w + b


def fc_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ w.T).reshape(x.shape)
    return dx, dw, db


GRU_PARAMS = ("wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh")


def gru_param_spec(prefix: str, in_dim: int, hidden: int):
    spec = []
    for gate in ("z", "r", "h"):
        spec.append((f"{prefix}.w{gate}", (in_dim, hidden)))
        spec.append((f"{prefix}.u{gate}", (hidden, hidden)))
        spec.append((f"{prefix}.b{gate}", (hidden,)))
    return spec


def gru_sequence(x_seq: np.ndarray, params: dict, prefix: str, h0: np.ndarray | None = None):
    """Run a GRU over a (T, In) sequence; returns (final hidden state, cache).

    The final hidden state is the sentence embedding.
    """
    if len(x_seq) == 0:
        raise ShapeError("gru_sequence needs a non-empty sequence")
    p = {k: params[f"{prefix}.{k}"] for k in GRU_PARAMS}
    hidden = p["uz"].shape[0]
    h = np.zeros(hidden, dtype=x_seq.dtype) if h0 is None else h0
    steps = []
    for x in x_seq:
        z = sigmoid(x @ p["wz"] + h @ p["uz"] + p["bz"])
        r = sigmoid(x @ p["wr"] + h @ p["ur"] + p["br"])
        hh = np.tanh(x @ p["wh"] + (r * h) @ p["uh"] + p["bh"])
        h_next = (1 - z) * h + z * hh
        steps.append((x, h, z, r, hh))
        h = h_next
    return h, steps


def gru_backward(dh: np.ndarray, cache, params: dict, grads: dict, prefix: str):
    """Backprop through gru_sequence; accumulates into `grads`, returns dx_seq."""
    p = {k: params[f"{prefix}.{k}"] for k in GRU_PARAMS}
    g = {k: grads[f"{prefix}.{k}"] for k in GRU_PARAMS}
    dx_seq = []
    dh = dh.copy()
    for x, h_prev, z, r, hh in reversed(cache):
        dz = dh * (hh - h_prev)
        dhh = dh * z
        dh_prev = dh * (1 - z)
        dah = dhh * (1 - hh * hh)
        g["wh"] += np.outer(x, dah)
        g["uh"] += np.outer(r * h_prev, dah)
        g["bh"] += dah
        drh = dah @ p["uh"].T
        dr = drh * h_prev
        dh_prev += drh * r
        dar = dr * r * (1 - r)
        g["wr"] += np.outer(x, dar)
        g["ur"] += np.outer(h_prev, dar)
        g["br"] += dar
        daz = dz * z * (1 - z)
        g["wz"] += np.outer(x, daz)
        g["uz"] += np.outer(h_prev, daz)
        g["bz"] += daz
        dx = daz @ p["wz"].T + dar @ p["wr"].T + dah @ p["wh"].T
        dh_prev += daz @ p["uz"].T + dar @ p["ur"].T
        dx_seq.append(dx)
        dh = dh_prev
    dx_seq.reverse()
    return np.stack(dx_seq), dh


def lstm_param_spec(prefix: str, in_dim: int, hidden: int):
    return [
        (f"{prefix}.wx", (in_dim, 4 * hidden)),
        (f"{prefix}.wh", (hidden, 4 * hidden)),
        (f"{prefix}.b", (4 * hidden,)),
    ]


def lstm_step(x: np.ndarray, h: np.ndarray, c: np.ndarray,
              wx: np.ndarray, wh: np.ndarray, b: np.ndarray):
    """One LSTM cell step; gate order i, f, g, o."""
    hidden = h.shape[-1]
    pre = x @ wx + h @ wh + b
    i = sigmoid(pre[..., :hidden])
    f = sigmoid(pre[..., hidden : 2 * hidden])
    g = np.tanh(pre[..., 2 * hidden : 3 * hidden])
    o = sigmoid(pre[..., 3 * hidden :])
    c_next = f * c + i * g
    h_next = o * np.tanh(c_next)
    cache = (x, h, c, i, f, g, o, c_next)
    return h_next, c_next, cache


def lstm_backward(dh_next: np.ndarray, dc_next: np.ndarray, cache,
                  wx: np.ndarray, wh: np.ndarray):
    """Backward for one cell step; supports a leading batch axis."""
    x, h, c, i, f, g, o, c_next = cache
    tc = np.tanh(c_next)
    dc_total = dh_next * o * (1 - tc * tc) + dc_next
    di = dc_total * g
    df = dc_total * c
    dg = dc_total * i
    do = dh_next * tc
    dpre = np.concatenate(
        [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)],
        axis=-1,
    )
    if x.ndim == 1:
        dwx = np.outer(x, dpre)
        dwh = np.outer(h, dpre)
        db = dpre
    else:
        dwx = x.T @ dpre
        dwh = h.T @ dpre
        db = dpre.sum(axis=0)
    dx = dpre @ wx.T
    dh = dpre @ wh.T
    dc = dc_total * f
    return dx, dh, dc, (dwx, dwh, db)


def global_norm(arrays) -> float:
    return float(np.sqrt(sum(float((a.astype(np.float64) ** 2).sum()) for a in arrays)))


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale all gradients in place so the joint L2 norm is at most max_norm.

    `grads` is an iterable of arrays, a dict of arrays, or a ParamSet.
    Returns the pre-clip norm.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    if isinstance(grads, ParamSet):
        arrays = [grads.grad_flat]
    elif isinstance(grads, dict):
        arrays = list(grads.values())
    else:
        arrays = list(grads)
    norm = global_norm(arrays)
    if norm > max_norm:
        scale = max_norm / norm
        for a in arrays:
            a *= np.asarray(scale, dtype=a.dtype)
    return norm


@dataclass
class AdamState:
    """Adam moments plus the annealed learning-rate schedule."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    base_lr: float = 1e-4
    anneal_factor: float = 0.9
    anneal_interval: int = 10000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamSet, base_lr: float = 1e-4,
                   anneal_factor: float = 0.9, anneal_interval: int = 10000) -> "AdamState":
        moment_dtype = np.float64 if params.dtype == np.float64 else np.float32
        return cls(
            m=np.zeros(params.total, dtype=moment_dtype),
            v=np.zeros(params.total, dtype=moment_dtype),
            base_lr=base_lr,
            anneal_factor=anneal_factor,
            anneal_interval=anneal_interval,
        )

    def effective_lr(self, step: int | None = None) -> float:
        step = self.step if step is None else step
        return self.base_lr * self.anneal_factor ** (step // self.anneal_interval)


def adam_update_flat(flat: np.ndarray, m: np.ndarray, v: np.ndarray, grad: np.ndarray,
                     t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                     eps: float = 1e-8) -> None:
    """In-place Adam update on flat buffers; t is the 1-based update index.

    Algebraically identical to the textbook form
    lr * (m / bc1) / (sqrt(v / bc2) + eps), refactored to minimize passes since
    this runs under the trainer's global-store lock.
    """
    g = grad.astype(m.dtype, copy=False)
    scratch = np.empty_like(m)
    m *= beta1
    np.multiply(g, 1.0 - beta1, out=scratch)
    m += scratch
    v *= beta2
    np.multiply(g, g, out=scratch)
    scratch *= 1.0 - beta2
    v += scratch
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    np.sqrt(v, out=scratch)
    scratch += eps * np.sqrt(bc2)
    np.divide(m, scratch, out=scratch)
    scratch *= lr * np.sqrt(bc2) / bc1
    flat -= scratch.astype(flat.dtype, copy=False)


def adam_step(params: ParamSet, state: AdamState) -> float:
    """Apply one Adam update from the accumulated gradients, then zero them.

    Returns the learning rate that was applied.
    """
    lr = state.effective_lr()
    t = state.step + 1
    adam_update_flat(params.flat, state.m, state.v, params.grad_flat, t, lr,
                     state.beta1, state.beta2, state.eps)
    state.step = t
    params.zero_grads()
    return lr


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> None:
    """Binary layout: magic, manifest length, JSON manifest, raw row-major data.

    The manifest carries a mandatory version field, tensor names/shapes/offsets
    and caller metadata. Data is little-endian in the ParamSet dtype.
    """
    dtype = np.dtype(params.dtype).newbyteorder("<")
    tensors = []
    offset = 0
    blobs = []
    for name, shape in params.spec:
        arr = np.ascontiguousarray(params.params[name], dtype=dtype)
        blob = arr.tobytes()
        tensors.append(
            {"name": name, "shape": list(shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "dtype": dtype.str,
            "tensors": tensors,
            "meta": meta or {},
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported version {manifest.get('version')!r}")
        data = fh.read()
    dtype = np.dtype(manifest["dtype"])
    spec = [(t["name"], tuple(t["shape"])) for t in manifest["tensors"]]
    params = ParamSet(spec, dtype=dtype.newbyteorder("="))
    for t in manifest["tensors"]:
        raw = data[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=dtype).reshape(tuple(t["shape"]))
        params.params[t["name"]][...] = arr
    return params, manifest["meta"]
