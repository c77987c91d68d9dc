"""Multimodal fusion: stacked 1x1-convolution attention plus the three
comparison mechanisms (netattn concat variant, sigmoid-gated hadamard,
flatten-and-concat).

Visual features are channels-last (W, H, D) with an optional leading batch
axis. Text vectors arrive already projected except for the hadamard gate,
whose sigmoid projection is part of the mechanism itself.
"""
from __future__ import annotations

import numpy as np

from .nn import ShapeError, fc_backward, fc_forward, sigmoid


def attn_fuse(r_e: np.ndarray, v_stack: np.ndarray, map_bias: np.ndarray | None = None) -> np.ndarray:
    """Each row of v_stack (n, D) acts as a 1x1 filter over r_e (..., W, H, D);
    the n maps stack along depth: out[..., x, y, j] = sum_d r_e[..., x, y, d] * v[j, d] (+ b_j)."""
    if r_e.shape[-1] != v_stack.shape[-1]:
        raise ShapeError(f"feature depth {r_e.shape[-1]} != filter length {v_stack.shape[-1]}")
    out = r_e @ v_stack.T
    if map_bias is not None:
        out = out + map_bias
    return out


def attn_fuse_backward(dm: np.ndarray, r_e: np.ndarray, v_stack: np.ndarray,
                       with_bias: bool = True):
    dr = dm @ v_stack
    lead = tuple(range(dm.ndim - 1))
    dv = np.tensordot(dm, r_e, axes=(lead, lead))
    db = dm.sum(axis=lead) if with_bias else None
    return dr, dv, db


def netattn_fuse(r_e: np.ndarray, v1: np.ndarray, map_bias: np.ndarray | None = None) -> np.ndarray:
    """Concatenate the visual features with a single attention map: (..., W, H, D+1)."""
    if v1.ndim != 1:
        raise ShapeError("netattn takes a single text vector")
    att = attn_fuse(r_e, v1[None, :], map_bias)
    return np.concatenate([r_e, att], axis=-1)


def netattn_fuse_backward(dout: np.ndarray, r_e: np.ndarray, v1: np.ndarray,
                          with_bias: bool = True):
    d = r_e.shape[-1]
    dr_direct = dout[..., :d]
    datt = dout[..., d:]
    dr_att, dv, db = attn_fuse_backward(datt, r_e, v1[None, :], with_bias)
    return dr_direct + dr_att, dv[0], db


def hadamard_fuse(r_e: np.ndarray, text_embedding: np.ndarray,
                  gate_w: np.ndarray, gate_b: np.ndarray):
    """Gated attention: out[..., x, y, d] = r_e[..., x, y, d] * sigmoid(FC(e))[d].

    Returns (out, gate); the gate is needed for the backward pass.
    """
    gate = sigmoid(fc_forward(text_embedding, gate_w, gate_b))
    if gate.shape[-1] != r_e.shape[-1]:
        raise ShapeError(f"gate width {gate.shape} != feature depth {r_e.shape[-1]}")
    if gate.ndim == 1:
        return r_e * gate, gate
    # batched: gate (N, D) broadcast over the two spatial axes
    return r_e * gate[:, None, None, :], gate


def hadamard_fuse_backward(dout: np.ndarray, r_e: np.ndarray, text_embedding: np.ndarray,
                           gate_w: np.ndarray, gate: np.ndarray):
    if gate.ndim == 1:
        dr = dout * gate
        dgate = (dout * r_e).sum(axis=tuple(range(dout.ndim - 1)))
    else:
        dr = dout * gate[:, None, None, :]
        dgate = (dout * r_e).sum(axis=(1, 2))
    dpre = dgate * gate * (1 - gate)
    demb, dw, db = fc_backward(dpre, text_embedding, gate_w)
    return dr, demb, dw, db


def concat_fuse(r_e: np.ndarray, text_vec: np.ndarray) -> np.ndarray:
    """Row-major flatten of r_e with the projected text vector appended."""
    if r_e.ndim == 3:
        return np.concatenate([r_e.reshape(-1), text_vec])
    n = r_e.shape[0]
    return np.concatenate([r_e.reshape(n, -1), text_vec], axis=-1)


def concat_fuse_backward(dout: np.ndarray, r_shape, text_dim: int):
    if dout.ndim == 1:
        split = dout.shape[0] - text_dim
        return dout[:split].reshape(r_shape), dout[split:]
    split = dout.shape[1] - text_dim
    return dout[:, :split].reshape(r_shape), dout[:, split:]


def output_size(kind: str, w: int, h: int, d: int, n: int, text_dim: int = 64) -> int:
    """Fused representation size; attn's w*h*n < hadamard's w*h*d whenever n < d."""
    return {
        "attn": w * h * n,
        "netattn": w * h * (d + 1),
        "hadamard": w * h * d,
        "concat": w * h * d + text_dim,
    }[kind]
