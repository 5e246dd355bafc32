"""Differentiable building blocks beyond plain arithmetic.

Every op takes and returns :class:`Tensor` objects and supports arbitrary
leading batch dimensions unless stated otherwise.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _normalize_axes, ensure_tensor, unbroadcast


# -- shape ops -----------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    (axis,) = _normalize_axes(axis, tensors[0].ndim)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    (axis,) = _normalize_axes(axis, tensors[0].ndim + 1)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def split(x: Tensor, sections: int | Sequence[int], axis: int = 0) -> list[Tensor]:
    """Split into equal sections (int) or at the given boundaries (sequence)."""
    (axis,) = _normalize_axes(axis, x.ndim)
    if isinstance(sections, int):
        if x.shape[axis] % sections:
            raise ValueError(f"axis of size {x.shape[axis]} does not split into {sections} sections")
        step = x.shape[axis] // sections
        bounds = [step * i for i in range(1, sections)]
    else:
        bounds = list(sections)
    edges = [0, *bounds, x.shape[axis]]
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        out.append(x[tuple(index)])
    return out


def pad(x: Tensor, widths: Sequence[tuple[int, int]], value: float = 0.0) -> Tensor:
    """Constant padding; ``widths`` has one (before, after) pair per dim."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise ValueError(f"pad widths for {len(widths)} dims given, tensor has {x.ndim}")
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    out = np.pad(x.data, widths, mode="constant", constant_values=value)
    return Tensor._make(out, (x,), lambda g: (g[index],))


def _along(v: Tensor, ndim: int, axis: int) -> Tensor:
    """Reshape a 1-d tensor so it broadcasts along ``axis`` of an ndim tensor."""
    (axis,) = _normalize_axes(axis, ndim)
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


# -- activations -----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return x.relu()


def sigmoid(x: Tensor) -> Tensor:
    return x.sigmoid()


def tanh(x: Tensor) -> Tensor:
    return x.tanh()


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def prelu(x: Tensor, slope: Tensor, axis: int = -1) -> Tensor:
    """PReLU with one learned slope per channel along ``axis``."""
    slope = ensure_tensor(slope)
    if slope.ndim == 1 and slope.shape[0] != 1:
        a = _along(slope, x.ndim, axis).data
    else:
        a = slope.data.reshape((1,) * x.ndim) if slope.size == 1 else slope.data
    pos = x.data > 0
    xd = x.data
    out = np.where(pos, xd, a * xd)
    slope_shape = slope.shape

    def backward(g):
        gx = np.where(pos, g, g * a)
        ga = unbroadcast(np.where(pos, 0.0, g * xd), a.shape).reshape(slope_shape)
        return gx, ga

    return Tensor._make(out, (x, slope), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, target: int | Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer class targets.

    ``logits`` is (..., K); ``target`` indexes the last axis per row.
    """
    logp = log_softmax(logits, axis=-1)
    flat = logp.reshape(-1, logits.shape[-1])
    idx = np.atleast_1d(np.asarray(target, dtype=np.int64)).reshape(-1)
    if idx.shape[0] != flat.shape[0]:
        raise ValueError(f"{idx.shape[0]} targets for {flat.shape[0]} rows of logits")
    if np.any(idx < 0) or np.any(idx >= logits.shape[-1]):
        raise IndexError(f"class index out of range [0, {logits.shape[-1]})")
    picked = flat[np.arange(flat.shape[0]), idx]
    return -picked.mean()


# -- normalization -----------------------------------------------------------------


def layer_norm(
    x: Tensor,
    axis: int = -1,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis``, then scale and shift.

    ``gain`` and ``bias`` are 1-d with the length of ``axis``.
    """
    (axis,) = _normalize_axes(axis, x.ndim)
    n = x.shape[axis]
    mu = x.data.mean(axis=axis, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        dxhat = g * gd if gain is not None else g
        s1 = dxhat.sum(axis=axis, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axis, keepdims=True)
        gx = inv * (dxhat - s1 / n - xhat * s2 / n)
        grads = [gx]
        if gain is not None:
            grads.append(unbroadcast(g * xhat, gd.shape).reshape(gain.shape))
        if bias is not None:
            grads.append(unbroadcast(g, bd.shape).reshape(bias.shape))
        return grads

    out = xhat
    parents = [x]
    gd = bd = None
    if gain is not None:
        gd = _along(gain, x.ndim, axis).data
        out = out * gd
        parents.append(gain)
    if bias is not None:
        bd = _along(bias, x.ndim, axis).data
        out = out + bd
        parents.append(bias)
    return Tensor._make(out, parents, backward)


# -- convolution ---------------------------------------------------------------------


def conv1d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int | tuple[int, int] = 0,
) -> Tensor:
    """Cross-correlation of x (..., C_in, T) with w (C_out, C_in, K).

    Output length is ``floor((T + pads - K) / stride) + 1``.
    """
    x, w = ensure_tensor(x), ensure_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise ValueError(f"conv1d channel mismatch: input {x.shape}, weight {w.shape}")
    left, right = (padding, padding) if isinstance(padding, int) else padding
    xd = x.data
    if left or right:
        xd = np.pad(xd, [(0, 0)] * (xd.ndim - 1) + [(left, right)])
    t_in = xd.shape[-1]
    if t_in < k:
        raise ValueError(f"input too short: length {t_in} (after padding) < kernel {k}")
    t_out = (t_in - k) // stride + 1
    # (..., C_in, T_out, K) -> (..., T_out, C_in*K)
    win = sliding_window_view(xd, k, axis=-1)[..., ::stride, :]
    lead = win.shape[:-3]
    cols = np.moveaxis(win, -2, -3).reshape(*lead, t_out, c_in * k)
    wmat = w.data.reshape(c_out, c_in * k)
    out = np.swapaxes(cols @ wmat.T, -1, -2)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        gt = np.swapaxes(g, -1, -2)  # (..., T_out, C_out)
        gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(w.shape)
        gcols = (gt @ wmat).reshape(*lead, t_out, c_in, k)
        gx = np.zeros(xd.shape, dtype=g.dtype)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gx[..., j : j + span : stride] += np.swapaxes(gcols[..., j], -1, -2)
        gx = gx[..., left : t_in - right]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)))
        return grads

    parents = [x, w] + ([bias] if bias is not None else [])
    return Tensor._make(out, parents, backward)


def transpose_conv1d(x: Tensor, w: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv1d`: x (..., C_in, T), w (C_in, C_out, K).

    Output length is ``(T - 1) * stride + K``.
    """
    x, w = ensure_tensor(x), ensure_tensor(w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    c_in, c_out, k = w.shape
    if x.shape[-2] != c_in:
        raise ValueError(f"transpose_conv1d channel mismatch: input {x.shape}, weight {w.shape}")
    t = x.shape[-1]
    t_out = (t - 1) * stride + k
    xt = np.swapaxes(x.data, -1, -2)  # (..., T, C_in)
    wmat = w.data.reshape(c_in, c_out * k)
    cols = (xt @ wmat).reshape(*xt.shape[:-1], c_out, k)
    lead = x.shape[:-2]
    out = np.zeros((*lead, c_out, t_out), dtype=cols.dtype)
    span = stride * (t - 1) + 1
    for j in range(k):
        out[..., j : j + span : stride] += np.swapaxes(cols[..., j], -1, -2)
    if bias is not None:
        out = out + bias.data[:, None]

    def backward(g):
        win = sliding_window_view(g, k, axis=-1)[..., ::stride, :]  # (..., C_out, T, K)
        gcols = np.moveaxis(win, -2, -3).reshape(*lead, t, c_out * k)
        gx = np.swapaxes(gcols @ wmat.T, -1, -2)
        gw = (xt.reshape(-1, c_in).T @ gcols.reshape(-1, c_out * k)).reshape(w.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=tuple(range(g.ndim - 2)) + (g.ndim - 1,)))
        return grads

    parents = [x, w] + ([bias] if bias is not None else [])
    return Tensor._make(out, parents, backward)


# -- recurrent ---------------------------------------------------------------------


def lstm_cell(
    x: Tensor,
    h: Tensor,
    c: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
) -> tuple[Tensor, Tensor]:
    """One LSTM step built from primitive ops (gate order i, f, g, o).

    x is (..., H_in), h and c are (..., H), w_ih is (4H, H_in), w_hh is (4H, H).
    """
    hidden = w_hh.shape[1]
    if w_ih.shape[0] != 4 * hidden or x.shape[-1] != w_ih.shape[1] or h.shape[-1] != hidden:
        raise ValueError(
            f"lstm_cell shape mismatch: x {x.shape}, h {h.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}"
        )
    gates = x @ w_ih.T + h @ w_hh.T + b
    i, f, g, o = split(gates, 4, axis=-1)
    c_new = f.sigmoid() * c + i.sigmoid() * g.tanh()
    h_new = o.sigmoid() * c_new.tanh()
    return h_new, c_new


def lstm(
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
    reverse: bool = False,
) -> Tensor:
    """Run an LSTM over x (B, T, H_in) from a zero state; returns (B, T, H).

    A single graph node whose backward is hand-written BPTT. The result is the
    same as chaining :func:`lstm_cell`, only much cheaper to differentiate.
    With ``reverse`` the sequence is consumed from the end and outputs stay
    aligned with input time steps.
    """
    batch, steps, _ = x.shape
    hidden = w_hh.shape[1]
    if w_ih.shape != (4 * hidden, x.shape[-1]):
        raise ValueError(f"lstm shape mismatch: x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}")
    dtype = x.dtype
    # time-major copies keep every per-step slice contiguous
    xs = np.ascontiguousarray(np.swapaxes(x.data, 0, 1))
    if reverse:
        xs = xs[::-1]
    wi, wh = w_ih.data, w_hh.data
    H = hidden

    # sigmoid(z) = 0.5 * tanh(z / 2) + 0.5, so all four gates need one tanh call
    half = np.full(4 * H, 0.5, dtype=dtype)
    half[2 * H : 3 * H] = 1.0
    offset = np.full(4 * H, 0.5, dtype=dtype)
    offset[2 * H : 3 * H] = 0.0
    pre = (xs.reshape(-1, xs.shape[-1]) @ (wi * half[:, None]).T + b.data * half).reshape(steps, batch, 4 * H)
    wh_scaled = np.ascontiguousarray((wh * half[:, None]).T)
    acts = np.empty((steps, batch, 4 * H), dtype=dtype)
    cs = np.empty((steps + 1, batch, H), dtype=dtype)
    hs = np.empty((steps + 1, batch, H), dtype=dtype)
    cs[0] = 0.0
    hs[0] = 0.0
    for t in range(steps):
        a = acts[t]
        np.matmul(hs[t], wh_scaled, out=a)
        a += pre[t]
        np.tanh(a, out=a)
        a *= half
        a += offset
        c = cs[t + 1]
        np.multiply(a[:, H : 2 * H], cs[t], out=c)
        c += a[:, :H] * a[:, 2 * H : 3 * H]
        np.multiply(a[:, 3 * H :], np.tanh(c), out=hs[t + 1])
    out = hs[1:][::-1] if reverse else hs[1:]

    def backward(gout):
        gh_seq = np.swapaxes(gout, 0, 1)
        if reverse:
            gh_seq = gh_seq[::-1]
        dz = np.empty_like(acts)
        dh_next = np.zeros((batch, H), dtype=dtype)
        dc_next = np.zeros((batch, H), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            a = acts[t]
            i, f, gg, o = a[:, :H], a[:, H : 2 * H], a[:, 2 * H : 3 * H], a[:, 3 * H :]
            tc = np.tanh(cs[t + 1])
            dh = gh_seq[t] + dh_next
            dc = dh * o
            dc *= 1.0 - tc * tc
            dc += dc_next
            dzt = dz[t]
            np.multiply(dc * gg, i * (1.0 - i), out=dzt[:, :H])
            np.multiply(dc * cs[t], f * (1.0 - f), out=dzt[:, H : 2 * H])
            np.multiply(dc * i, 1.0 - gg * gg, out=dzt[:, 2 * H : 3 * H])
            np.multiply(dh * tc, o * (1.0 - o), out=dzt[:, 3 * H :])
            dh_next = dzt @ wh
            dc_next = dc * f
        flat_dz = dz.reshape(-1, 4 * H)
        gwi = flat_dz.T @ xs.reshape(-1, xs.shape[-1])
        gwh = flat_dz.T @ hs[:-1].reshape(-1, H)
        gb = flat_dz.sum(axis=0)
        gx = (flat_dz @ wi).reshape(steps, batch, -1)
        if reverse:
            gx = gx[::-1]
        return np.swapaxes(gx, 0, 1), gwi, gwh, gb

    return Tensor._make(np.ascontiguousarray(np.swapaxes(out, 0, 1)), (x, w_ih, w_hh, b), backward)


def bilstm(x: Tensor, forward_params: Sequence[Tensor], backward_params: Sequence[Tensor]) -> Tensor:
    """Bidirectional LSTM over x (B, T, H_in) or (T, H_in); output (..., T, 2H).

    Per step the forward-direction state comes first, then the backward one.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    fwd = lstm(x, *forward_params)
    bwd = lstm(x, *backward_params, reverse=True)
    out = concat([fwd, bwd], axis=-1)
    return out.reshape(out.shape[1:]) if squeeze else out


# -- chunking -----------------------------------------------------------------------


def frames(x: Tensor, size: int, hop: int) -> Tensor:
    """Overlapping windows along the last axis: (..., T) -> (..., size, N).

    ``T`` must satisfy ``(T - size) % hop == 0``; the inverse summation is
    :func:`overlap_add`.
    """
    t = x.shape[-1]
    if t < size or (t - size) % hop:
        raise ValueError(f"length {t} does not tile with window {size} and hop {hop}")
    n = (t - size) // hop + 1
    win = sliding_window_view(x.data, size, axis=-1)[..., ::hop, :]  # (..., N, size)
    out = np.ascontiguousarray(np.swapaxes(win, -1, -2))

    def backward(g):
        return (_overlap_add_np(g, hop),)

    assert out.shape[-1] == n
    return Tensor._make(out, (x,), backward)


def _overlap_add_np(chunks: np.ndarray, hop: int) -> np.ndarray:
    size, n = chunks.shape[-2], chunks.shape[-1]
    out = np.zeros((*chunks.shape[:-2], (n - 1) * hop + size), dtype=chunks.dtype)
    for j in range(n):
        out[..., j * hop : j * hop + size] += chunks[..., j]
    return out


def overlap_add(chunks: Tensor, hop: int) -> Tensor:
    """Sum overlapping windows (..., size, N) back into a sequence (..., T)."""
    size = chunks.shape[-2]

    def backward(g):
        win = sliding_window_view(g, size, axis=-1)[..., ::hop, :]
        return (np.ascontiguousarray(np.swapaxes(win, -1, -2)),)

    return Tensor._make(_overlap_add_np(chunks.data, hop), (chunks,), backward)
