"""Forward/backward primitives on channels-last maps of shape (N, T, F, C).

Each ``*_forward`` returns ``(out, ctx)``; the matching ``*_backward`` takes
``ctx`` and the upstream gradient and returns the input gradient (plus
parameter gradients where the layer has parameters).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


# ---------------------------------------------------------------- padding

def pad_axis(x: np.ndarray, axis: int, before: int, after: int, mode: str) -> np.ndarray:
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    if mode == "zero":
        return np.pad(x, widths)
    if mode == "edge":
        return np.pad(x, widths, mode="edge")
    raise ValueError(f"unknown pad mode {mode!r}")


def unpad_axis(g: np.ndarray, axis: int, before: int, after: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`pad_axis`."""
    length = g.shape[axis] - before - after
    core = np.take(g, np.arange(before, before + length), axis=axis)
    if mode == "edge" and (before or after):
        core = core.copy()
        head = [slice(None)] * g.ndim
        head[axis] = slice(0, before)
        tail = [slice(None)] * g.ndim
        tail[axis] = slice(before + length, None)
        first = [slice(None)] * g.ndim
        first[axis] = slice(0, 1)
        last = [slice(None)] * g.ndim
        last[axis] = slice(length - 1, length)
        core[tuple(first)] += g[tuple(head)].sum(axis=axis, keepdims=True)
        core[tuple(last)] += g[tuple(tail)].sum(axis=axis, keepdims=True)
    return core


# ------------------------------------------------------------ 1-D convolution

def conv_axis_forward(x, weight, bias, axis: int, pad_mode: str = "zero"):
    """'Same' convolution along one spatial axis (1 = time, 2 = frequency).

    ``weight`` has shape (C_out, C_in, k) with odd ``k``.
    """
    c_out, c_in, k = weight.shape
    half = k // 2
    xp = pad_axis(x, axis, half, half, pad_mode)
    # (N, T, F, C_in, k) -> rows of length C_in * k, matching weight.reshape(C_out, -1)
    cols = sliding_window_view(xp, k, axis=axis)
    n, t, f = cols.shape[:3]
    cols = cols.reshape(n * t * f, c_in * k)
    w2 = weight.reshape(c_out, c_in * k)
    out = (cols @ w2.T).reshape(n, t, f, c_out) + bias
    return out, (cols, xp.shape, weight, axis, pad_mode)


def conv_axis_backward(ctx, dout):
    cols, xp_shape, weight, axis, pad_mode = ctx
    c_out, c_in, k = weight.shape
    half = k // 2
    n, t, f = dout.shape[:3]
    d2 = dout.reshape(-1, c_out)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(c_out, -1)).reshape(n, t, f, c_in, k)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    length = dout.shape[axis]
    for j in range(k):
        idx = [slice(None)] * 4
        idx[axis] = slice(j, j + length)
        dxp[tuple(idx)] += dcols[..., j]
    dx = unpad_axis(dxp, axis, half, half, pad_mode)
    return dx, dweight, dbias


def dense_forward(x, weight, bias):
    """Pointwise linear map over the last axis; ``weight`` is (C_out, C_in)."""
    return x @ weight.T + bias, (x, weight)


def dense_backward(ctx, dout):
    x, weight = ctx
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ weight, d2.T @ x2, d2.sum(axis=0)


# ------------------------------------------------------------ group norm

GN_EPS = 1e-5


def _group_sum(per_channel, groups):
    """(N, C) per-channel sums -> (N, C) sums over each channel's group."""
    n, c = per_channel.shape
    g = per_channel.reshape(n, groups, c // groups).sum(axis=-1, keepdims=True)
    return np.broadcast_to(g, (n, groups, c // groups)).reshape(n, c)


def group_norm_forward(x, scale, offset, groups: int):
    n, t, f, c = x.shape
    m = t * f * (c // groups)
    x3 = x.reshape(n, t * f, c)
    mean = _group_sum(x3.sum(axis=1), groups) / m
    xc = x3 - mean[:, None, :]
    var = _group_sum(np.einsum("npc,npc->nc", xc, xc), groups) / m
    inv_std = (1.0 / np.sqrt(var + GN_EPS)).astype(x.dtype)
    xhat = (xc * inv_std[:, None, :]).reshape(x.shape)
    return xhat * scale + offset, (xhat, inv_std, scale, groups)


def group_norm_backward(ctx, dout):
    xhat, inv_std, scale, groups = ctx
    n, t, f, c = xhat.shape
    m = t * f * (c // groups)
    d3 = dout.reshape(n, t * f, c)
    x3 = xhat.reshape(n, t * f, c)
    sum_d = d3.sum(axis=1)
    sum_dx = np.einsum("npc,npc->nc", d3, x3)
    dscale = (sum_dx).sum(axis=0)
    doffset = sum_d.sum(axis=0)
    # gradients w.r.t. xhat are dout * scale; scale is per channel
    g_d = _group_sum(sum_d * scale, groups)
    g_dx = _group_sum(sum_dx * scale, groups)
    dx = (inv_std / m)[:, None, :] * (
        m * d3 * scale - g_d[:, None, :] - x3 * g_dx[:, None, :]
    )
    return dx.reshape(xhat.shape), dscale, doffset


# ------------------------------------------------------------ activations

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dout):
    return dout * mask


def spatial_dropout_forward(x, rate: float, rng: np.random.Generator | None):
    """Drops whole channels per sample; inverted scaling keeps the expectation."""
    if rng is None or rate <= 0.0:
        return x, None
    n, c = x.shape[0], x.shape[-1]
    keep = (rng.random((n, c)) >= rate).astype(x.dtype) / (1.0 - rate)
    keep = keep[:, None, None, :]
    return x * keep, keep


def spatial_dropout_backward(keep, dout):
    return dout if keep is None else dout * keep


# ------------------------------------------------------------ pooling

def max_pool_forward(x):
    """2x2 max pool with stride 2; odd trailing rows/columns are dropped."""
    n, t, f, c = x.shape
    t2, f2 = t // 2, f // 2
    xc = x[:, : 2 * t2, : 2 * f2, :]
    win = xc.reshape(n, t2, 2, f2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, t2, f2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def max_pool_backward(ctx, dout):
    arg, shape = ctx
    n, t, f, c = shape
    t2, f2 = t // 2, f // 2
    onehot = arg[..., None] == np.arange(4)
    dwin = onehot * dout[..., None]
    dwin = dwin.reshape(n, t2, f2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * t2, 2 * f2, c)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, : 2 * t2, : 2 * f2, :] = dwin
    return dx


# ------------------------------------------------------------ spectro-temporal-channel attention

def stc_attention_forward(x, p: dict):
    """Attention-weighted features with the same shape as ``x``.

    ``p`` holds ``mlp1.weight/bias``, ``mlp2.weight/bias`` (channel branch) and
    ``temporal.weight/bias``, ``spectral.weight/bias`` (2 -> 1 channel convs).
    """
    n, t, f, c = x.shape
    # channel branch: GAP -> ReLU perceptron -> tanh
    g = x.mean(axis=(1, 2))
    h_pre, ctx_m1 = dense_forward(g, p["mlp1.weight"], p["mlp1.bias"])
    h, relu_mask = relu_forward(h_pre)
    c_pre, ctx_m2 = dense_forward(h, p["mlp2.weight"], p["mlp2.bias"])
    cmap = np.tanh(c_pre)

    # spectro-temporal branch over the [mean || max] channel summary
    arg_max = x.argmax(axis=-1)
    pooled = np.stack([x.mean(axis=-1), np.take_along_axis(x, arg_max[..., None], -1)[..., 0]], axis=-1)
    tmap, ctx_t = conv_axis_forward(pooled, p["temporal.weight"], p["temporal.bias"], 1, "edge")
    smap, ctx_s = conv_axis_forward(pooled, p["spectral.weight"], p["spectral.bias"], 2, "edge")

    logits = cmap[:, None, None, :] * tmap * smap
    flat = logits.reshape(n, t * f, c)
    flat = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(flat)
    weights = (e / e.sum(axis=1, keepdims=True)).reshape(x.shape)
    out = weights * x
    ctx = (x, weights, cmap, tmap, smap, arg_max, ctx_m1, relu_mask, ctx_m2, ctx_t, ctx_s)
    return out, ctx


def stc_attention_backward(ctx, dout):
    x, weights, cmap, tmap, smap, arg_max, ctx_m1, relu_mask, ctx_m2, ctx_t, ctx_s = ctx
    n, t, f, c = x.shape
    grads = {}
    dx = dout * weights
    dw = dout * x
    dlog = weights * (dw - (dw * weights).sum(axis=(1, 2), keepdims=True))

    ts = tmap * smap
    dcmap = (dlog * ts).sum(axis=(1, 2))
    dts = (dlog * cmap[:, None, None, :]).sum(axis=-1, keepdims=True)
    dtmap = dts * smap
    dsmap = dts * tmap

    dpool_t, grads["temporal.weight"], grads["temporal.bias"] = conv_axis_backward(ctx_t, dtmap)
    dpool_s, grads["spectral.weight"], grads["spectral.bias"] = conv_axis_backward(ctx_s, dsmap)
    dpool = dpool_t + dpool_s
    dx += dpool[..., 0:1] / c
    np.put_along_axis(
        dx, arg_max[..., None],
        np.take_along_axis(dx, arg_max[..., None], -1) + dpool[..., 1:2], axis=-1,
    )

    dc_pre = dcmap * (1.0 - cmap**2)
    dh, grads["mlp2.weight"], grads["mlp2.bias"] = dense_backward(ctx_m2, dc_pre)
    dh_pre = relu_backward(relu_mask, dh)
    dg, grads["mlp1.weight"], grads["mlp1.bias"] = dense_backward(ctx_m1, dh_pre)
    dx += dg[:, None, None, :] / (t * f)
    return dx, grads
