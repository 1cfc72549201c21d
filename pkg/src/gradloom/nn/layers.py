"""Single-example forward/backward kernels for each layer kind.

All kernels take and return (height, width, depth) float64 arrays. Weight
vectors are flat; each kernel reshapes its own view: conv as
(filters, k, k, depth_in), fc and softmax as (out, in). Backward returns
(dx, dW_flat, db) with dW/db congruent to the flat parameter arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_forward(x, w_flat, b, filters, size, stride, padding):
    h, w, d = x.shape
    if padding:
        xp = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    else:
        xp = x
    # (H', W', d, k, k) -> strided -> (oh, ow, k, k, d) patch rows
    win = sliding_window_view(xp, (size, size), axis=(0, 1))[::stride, ::stride]
    oh, ow = win.shape[0], win.shape[1]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(
        oh * ow, size * size * d
    )
    w2 = w_flat.reshape(filters, size * size * d)
    y = (cols @ w2.T + b).reshape(oh, ow, filters)
    cache = (cols, x.shape, (oh, ow))
    return y, cache


def conv_backward(dout, w_flat, cache, filters, size, stride, padding):
    cols, x_shape, (oh, ow) = cache
    h, w, d = x_shape
    dout2 = dout.reshape(oh * ow, filters)
    w2 = w_flat.reshape(filters, size * size * d)
    dw = (dout2.T @ cols).reshape(-1)
    db = dout2.sum(axis=0)
    dcols = (dout2 @ w2).reshape(oh, ow, size, size, d)
    dxp = np.zeros((h + 2 * padding, w + 2 * padding, d))
    for i in range(size):
        for j in range(size):
            dxp[i : i + oh * stride : stride, j : j + ow * stride : stride, :] += dcols[
                :, :, i, j, :
            ]
    if padding:
        dx = dxp[padding : padding + h, padding : padding + w, :]
    else:
        dx = dxp
    return dx, dw, db


def pool_forward(x, size, stride):
    h, w, d = x.shape
    win = sliding_window_view(x, (size, size), axis=(0, 1))[::stride, ::stride]
    oh, ow = win.shape[0], win.shape[1]
    flat = win.reshape(oh, ow, d, size * size)
    idx = flat.argmax(axis=3)
    y = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0]
    return y, (idx, x.shape, (oh, ow))


def pool_backward(dout, cache, size, stride):
    idx, x_shape, (oh, ow) = cache
    h, w, d = x_shape
    oy, ox, ch = np.meshgrid(
        np.arange(oh), np.arange(ow), np.arange(d), indexing="ij"
    )
    src_y = oy * stride + idx // size
    src_x = ox * stride + idx % size
    flat_idx = (src_y * w + src_x) * d + ch
    dx = np.zeros(h * w * d)
    np.add.at(dx, flat_idx.reshape(-1), dout.reshape(-1))
    return dx.reshape(h, w, d)


def fc_forward(x, w_flat, b, neurons, drop_mask=None, drop_scale=1.0):
    xf = x.reshape(-1)
    w2 = w_flat.reshape(neurons, xf.size)
    y = w2 @ xf + b
    if drop_mask is not None:
        y = np.where(drop_mask, y * drop_scale, 0.0)
    return y.reshape(1, 1, neurons), (xf, x.shape)


def fc_backward(dout, w_flat, cache, neurons, drop_mask=None, drop_scale=1.0):
    xf, x_shape = cache
    dy = dout.reshape(-1)
    if drop_mask is not None:
        dy = np.where(drop_mask, dy * drop_scale, 0.0)
    w2 = w_flat.reshape(neurons, xf.size)
    dw = np.outer(dy, xf).reshape(-1)
    db = dy
    dx = (w2.T @ dy).reshape(x_shape)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, cache):
    return dout * (cache > 0)


def softmax_forward(x, w_flat, b, n_classes):
    xf = x.reshape(-1)
    w2 = w_flat.reshape(n_classes, xf.size)
    logits = w2 @ xf + b
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return probs, (xf, x.shape, probs)


def softmax_backward(label_index, w_flat, cache, n_classes):
    """Cross-entropy gradient through the classifier layer.

    Returns (dx, dw, db, loss) with loss = -log p[label_index].
    """
    xf, x_shape, probs = cache
    loss = -np.log(probs[label_index]) if probs[label_index] > 0 else np.inf
    dlogits = probs.copy()
    dlogits[label_index] -= 1.0
    w2 = w_flat.reshape(n_classes, xf.size)
    dw = np.outer(dlogits, xf).reshape(-1)
    db = dlogits
    dx = (w2.T @ dlogits).reshape(x_shape)
    return dx, dw, db, float(loss)
