"""Strided 2-D convolution kernels on NHWC arrays.

Convolution gathers k*k shifted strided views of the padded input into a
column buffer and does one matmul. Its adjoint, the transposed convolution,
does the matmul first and scatter-adds the columns back. The input gradient
of a convolution is therefore a transposed convolution with the same kernel
and vice versa; both directions share :func:`im2col` / :func:`col2im`.

Kernels are stored as ``(kh, kw, c_in, c_out)`` for convolution. A transposed
convolution that maps ``c_in`` channels to ``c_out`` channels stores its
kernel as ``(kh, kw, c_out, c_in)``, i.e. the kernel of the convolution it is
the adjoint of.
"""

from __future__ import annotations

import numpy as np


def pair(p):
    if isinstance(p, (tuple, list)):
        return int(p[0]), int(p[1])
    return int(p), int(p)


def conv_out_size(size, k, stride, pad):
    lo, hi = pair(pad)
    return (size + lo + hi - k) // stride + 1


def conv_transpose_out_size(size, k, stride, pad, output_padding=0):
    lo, hi = pair(pad)
    return (size - 1) * stride - lo - hi + k + output_padding


def im2col(x, k, stride, pad, out_hw=None):
    """(N, H, W, C) -> (N, Ho, Wo, k, k, C) column buffer."""
    lo, hi = pair(pad)
    n, h, w, c = x.shape
    if lo or hi:
        xp = np.zeros((n, h + lo + hi, w + lo + hi, c), dtype=x.dtype)
        xp[:, lo:lo + h, lo:lo + w] = x
    else:
        xp = x
    ho, wo = out_hw if out_hw is not None else (
        conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad))
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols


def col2im(cols, out_shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns into an (N, H, W, C) array."""
    lo, hi = pair(pad)
    n, ho, wo = cols.shape[:3]
    _, h, w, c = out_shape
    # room for the last window even when output_padding leaves a ragged edge
    hp = max(h + lo + hi, (ho - 1) * stride + k)
    wp = max(w + lo + hi, (wo - 1) * stride + k)
    xp = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return np.ascontiguousarray(xp[:, lo:lo + h, lo:lo + w, :])


def conv2d(x, w, b, stride, pad):
    k, _, cin, cout = w.shape
    cols = im2col(x, k, stride, pad)
    n, ho, wo = cols.shape[:3]
    out = cols.reshape(n * ho * wo, k * k * cin) @ w.reshape(k * k * cin, cout)
    if b is not None:
        out += b
    return out.reshape(n, ho, wo, cout), cols


def conv2d_input_grad(g, w, in_shape, stride, pad):
    """Gradient of conv2d w.r.t. its input: transposed convolution of ``g``."""
    k, _, cin, cout = w.shape
    n, ho, wo, _ = g.shape
    cols = g.reshape(n * ho * wo, cout) @ w.reshape(k * k * cin, cout).T
    return col2im(cols.reshape(n, ho, wo, k, k, cin), in_shape, k, stride, pad)


def conv2d_weight_grad(g, cols):
    n, ho, wo, k, _, cin = cols.shape
    cout = g.shape[-1]
    gw = cols.reshape(n * ho * wo, k * k * cin).T @ g.reshape(n * ho * wo, cout)
    return gw.reshape(k, k, cin, cout)


def conv_transpose2d(y, w, b, stride, pad, out_hw):
    k, _, cout, cin = w.shape
    n, hi, wi, _ = y.shape
    cols = y.reshape(n * hi * wi, cin) @ w.reshape(k * k * cout, cin).T
    out = col2im(cols.reshape(n, hi, wi, k, k, cout), (n, out_hw[0], out_hw[1], cout), k, stride, pad)
    if b is not None:
        out += b
    return out


def conv_transpose2d_input_grad(g, w, in_hw, stride, pad):
    """Gradient of a transposed convolution w.r.t. its input: a plain convolution."""
    k, _, cout, cin = w.shape
    cols = im2col(g, k, stride, pad, out_hw=in_hw)
    n = g.shape[0]
    out = cols.reshape(n * in_hw[0] * in_hw[1], k * k * cout) @ w.reshape(k * k * cout, cin)
    return out.reshape(n, in_hw[0], in_hw[1], cin), cols


def conv_transpose2d_weight_grad(y, gcols):
    n, hi, wi, cin = y.shape
    k, cout = gcols.shape[3], gcols.shape[5]
    gw = gcols.reshape(n * hi * wi, k * k * cout).T @ y.reshape(n * hi * wi, cin)
    return gw.reshape(k, k, cout, cin)
