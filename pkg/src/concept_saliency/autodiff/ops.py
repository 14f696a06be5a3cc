"""Graph operations.

Every builder function validates shapes eagerly, returns an unevaluated
:class:`Tensor` and attaches an op object. The op's ``forward`` saves what
``backward`` needs (pre-activations, column buffers, normalisation stats).
Only :class:`Relu` looks at the backprop rule; every other op propagates
gradients unchanged.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from . import conv as _conv
from .rules import relu_backward
from .tensor import Tensor, as_tensor


def _node(op, parents, shape):
    return Tensor(op=op, parents=parents, shape=shape)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Op:
    kind = "op"

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g, rule, needs):
        raise NotImplementedError


# -- elementwise ---------------------------------------------------------------

class Add(Op):
    kind = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g, rule, needs):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Op):
    kind = "sub"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g, rule, needs):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Op):
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g, rule, needs):
        return (_unbroadcast(g * self.b, self.a.shape) if needs[0] else None,
                _unbroadcast(g * self.a, self.b.shape) if needs[1] else None)


class Scale(Op):
    kind = "scale"

    def __init__(self, c):
        self.c = c

    def forward(self, a):
        return (a * self.c).astype(a.dtype, copy=False)

    def backward(self, g, rule, needs):
        return ((g * self.c).astype(g.dtype, copy=False),)


class Exp(Op):
    kind = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g, rule, needs):
        return (g * self.out,)


class Square(Op):
    kind = "square"

    def forward(self, a):
        self.a = a
        return a * a

    def backward(self, g, rule, needs):
        return (2 * g * self.a,)


class Sigmoid(Op):
    kind = "sigmoid"

    def forward(self, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, g, rule, needs):
        return (g * self.out * (1 - self.out),)


class Relu(Op):
    kind = "relu"

    def forward(self, a):
        self.pre = a
        return np.maximum(a, 0)

    def backward(self, g, rule, needs):
        return (relu_backward(self.pre, g, rule),)


# -- reductions and shape --------------------------------------------------------

class Sum(Op):
    kind = "sum"

    def __init__(self, axis):
        self.axis = axis

    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(axis=self.axis), dtype=a.dtype)

    def backward(self, g, rule, needs):
        if self.axis is None:
            return (np.broadcast_to(g, self.shape).copy(),)
        axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
        g = np.expand_dims(g, tuple(ax % len(self.shape) for ax in axes))
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Op):
    kind = "reshape"

    def __init__(self, shape):
        self.out_shape = shape

    def forward(self, a):
        self.in_shape = a.shape
        return a.reshape(self.out_shape)

    def backward(self, g, rule, needs):
        return (g.reshape(self.in_shape),)


class Dot(Op):
    """Row-wise dot product of a batch ``(N, D)`` with a vector ``(D,)``."""

    kind = "dot"

    def forward(self, a, v):
        self.a, self.v = a, v
        return a @ v

    def backward(self, g, rule, needs):
        ga = np.multiply.outer(g, self.v) if needs[0] else None
        gv = g @ self.a if needs[1] else None
        return ga, gv


# -- layers ----------------------------------------------------------------------

class Dense(Op):
    kind = "dense"

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, g, rule, needs):
        return (g @ self.w.T if needs[0] else None,
                self.x.T @ g if needs[1] else None,
                g.sum(axis=0) if needs[2] else None)


class Conv2d(Op):
    kind = "conv2d"

    def __init__(self, stride, pad):
        self.stride, self.pad = stride, pad

    def forward(self, x, w, b):
        self.in_shape, self.w = x.shape, w
        out, self.cols = _conv.conv2d(x, w, b, self.stride, self.pad)
        return out

    def backward(self, g, rule, needs):
        gx = _conv.conv2d_input_grad(g, self.w, self.in_shape, self.stride, self.pad) if needs[0] else None
        gw = _conv.conv2d_weight_grad(g, self.cols) if needs[1] else None
        gb = g.sum(axis=(0, 1, 2)) if needs[2] else None
        return gx, gw, gb


class ConvTranspose2d(Op):
    kind = "conv2d_transpose"

    def __init__(self, stride, pad, out_hw):
        self.stride, self.pad, self.out_hw = stride, pad, out_hw

    def forward(self, y, w, b):
        self.y, self.w = y, w
        return _conv.conv_transpose2d(y, w, b, self.stride, self.pad, self.out_hw)

    def backward(self, g, rule, needs):
        in_hw = self.y.shape[1:3]
        gy, gcols = _conv.conv_transpose2d_input_grad(g, self.w, in_hw, self.stride, self.pad)
        gw = _conv.conv_transpose2d_weight_grad(self.y, gcols) if needs[1] else None
        gb = g.sum(axis=(0, 1, 2)) if needs[2] else None
        return (gy if needs[0] else None), gw, gb


class Upsample2x(Op):
    kind = "upsample"

    def forward(self, x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, g, rule, needs):
        n, h, w, c = g.shape
        return (g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)


class BatchNormState:
    """Running statistics of one batchnorm layer (mutated only in training mode)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


class BatchNorm(Op):
    """Normalises over every axis but the last (channels / features)."""

    kind = "batchnorm"

    def __init__(self, state: BatchNormState, training: bool):
        self.state, self.training = state, training

    def forward(self, x, gamma, beta):
        axes = tuple(range(x.ndim - 1))
        st = self.state
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = st.momentum
            st.mean = ((1 - m) * st.mean + m * mean).astype(st.mean.dtype)
            st.var = ((1 - m) * st.var + m * var).astype(st.var.dtype)
        else:
            mean = st.mean.astype(x.dtype, copy=False)
            var = st.var.astype(x.dtype, copy=False)
        self.inv_std = (1.0 / np.sqrt(var + st.eps)).astype(x.dtype)
        self.xhat = (x - mean) * self.inv_std
        self.gamma = gamma
        self.axes = axes
        return self.xhat * gamma + beta

    def backward(self, g, rule, needs):
        axes = self.axes
        ggamma = (g * self.xhat).sum(axis=axes) if needs[1] else None
        gbeta = g.sum(axis=axes) if needs[2] else None
        gx = None
        if needs[0]:
            gxhat = g * self.gamma
            if self.training:
                m = g.size // g.shape[-1]
                gx = (self.inv_std / m) * (
                    m * gxhat - gxhat.sum(axis=axes) - self.xhat * (gxhat * self.xhat).sum(axis=axes)
                )
            else:
                gx = gxhat * self.inv_std
        return gx, ggamma, gbeta


# -- builders --------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(Add(), (a, b), _broadcast_shape("add", a, b))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(Sub(), (a, b), _broadcast_shape("sub", a, b))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(Mul(), (a, b), _broadcast_shape("mul", a, b))


def scale(a, c):
    return _node(Scale(float(c)), (as_tensor(a),), as_tensor(a).shape)


def exp(a):
    return _node(Exp(), (a,), a.shape)


def square(a):
    return _node(Square(), (a,), a.shape)


def sigmoid(a):
    return _node(Sigmoid(), (a,), a.shape)


def relu(a):
    return _node(Relu(), (a,), a.shape)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    if axis is None:
        shape = ()
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = {ax % len(a.shape) for ax in axes}
        shape = tuple(n for i, n in enumerate(a.shape) if i not in axes)
    return _node(Sum(axis), (a,), shape)


def mean(a, axis=None):
    total = sum(a, axis)
    count = int(np.prod(a.shape)) // max(1, int(np.prod(total.shape)))
    return scale(total, 1.0 / count)


def reshape(a, shape):
    shape = tuple(shape)
    if -1 in shape:
        known = int(np.prod([n for n in shape if n != -1]))
        shape = tuple(int(np.prod(a.shape)) // known if n == -1 else n for n in shape)
    if int(np.prod(shape)) != int(np.prod(a.shape)):
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    return _node(Reshape(shape), (a,), shape)


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def dot(a, v):
    v = as_tensor(v)
    if len(a.shape) != 2 or len(v.shape) != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"dot: batch shape {a.shape} incompatible with vector shape {v.shape}")
    return _node(Dot(), (a, v), (a.shape[0],))


def dense(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if len(x.shape) == 1:
        x = reshape(x, (1, x.shape[0]))
        out = dense(x, w, b)
        return reshape(out, (w.shape[1],))
    if len(x.shape) != 2 or len(w.shape) != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    return _node(Dense(), (x, w, b), (x.shape[0], w.shape[1]))


def _check_conv(kind, x, w, b, cin_axis, cout_axis):
    if len(x.shape) != 4 or len(w.shape) != 4:
        raise ShapeError(f"{kind}: expected NHWC input and 4-D kernel, got {x.shape} and {w.shape}")
    if w.shape[0] != w.shape[1]:
        raise ShapeError(f"{kind}: only square kernels supported, got {w.shape}")
    if x.shape[3] != w.shape[cin_axis]:
        raise ShapeError(f"{kind}: input shape {x.shape} has {x.shape[3]} channels, kernel shape {w.shape} expects {w.shape[cin_axis]}")
    if b.shape != (w.shape[cout_axis],):
        raise ShapeError(f"{kind}: bias shape {b.shape} != ({w.shape[cout_axis]},)")


def conv2d(x, w, b, stride=1, pad=0):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv("conv2d", x, w, b, 2, 3)
    k = w.shape[0]
    ho = _conv.conv_out_size(x.shape[1], k, stride, pad)
    wo = _conv.conv_out_size(x.shape[2], k, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for kernel shape {w.shape}")
    return _node(Conv2d(stride, pad), (x, w, b), (x.shape[0], ho, wo, w.shape[3]))


def conv2d_transpose(x, w, b, stride=1, pad=0, output_padding=0):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_conv("conv2d_transpose", x, w, b, 3, 2)
    if not 0 <= output_padding < stride:
        raise ShapeError(f"conv2d_transpose: output_padding {output_padding} must be in [0, {stride})")
    k = w.shape[0]
    ho = _conv.conv_transpose_out_size(x.shape[1], k, stride, pad, output_padding)
    wo = _conv.conv_transpose_out_size(x.shape[2], k, stride, pad, output_padding)
    return _node(ConvTranspose2d(stride, pad, (ho, wo)), (x, w, b), (x.shape[0], ho, wo, w.shape[2]))


def upsample2x(x):
    n, h, w, c = x.shape
    return _node(Upsample2x(), (x,), (n, 2 * h, 2 * w, c))


def batchnorm(x, gamma, beta, state: BatchNormState, training=False):
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ShapeError(f"batchnorm: input shape {x.shape} vs scale shape {gamma.shape}")
    return _node(BatchNorm(state, training), (x, gamma, beta), x.shape)
