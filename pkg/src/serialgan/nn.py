"""Minimal convolutional layers with hand-written backward passes.

Layers hold no arrays. Parameters and running statistics live in dicts keyed
by ``"<layer name>.<param>"``; ``forward`` returns ``(output, cache)`` and
``backward`` consumes that cache, so the same network can be applied several
times in one step (the discriminator sees x, x' and x'').

Tensors are NCHW. Any float dtype works; float64 is used for gradient checks.
"""

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
LEAK = 0.2


class Layer:
    name = ""

    def param_shapes(self):
        return {}

    def buffer_shapes(self):
        return {}

    def init(self, rng, params, buffers):
        pass

    def forward(self, params, buffers, x, train, update_stats=True):
        raise NotImplementedError

    def backward(self, params, cache, dy, grads):
        raise NotImplementedError


class Conv2d(Layer):
    """Bias-free 2-D convolution, weight shape (cout, cin, k, k)."""

    def __init__(self, name, cin, cout, k=4, stride=2, pad=1):
        self.name, self.cin, self.cout = name, cin, cout
        self.k, self.stride, self.pad = k, stride, pad

    def param_shapes(self):
        return {f"{self.name}.w": (self.cout, self.cin, self.k, self.k)}

    def init(self, rng, params, buffers):
        key = f"{self.name}.w"
        params[key] = rng.normal(0.0, 0.02, self.param_shapes()[key])

    def forward(self, params, buffers, x, train, update_stats=True):
        w = params[f"{self.name}.w"]
        b = x.shape[0]
        ho = kernels.conv_out_size(x.shape[2], self.k, self.stride, self.pad)
        wo = kernels.conv_out_size(x.shape[3], self.k, self.stride, self.pad)
        cols = kernels.im2col(x, self.k, self.stride, self.pad)
        y = w.reshape(self.cout, -1) @ cols
        y = y.reshape(self.cout, b, ho, wo).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, params, cache, dy, grads):
        cols, xshape = cache
        w = params[f"{self.name}.w"]
        dy_mat = dy.transpose(1, 0, 2, 3).reshape(self.cout, -1)
        key = f"{self.name}.w"
        grads[key] = grads.get(key, 0) + (dy_mat @ cols.T).reshape(w.shape)
        dcols = w.reshape(self.cout, -1).T @ dy_mat
        return kernels.col2im(dcols, xshape, self.k, self.stride, self.pad)


class ConvTranspose2d(Layer):
    """Transposed convolution, weight shape (cin, cout, k, k), optional per-channel bias.

    Output side is ``(n - 1) * stride - 2 * pad + k``.
    """

    def __init__(self, name, cin, cout, k=4, stride=2, pad=1, bias=False):
        self.name, self.cin, self.cout = name, cin, cout
        self.k, self.stride, self.pad = k, stride, pad
        self.bias = bias

    def param_shapes(self):
        shapes = {f"{self.name}.w": (self.cin, self.cout, self.k, self.k)}
        if self.bias:
            shapes[f"{self.name}.b"] = (self.cout,)
        return shapes

    def init(self, rng, params, buffers):
        key = f"{self.name}.w"
        params[key] = rng.normal(0.0, 0.02, self.param_shapes()[key])
        if self.bias:
            params[f"{self.name}.b"] = np.zeros(self.cout)

    def forward(self, params, buffers, x, train, update_stats=True):
        w = params[f"{self.name}.w"]
        b, _, h, wd = x.shape
        ho = (h - 1) * self.stride - 2 * self.pad + self.k
        wo = (wd - 1) * self.stride - 2 * self.pad + self.k
        x_mat = x.transpose(1, 0, 2, 3).reshape(self.cin, -1)
        cols = w.reshape(self.cin, -1).T @ x_mat
        yshape = (b, self.cout, ho, wo)
        y = kernels.col2im(cols, yshape, self.k, self.stride, self.pad)
        if self.bias:
            y = y + params[f"{self.name}.b"].reshape(1, -1, 1, 1)
        return y, (x_mat, x.shape, yshape)

    def backward(self, params, cache, dy, grads):
        x_mat, xshape, yshape = cache
        w = params[f"{self.name}.w"]
        dcols = kernels.im2col(np.ascontiguousarray(dy), self.k, self.stride, self.pad)
        key = f"{self.name}.w"
        grads[key] = grads.get(key, 0) + (x_mat @ dcols.T).reshape(w.shape)
        if self.bias:
            bkey = f"{self.name}.b"
            grads[bkey] = grads.get(bkey, 0) + dy.sum(axis=(0, 2, 3))
        dx_mat = w.reshape(self.cin, -1) @ dcols
        b, _, h, wd = xshape
        return dx_mat.reshape(self.cin, b, h, wd).transpose(1, 0, 2, 3)


class BatchNorm2d(Layer):
    """Per-channel normalisation; batch statistics in train mode, running ones in eval."""

    def __init__(self, name, channels):
        self.name, self.c = name, channels

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.c,), f"{self.name}.beta": (self.c,)}

    def buffer_shapes(self):
        return {f"{self.name}.mean": (self.c,), f"{self.name}.var": (self.c,)}

    def init(self, rng, params, buffers):
        params[f"{self.name}.gamma"] = rng.normal(1.0, 0.02, (self.c,))
        params[f"{self.name}.beta"] = np.zeros(self.c)
        buffers[f"{self.name}.mean"] = np.zeros(self.c)
        buffers[f"{self.name}.var"] = np.ones(self.c)

    def forward(self, params, buffers, x, train, update_stats=True):
        gamma = params[f"{self.name}.gamma"].reshape(1, -1, 1, 1)
        beta = params[f"{self.name}.beta"].reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                m = x.size // self.c
                unbiased = var * m / max(m - 1, 1)
                rm, rv = buffers[f"{self.name}.mean"], buffers[f"{self.name}.var"]
                rm *= 1 - BN_MOMENTUM
                rm += BN_MOMENTUM * mean.astype(rm.dtype)
                rv *= 1 - BN_MOMENTUM
                rv += BN_MOMENTUM * unbiased.astype(rv.dtype)
        else:
            mean = buffers[f"{self.name}.mean"].astype(x.dtype)
            var = buffers[f"{self.name}.var"].astype(x.dtype)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        return gamma * xhat + beta, (xhat, inv, train)

    def backward(self, params, cache, dy, grads):
        xhat, inv, train = cache
        gamma = params[f"{self.name}.gamma"]
        gk, bk = f"{self.name}.gamma", f"{self.name}.beta"
        grads[gk] = grads.get(gk, 0) + (dy * xhat).sum(axis=(0, 2, 3))
        grads[bk] = grads.get(bk, 0) + dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma.reshape(1, -1, 1, 1)
        inv4 = inv.reshape(1, -1, 1, 1)
        if not train:
            return dxhat * inv4
        mean_d = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv4 * (dxhat - mean_d - xhat * mean_dx)


class LeakyReLU(Layer):
    def __init__(self, slope=LEAK):
        self.slope = slope

    def forward(self, params, buffers, x, train, update_stats=True):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, params, cache, dy, grads):
        return np.where(cache, dy, self.slope * dy)


class ReLU(Layer):
    def forward(self, params, buffers, x, train, update_stats=True):
        pos = x > 0
        return np.where(pos, x, 0), pos

    def backward(self, params, cache, dy, grads):
        return np.where(cache, dy, 0)


class Tanh(Layer):
    def forward(self, params, buffers, x, train, update_stats=True):
        y = np.tanh(x)
        return y, y

    def backward(self, params, cache, dy, grads):
        return dy * (1 - cache * cache)


class Sigmoid(Layer):
    def forward(self, params, buffers, x, train, update_stats=True):
        y = 0.5 * (1 + np.tanh(0.5 * x))
        return y, y

    def backward(self, params, cache, dy, grads):
        return dy * cache * (1 - cache)


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def param_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.param_shapes())
        return out

    def buffer_shapes(self):
        out = {}
        for layer in self.layers:
            out.update(layer.buffer_shapes())
        return out

    def init(self, rng, params, buffers):
        for layer in self.layers:
            layer.init(rng, params, buffers)

    def forward(self, params, buffers, x, train, update_stats=True):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, buffers, x, train, update_stats)
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, dy, grads):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy = layer.backward(params, cache, dy, grads)
        return dy
