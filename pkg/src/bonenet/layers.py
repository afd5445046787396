"""Network layers: convolution, max pooling, batch norm, dropout, linear.

Each layer owns its parameters and records the right backward closure on
the tape via ``tensor.node``. Batch norm and dropout carry a train/eval
mode switch; eval mode is deterministic and never consults an rng.
"""

import numpy as np

from . import kernels
from .errors import DegenerateBatch, InvalidConfig, InvalidRate, ShapeMismatch
from .tensor import Tensor, fan_in_gaussian, node, zeros


class Conv2dLayer:
    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, seed=0):
        if kernel % 2 != 1:
            raise InvalidConfig(f"kernel size must be odd, got {kernel}")
        self.weight = fan_in_gaussian([out_ch, in_ch, kernel, kernel], seed, requires_grad=True)
        self.bias = zeros([out_ch], requires_grad=True)
        self.stride = stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def __call__(self, x):
        return conv2d(x, self)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv2d(x, layer):
    w, b = layer.weight, layer.bias
    stride, pad = layer.stride, layer.padding
    B, C, H, W = x.data.shape
    O, Cw, kh, kw = w.data.shape
    if C != Cw:
        raise ShapeMismatch(f"conv2d channels: input {C}, weight {Cw}")
    if (H + 2 * pad - kh) % stride or (W + 2 * pad - kw) % stride:
        raise ShapeMismatch(f"conv2d output size not integral for {x.data.shape}")
    out, xp = kernels.conv2d_forward(x.data, w.data, b.data, stride, pad)

    def bw(outt):
        def run():
            dx, dw, db = kernels.conv2d_backward(
                xp, w.data, outt.grad, stride, pad, (H, W),
                need_dx=x.requires_grad, need_dw=w.requires_grad,
            )
            if x.requires_grad:
                x._accum(dx)
            if w.requires_grad:
                w._accum(dw)
            if b.requires_grad:
                b._accum(db)
        return run

    return node(out, (x, w, b), bw, "conv2d")


def maxpool2d(x, window, stride):
    B, C, H, W = x.data.shape
    if window > H or window > W:
        raise ShapeMismatch(f"pool window {window} exceeds spatial dims {(H, W)}")
    if (H - window) % stride or (W - window) % stride:
        raise ShapeMismatch(f"pool output size not integral for {x.data.shape}")
    out, idx = kernels.maxpool2d_forward(x.data, window, stride)

    def bw(outt):
        def run():
            if x.requires_grad:
                x._accum(kernels.maxpool2d_backward(outt.grad, idx, (H, W)))
        return run

    return node(out, (x,), bw, "maxpool2d")


class BatchNormLayer:
    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros([channels], requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"
        self.update_running = True

    def __call__(self, x):
        return batchnorm(x, self)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


def _bc(v):
    return v[None, :, None, None]


def batchnorm(x, layer):
    if x.data.ndim != 4:
        raise ShapeMismatch(f"batchnorm needs [B,C,H,W], got {x.data.shape}")
    g, b = layer.gamma, layer.beta
    if layer.mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatch("batch norm in train mode needs batch >= 2")
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mean = np.einsum("bchw->c", x.data) / m
        # one-pass biased variance; activations are near zero mean so the
        # cancellation here is harmless at FD tolerances
        var = np.einsum("bchw,bchw->c", x.data, x.data) / m - mean * mean
        np.maximum(var, 0.0, out=var)
        if layer.update_running:
            mom = layer.momentum
            layer.running_mean = (1 - mom) * layer.running_mean + mom * mean
            layer.running_var = (1 - mom) * layer.running_var + mom * var
        istd = 1.0 / np.sqrt(var + layer.eps)
        scale = g.data * istd
        out = x.data * _bc(scale) + _bc(b.data - mean * scale)

        def bw(outt):
            def run():
                # closed form through the batch statistics, with the
                # reductions fused so xhat never gets materialised:
                # dx = g*istd * (dy - S1/m - xhat * Sxh/m)
                dy = outt.grad
                s1 = np.einsum("bchw->c", dy)
                s2 = np.einsum("bchw,bchw->c", dy, x.data)
                sxh = (s2 - mean * s1) * istd
                if g.requires_grad:
                    g._accum(sxh)
                if b.requires_grad:
                    b._accum(s1)
                if x.requires_grad:
                    p = g.data * istd
                    q = p * (sxh * istd * mean - s1) / m
                    r = -p * istd * sxh / m
                    x._accum(dy * _bc(p) + x.data * _bc(r) + _bc(q))
            return run

        return node(out, (x, g, b), bw, "batchnorm")

    # eval: deterministic per-channel affine from running stats
    istd = 1.0 / np.sqrt(layer.running_var + layer.eps)
    scale = g.data * istd
    out = x.data * _bc(scale) + _bc(b.data - layer.running_mean * scale)

    def bw(outt):
        def run():
            dy = outt.grad
            s1 = np.einsum("bchw->c", dy)
            if g.requires_grad:
                s2 = np.einsum("bchw,bchw->c", dy, x.data)
                g._accum((s2 - layer.running_mean * s1) * istd)
            if b.requires_grad:
                b._accum(s1)
            if x.requires_grad:
                x._accum(dy * _bc(scale))
        return run

    return node(out, (x, g, b), bw, "batchnorm_eval")


class DropoutLayer:
    def __init__(self, rate=0.5, seed=0):
        if not 0.0 <= rate < 1.0:
            raise InvalidRate(f"dropout rate {rate} outside [0, 1)")
        self.rate = rate
        self.mode = "train"
        self.reseed(seed)

    def reseed(self, seed):
        self._seed = seed
        self.rng = np.random.default_rng(seed)

    def __call__(self, x):
        return dropout(x, self)

    def parameters(self):
        return []


def dropout(x, layer):
    if layer.mode != "train" or layer.rate == 0.0:
        return x
    keep = layer.rng.random(x.data.shape) >= layer.rate
    scale = keep / (1.0 - layer.rate)  # inverted dropout: E[out] == x

    def bw(outt):
        def run():
            if x.requires_grad:
                x._accum(outt.grad * scale)
        return run

    return node(x.data * scale, (x,), bw, "dropout")


class LinearLayer:
    def __init__(self, in_dim, out_dim, seed=0):
        self.weight = fan_in_gaussian([out_dim, in_dim], seed, requires_grad=True)
        self.bias = zeros([out_dim], requires_grad=True)

    def __call__(self, x):
        return linear(x, self)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def linear(x, layer):
    w, b = layer.weight, layer.bias
    if x.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(f"linear: input {x.data.shape}, weight {w.data.shape}")

    def bw(outt):
        def run():
            dy = outt.grad
            if x.requires_grad:
                x._accum(dy @ w.data)
            if w.requires_grad:
                w._accum(dy.T @ x.data)
            if b.requires_grad:
                b._accum(dy.sum(axis=0))
        return run

    return node(x.data @ w.data.T + b.data, (x, w, b), bw, "linear")
