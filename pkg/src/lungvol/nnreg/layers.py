"""From-scratch NN layers with analytic gradients.

Layers operate on channels-last (B, H, W, C) arrays so that window gathers and
per-channel reductions run over contiguous memory; models convert from the
(B, C, H, W) interface layout once per batch.  Large intermediates live in
per-layer scratch buffers that persist across steps (page-fault cost of fresh
allocations dominates otherwise); returned activations are always freshly
allocated.  Everything runs in the dtype of the parameters: float32 for
training, float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg import blas as _blas


class Parameter:
    """Learnable array plus its gradient accumulator."""

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class _Scratch:
    """Reusable buffers keyed by (name, shape, dtype); zeroed only on first use."""

    def __init__(self):
        self._bufs: dict = {}

    def get(self, name: str, shape, dtype, zero: bool = False) -> np.ndarray:
        key = (name, tuple(shape), np.dtype(dtype))
        buf = self._bufs.get(key)
        if buf is None:
            buf = np.zeros(shape, dtype)
            self._bufs[key] = buf
        elif zero:
            buf.fill(0)
        return buf


class Layer:
    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Parameter]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def load_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(f"{type(self).__name__} has no buffer {name!r}")

    def set_dtype(self, dtype) -> None:
        for _, p in self.parameters():
            p.astype(dtype)


def _gemm_acc(acc_t: np.ndarray, w: np.ndarray, flat_t: np.ndarray) -> None:
    """acc_t[:, :n] += w @ flat_t on F-ordered transpose views, no copies."""
    gemm = _blas.sgemm if acc_t.dtype == np.float32 else _blas.dgemm
    gemm(1.0, w, flat_t, beta=1.0, c=acc_t[:, :flat_t.shape[1]], overwrite_c=True)


class Conv2d(Layer):
    """Same-shape cross-correlation: odd kernel, stride 1, zero padding (k-1)/2.

    Weights keep the conventional (out_ch, in_ch, kh, kw) layout.  Wide layers
    run as k*k accumulating GEMMs over a padded, flattened grid (no im2col patch
    matrix); narrow first layers use a small im2col GEMM instead.  Set
    compute_input_grad=False on a network's first layer to skip the unused
    input gradient.
    """

    _IM2COL_MAX_PATCH = 64  # use patch-matrix path while C*k*k stays this small

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 3, dtype=np.float32, compute_input_grad: bool = True):
        if kernel_size % 2 == 0:
            raise ValueError("conv2d supports odd kernel sizes only")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = (kernel_size - 1) // 2
        self.compute_input_grad = compute_input_grad
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(kaiming_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        self._scratch = _Scratch()
        self._cache = None

    def _pad_input(self, x: np.ndarray) -> np.ndarray:
        b, h, w, c = x.shape
        pad = self.padding
        # border stays zero across reuses; only the interior is rewritten
        xp = self._scratch.get("xp", (b, h + 2 * pad, w + 2 * pad, c), x.dtype)
        xp[:, pad:pad + h, pad:pad + w, :] = x
        return xp

    def _wstack(self, flipped: bool) -> np.ndarray:
        k = self.kernel_size
        w = self.weight.data
        if flipped:
            w = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)  # (kh, kw, Cout, Cin)
            return np.ascontiguousarray(w.reshape(k * k, self.out_channels, self.in_channels))
        w = w.transpose(2, 3, 1, 0)  # (kh, kw, Cin, Cout)
        return np.ascontiguousarray(w.reshape(k * k, self.in_channels, self.out_channels))

    def _shift_conv(self, flat: np.ndarray, wstack: np.ndarray, width: int, tag: str) -> np.ndarray:
        k = self.kernel_size
        rows, cout = flat.shape[0], wstack.shape[2]
        acc = self._scratch.get(tag, (rows, cout), flat.dtype, zero=True)
        acc_t = acc.T
        for tap in range(k * k):
            off = (tap // k) * width + tap % k
            _gemm_acc(acc_t, wstack[tap].T, flat[off:].T)
        return acc

    @property
    def _use_im2col(self) -> bool:
        return self.in_channels * self.kernel_size ** 2 <= self._IM2COL_MAX_PATCH

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(f"conv2d expected (B,H,W,{self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        k, pad = self.kernel_size, self.padding
        xp = self._pad_input(x)
        if self._use_im2col:
            win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H, W, C, k, k)
            patch = k * k * self.in_channels
            cols = self._scratch.get("cols", (b * h * w, patch), x.dtype)
            cols[...] = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, patch)
            wmat = self.weight.data.transpose(2, 3, 1, 0).reshape(patch, -1)
            out = cols @ np.ascontiguousarray(wmat)
            out = out.reshape(b, h, w, self.out_channels)
            self._cache = (cols, x.shape) if training else None
        else:
            hp, wp = h + 2 * pad, w + 2 * pad
            acc = self._shift_conv(xp.reshape(b * hp * wp, self.in_channels),
                                   self._wstack(flipped=False), wp, "acc_fwd")
            out = np.ascontiguousarray(acc.reshape(b, hp, wp, self.out_channels)[:, :h, :w, :])
            self._cache = (xp, x.shape) if training else None
        out += self.bias.data
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray | None:
        if self._cache is None:
            raise RuntimeError("conv2d backward called without a training-mode forward")
        cached, (b, h, w, _) = self._cache
        self._cache = None
        k, pad = self.kernel_size, self.padding
        oc = self.out_channels
        self.bias.grad += grad_out.reshape(-1, oc).sum(axis=0)

        if self._use_im2col:
            cols = cached
            g = grad_out.reshape(b * h * w, oc)
            gw = cols.T @ g  # (k*k*C, OC)
            self.weight.grad += gw.reshape(k, k, self.in_channels, oc).transpose(3, 2, 0, 1)
            if not self.compute_input_grad:
                return None
            gz = self._embed_grad(grad_out, b, h, w)
            gzf = gz.reshape(-1, oc)
            acc = self._shift_conv(gzf, self._wstack(flipped=True), w + 2 * pad, "acc_bwd")
            gx = acc.reshape(b, h + 2 * pad, w + 2 * pad, self.in_channels)[:, :h, :w, :]
            return np.ascontiguousarray(gx)

        xp = cached
        hp, wp = h + 2 * pad, w + 2 * pad
        # grad_out embedded at the pad offset makes one buffer serve both the
        # weight gradient (zeros kill the border terms) and, as a pre-padded
        # field, the full correlation that yields the input gradient
        gz = self._embed_grad(grad_out, b, h, w)
        gzf = gz.reshape(b * hp * wp, oc)
        xpf = xp.reshape(b * hp * wp, self.in_channels)
        center = pad * wp + pad
        total = b * hp * wp
        gw = np.empty((k * k, self.in_channels, oc), dtype=grad_out.dtype)
        for tap in range(k * k):
            off = (tap // k) * wp + tap % k
            n = total - max(off, center)
            gw[tap] = xpf[off:off + n].T @ gzf[center:center + n]
        self.weight.grad += gw.reshape(k, k, self.in_channels, oc).transpose(3, 2, 0, 1)
        if not self.compute_input_grad:
            return None
        acc = self._shift_conv(gzf, self._wstack(flipped=True), wp, "acc_bwd")
        gx = acc.reshape(b, hp, wp, self.in_channels)[:, :h, :w, :]
        return np.ascontiguousarray(gx)

    def _embed_grad(self, grad_out: np.ndarray, b: int, h: int, w: int) -> np.ndarray:
        pad = self.padding
        gz = self._scratch.get("gz", (b, h + 2 * pad, w + 2 * pad, self.out_channels),
                               grad_out.dtype)
        gz[:, pad:pad + h, pad:pad + w, :] = grad_out
        return gz

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._mask = x > 0 if training else None
        return np.maximum(x, 0)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * self._mask


class BatchNorm2d(Layer):
    """Per-channel normalization over (B, H, W) with running statistics for eval."""

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self._scratch = _Scratch()
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim != 4 or x.shape[3] != self.channels:
            raise ValueError(f"batchnorm expected (B,H,W,{self.channels}), got {x.shape}")
        if training:
            b, h, w, _ = x.shape
            n = b * h * w
            if n < 2:
                raise ValueError(f"batchnorm training mode needs B*H*W >= 2, got {n}")
            flat = x.reshape(n, self.channels)
            mean = flat.mean(axis=0)
            var = np.square(flat).mean(axis=0) - mean * mean
            np.maximum(var, 0.0, out=var)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(x.dtype)
            self.running_var = ((1 - m) * self.running_var + m * var * n / (n - 1)).astype(x.dtype)
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = self._scratch.get("xhat", x.shape, x.dtype)
            np.subtract(x, mean.astype(x.dtype), out=xhat)
            xhat *= inv_std
            self._cache = (xhat, inv_std, n)
        else:
            inv_std = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean) * inv_std
            self._cache = None
        out = xhat * self.gamma.data
        out += self.beta.data
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("batchnorm backward called without a training-mode forward")
        xhat, inv_std, n = self._cache
        self._cache = None
        c = self.channels
        gflat = np.ascontiguousarray(grad_out).reshape(n, c)
        xflat = xhat.reshape(n, c)
        self.gamma.grad += np.einsum("nc,nc->c", gflat, xflat)
        self.beta.grad += gflat.sum(axis=0)
        gx = grad_out * self.gamma.data
        sum_g = gx.reshape(n, c).sum(axis=0)
        sum_gx = np.einsum("nc,nc->c", gx.reshape(n, c), xflat)
        gx -= sum_g / n
        xhat *= sum_gx / n          # xhat cache is consumed here
        gx -= xhat
        gx *= inv_std
        return gx

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def load_buffer(self, name, value):
        if name == "running_mean":
            self.running_mean = value.astype(self.running_mean.dtype)
        elif name == "running_var":
            self.running_var = value.astype(self.running_var.dtype)
        else:
            raise KeyError(f"batchnorm has no buffer {name!r}")

    def set_dtype(self, dtype):
        super().set_dtype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; gradient routed to the first max in each
    window in row-major order."""

    def __init__(self):
        self._masks = None
        self._in_shape = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
        quads = (x[:, 0::2, 0::2, :], x[:, 0::2, 1::2, :],
                 x[:, 1::2, 0::2, :], x[:, 1::2, 1::2, :])
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        if training:
            masks = []
            claimed = np.zeros(out.shape, dtype=bool)
            for q in quads:
                m = (q == out) & ~claimed
                claimed |= m
                masks.append(m)
            self._masks = masks
            self._in_shape = x.shape
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        b, h, w, c = self._in_shape
        gx = np.zeros((b, h, w, c), dtype=grad_out.dtype)
        for (dy, dx), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), self._masks):
            gx[:, dy::2, dx::2, :] = grad_out * m
        self._masks = None
        return gx


class GlobalAvgPool(Layer):
    """Collapse (B, H, W, C) to (B, C) by spatial mean."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._in_shape = x.shape
        b, h, w, c = x.shape
        return x.reshape(b, h * w, c).mean(axis=1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        b, h, w, c = self._in_shape
        return np.broadcast_to(grad_out[:, None, None, :] / (h * w), (b, h, w, c)).astype(grad_out.dtype)


class Flatten(Layer):
    """Collapse (B, H, W, C) to (B, H*W*C); the flatten-head variant."""

    def __init__(self):
        self._in_shape = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        self._in_shape = x.shape
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(self._in_shape)


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(kaiming_uniform(rng, (out_features, in_features), in_features, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))
        self._x = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"linear expected (B,{self.in_features}), got {x.shape}")
        self._x = x if training else None
        return x @ self.weight.data.T + self.bias.data

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("linear backward called without a training-mode forward")
        self.weight.grad += grad_out.T @ self._x
        self.bias.grad += grad_out.sum(axis=0)
        gx = grad_out @ self.weight.data
        self._x = None
        return gx

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]
