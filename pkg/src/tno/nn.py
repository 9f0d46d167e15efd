"""Layer kernels and a minimal module system.

All spatial kernels take NCHW tensors. conv2d uses im2col + BLAS matmul;
adaptive pooling and bilinear upsampling are expressed as separable
row/column weighting matrices so both directions are plain matmuls.
"""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, linear, record, xavier_from_rng

ACTIVATIONS = ("silu", "tanh", "relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.1


# ---------------------------------------------------------------------------
# activations

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity. leaky_relu uses a fixed 0.1 slope."""
    xd = x.data
    if kind == "relu":
        out = Tensor(np.maximum(xd, 0))
        bwd = lambda g: (g * (xd > 0),)
    elif kind == "leaky_relu":
        out = Tensor(np.where(xd > 0, xd, LEAKY_SLOPE * xd))
        bwd = lambda g: (g * np.where(xd > 0, 1.0, LEAKY_SLOPE).astype(g.dtype),)
    elif kind == "sigmoid":
        s = _sigmoid(xd)
        out = Tensor(s)
        bwd = lambda g: (g * s * (1.0 - s),)
    elif kind == "tanh":
        t = np.tanh(xd)
        out = Tensor(t)
        bwd = lambda g: (g * (1.0 - t * t),)
    elif kind == "silu":
        s = _sigmoid(xd)
        out = Tensor(xd * s)
        bwd = lambda g: (g * (s + xd * s * (1.0 - s)),)
    else:
        raise ValueError(f"unknown activation {kind!r}, expected one of {ACTIVATIONS}")
    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    """(B,C,Hp,Wp) -> (B, C*kh*kw, ho*wo) patch matrix."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for u in range(kh):
        for v in range(kw):
            cols[:, :, u, v] = xp[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def _col2im(cols, b, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add inverse of _im2col."""
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for u in range(kh):
        for v in range(kw):
            out[:, :, u : u + stride * ho : stride, v : v + stride * wo : stride] += cols[:, :, u, v]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (B,Cin,H,W) with weight (Cout,Cin,kh,kw)."""
    b, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    hp, wp = h + 2 * padding, w + 2 * padding
    if padding:
        xp = np.zeros((b, cin, hp, wp), dtype=x.data.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = weight.data.reshape(cout, cin * kh * kw)
    y = np.matmul(w2[None], cols)
    if bias is not None:
        y = y + bias.data[None, :, None]
    out = Tensor(y.reshape(b, cout, ho, wo))

    def bwd(g):
        g2 = g.reshape(b, cout, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(w2.T[None], g2)
        gxp = _col2im(gcols, b, cin, hp, wp, kh, kw, stride, ho, wo)
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is not None:
            return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bwd)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution of x (B,Cin,H,W) with weight (Cin,Cout,kh,kw).

    Output size is (H-1)*stride - 2*padding + kh; the gradient w.r.t. x is a
    plain conv2d gather with the same kernel.
    """
    b, cin, h, w = x.shape
    cin_w, cout, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input has {cin}, weight expects {cin_w}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    ho = hf - 2 * padding
    wo = wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ValueError("conv_transpose2d output would be empty")
    x2 = x.data.reshape(b, cin, h * w)
    w2 = weight.data.reshape(cin, cout * kh * kw)
    big = np.matmul(w2.T[None], x2).reshape(b, cout, kh, kw, h, w)
    full = np.zeros((b, cout, hf, wf), dtype=x.data.dtype)
    for u in range(kh):
        for v in range(kw):
            full[:, :, u : u + stride * h : stride, v : v + stride * w : stride] += big[:, :, u, v]
    y = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        gfull = np.zeros((b, cout, hf, wf), dtype=g.dtype)
        gfull[:, :, padding : padding + ho, padding : padding + wo] = g
        gcols = np.empty((b, cout, kh, kw, h, w), dtype=g.dtype)
        for u in range(kh):
            for v in range(kw):
                gcols[:, :, u, v] = gfull[:, :, u : u + stride * h : stride, v : v + stride * w : stride]
        gcols2 = gcols.reshape(b, cout * kh * kw, h * w)
        gx = np.matmul(w2[None], gcols2).reshape(b, cin, h, w)
        gw = np.matmul(x2, gcols2.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# batch norm

def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B,H,W).

    Train mode normalizes by batch statistics (biased variance) and updates
    the running buffers in place with an exponential moving average; eval
    mode uses the running buffers only.
    """
    b, c, h, w = x.shape
    n = b * h * w
    xd = x.data
    if training:
        if n < 2:
            raise ValueError(f"batch_norm2d needs at least 2 elements per channel in train mode, got {n}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (n / (n - 1))
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = Tensor(y.astype(xd.dtype, copy=False))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        gi = gamma.data * inv
        if training:
            gm = g.mean(axis=(0, 2, 3))
            gxm = (g * xhat).mean(axis=(0, 2, 3))
            dx = gi[None, :, None, None] * (g - gm[None, :, None, None] - xhat * gxm[None, :, None, None])
        else:
            dx = gi[None, :, None, None] * g
        return dx.astype(g.dtype, copy=False), dgamma, dbeta

    return record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# adaptive average pooling and bilinear upsampling (separable matrix form)

_POOL_CACHE: dict[tuple[int, int], np.ndarray] = {}
_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows average the window [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    key = (n_in, n_out)
    m = _POOL_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        for i in range(n_out):
            lo = (i * n_in) // n_out
            hi = -((-(i + 1) * n_in) // n_out)  # ceil division
            m[i, lo:hi] = 1.0 / (hi - lo)
        _POOL_CACHE[key] = m
    return m


def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights for align_corners=False resizing."""
    key = (n_in, n_out)
    m = _BILINEAR_CACHE.get(key)
    if m is None:
        m = np.zeros((n_out, n_in), dtype=np.float64)
        scale = n_in / n_out
        for i in range(n_out):
            src = (i + 0.5) * scale - 0.5
            src = min(max(src, 0.0), n_in - 1.0)
            lo = int(np.floor(src))
            hi = min(lo + 1, n_in - 1)
            t = src - lo
            m[i, lo] += 1.0 - t
            m[i, hi] += t
        _BILINEAR_CACHE[key] = m
    return m


def _apply_separable(xd: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    b, c, h, w = xd.shape
    flat = xd.reshape(b * c, h, w)
    y = np.matmul(rows.astype(xd.dtype)[None], flat)
    y = np.matmul(y, cols.astype(xd.dtype).T[None])
    return y.reshape(b, c, rows.shape[0], cols.shape[0])


def _separable_op(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    out = Tensor(_apply_separable(x.data, rows, cols))

    def bwd(g):
        return (_apply_separable(g, rows.T, cols.T),)

    return record(out, (x,), bwd)


def adaptive_avg_pool2d(x: Tensor, s: int) -> Tensor:
    """Pool (B,C,H,W) to (B,C,s,s) by window means; exact identity when s==H==W."""
    if s < 1:
        raise ValueError(f"pool size must be >= 1, got {s}")
    if x.ndim != 4:
        raise ValueError(f"adaptive_avg_pool2d expects NCHW, got shape {x.shape}")
    _, _, h, w = x.shape
    if h == s and w == s:
        return record(Tensor(x.data.copy()), (x,), lambda g: (g,))
    return _separable_op(x, _pool_matrix(h, s), _pool_matrix(w, s))


def bilinear_upsample2d(x: Tensor, h_out: int, w_out: int) -> Tensor:
    """Resize (B,C,h,w) to (B,C,h_out,w_out) with align_corners=False bilinear weights."""
    if x.ndim != 4:
        raise ValueError(f"bilinear_upsample2d expects NCHW, got shape {x.shape}")
    _, _, h, w = x.shape
    if h == h_out and w == w_out:
        return record(Tensor(x.data.copy()), (x,), lambda g: (g,))
    return _separable_op(x, _bilinear_matrix(h, h_out), _bilinear_matrix(w, w_out))


def resize_bilinear(field: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Forward-only bilinear resize of a (..., H, W) numpy array."""
    h, w = field.shape[-2:]
    if h == h_out and w == w_out:
        return field.copy()
    lead = field.shape[:-2]
    x4 = field.reshape((1, -1) + (h, w)) if lead else field.reshape(1, 1, h, w)
    y = _apply_separable(x4, _bilinear_matrix(h, h_out), _bilinear_matrix(w, w_out))
    return y.reshape(lead + (h_out, w_out))


# ---------------------------------------------------------------------------
# module system

class Module:
    """Tiny container tracking parameters, buffers and submodules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def train(self, mode: bool = True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, bias=True, dtype="f32"):
        super().__init__()
        fan_in = cin * kernel * kernel
        fan_out = cout * kernel * kernel
        self.weight = Parameter(xavier_from_rng(fan_in, fan_out, (cout, cin, kernel, kernel), rng, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=np.float64 if dtype == "f64" else np.float32)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride, padding, rng, bias=True, dtype="f32"):
        super().__init__()
        fan_in = cin * kernel * kernel
        fan_out = cout * kernel * kernel
        self.weight = Parameter(xavier_from_rng(fan_in, fan_out, (cin, cout, kernel, kernel), rng, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=np.float64 if dtype == "f64" else np.float32)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype="f32"):
        super().__init__()
        np_dt = np.float64 if dtype == "f64" else np.float32
        self.gamma = Parameter(np.ones(channels, dtype=np_dt))
        self.beta = Parameter(np.zeros(channels, dtype=np_dt))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np_dt))
        self.register_buffer("running_var", np.ones(channels, dtype=np_dt))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, dtype="f32"):
        super().__init__()
        self.weight = Parameter(xavier_from_rng(n_in, n_out, (n_in, n_out), rng, dtype))
        self.bias = Parameter(np.zeros(n_out, dtype=np.float64 if dtype == "f64" else np.float32)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class MLP(Module):
    """Fully connected stack on (N, features) with a fixed hidden activation."""

    def __init__(self, sizes, act: str, rng, final_act: str | None = None, dtype="f32"):
        super().__init__()
        self.act = act
        self.final_act = final_act
        self.n_layers = len(sizes) - 1
        for i in range(self.n_layers):
            setattr(self, f"fc{i}", Linear(sizes[i], sizes[i + 1], rng, dtype=dtype))

    def forward(self, x):
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i}")(x)
            if i < self.n_layers - 1:
                x = activation(x, self.act)
            elif self.final_act is not None:
                x = activation(x, self.final_act)
        return x
