"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the denoising network needs are provided: panoramic 3x3
convolution, ReLU, dropout, elementwise add/sub/scale, Haar DWT/IDWT layers,
the FFT log-magnitude, and L1 reductions. Graphs are built eagerly while
gradients are enabled and walked once in reverse by :meth:`Tensor.backward`.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path

import numpy as np

from lisnownet import kernels
from lisnownet.transforms import haar_analysis, haar_synthesis

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph (inference mode)."""
    global _GRAD_ENABLED
    previous, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, factor):
        return scale(self, factor)

    __rmul__ = __mul__

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed once propagated
                    node.grad = None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float))


def _accumulate(t, g):
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def scale(a, factor):
    factor = float(factor)

    def backward(g):
        _accumulate(a, g * factor)

    return _result(a.data * factor, (a,), backward)


def relu(x):
    on = x.data > 0

    def backward(g):
        _accumulate(x, np.where(on, g, 0.0))

    return _result(np.where(on, x.data, 0.0).astype(x.dtype, copy=False), (x,), backward)


class RngState:
    """Seeded counter-based generator (Philox) for dropout masks and weight init."""

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low, high, shape):
        return self.generator.uniform(low, high, size=shape)

    def random(self, shape):
        return self.generator.random(size=shape)


def dropout(x, p, rng: RngState | None = None, training=True):
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    keep = rng.random(x.shape) >= p
    factor = np.where(keep, 1.0 / (1.0 - p), 0.0).astype(x.dtype)

    def backward(g):
        _accumulate(x, g * factor)

    return _result(x.data * factor, (x,), backward)


def conv2d_circular(x, kernel, bias, vertical="replicate"):
    """Same-size 2D convolution; columns wrap around, rows are edge-replicated.

    ``x`` is (n, c_in, h, w), ``kernel`` (c_out, c_in, kh, kw) with odd kh, kw,
    ``bias`` (c_out,). Like most deep learning libraries this is a
    cross-correlation; the distinction is immaterial for learned kernels.
    """
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ValueError(f"conv: input has {c_in} channels, kernel expects {k_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv: kernel dims must be odd")
    if h < kh or w < kw:
        raise ValueError(f"conv: {h}x{w} input smaller than {kh}x{kw} kernel")
    if bias.shape != (c_out,):
        raise ValueError(f"conv: bias shape {bias.shape} != ({c_out},)")
    cols = kernels.im2col(x.data, kh, kw, vertical)
    w2 = kernel.data.reshape(c_out, -1)
    out = kernels.conv_gemm(w2, cols)
    out += bias.data[None, :, None]

    def backward(g):
        g2 = g.reshape(n, c_out, h * w)
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, gk.reshape(kernel.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            _accumulate(x, kernels.col2im(np.matmul(w2.T, g2), x.shape, kh, kw, vertical))

    return _result(out.reshape(n, c_out, h, w), (x, kernel, bias), backward)


def _dwt_channels(a):
    return np.concatenate(haar_analysis(a), axis=1)


def _idwt_channels(a):
    c = a.shape[1] // 4
    return haar_synthesis(*(a[:, i * c:(i + 1) * c] for i in range(4)))


def dwt_layer(x):
    """(n, c, h, w) -> (n, 4c, h/2, w/2), channel groups ordered ll, hl, lh, hh."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"dwt_layer: spatial dims must be even, got {x.shape[2:]}")

    def backward(g):
        _accumulate(x, _idwt_channels(g))

    return _result(_dwt_channels(x.data), (x,), backward)


def idwt_layer(x):
    """(n, 4c, h, w) -> (n, c, 2h, 2w); exact inverse of :func:`dwt_layer`."""
    if x.shape[1] % 4:
        raise ValueError(f"idwt_layer: channel count {x.shape[1]} is not divisible by 4")

    def backward(g):
        _accumulate(x, _dwt_channels(g))

    return _result(_idwt_channels(x.data), (x,), backward)


def fft2_logmag(x, norm="backward"):
    """``log(|FFT2(x)| + 1)`` over the last two axes, full spectrum.

    ``norm`` is "backward" (plain DFT sum) or "ortho" (unitary).
    """
    if norm not in ("backward", "ortho"):
        raise ValueError(f"unsupported FFT norm {norm!r}")
    spec = np.fft.fft2(x.data, norm=norm)
    mag = np.abs(spec)

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(mag > 0, spec / mag, 0.0)
        v = g * unit / (mag + 1.0)
        # adjoint of the forward transform: conj(F)^T = h*w*ifft2 for the plain sum,
        # the inverse itself for the unitary one
        if norm == "ortho":
            gx = np.fft.ifft2(v, norm="ortho").real
        else:
            gx = (x.shape[-2] * x.shape[-1]) * np.fft.ifft2(v).real
        _accumulate(x, gx.astype(x.dtype, copy=False))

    return _result(np.log1p(mag).astype(x.dtype, copy=False), (x,), backward)


def l1_sum(x):
    def backward(g):
        _accumulate(x, np.sign(x.data) * g)

    return _result(np.abs(x.data).sum(), (x,), backward)


class MissingGradientError(RuntimeError):
    pass


class ParamStore:
    """Named parameters plus Adam moments; ``t`` is shared by every parameter."""

    MAGIC = b"LSNP"
    VERSION = 1

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_values(self):
        return sum(p.data.size for p in self.params.values())

    def astype(self, dtype):
        """Copy of the parameters in another dtype, without optimizer state."""
        out = ParamStore()
        for name, p in self.params.items():
            out.add(name, p.data.astype(dtype))
        return out

    def save(self, path):
        """Versioned binary checkpoint of the parameter values (float32, no Adam state)."""
        chunks = [self.MAGIC, struct.pack("<II", self.VERSION, len(self.params))]
        for name, p in self.params.items():
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)) + raw)
            chunks.append(struct.pack("<I", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path, dtype=np.float64):
        buf = Path(path).read_bytes()
        try:
            return cls._parse(buf, path, dtype)
        except struct.error:
            raise ValueError(f"{path}: truncated checkpoint") from None

    @classmethod
    def _parse(cls, buf, path, dtype):
        if buf[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        store = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise ValueError(f"{path}: truncated checkpoint")
            values = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            store.add(name, values.astype(dtype))
        if pos != len(buf):
            raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
        return store


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter, then clear gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    store.t += 1
    bc1 = 1.0 - beta1 ** store.t
    bc2 = 1.0 - beta2 ** store.t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    store.zero_grad()
