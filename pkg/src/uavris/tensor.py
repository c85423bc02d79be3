"""Dense float64 tensors with taped reverse-mode differentiation.

The operation set is exactly what the fusion and decoder math needs: matrix
products, width-1 convolutions, small 2D convolutions, instance norm,
softmax, a handful of elementwise/reshaping ops, kernel rotation, and a
2-class cross-entropy loss.  Every op registers a backward closure on the
active ``Tape``; ``finite_diff_grad`` is the independent central-difference
oracle used to cross-check each backward rule.

Layout is row-major, precision is 64-bit throughout, and there is no
implicit broadcasting except scalar-vs-tensor.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ContractError,
    DegenerateInputError,
    NonFiniteError,
    OracleError,
    ShapeError,
    TapeError,
)

# small enough that a unit-variance column is a fixed point to well below
# 1e-9 and output variance stays within 1e-6 of one
INSTANCE_NORM_EPS = 1e-10
L2_NORM_EPS = 1e-12


class Tensor:
    """A dense float64 array that can participate in gradient recording.

    ``grad`` is populated by :func:`backward` for tensors created with
    ``requires_grad=True``.  Data is validated to be finite on creation;
    NaN/Inf raise immediately instead of propagating.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def zeros(shape, requires_grad=False):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad=False):
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value, requires_grad=False):
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


def gaussian(rng, shape, std=0.02, requires_grad=True):
    """Seeded zero-mean Gaussian parameter initializer."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPES = []


class Tape:
    """Execution-ordered record of op nodes for one reverse pass.

    Nodes are appended in forward execution order, which is a valid
    topological order, so the backward walk is a single reversed scan.
    A tape is consumed by :func:`backward` and cannot be replayed.
    """

    def __init__(self):
        self._nodes = []
        self._produced = set()
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPES.pop()
        return False

    def watches(self, t):
        return t.requires_grad or id(t) in self._produced

    def _record(self, out, inputs, backward_fn):
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def __len__(self):
        return len(self._nodes)


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _register(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(tape.watches(t) for t in inputs):
        tape._record(out, inputs, backward_fn)
    return out


def backward(tape, loss):
    """Pull gradients of a scalar loss back through the tape.

    Accumulates into ``t.grad`` for every ``requires_grad`` tensor that the
    loss depends on.  Consumes the tape; a second call raises.
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        if not tape._nodes:
            raise TapeError("tape is empty; loss was computed off-tape")
        raise TapeError("loss is detached from this tape")
    tape.consumed = True

    pending = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape._nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not tape.watches(t):
                continue
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += gi
            else:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def _binary_shapes(a, b, op_name):
    # exact shape match, or one side is a scalar
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op_name} shape mismatch: {a.shape} vs {b.shape}")


def _reduce_to(grad, shape):
    # undo scalar-vs-tensor broadcasting
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape)


def add(a, b):
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def bw(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _register(out, (a, b), bw)


def mul(a, b):
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bw(g):
        return (_reduce_to(g * b.data, a.data.shape),
                _reduce_to(g * a.data, b.data.shape))

    return _register(out, (a, b), bw)


def div(a, b):
    _binary_shapes(a, b, "div")
    out = Tensor(a.data / b.data)

    def bw(g):
        return (_reduce_to(g / b.data, a.data.shape),
                _reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

    return _register(out, (a, b), bw)


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c)

    def bw(g):
        return (g * c,)

    return _register(out, (a,), bw)


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0.0

    def bw(g):
        return (g * mask,)

    return _register(out, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _register(out, (a,), bw)


def sum_all(a):
    out = Tensor(np.sum(a.data))

    def bw(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _register(out, (a,), bw)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T.copy())

    def bw(g):
        return (g.T.copy(),)

    return _register(out, (a,), bw)


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return (g.reshape(old),)

    return _register(out, (a,), bw)


def concat(parts, axis):
    parts = list(parts)
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(s.copy() for s in splits)

    return _register(out, tuple(parts), bw)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def bw(g):
        gi = np.zeros_like(a.data)
        gi[index] = g
        return (gi,)

    return _register(out, (a,), bw)


def embedding(table, ids):
    """Row gather from a V x C table; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"token ids must be a flat list, got shape {ids.shape}")
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise ContractError("token id out of vocabulary range")
    out = Tensor(table.data[ids])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _register(out, (table,), bw)


def dropout(a, rate, rng=None):
    """Seeded inverted dropout.  ``rng=None`` means eval mode: identity."""
    if rng is None or rate <= 0.0:
        out = Tensor(a.data.copy())

        def bw(g):
            return (g,)

        return _register(out, (a,), bw)
    keep = 1.0 - rate
    mask = (rng.random(a.data.shape) < keep) / keep
    out = Tensor(a.data * mask)

    def bw(g):
        return (g * mask,)

    return _register(out, (a,), bw)


# ---------------------------------------------------------------------------
# Linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _register(out, (a, b), bw)


def conv1d(x, w, b):
    """Width-1 convolution over a token sequence: a per-position projection.

    x: L x C_in, w: C_out x C_in, b: C_out  ->  L x C_out
    """
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"conv1d expects matrices, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv1d bias shape {b.shape} != ({w.data.shape[0]},)")
    out = Tensor(x.data @ w.data.T + b.data)

    def bw(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _register(out, (x, w, b), bw)


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation of a C x H x W map with C_out x C_in x k x k kernels."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW and OxIxkxk, got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.data.shape
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"conv2d kernel must be odd square, got {kh}x{kw}")
    if x.data.shape[0] != c_in:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.data.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({c_out},)")
    _, h, wd = x.data.shape
    k, s, p = kh, int(stride), int(padding)
    h_out = (h + 2 * p - k) // s + 1
    w_out = (wd + 2 * p - k) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d output would be {h_out}x{w_out} for input {x.shape}, "
            f"kernel {k}, stride {s}, padding {p}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)
    w2 = w.data.reshape(c_out, c_in * k * k)
    out = Tensor((w2 @ cols + b.data[:, None]).reshape(c_out, h_out, w_out))

    def bw(g):
        g2 = g.reshape(c_out, h_out * w_out)
        dw = (g2 @ cols.T).reshape(w.data.shape)
        db = g2.sum(axis=1)
        dcols = (w2.T @ g2).reshape(c_in, k, k, h_out, w_out)
        dxp = np.zeros_like(xp)
        for ky in range(k):
            for kx in range(k):
                dxp[:, ky:ky + s * h_out:s, kx:kx + s * w_out:s] += dcols[:, ky, kx]
        dx = dxp[:, p:p + h, p:p + wd] if p else dxp
        return dx.copy(), dw, db

    return _register(out, (x, w, b), bw)


def instance_norm(x, eps=INSTANCE_NORM_EPS):
    """Per-channel standardization of an L x C map over the L axis."""
    if x.data.ndim != 2:
        raise ShapeError(f"instance_norm expects L x C, got {x.shape}")
    n = x.data.shape[0]
    if n < 2:
        raise DegenerateInputError(f"instance_norm needs L >= 2 tokens, got {n}")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = Tensor(y)

    def bw(g):
        gm = g.mean(axis=0)
        gy = (g * y).mean(axis=0)
        return (inv * (g - gm - y * gy),)

    return _register(out, (x,), bw)


def softmax_lastdim(x):
    """Numerically stabilized softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _register(out, (x,), bw)


def l2_normalize_rows(x, eps=L2_NORM_EPS):
    """Scale each row of an M x d matrix to (near-)unit L2 norm.

    The eps inside the square root keeps the op differentiable at zero rows
    and keeps every row norm strictly below 1.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    s = np.sum(x.data * x.data, axis=1) + eps
    r = 1.0 / np.sqrt(s)
    y = x.data * r[:, None]
    out = Tensor(y)

    def bw(g):
        proj = np.sum(g * x.data, axis=1) * r ** 3
        return (g * r[:, None] - x.data * proj[:, None],)

    return _register(out, (x,), bw)


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------

_UPSAMPLE_CACHE = {}


def _interp_matrix(n_in, factor):
    """Half-pixel-centered linear interpolation matrix (n_in*factor) x n_in."""
    key = (n_in, factor)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((n_in * factor, n_in))
        for i in range(n_in * factor):
            src = (i + 0.5) / factor - 0.5
            src = min(max(src, 0.0), float(n_in - 1))
            lo = int(math.floor(src))
            hi = min(lo + 1, n_in - 1)
            f = src - lo
            m[i, lo] += 1.0 - f
            m[i, hi] += f
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample_bilinear(x, factor=2):
    """Bilinear upsampling of a C x H x W map by an integer factor."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample expects C x H x W, got {x.shape}")
    _, h, w = x.data.shape
    mh = _interp_matrix(h, factor)
    mw = _interp_matrix(w, factor)
    out = Tensor(np.einsum("ih,chw,jw->cij", mh, x.data, mw, optimize=True))

    def bw(g):
        return (np.einsum("ih,cij,jw->chw", mh, g, mw, optimize=True),)

    return _register(out, (x,), bw)


def global_avg_pool(x):
    """C x H x W -> C vector of spatial means."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool expects C x H x W, got {x.shape}")
    _, h, w = x.data.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def bw(g):
        return (np.broadcast_to(g[:, None, None] / (h * w), x.data.shape).copy(),)

    return _register(out, (x,), bw)


def rotate_kernel(w, theta):
    """Resample k x k kernels rotated by ``theta`` about their center.

    Bilinear interpolation; samples falling outside the kernel support read
    as zero.  Differentiable in both the kernel weights and the angle.
    theta is a scalar tensor (radians).
    """
    if w.data.ndim != 4:
        raise ShapeError(f"rotate_kernel expects OxIxkxk kernels, got {w.shape}")
    k = w.data.shape[-1]
    if w.data.shape[-2] != k or k % 2 == 0:
        raise ContractError(f"rotate_kernel needs odd square kernels, got {w.shape}")
    if theta.data.size != 1:
        raise ContractError(f"theta must be scalar, got shape {theta.shape}")

    c = (k - 1) / 2.0
    # pad ring sized so the bilinear stencil never leaves the padded grid
    pad = int(math.ceil(c * math.sqrt(2.0))) - (k - 1) // 2 + 1
    t = float(theta.data.reshape(()))
    cos, sin = math.cos(t), math.sin(t)
    off = np.arange(k) - c
    dy, dx = off[:, None], off[None, :]
    sy = c + pad + cos * dy - sin * dx
    sx = c + pad + sin * dy + cos * dx
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0

    padded = np.pad(w.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    p00 = padded[..., y0, x0]
    p01 = padded[..., y0, x0 + 1]
    p10 = padded[..., y0 + 1, x0]
    p11 = padded[..., y0 + 1, x0 + 1]
    out_data = ((1 - fy) * (1 - fx) * p00 + (1 - fy) * fx * p01
                + fy * (1 - fx) * p10 + fy * fx * p11)
    out = Tensor(out_data)

    def bw(g):
        o_idx = np.arange(w.data.shape[0])[:, None, None, None]
        i_idx = np.arange(w.data.shape[1])[None, :, None, None]
        dpad = np.zeros_like(padded)
        np.add.at(dpad, (o_idx, i_idx, y0, x0), g * (1 - fy) * (1 - fx))
        np.add.at(dpad, (o_idx, i_idx, y0, x0 + 1), g * (1 - fy) * fx)
        np.add.at(dpad, (o_idx, i_idx, y0 + 1, x0), g * fy * (1 - fx))
        np.add.at(dpad, (o_idx, i_idx, y0 + 1, x0 + 1), g * fy * fx)
        dw = dpad[..., pad:pad + k, pad:pad + k].copy()

        d_sy = (1 - fx) * (p10 - p00) + fx * (p11 - p01)
        d_sx = (1 - fy) * (p01 - p00) + fy * (p11 - p10)
        dsy_dt = -sin * dy - cos * dx
        dsx_dt = cos * dy - sin * dx
        dt = np.sum(g * (d_sy * dsy_dt + d_sx * dsx_dt))
        return dw, np.full_like(theta.data, dt)

    return _register(out, (w, theta), bw)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def cross_entropy_with_logits(logits, target):
    """Mean pixelwise 2-class cross entropy.

    logits: 2 x H x W tensor; target: H x W array of {0,1} labels.
    """
    if logits.data.ndim != 3 or logits.data.shape[0] != 2:
        raise ShapeError(f"expected 2 x H x W logits, got {logits.shape}")
    target = np.asarray(target)
    if target.shape != logits.data.shape[1:]:
        raise ShapeError(
            f"target shape {target.shape} != logits spatial shape {logits.data.shape[1:]}")
    t = target.astype(np.int64)
    z = logits.data
    zmax = z.max(axis=0)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=0))
    picked = np.where(t == 1, z[1], z[0])
    n = t.size
    out = Tensor(np.sum(lse - picked) / n)

    def bw(g):
        p = np.exp(z - lse)
        p[0] -= (t == 0)
        p[1] -= (t == 1)
        return (p * (float(g) / n),)

    return _register(out, (logits,), bw)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at ``x``.

    ``f`` maps a Tensor to a float (or scalar Tensor) and must be
    deterministic; this is verified by evaluating twice.  Runs off-tape.
    """
    if h <= 0:
        raise ContractError(f"step must be positive, got {h}")

    def evaluate(arr):
        r = f(Tensor(arr))
        return r.item() if isinstance(r, Tensor) else float(r)

    base = evaluate(x.data)
    if evaluate(x.data) != base:
        raise OracleError("target function is not deterministic")

    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        bumped = flat.copy()
        bumped[i] = orig + h
        hi = evaluate(bumped.reshape(x.data.shape))
        bumped[i] = orig - h
        lo = evaluate(bumped.reshape(x.data.shape))
        grad[i] = (hi - lo) / (2.0 * h)
    return Tensor(grad.reshape(x.data.shape))


def max_rel_err(analytic, numeric):
    """Largest elementwise relative error, guarded against tiny magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / (np.abs(a) + np.abs(n) + 1e-4)))
