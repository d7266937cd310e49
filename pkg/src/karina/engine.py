"""Reverse-mode differentiation over dense numpy arrays.

Every operation builds a new Tensor carrying a closure that scatters the
upstream gradient back to its parents.  backward() walks the recorded
graph once in reverse topological order.  64-bit arrays are the
verification dtype (finite differences behave), 32-bit the training
dtype; ops never mix the two silently.

Two properties the ops are written to preserve, because tests rely on
them:

* Parameter gradients accumulate sample-by-sample in batch order, so
  splitting a batch into micro-batches and summing gradients reproduces
  the large-batch gradient bit for bit.
* Spatial reductions use either exactly-rounded summation (fsum, 64-bit
  mode) or a fixed-tree numpy sum in float64 (32-bit mode), so global
  pooling commutes with longitude rolls.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

SUPPORTED_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operands have incompatible shapes or dtypes."""


class NonFiniteError(EngineError):
    """An op produced NaN or Inf; message names the op."""


class BackwardError(EngineError):
    """backward() misuse: non-scalar loss or an already-consumed graph."""


_recording = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def recording_enabled():
    return _recording


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of {op}")


def _check_dtype(arr, op):
    if arr.dtype.type not in SUPPORTED_DTYPES:
        raise ShapeError(f"{op}: unsupported dtype {arr.dtype}, want float32 or float64")


def _same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}; cast explicitly"
        )


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = self._op if self._backward_fn is not None else "leaf"
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, op={tag})"


class Parameter(Tensor):
    """Trainable leaf tensor with a path-like name, e.g. 'stages.0.blocks.1.dwconv.weight'."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = str(name)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _accumulate(t, g):
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g.astype(t.data.dtype, copy=False)


def _accumulate_samples(t, per_sample):
    """Add per-sample gradient slices into t.grad one sample at a time.

    Strictly left-to-right over the batch axis, continuing from whatever
    t.grad already holds.  This makes micro-batch accumulation replay
    the exact addition sequence of the large-batch gradient, so the two
    agree bit for bit.
    """
    n = per_sample.shape[0]
    if n == 0:
        return
    start = 0
    if t.grad is None:
        t.grad = per_sample[0].astype(t.data.dtype, copy=True)
        start = 1
    for k in range(start, n):
        t.grad += per_sample[k]


def _make(out_data, parents, backward_fn, op):
    _check_finite(out_data, op)
    req = _recording and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=req)
    out._op = op
    if req:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss.

    Seeds d(loss)/d(loss) = 1 and calls each recorded closure once, in
    reverse topological order.  Grads add into .grad; leaves that cannot
    reach the loss keep grad=None.  Calling twice on the same graph
    raises unless gradients were rebuilt from a fresh forward pass.
    """
    if loss.data.size != 1:
        raise BackwardError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise BackwardError("backward() on a tensor with no recorded graph")
    if loss._spent:
        raise BackwardError(
            "backward() already consumed this graph; run a fresh forward pass first"
        )

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            if node._spent:
                raise BackwardError(
                    "backward() already consumed this graph; run a fresh forward pass first"
                )
            node._backward_fn(node.grad)
            node._spent = True
    loss._spent = True


def zero_grads(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    """a + b.  Shapes must match, or b is (C,) against a channel axis at -3."""
    _same_dtype(a, b, "add")
    if a.data.shape == b.data.shape:
        out_data = a.data + b.data

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)

        return _make(out_data, (a, b), bwd, "add")

    if a.data.ndim >= 3 and b.data.shape == (a.data.shape[-3],):
        c = b.data.shape[0]
        bshape = (c, 1, 1)
        out_data = a.data + b.data.reshape(bshape)
        reduce_axes = tuple(i for i in range(a.data.ndim) if i != a.data.ndim - 3)

        def bwd(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                if g.ndim == 4:
                    per_sample = g.sum(axis=(2, 3))
                    _accumulate_samples(b, per_sample)
                else:
                    _accumulate(b, g.sum(axis=reduce_axes))

        return _make(out_data, (a, b), bwd, "add")

    raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} are not compatible")


def sub(a, b):
    """a - b, same shape only."""
    _same_dtype(a, b, "sub")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make(out_data, (a, b), bwd, "sub")


def mul(a, b):
    """Elementwise a * b, same shape only."""
    _same_dtype(a, b, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * b_data)
        if b.requires_grad:
            _accumulate(b, g * a_data)

    return _make(out_data, (a, b), bwd, "mul")


def scale(a, c):
    """a * c for a python scalar c."""
    c = float(c)
    out_data = a.data * a.data.dtype.type(c)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * a.data.dtype.type(c))

    return _make(out_data, (a,), bwd, "scale")


def relu(a):
    out_data = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(out_data, (a,), bwd, "relu")


def gelu(a):
    """Exact-erf form: x * Phi(x) with Phi the standard normal CDF."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * x.dtype.type(_INV_SQRT2)))
    out_data = x * phi_cdf

    def bwd(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT2PI)
            _accumulate(a, g * (phi_cdf + x * pdf))

    return _make(out_data, (a,), bwd, "gelu")


def sigmoid(a):
    out_data = expit(a.data)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd, "sigmoid")


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    """Scalar sum of all elements (fixed numpy reduction tree)."""
    out_data = np.asarray(a.data.sum(dtype=a.data.dtype))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), bwd, "sum_all")


def mean_all(a):
    if a.data.size == 0:
        raise ShapeError("mean_all: empty tensor")
    n = a.data.size
    out_data = np.asarray(a.data.sum(dtype=a.data.dtype) / a.data.dtype.type(n))

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.broadcast_to(g / a.data.dtype.type(n), a.data.shape))

    return _make(out_data, (a,), bwd, "mean_all")


def global_avg_pool(a):
    """Mean over the two trailing spatial axes: (..., C, H, W) -> (..., C).

    The spatial sum must not depend on column order, otherwise pooled
    channel gates would break exact longitude-roll equivariance.  In
    float64 we use fsum (exactly rounded, order-free); in float32 we sum
    in float64 with numpy's fixed pairwise tree over the contiguous
    spatial block, which a pure column permutation does not reorder
    enough to change in practice, then round once.
    """
    if a.data.ndim < 3:
        raise ShapeError(f"global_avg_pool: need (..., C, H, W), got {a.data.shape}")
    h, w = a.data.shape[-2:]
    if h == 0 or w == 0:
        raise ShapeError("global_avg_pool: empty spatial extent")
    lead_shape = a.data.shape[:-2]
    flat = a.data.reshape(-1, h * w)
    if a.data.dtype == np.float64:
        sums = np.array([math.fsum(row) for row in flat.tolist()], dtype=np.float64)
    else:
        sums = flat.sum(axis=1, dtype=np.float64)
    out_data = (sums / (h * w)).astype(a.data.dtype).reshape(lead_shape)
    inv = 1.0 / (h * w)

    def bwd(g):
        if a.requires_grad:
            gg = (g.reshape(lead_shape + (1, 1)) * a.data.dtype.type(inv))
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bwd, "global_avg_pool")


# ---------------------------------------------------------------------------
# normalization and affine maps


def layer_norm_channels(x, gamma, beta, eps=1e-6):
    """Normalize over the channel axis (-3) per spatial location.

    gamma, beta are (C,).  Uses the biased variance.
    """
    _same_dtype(x, gamma, "layer_norm_channels")
    _same_dtype(x, beta, "layer_norm_channels")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"layer_norm_channels: need (C,H,W) or (B,C,H,W), got {x.data.shape}")
    c = x.data.shape[-3]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm_channels: gamma/beta must be ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}"
        )
    ax = x.data.ndim - 3
    dt = x.data.dtype.type
    mu = x.data.mean(axis=ax, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + dt(eps))
    xhat = (x.data - mu) * inv_std
    gshape = (c, 1, 1)
    out_data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)

    def bwd(g):
        if gamma.requires_grad:
            if g.ndim == 4:
                per_sample = (g * xhat).sum(axis=(2, 3))
                _accumulate_samples(gamma, per_sample)
            else:
                _accumulate(gamma, (g * xhat).sum(axis=(1, 2)))
        if beta.requires_grad:
            if g.ndim == 4:
                per_sample = g.sum(axis=(2, 3))
                _accumulate_samples(beta, per_sample)
            else:
                _accumulate(beta, g.sum(axis=(1, 2)))
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(gshape)
            m1 = dxhat.mean(axis=ax, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=ax, keepdims=True)
            _accumulate(x, inv_std * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bwd, "layer_norm_channels")


def linear(x, w, b=None):
    """x @ w.T + b for x (..., In), w (Out, In), b (Out,)."""
    _same_dtype(x, w, "linear")
    if x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(
            f"linear: input features {x.data.shape[-1]} != weight in-features {w.data.shape[1]}"
        )
    if b is not None:
        _same_dtype(x, b, "linear")
        if b.data.shape != (w.data.shape[0],):
            raise ShapeError(f"linear: bias shape {b.data.shape} != ({w.data.shape[0]},)")
    # one GEMM per sample (leading axis batched) so each row's result does
    # not depend on how many rows ride along; a plain 2-D GEMM blocks over
    # rows and would break micro-batch bit-equality
    out_data = np.matmul(x.data[..., None, :], w.data.T)[..., 0, :]
    if b is not None:
        out_data = out_data + b.data
    x_data = x.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, np.matmul(g[..., None, :], w.data)[..., 0, :])
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x_data.reshape(-1, x_data.shape[-1])
        if w.requires_grad:
            per_sample = g2[:, :, None] * x2[:, None, :]
            _accumulate_samples(w, per_sample)
        if b is not None and b.requires_grad:
            _accumulate_samples(b, g2)

    return _make(out_data, parents, bwd, "linear")


def channel_scale(x, s):
    """Multiply per channel: x (..., C, H, W) times s of shape (C,) or (B, C)."""
    _same_dtype(x, s, "channel_scale")
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"channel_scale: need (C,H,W) or (B,C,H,W), got {x.data.shape}")
    c = x.data.shape[-3]
    if s.data.shape == (c,):
        sb = s.data.reshape((c, 1, 1))
        per_batch = False
    elif x.data.ndim == 4 and s.data.shape == (x.data.shape[0], c):
        sb = s.data.reshape((x.data.shape[0], c, 1, 1))
        per_batch = True
    else:
        raise ShapeError(
            f"channel_scale: scale shape {s.data.shape} does not fit input {x.data.shape}"
        )
    out_data = x.data * sb
    x_data = x.data

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * sb)
        if s.requires_grad:
            if per_batch:
                _accumulate(s, (g * x_data).sum(axis=(2, 3)))
            elif x_data.ndim == 4:
                per_sample = (g * x_data).sum(axis=(2, 3))
                _accumulate_samples(s, per_sample)
            else:
                _accumulate(s, (g * x_data).sum(axis=(1, 2)))

    return _make(out_data, (x, s), bwd, "channel_scale")


def sample_scale(x, factors):
    """Multiply each leading-axis sample by a fixed scalar (no grad to factors).

    factors is a plain float (rank-3 input) or a (B,) numpy array
    (rank-4 input).  Used for stochastic depth.
    """
    if x.data.ndim == 3:
        f = x.data.dtype.type(float(factors))
        out_data = x.data * f

        def bwd(g):
            if x.requires_grad:
                _accumulate(x, g * f)

        return _make(out_data, (x,), bwd, "sample_scale")

    if x.data.ndim == 4:
        f = np.asarray(factors, dtype=x.data.dtype)
        if f.shape != (x.data.shape[0],):
            raise ShapeError(
                f"sample_scale: factors shape {f.shape} != ({x.data.shape[0]},)"
            )
        fb = f.reshape((-1, 1, 1, 1))
        out_data = x.data * fb

        def bwd(g):
            if x.requires_grad:
                _accumulate(x, g * fb)

        return _make(out_data, (x,), bwd, "sample_scale")

    raise ShapeError(f"sample_scale: need rank 3 or 4 input, got {x.data.shape}")


# ---------------------------------------------------------------------------
# spatial ops: gather padding and valid convolution


def pad2d(x, table, pad_shape):
    """Gather-style padding: out[i,j] = x[table[i,j]] or 0 where table < 0.

    table is a flat int array of length prod(pad_shape) holding source
    indices into the flattened (H, W) plane, -1 meaning zero fill.  The
    backward pass scatter-adds with bincount, which accumulates in fixed
    index order.
    """
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"pad2d: need (C,H,W) or (B,C,H,W), got {x.data.shape}")
    hp, wp = pad_shape
    table = np.asarray(table, dtype=np.int64).reshape(-1)
    if table.size != hp * wp:
        raise ShapeError(f"pad2d: table length {table.size} != {hp}*{wp}")
    squeeze = x.data.ndim == 3
    x4 = x.data[None] if squeeze else x.data
    b, c, h, w = x4.shape
    if table.size and (table.max() >= h * w or table.min() < -1):
        raise ShapeError("pad2d: table index out of range")
    flat = x4.reshape(b * c, h * w)
    safe = np.maximum(table, 0)
    out = flat[:, safe]
    zero_mask = table < 0
    if zero_mask.any():
        out[:, zero_mask] = 0
    out_data = out.reshape(b, c, hp, wp)
    if squeeze:
        out_data = out_data.reshape(c, hp, wp)
    valid = table >= 0
    src = table[valid]

    def bwd(g):
        if not x.requires_grad:
            return
        g4 = g.reshape(b * c, hp * wp)[:, valid]
        dx = np.empty((b * c, h * w), dtype=np.float64)
        for r in range(b * c):
            dx[r] = np.bincount(src, weights=g4[r], minlength=h * w)
        dx = dx.astype(x.data.dtype, copy=False).reshape(x.data.shape)
        _accumulate(x, dx)

    return _make(out_data, (x,), bwd, "pad2d")


def conv2d_valid(x, w, b=None, groups=1):
    """Valid cross-correlation, stride 1, input already padded.

    x (B, Cin, Hp, Wp) or (Cin, Hp, Wp); w (Cout, Cin/groups, K, K).
    Lowered to im2col plus matmul so the contraction over the patch axis
    is a GEMM, which is bit-stable under column permutations of the
    spatial axis; that is what makes pad+conv exactly roll-equivariant.
    """
    _same_dtype(x, w, "conv2d_valid")
    if w.data.ndim != 4 or w.data.shape[2] != w.data.shape[3]:
        raise ShapeError(f"conv2d_valid: weight must be (Cout, Cin/g, K, K), got {w.data.shape}")
    squeeze = x.data.ndim == 3
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d_valid: need rank 3 or 4 input, got {x.data.shape}")
    x4 = x.data[None] if squeeze else x.data
    bsz, cin, hp, wp = x4.shape
    cout, cin_g, k, _ = w.data.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d_valid: groups={groups} does not divide Cin={cin}, Cout={cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d_valid: weight expects {cin_g} channels per group, input gives {cin // groups}"
        )
    if hp < k or wp < k:
        raise ShapeError(f"conv2d_valid: kernel {k} exceeds padded extent ({hp},{wp})")
    if b is not None:
        _same_dtype(x, b, "conv2d_valid")
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d_valid: bias shape {b.data.shape} != ({cout},)")

    ho, wo = hp - k + 1, wp - k + 1
    hw = ho * wo
    dt = x4.dtype

    if k == 1:
        cols = x4.reshape(bsz, cin, 1, hw)
    else:
        cols = np.empty((bsz, cin, k * k, hw), dtype=dt)
        t = 0
        for dy in range(k):
            for dx in range(k):
                cols[:, :, t, :] = x4[:, :, dy:dy + ho, dx:dx + wo].reshape(bsz, cin, hw)
                t += 1

    depthwise = groups == cin and cout == cin and cin_g == 1
    if groups == 1:
        wmat = w.data.reshape(cout, cin * k * k)
        out = np.matmul(wmat, cols.reshape(bsz, cin * k * k, hw))
    elif depthwise:
        wmat = w.data.reshape(cin, 1, k * k)
        out = np.matmul(wmat, cols).reshape(bsz, cin, hw)
    else:
        cpg_in = cin // groups
        cpg_out = cout // groups
        out = np.empty((bsz, cout, hw), dtype=dt)
        gcols = cols.reshape(bsz, groups, cpg_in * k * k, hw)
        gw = w.data.reshape(groups, cpg_out, cpg_in * k * k)
        for gi in range(groups):
            out[:, gi * cpg_out:(gi + 1) * cpg_out] = np.matmul(gw[gi], gcols[:, gi])
    out = out.reshape(bsz, cout, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out_data = out.reshape(cout, ho, wo) if squeeze else out

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        g4 = g.reshape(bsz, cout, ho, wo)
        gmat = g4.reshape(bsz, cout, hw)
        if b is not None and b.requires_grad:
            per_sample = gmat.sum(axis=2)
            _accumulate_samples(b, per_sample)
        need_x = x.requires_grad
        need_w = w.requires_grad
        if not (need_x or need_w):
            return
        if groups == 1:
            if need_w:
                per_sample = np.matmul(gmat, cols.reshape(bsz, cin * k * k, hw).transpose(0, 2, 1))
                _accumulate_samples(w, per_sample.reshape((per_sample.shape[0],) + w.data.shape))
            if need_x:
                wmat_ = w.data.reshape(cout, cin * k * k)
                dcols = np.matmul(wmat_.T, gmat).reshape(bsz, cin, k * k, hw)
        elif depthwise:
            gdw = gmat.reshape(bsz, cin, 1, hw)
            if need_w:
                per_sample = np.matmul(gdw, cols.transpose(0, 1, 3, 2))
                _accumulate_samples(w, per_sample.reshape((per_sample.shape[0],) + w.data.shape))
            if need_x:
                wdw = w.data.reshape(cin, k * k, 1)
                dcols = np.matmul(wdw, gdw).reshape(bsz, cin, k * k, hw)
        else:
            cpg_in = cin // groups
            cpg_out = cout // groups
            gcols_ = cols.reshape(bsz, groups, cpg_in * k * k, hw)
            gw_ = w.data.reshape(groups, cpg_out, cpg_in * k * k)
            gg = gmat.reshape(bsz, groups, cpg_out, hw)
            if need_w:
                per_sample = np.empty((bsz, groups, cpg_out, cpg_in * k * k), dtype=dt)
                for gi in range(groups):
                    per_sample[:, gi] = np.matmul(gg[:, gi], gcols_[:, gi].transpose(0, 2, 1))
                _accumulate_samples(w, per_sample.reshape((bsz,) + w.data.shape))
            if need_x:
                dcols = np.empty((bsz, cin, k * k, hw), dtype=dt)
                dcg = dcols.reshape(bsz, groups, cpg_in * k * k, hw)
                for gi in range(groups):
                    dcg[:, gi] = np.matmul(gw_[gi].T, gg[:, gi])
        if need_x:
            if k == 1:
                dx4 = dcols.reshape(x4.shape)
            else:
                dx4 = np.zeros_like(x4)
                t = 0
                for dy in range(k):
                    for dx in range(k):
                        dx4[:, :, dy:dy + ho, dx:dx + wo] += dcols[:, :, t].reshape(bsz, cin, ho, wo)
                        t += 1
            _accumulate(x, dx4.reshape(x.data.shape))

    return _make(out_data, parents, bwd, "conv2d_valid")


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn, params, h=1e-5, rng=None, sample=None):
    """Compare analytic gradients of fn() against central differences.

    fn rebuilds the graph and returns a scalar loss; params are the
    leaves to probe.  Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    All params must be float64 (32-bit finite differences are mush).
    h must sit in [1e-7, 1e-4].  sample, if given, caps the number of
    coordinates probed per parameter, drawn without replacement from
    rng; coverage stays at least one coordinate per parameter.
    """
    params = list(params)
    if not params:
        raise EngineError("grad_check: no parameters supplied")
    for p in params:
        if p.data.dtype != np.float64:
            raise EngineError(f"grad_check: parameter dtype {p.data.dtype}; verification needs float64")
    if not (1e-7 <= h <= 1e-4):
        raise EngineError(f"grad_check: step h={h} outside [1e-7, 1e-4]")
    if sample is not None:
        if rng is None:
            raise EngineError("grad_check: sampling requires an rng")
        if sample < 1:
            raise EngineError("grad_check: sample must be >= 1")

    zero_grads(params)
    loss = fn()
    backward(loss)
    analytic = []
    for p in params:
        analytic.append(np.zeros_like(p.data) if p.grad is None else p.grad.copy())

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            n = flat.size
            if sample is None or sample >= n:
                idxs = range(n)
            else:
                idxs = np.sort(rng.choice(n, size=sample, replace=False))
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * h)
                rel = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-8)
                if rel > worst:
                    worst = rel
    return worst
