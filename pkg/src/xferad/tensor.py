"""Dense n-d arrays with reverse-mode automatic differentiation.

Just enough machinery to train small convolutional networks on a CPU:
numpy holds the values, every differentiable op optionally records a
node on a Tape, and backward() replays the tape in reverse. Tensors are
treated as immutable once produced by an op; parameters are the only
arrays mutated in place (by the optimizer, between passes).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A numpy array plus an optional gradient of the same shape.

    data is stored row-major. grad stays None until backward() deposits
    into it; repeated backward calls accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of the ops of one forward pass.

    Execution order is a valid topological order: every node's inputs
    are either leaves or outputs of earlier nodes.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def _emit(out_data, inputs, backward_fn, tape):
    """Wrap an op result; record it when a tape is given and a gradient can flow.

    backward_fn(g) must return one gradient array (or None) per input,
    and must not mutate g or retain references for later mutation.
    """
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, backward_fn))
    return out


def backward(loss, tape):
    """Populate grad on every requires_grad leaf reachable from loss.

    loss must be a scalar produced under this tape. Gradients of
    intermediate (tape-produced) tensors are kept internal; a tensor
    feeding several consumers receives the sum of all contributions.
    """
    if not isinstance(tape, Tape) or not tape.nodes:
        raise ContractError("backward needs the tape the loss was recorded on")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ContractError("loss was not produced under this tape")

    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = flows.pop(id(node.output), None)
        if g is None:
            continue  # no gradient path reached this node
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                prev = flows.get(id(inp))
                flows[id(inp)] = gi if prev is None else prev + gi
            else:
                inp.grad = gi if inp.grad is None else inp.grad + gi


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a, b, tape=None):
    """Elementwise sum; b may broadcast against a (e.g. a bias row)."""
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), bwd, tape)


def mul(a, b, tape=None):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return g * bd, g * ad

    return _emit(ad * bd, (a, b), bwd, tape)


def scale(x, s, tape=None):
    """Multiply by a python scalar."""
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _emit(x.data * s, (x,), bwd, tape)


def relu(x, tape=None):
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return _emit(np.maximum(x.data, 0), (x,), bwd, tape)


def reshape(x, shape, tape=None):
    """View with a new shape; element count and row-major order preserved."""
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    in_shape = x.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _emit(out, (x,), bwd, tape)


def flatten(x, tape=None):
    """Collapse all but the leading (batch) axis."""
    n = x.shape[0] if x.data.ndim > 0 else 1
    return reshape(x, (n, x.size // n), tape)


def sum_all(x, tape=None):
    """Sum of all elements, as a scalar tensor."""
    in_shape = x.shape
    dt = x.dtype

    def bwd(g):
        return (np.broadcast_to(g, in_shape).copy(),)

    return _emit(np.asarray(x.data.sum(), dtype=dt), (x,), bwd, tape)


def _unbroadcast(g, shape):
    """Sum g down to shape, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b, tape=None):
    """Matrix product of a [m,k] and b [k,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        da = g @ bd.T if a.requires_grad else None
        db = ad.T @ g if b.requires_grad else None
        return da, db

    return _emit(ad @ bd, (a, b), bwd, tape)


# ---------------------------------------------------------------------------
# convolution / pooling

_COL_INDEX_CACHE = {}


def _col_indices(C, Hp, Wp, kh, kw, stride, Ho, Wo):
    """Flat scatter indices mapping im2col columns back into the padded input."""
    key = (C, Hp, Wp, kh, kw, stride)
    idx = _COL_INDEX_CACHE.get(key)
    if idx is None:
        c = np.repeat(np.arange(C), kh * kw)
        ki = np.tile(np.repeat(np.arange(kh), kw), C)
        kj = np.tile(np.arange(kw), C * kh)
        oi = stride * np.repeat(np.arange(Ho), Wo)
        oj = stride * np.tile(np.arange(Wo), Ho)
        rows = ki[:, None] + oi[None, :]
        cols = kj[:, None] + oj[None, :]
        idx = ((c[:, None] * Hp + rows) * Wp + cols).astype(np.int64)
        _COL_INDEX_CACHE[key] = idx
    return idx


def _im2col(xp, kh, kw, stride):
    """[N,C,Hp,Wp] -> [N, C*kh*kw, Ho*Wo] patch matrix (copies)."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    N, C, Ho, Wo = v.shape[:4]
    cols = v.transpose(0, 1, 4, 5, 2, 3).reshape(N, C * kh * kw, Ho * Wo)
    return np.ascontiguousarray(cols), Ho, Wo


def conv2d(x, w, b, stride=1, padding=0, tape=None):
    """Batched 2-d cross-correlation with per-filter bias.

    x: [N,C,H,W], w: [F,C,kh,kw], b: [F]. Output height is
    (H + 2*padding - kh)//stride + 1, likewise width. Implemented as
    im2col + matmul so the backward path is plain matrix algebra plus a
    scatter-add back through the patch extraction.
    """
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be non-negative, got {padding}")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and kernels, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernels expect {Cw}")
    if b.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {F} filters")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, Ho, Wo = _im2col(xp, kh, kw, stride)
    wr = w.data.reshape(F, -1)
    out = np.matmul(wr, cols).reshape(N, F, Ho, Wo) + b.data[None, :, None, None]

    def bwd(g):
        gr = g.reshape(N, F, Ho * Wo)
        dw = db = dx = None
        if w.requires_grad:
            dw = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        if b.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            dcols = np.matmul(wr.T, gr)  # [N, C*kh*kw, Ho*Wo]
            idx = _col_indices(C, Hp, Wp, kh, kw, stride, Ho, Wo)
            offs = np.arange(N, dtype=np.int64)[:, None, None] * (C * Hp * Wp)
            dxp = np.bincount(
                (idx[None] + offs).ravel(),
                weights=dcols.ravel(),
                minlength=N * C * Hp * Wp,
            ).reshape(N, C, Hp, Wp)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            dx = dxp.astype(g.dtype, copy=False)
        return dx, dw, db

    return _emit(out, (x, w, b), bwd, tape)


def maxpool2d(x, window, stride, tape=None):
    """Per-window max over [N,C,H,W]; ties route gradient to the first
    (row-major) maximal element of the window."""
    window = int(window)
    stride = int(stride)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: need 4-d input, got {x.shape}")
    N, C, H, W = x.shape
    if window > H or window > W:
        raise ShapeError(f"maxpool2d: window {window} exceeds spatial extent {H}x{W}")

    v = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = v.shape[2], v.shape[3]
    vr = v.reshape(N, C, Ho, Wo, window * window)
    arg = vr.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(vr, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        ri = arg // window + (stride * np.arange(Ho))[None, None, :, None]
        cj = arg % window + (stride * np.arange(Wo))[None, None, None, :]
        base = (np.arange(N)[:, None, None, None] * C + np.arange(C)[None, :, None, None])
        flat = (base * H + ri) * W + cj
        dx = np.bincount(
            flat.ravel(), weights=g.ravel(), minlength=N * C * H * W
        ).reshape(N, C, H, W).astype(g.dtype, copy=False)
        return (dx,)

    return _emit(np.ascontiguousarray(out), (x,), bwd, tape)


def global_avg_pool(x, tape=None):
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-d input, got {x.shape}")
    N, C, H, W = x.shape
    inv = 1.0 / (H * W)

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None], (N, C, H, W)) * np.asarray(inv, g.dtype),)

    return _emit(x.data.mean(axis=(2, 3)), (x,), bwd, tape)


# ---------------------------------------------------------------------------
# classification loss


def softmax(logits):
    """Row-wise softmax of a [N,K] array (plain numpy, no grad)."""
    z = np.asarray(logits)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, targets, tape=None):
    """Mean negative log-likelihood of integer targets under row softmax.

    Fused with the softmax (max-subtracted) so large logits cannot
    overflow; the backward rule is (softmax - onehot) / N.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: need [N,K] logits, got {logits.shape}")
    N, K = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (N,):
        raise ShapeError(f"softmax_cross_entropy: {N} logit rows but {t.shape} targets")
    if t.size and (t.min() < 0 or t.max() >= K):
        bad = t[(t < 0) | (t >= K)][0]
        raise IndexError(f"target class {bad} out of range for {K} classes")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(s)
    loss = np.asarray(-logp[np.arange(N), t].mean(), dtype=z.dtype)
    probs = e / s

    def bwd(g):
        d = probs.copy()
        d[np.arange(N), t] -= 1.0
        return (d * (g / N),)

    return _emit(loss, (logits,), bwd, tape)
