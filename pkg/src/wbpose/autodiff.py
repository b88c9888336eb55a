"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A Tensor wraps an ndarray. While a Tape is active (used as a context
manager), every primitive whose inputs require gradients appends one node
to the tape; backward() replays the tape once in reverse and accumulates
vector-Jacobian products into the leaves. With no active tape the same
primitives run as plain numpy, so frozen forward passes pay no recording
cost and are safe to call concurrently.

Design constraints:
  * float64 everywhere; inputs are cast on Tensor construction.
  * one node per primitive call, topologically ordered by construction.
  * a tape is consumed by exactly one backward().
"""

from __future__ import annotations

import numpy as np

from .errors import DetachedGraph, NotScalar, ShapeMismatch

__all__ = [
    "Tensor", "Tape", "as_tensor", "constant", "param", "backward",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "sin", "cos",
    "absolute", "atan2", "power", "relu", "clamp", "where", "detach",
    "tsum", "tmean", "matmul", "reshape", "transpose", "concat", "stack",
    "flip", "take", "softmax", "conv2d", "bilinear_sample",
    "mean_pool_spatial", "l1_loss", "custom_op", "grad_check", "GradCheckReport",
]

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives, consumed once by backward()."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class _Node:
    __slots__ = ("out", "vjps")

    def __init__(self, out, vjps):
        self.out = out
        self.vjps = vjps


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    # keep numpy from absorbing Tensors into object arrays; binary ops with
    # an ndarray on the left then fall through to the reflected methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def param(x) -> Tensor:
    """Leaf tensor meant to be optimized."""
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _record(data, pairs) -> Tensor:
    """Create the output tensor and, if a tape is active, a node.

    pairs: iterable of (parent_tensor, vjp_callable). Parents that do not
    require grad are dropped; if none survive, nothing is recorded.
    """
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        vjps = tuple((p, fn) for p, fn in pairs if p.requires_grad)
        if vjps:
            out.requires_grad = True
            out._tape = tape
            tape.nodes.append(_Node(out, vjps))
    return out


def custom_op(data, pairs) -> Tensor:
    """Escape hatch for hand-written primitives (used by tests)."""
    return _record(data, pairs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data,
                   [(a, lambda g: _unbroadcast(g, a.data.shape)),
                    (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data,
                   [(a, lambda g: _unbroadcast(g, a.data.shape)),
                    (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad * bd,
                   [(a, lambda g: _unbroadcast(g * bd, ad.shape)),
                    (b, lambda g: _unbroadcast(g * ad, bd.shape))])


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad / bd,
                   [(a, lambda g: _unbroadcast(g / bd, ad.shape)),
                    (b, lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape))])


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, [(a, lambda g: -g)])


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, [(a, lambda g: g * out)])


def log(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), [(a, lambda g: g / ad)])


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, [(a, lambda g: g * (0.5 / out))])


def sin(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.sin(ad), [(a, lambda g: g * np.cos(ad))])


def cos(a):
    a = as_tensor(a)
    ad = a.data
    return _record(np.cos(ad), [(a, lambda g: -g * np.sin(ad))])


def absolute(a):
    """|a| with sign subgradient (0 at 0)."""
    a = as_tensor(a)
    ad = a.data
    return _record(np.abs(ad), [(a, lambda g: g * np.sign(ad))])


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    yd, xd = y.data, x.data
    denom = xd * xd + yd * yd
    return _record(np.arctan2(yd, xd),
                   [(y, lambda g: _unbroadcast(g * xd / denom, yd.shape)),
                    (x, lambda g: _unbroadcast(-g * yd / denom, xd.shape))])


def power(a, p):
    """a ** p for a constant scalar exponent."""
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    out = ad ** p
    return _record(out, [(a, lambda g: g * p * ad ** (p - 1.0))])


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0.0
    return _record(a.data * mask, [(a, lambda g: g * mask)])


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is 1 inside the closed interval, 0 outside."""
    a = as_tensor(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    mask = np.ones_like(ad)
    if lo is not None:
        mask = mask * (ad >= lo)
    if hi is not None:
        mask = mask * (ad <= hi)
    return _record(out, [(a, lambda g: g * mask)])


def where(cond, a, b):
    """Select a where cond else b. cond is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return _record(out,
                   [(a, lambda g: _unbroadcast(np.where(cond, g, 0.0), a.data.shape)),
                    (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), b.data.shape))])


def detach(a):
    """Copy of a cut off from the tape."""
    a = as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# reductions


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ad = a.data

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad.shape).copy() if np.ndim(g) == 0 else np.full(ad.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape).copy()

    return _record(ad.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        count = ad.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= ad.shape[ax]

    def vjp(g):
        if axis is None:
            return np.full(ad.shape, g / count)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape) / count

    return _record(ad.mean(axis=axis, keepdims=keepdims), [(a, vjp)])


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape):
    a = as_tensor(a)
    ad = a.data
    return _record(ad.reshape(shape), [(a, lambda g: g.reshape(ad.shape))])


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes),
                   [(a, lambda g: g.transpose(inv))])


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    offsets = np.cumsum([0] + [d.shape[axis] for d in datas])

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _record(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def stack(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _record(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def flip(a, axis):
    a = as_tensor(a)
    return _record(np.flip(a.data, axis=axis),
                   [(a, lambda g: np.flip(g, axis=axis))])


def take(a, idx, axis=0):
    """Integer-array gather along one axis; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    ad = a.data

    def vjp(g):
        z = np.zeros_like(ad)
        if axis == 0:
            np.add.at(z, idx, g)
        else:
            zm = np.moveaxis(z, axis, 0)
            np.add.at(zm, idx, np.moveaxis(g, axis, 0))
        return z

    return _record(np.take(ad, idx, axis=axis), [(a, vjp)])


def _getitem(a, key):
    a = as_tensor(a)
    ad = a.data
    out = ad[key]

    def vjp(g):
        z = np.zeros_like(ad)
        z[key] = g
        return z

    return _record(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def swap(x):
        return np.swapaxes(x, -1, -2)

    return _record(ad @ bd,
                   [(a, lambda g: _unbroadcast(g @ swap(bd), ad.shape)),
                    (b, lambda g: _unbroadcast(swap(ad) @ g, bd.shape))])


def softmax(a, axis=-1):
    """Numerically stable softmax along one axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True))

    return _record(out, [(a, vjp)])


# ---------------------------------------------------------------------------
# structured primitives

_CONV_CACHE: dict[tuple, tuple] = {}


def _conv_plan(c, h, w, kh, kw, s, p):
    key = (c, h, w, kh, kw, s, p)
    plan = _CONV_CACHE.get(key)
    if plan is not None:
        return plan
    hp, wp = h + 2 * p, w + 2 * p
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    # flat index into the padded (c, hp, wp) volume for every col entry
    ci = np.arange(c)[:, None, None, None, None]
    ki = np.arange(kh)[None, :, None, None, None]
    kj = np.arange(kw)[None, None, :, None, None]
    oi = np.arange(ho)[None, None, None, :, None]
    oj = np.arange(wo)[None, None, None, None, :]
    flat = (ci * hp + (oi * s + ki)) * wp + (oj * s + kj)
    plan = (hp, wp, ho, wo, flat.reshape(c * kh * kw, ho * wo).astype(np.intp))
    _CONV_CACHE[key] = plan
    return plan


def conv2d(x, w, b=None, stride=1, padding="same"):
    """2D convolution on a (C, H, W) map with an (O, C, kh, kw) kernel.

    padding="same" keeps the spatial size for stride 1 (p = k // 2);
    an int padding is applied symmetrically. Output is (O, Ho, Wo).
    """
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {xd.shape}, {wd.shape}")
    c, h, wid = xd.shape
    o, cin, kh, kw = wd.shape
    if cin != c:
        raise ShapeMismatch(f"conv2d channel mismatch: input {xd.shape}, kernel {wd.shape}")
    if kh != kw:
        raise ShapeMismatch(f"conv2d kernel must be square, got {wd.shape}")
    p = kh // 2 if padding == "same" else int(padding)
    s = int(stride)
    hp, wp, ho, wo, flat_idx = _conv_plan(c, h, wid, kh, kw, s, p)

    if p:
        xp = np.zeros((c, hp, wp))
        xp[:, p:-p, p:-p] = xd
    else:
        xp = xd
    cols = xp.reshape(-1)[flat_idx]                     # (c*kh*kw, ho*wo)
    wflat = wd.reshape(o, -1)
    out = (wflat @ cols).reshape(o, ho, wo)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[:, None, None]

    def vjp_x(g):
        dcols = wflat.T @ g.reshape(o, -1)
        dxp = np.bincount(flat_idx.ravel(), weights=dcols.ravel(),
                          minlength=c * hp * wp).reshape(c, hp, wp)
        return dxp[:, p:hp - p, p:wp - p] if p else dxp

    def vjp_w(g):
        return (g.reshape(o, -1) @ cols.T).reshape(wd.shape)

    pairs = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        pairs.append((b, lambda g: g.sum(axis=(1, 2))))
    return _record(out, pairs)


def bilinear_sample(fmap, pts):
    """Bilinear interpolation of a (C, H, W) map at (N, 2) points in (x, y).

    Coordinates index pixel centers; points are clamped to the valid
    rectangle, and the coordinate gradient is zero outside it.
    Returns an (N, C) tensor.
    """
    fmap, pts = as_tensor(fmap), as_tensor(pts)
    md, pd = fmap.data, pts.data
    if md.ndim != 3 or pd.ndim != 2 or pd.shape[1] != 2:
        raise ShapeMismatch(f"bilinear_sample expects (C,H,W) and (N,2), got {md.shape}, {pd.shape}")
    c, h, w = md.shape
    xr, yr = pd[:, 0], pd[:, 1]
    x = np.clip(xr, 0.0, w - 1.0)
    y = np.clip(yr, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x), 0, w - 2).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, h - 2).astype(np.intp)
    fx, fy = x - x0, y - y0
    flat = md.reshape(c, -1)
    i00 = y0 * w + x0
    v00 = flat[:, i00]
    v01 = flat[:, i00 + 1]
    v10 = flat[:, i00 + w]
    v11 = flat[:, i00 + w + 1]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T  # (N, C)

    mx = (xr >= 0.0) & (xr <= w - 1.0)
    my = (yr >= 0.0) & (yr <= h - 1.0)

    def vjp_map(g):
        gt = g.T  # (C, N)
        offs = (np.arange(c) * (h * w))[:, None]
        idx = np.concatenate([(i00 + offs).ravel(), (i00 + 1 + offs).ravel(),
                              (i00 + w + offs).ravel(), (i00 + w + 1 + offs).ravel()])
        wts = np.concatenate([(gt * w00).ravel(), (gt * w01).ravel(),
                              (gt * w10).ravel(), (gt * w11).ravel()])
        return np.bincount(idx, weights=wts, minlength=c * h * w).reshape(md.shape)

    def vjp_pts(g):
        gt = g.T
        ddx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
        ddy = ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
        gx = (gt * ddx).sum(axis=0) * mx
        gy = (gt * ddy).sum(axis=0) * my
        return np.stack([gx, gy], axis=1)

    return _record(out, [(fmap, vjp_map), (pts, vjp_pts)])


def mean_pool_spatial(x):
    """Global average pool of a (C, H, W) map to a (C,) vector."""
    return tmean(as_tensor(x), axis=(1, 2))


def l1_loss(a, b):
    """Mean absolute difference, reduced over every element."""
    return tmean(absolute(sub(a, b)))


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle harness


def backward(loss: Tensor, leaves=None):
    """Run reverse accumulation from a scalar loss.

    Sets .grad on every leaf that received a contribution, zeros on
    requested leaves that did not, and returns {leaf: grad}. The tape the
    loss was recorded on is consumed and cannot be replayed.
    """
    if not isinstance(loss, Tensor):
        raise DetachedGraph("loss is not a Tensor")
    if loss.data.size != 1:
        raise NotScalar(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise DetachedGraph("loss is not attached to a tape")
    if tape.consumed:
        raise DetachedGraph("tape already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        holders.pop(id(node.out), None)
        if g is None:
            continue
        for parent, fn in node.vjps:
            contrib = fn(g)
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = contrib if acc is None else acc + contrib
            holders[pid] = parent
    tape.consumed = True

    result = {}
    for pid, g in grads.items():
        t = holders[pid]
        t.grad = g
        result[t] = g
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    return result


class GradCheckReport:
    """Worst relative error per checked input, plus an overall verdict."""

    def __init__(self, tol):
        self.tol = tol
        self.entries = []  # (name, max_rel, n_checked)
        self.ok = True

    def add(self, name, max_rel, n_checked):
        self.entries.append((name, max_rel, n_checked))
        if max_rel >= self.tol:
            self.ok = False

    def __repr__(self):
        rows = ", ".join(f"{n}: {e:.3e} ({k} entries)" for n, e, k in self.entries)
        return f"GradCheckReport(ok={self.ok}, tol={self.tol}, {rows})"


def grad_check(f, inputs, h=1e-6, tol=1e-4, max_entries=None, rng=None, names=None):
    """Compare analytic gradients of scalar f(*inputs) with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-3); the floor
    keeps finite-difference noise on near-zero gradients from dominating.
    max_entries caps the checked entries per input (sampled with rng),
    which keeps large leaves affordable. f must be deterministic.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
    with Tape():
        out = f(*inputs)
        if out.data.size != 1:
            raise NotScalar(f"grad_check needs a scalar function, got {out.data.shape}")
        backward(out, leaves=inputs)
    analytic = [t.grad.copy() for t in inputs]

    report = GradCheckReport(tol)
    rng = rng or np.random.default_rng(0)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idxs = np.arange(n)
        max_rel = 0.0
        aflat = analytic[k].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            a = aflat[i]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-3)
            if rel > max_rel:
                max_rel = rel
        name = names[k] if names else f"input[{k}]"
        report.add(name, max_rel, len(idxs))
    return report
