"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op records its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

IGNORE_INDEX = -100

_CHECKED = True


def is_checked() -> bool:
    return _CHECKED


def set_checked(flag: bool) -> None:
    global _CHECKED
    _CHECKED = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True):
    """Temporarily enable or disable the per-op NaN/Inf scan."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = bool(flag)
    try:
        yield
    finally:
        _CHECKED = prev


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable | None = None
        self._op = _op
        self._freed = False

    # -- basic properties --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op or 'leaf'})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    # -- backward ----------------------------------------------------------

    def backward(self, retain_graph: bool = False) -> None:
        """Populate ``.grad`` on every leaf that requires grad.

        Leaf gradients accumulate across calls; intermediate gradients are
        transient. The graph is freed unless ``retain_graph`` is set, and a
        second call on a freed graph raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._freed:
            raise GraphError("graph already freed by a previous backward; run the forward pass again")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor that requires grad")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._freed = True


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check(out: np.ndarray, op: str) -> None:
    if _CHECKED and not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise FloatingPointError(f"non-finite value produced by {op} at index {tuple(int(i) for i in bad)}")


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Callable) -> Tensor:
    _check(data, op)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return _make(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * (_GELU_C * (1.0 + 3 * 0.044715 * x2))
        return (g * 0.5 * (1.0 + t + x * dt),)

    return _make(y, (a,), "gelu", backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice / integer) indexing."""
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _make(np.array(out), (a,), "take", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, "concat", backward)


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), "sum", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), "mean", lambda g: (np.full(a.shape, float(g) / n),))


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` batch.

    ``b`` is either 2-D (shared weight) or has the same leading axes as ``a``.
    """
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), "matmul", backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` as one graph node."""
    k, n = w.shape
    if x.shape[-1] != k:
        raise ValueError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(x.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, "linear", backward)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray, heads: int, log: list | None = None) -> Tensor:
    """Multi-head scaled dot-product attention as one graph node.

    q is [B, Tq, d]; k and v are [B, Tk, d]; ``key_mask`` is [B, Tk] with 1 for
    attendable keys. Masked keys receive exactly zero weight.
    """
    B, Tq, d = q.shape
    Tk = k.shape[1]
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    scale_ = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Tk, heads, dh).transpose(0, 2, 1, 3)
    scores = np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale_
    scores += np.where(np.asarray(key_mask)[:, None, None, :] > 0, 0.0, -1e9)
    scores -= scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    if log is not None:
        log.append(p.copy())
    ctx = np.matmul(p, vh).transpose(0, 2, 1, 3).reshape(B, Tq, d)

    def backward(g):
        gh = g.reshape(B, Tq, heads, dh).transpose(0, 2, 1, 3)
        gv = np.matmul(p.transpose(0, 1, 3, 2), gh)
        gp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale_
        gq = np.matmul(gs, kh)
        gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
        merge = lambda t, T: t.transpose(0, 2, 1, 3).reshape(B, T, d)
        return merge(gq, Tq), merge(gk, Tk), merge(gv, Tk)

    return _make(ctx, (q, k, v), "attention", backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _make(out, (weight,), "embedding", backward)


def softmax(a: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``additive_mask`` is a constant added first."""
    x = a.data if additive_mask is None else a.data + additive_mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), "softmax", backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    d = x.shape[-1]
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        proj = np.einsum("...i,...i->...", gxhat, xhat)[..., None] / d
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * proj)
        lead = g.reshape(-1, d)
        ggamma = np.einsum("ij,ij->j", lead, xhat.reshape(-1, d))
        gbeta = lead.sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), "layer_norm", backward)


# -- losses --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-softmax over positions whose target is not ``ignore_index``."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    k = logits.shape[-1]
    z = logits.data.reshape(-1, k)
    if z.shape[0] != targets.shape[0]:
        raise ValueError(f"logits rows {z.shape[0]} != targets {targets.shape[0]}")
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("softmax_cross_entropy: every position is ignored")
    t = targets[keep]
    if t.min() < 0 or t.max() >= k:
        raise ValueError(f"target out of range [0, {k})")
    zk = z[keep]
    zmax = zk.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(zk - zmax).sum(axis=1))
    loss = (lse - zk[np.arange(n), t]).mean()

    def backward(g):
        p = np.exp(zk - lse[:, None])
        p[np.arange(n), t] -= 1.0
        full = np.zeros_like(z)
        full[keep] = p * (float(g) / n)
        return (full.reshape(logits.shape),)

    return _make(np.array(loss), (logits,), "softmax_cross_entropy", backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    z = logits.data
    # log(1 + exp(-|z|)) + max(z, 0) - z*y
    loss = (np.logaddexp(0.0, z) - z * y).mean()
    n = z.size

    def backward(g):
        return ((_sigmoid(z) - y) * (float(g) / n),)

    return _make(np.array(loss), (logits,), "bce_with_logits", backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- gradient checking -----------------------------------------------------------


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is called with ``x`` (a tensor or a list of tensors) and must return
    a scalar tensor. Error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    ``max_coords`` subsamples coordinates when the inputs are large.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    for t in tensors:
        t.data = np.ascontiguousarray(t.data) if t.data.ndim else t.data  # perturbed through a flat view
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    coords = [(i, j) for i, t in enumerate(tensors) for j in range(t.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[p] for p in sorted(pick)]

    worst = 0.0
    for i, j in coords:
        flat = tensors[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        fp = float(f(x).data)
        flat[j] = orig - h
        fm = float(f(x).data)
        flat[j] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value perturbing tensor {i} coordinate {j}")
        numeric = (fp - fm) / (2 * h)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    for t in tensors:
        t.grad = None
    return worst


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
