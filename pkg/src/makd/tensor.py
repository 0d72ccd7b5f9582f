"""Dense float64 arrays with a small reverse-mode autodiff tape.

Every op is a pure function of its inputs. When a :class:`GradientTape` is
active and at least one input requires a gradient, the op appends a node to
the tape; :func:`backward` walks the tape in reverse and returns the
gradient of a scalar loss with respect to every leaf parameter.

Ops are fused where it pays off (layer norm, masked softmax, GELU) so that a
transformer layer is a couple of dozen nodes rather than hundreds.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
MASK_FILL = -1e9


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class SVDConvergenceError(RuntimeError):
    """Raised when the iterative SVD does not converge."""


class Tensor:
    """An n-d float64 array, optionally a trainable leaf.

    ``data`` is never modified by ops; the optimizer is the only writer of
    leaf data and it does so between tapes.
    """

    __slots__ = ("data", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_ACTIVE: list["GradientTape"] = []


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Records differentiable ops executed inside its ``with`` block.

    A tape belongs to one training step and is not shared between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._used = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False


class no_grad:
    """Suspend recording (used for frozen teacher passes)."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()
        return self

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)
        return False


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(g)`` receives the upstream gradient and must return one array
    (or ``None``) per parent, each shaped like that parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._node = None
    track = bool(_ACTIVE) and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        node = _Node(out, tuple(parents), backward)
        out._node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def backward(loss: Tensor, tape: GradientTape, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse pass. Returns ``{leaf tensor: gradient array}``.

    When ``params`` is given, every one of them gets an entry, zero for
    parameters that did not influence ``loss``.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {leaves[k]: grads[k] for k in leaves if k in grads}
    if loss._node is None and loss.requires_grad:
        result[loss] = np.ones((), dtype=DTYPE)
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.data)
    return result


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return custom_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return custom_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return custom_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, idx) -> Tensor:
    src = x.shape

    def bw(g):
        out = np.zeros(src, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return custom_op(x.data[idx], (x,), bw)


def tensor_sum(x: Tensor) -> Tensor:
    src = x.shape
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src),))


def square_sum(x: Tensor) -> Tensor:
    """Squared Frobenius norm."""
    xd = x.data
    return custom_op(np.asarray(np.sum(xd * xd)), (x,), lambda g: (2.0 * g * xd,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return custom_op(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` fused into one node; ``weight`` is ``[in, out]``."""
    x = as_tensor(x)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    xd, wd = x.data, weight.data
    y = xd @ wd
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return custom_op(y, parents, bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    n, d = weight.shape

    def bw(g):
        out = np.zeros((n, d), dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, d))
        return (out,)

    return custom_op(weight.data[ids], (weight,), bw)


# --------------------------------------------------------------------------
# nonlinearities
# --------------------------------------------------------------------------


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis.

    ``mask`` (broadcastable boolean, True = keep) is applied as an additive
    -1e9 before normalising; masked entries come out exactly 0. A row with
    every entry masked is rejected.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(mask, axis=-1)):
            raise ValueError("softmax_rows: fully masked row (degenerate attention row)")
        z = z + np.where(mask, 0.0, MASK_FILL)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    if mask is not None:
        y = np.where(mask, y, 0.0)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return custom_op(y, (x,), bw)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row standardisation (population variance) then affine map."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs rows of {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = gain_g = bias_g = None
        if gain.requires_grad:
            gain_g = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            bias_g = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gain_g, bias_g

    return custom_op(xhat * gd + bias.data, (x, gain, bias), bw)


_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor, approximate: str = "tanh") -> Tensor:
    """Gaussian error linear unit.

    ``approximate="tanh"`` (default) is the cubic tanh form used by the BERT
    and GPT-2 families; ``"none"`` is the exact erf form.
    """
    x = as_tensor(x)
    xd = x.data
    if approximate == "tanh":
        inner = _SQRT_2_OVER_PI * (xd + 0.044715 * xd * xd * xd)
        t = np.tanh(inner)
        y = 0.5 * xd * (1.0 + t)

        def bw(g):
            dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    elif approximate == "none":
        cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
        y = xd * cdf

        def bw(g):
            pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
            return (g * (cdf + xd * pdf),)

    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    return custom_op(y, (x,), bw)


# --------------------------------------------------------------------------
# SVD
# --------------------------------------------------------------------------


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    u *= signs
    v *= signs


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` by an orthonormal completion."""
    if good.all():
        return u
    n = u.shape[0]
    keep = u[:, good]
    q, _ = np.linalg.qr(np.hstack([keep, np.eye(n)]))
    extra = q[:, keep.shape[1] : keep.shape[1] + int((~good).sum())]
    out = u.copy()
    out[:, ~good] = extra
    return out


def _jacobi_svd(w: np.ndarray, tol: float, max_sweeps: int):
    """One-sided (Hestenes) Jacobi on the columns of a tall matrix.

    Rotations for disjoint column pairs are applied together using a
    round-robin schedule, so each round is a handful of vectorised updates.
    """
    a = w.copy()
    n, m = a.shape
    v = np.eye(m)
    cols = m + (m % 2)
    if cols != m:
        a = np.hstack([a, np.zeros((n, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    players = list(range(cols))
    sweeps = 0
    while True:
        if sweeps >= max_sweeps:
            raise SVDConvergenceError(f"one-sided Jacobi SVD did not converge after {sweeps} sweeps")
        sweeps += 1
        rotated = False
        for _ in range(cols - 1):
            half = cols // 2
            p = np.array(players[:half])
            q = np.array(players[half:][::-1])
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if active.any():
                rotated = True
                zeta = np.where(active, (beta - alpha) / (2.0 * np.where(active, gamma, 1.0)), 0.0)
                t = np.where(
                    active, np.sign(zeta + (zeta == 0)) / (np.abs(zeta) + np.sqrt(1.0 + zeta**2)), 0.0
                )
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                vp, vq = v[:, p], v[:, q]
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
            players = [players[0]] + [players[-1]] + players[1:-1]
        if not rotated:
            break
    a, v = a[:, :m], v[:m, :m]
    s = np.linalg.norm(a, axis=0)
    order = np.argsort(-s, kind="stable")
    s, a, v = s[order], a[:, order], v[:, order]
    good = s > s[0] * 1e-14 if s.size and s[0] > 0 else np.zeros(m, dtype=bool)
    u = np.where(good, a / np.where(good, s, 1.0), 0.0)
    return _complete_basis(u, good), s, v


def svd(w, method: str = "lapack", tol: float = 1e-10, max_sweeps: int | None = None):
    """Thin SVD ``w = U diag(S) V^T`` with ``r = min(n, m)`` columns.

    ``method="lapack"`` defers to numpy's divide-and-conquer driver;
    ``method="jacobi"`` runs the one-sided Jacobi iteration above, capped at
    ``10 * max(n, m)`` sweeps unless ``max_sweeps`` is given.
    Signs are fixed so the largest-magnitude entry of each U column is
    positive. Returns plain arrays.
    """
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=DTYPE)
    if w.ndim != 2:
        raise ShapeError(f"svd expects a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("svd: input contains non-finite values")
    n, m = w.shape
    if method == "lapack":
        try:
            u, s, vt = np.linalg.svd(w, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SVDConvergenceError(f"LAPACK SVD did not converge: {exc}") from exc
        v = vt.T.copy()
    elif method == "jacobi":
        cap = max_sweeps if max_sweeps is not None else 10 * max(n, m)
        if n >= m:
            u, s, v = _jacobi_svd(w, tol, cap)
        else:
            v, s, u = _jacobi_svd(w.T, tol, cap)
    else:
        raise ValueError(f"unknown svd method {method!r}")
    u = np.ascontiguousarray(u)
    v = np.ascontiguousarray(v)
    _fix_signs(u, v)
    return u, s, v


# --------------------------------------------------------------------------
# checking helpers
# --------------------------------------------------------------------------


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place and restored).

    ``indices`` restricts the probe to a subset of flat positions; the
    returned array has NaN elsewhere.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(x.shape)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, row_mask: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over rows where ``row_mask``."""
    z = logits.data
    row_mask = np.asarray(row_mask, dtype=bool)
    count = int(row_mask.sum())
    if count == 0:
        raise ValueError("cross_entropy: no labelled positions")
    logp = log_softmax_np(z)
    safe = np.where(row_mask, labels, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -np.sum(np.where(row_mask, picked, 0.0)) / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * row_mask[..., None] / count,)

    return custom_op(np.asarray(loss), (logits,), bw)
