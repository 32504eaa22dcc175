"""Minimal reverse-mode autodiff over dense float64 tensors.

A `Tensor` is an immutable wrapper around a C-contiguous float64 ndarray.
A `Tape` records primitive ops executed while it is active; `Tape.backward`
replays the record in reverse to produce exact gradients for every watched
leaf. Tensors not watched on the active tape are constants, which is what
lets `vjp_wrt_input` differentiate a network w.r.t. its input while holding
parameters fixed.

Broadcasting is restricted to leading-batch expansion plus explicit
singleton axes; anything else raises `ShapeError`.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform to the primitive's contract."""


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


_STRICT_FINITE = False


def set_strict_finite(flag):
    """Globally enable per-op finiteness checks (used by the test suite)."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(flag)


def check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """Immutable dense float64 value."""

    __slots__ = ("data",)

    def __init__(self, data, copy=True):
        arr = np.array(data, dtype=np.float64, copy=copy, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _wrap(arr):
    # Internal outputs: freeze in place, no copy.
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.flags.writeable = False
    t = Tensor.__new__(Tensor)
    object.__setattr__(t, "data", arr)
    return t


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple  # node indices, -1 for constants
    backward: object  # callable(grad_out) -> tuple of parent grads (or None)
    replay: object  # callable() -> np.ndarray recomputing out.data


_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar(
    "chunklab_active_tape", default=None
)


@dataclass
class Tape:
    """Single-writer record of one forward pass."""

    nodes: list = field(default_factory=list)
    _ids: dict = field(default_factory=dict)  # id(tensor) -> node index
    _keep: list = field(default_factory=list)  # keepalive so ids stay unique

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        return False

    def watch(self, t):
        """Register `t` as a differentiable leaf; returns it unchanged."""
        t = as_tensor(t)
        if id(t) not in self._ids:
            self._register("leaf", t, (), None, lambda d=t.data: d)
        return t

    def _register(self, op, out, parents, backward, replay):
        idx = len(self.nodes)
        self.nodes.append(_Node(op, out, parents, backward, replay))
        self._ids[id(out)] = idx
        self._keep.append(out)
        return idx

    def _index_of(self, t):
        return self._ids.get(id(t), -1)

    def is_tracked(self, t):
        return id(t) in self._ids

    def backward(self, output, cotangent):
        """Gradients of <cotangent, output> w.r.t. every watched leaf.

        Returns a dict keyed by leaf Tensor (identity).
        """
        out_idx = self._index_of(output)
        if out_idx < 0:
            raise ValueError("output was not recorded on this tape")
        cot = as_tensor(cotangent)
        if cot.shape != output.shape:
            raise ShapeError(
                f"cotangent shape {cot.shape} != output shape {output.shape}"
            )
        grads = [None] * len(self.nodes)
        grads[out_idx] = np.array(cot.data)
        for idx in range(out_idx, -1, -1):
            node = self.nodes[idx]
            g = grads[idx]
            if g is None or node.backward is None:
                continue
            parent_grads = node.backward(g)
            for p_idx, pg in zip(node.parents, parent_grads):
                if p_idx < 0 or pg is None:
                    continue
                if grads[p_idx] is None:
                    grads[p_idx] = pg.copy() if pg.base is not None else pg
                else:
                    grads[p_idx] += pg
        result = {}
        for idx, node in enumerate(self.nodes):
            if node.op == "leaf":
                g = grads[idx]
                if g is None:
                    g = np.zeros_like(node.out.data)
                result[node.out] = g
        return result

    def replay_check(self):
        """Recompute every recorded op; True iff all outputs match bit-exactly."""
        for node in self.nodes:
            if not np.array_equal(node.replay(), node.out.data):
                return False
        return True


def _record(op, out_data, parents, backward, replay):
    if _STRICT_FINITE:
        check_finite(out_data, op)
    out = _wrap(out_data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        p_idx = tuple(tape._index_of(p) for p in parents)
        if any(i >= 0 for i in p_idx):
            tape._register(op, out, p_idx, backward, replay)
    return out


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a_shape, b_shape, op):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a_shape} and {b_shape} do not conform")


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = a.data + b.data

    def backward(g, ash=a.shape, bsh=b.shape):
        return _sum_to_shape(g, ash), _sum_to_shape(g, bsh)

    return _record("add", out, (a, b), backward, lambda: a.data + b.data)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out = a.data - b.data

    def backward(g, ash=a.shape, bsh=b.shape):
        return _sum_to_shape(g, ash), _sum_to_shape(-g, bsh)

    return _record("sub", out, (a, b), backward, lambda: a.data - b.data)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = a.data * b.data

    def backward(g, ash=a.shape, bsh=b.shape):
        return _sum_to_shape(g * b.data, ash), _sum_to_shape(g * a.data, bsh)

    return _record("mul", out, (a, b), backward, lambda: a.data * b.data)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _record("scale", out, (a,), backward, lambda: a.data * c)


def neg(a):
    return scale(a, -1.0)


def abs_(a):
    a = as_tensor(a)
    out = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _record("abs", out, (a,), backward, lambda: np.abs(a.data))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires >=2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul: batched operands must share leading dims")
    out = np.matmul(a.data, b.data)

    def backward(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        da = np.matmul(g, bt)
        db = _sum_to_shape(np.matmul(at, g), b.shape)
        return da, db

    return _record("matmul", out, (a, b), backward,
                   lambda: np.matmul(a.data, b.data))


def affine(x, w, b):
    """x @ w + b with w:(k,n), b:(n,); x may carry leading batch dims."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine params: w{w.shape} b{b.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: x{x.shape} @ w{w.shape}")
    out = np.matmul(x.data, w.data) + b.data

    def backward(g):
        dx = np.matmul(g, w.data.T)
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        dw = x2.T @ g2
        db = g2.sum(axis=0)
        return dx, dw, db

    return _record("affine", out, (x, w, b), backward,
                   lambda: np.matmul(x.data, w.data) + b.data)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), backward,
                   lambda: a.data.reshape(shape))


def transpose_last2(a):
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError("transpose_last2 requires >=2-D")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose", out, (a,), backward,
                   lambda: np.swapaxes(a.data, -1, -2))


def concat_last(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_last: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=-1)
    na = a.shape[-1]

    def backward(g):
        return g[..., :na], g[..., na:]

    return _record("concat", out, (a, b), backward,
                   lambda: np.concatenate([a.data, b.data], axis=-1))


def slice_last(a, start, stop):
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.shape[-1]):
        raise ShapeError(f"slice_last [{start}:{stop}] of {a.shape}")
    out = a.data[..., start:stop]

    def backward(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", out, (a,), backward,
                   lambda: a.data[..., start:stop])


# ---------------------------------------------------------------------------
# reductions


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), backward,
                   lambda: np.asarray(a.data.sum(axis=axis, keepdims=keepdims)))


def mean_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities and normalization (kernel-backed)


def layer_norm(a):
    """Normalize over the last axis, epsilon 1e-5, no affine."""
    a = as_tensor(a)
    y, rstd = kernels.layer_norm_fwd(a.data)

    def backward(g):
        return (kernels.layer_norm_bwd(g, y, rstd),)

    return _record("layer_norm", y, (a,), backward,
                   lambda: kernels.layer_norm_fwd(a.data)[0])


def gelu(a):
    a = as_tensor(a)
    out = kernels.gelu_fwd(a.data)

    def backward(g):
        return (kernels.gelu_bwd(a.data, g),)

    return _record("gelu", out, (a,), backward,
                   lambda: kernels.gelu_fwd(a.data))


def tanh_(a):
    a = as_tensor(a)
    out = kernels.tanh_fwd(a.data)

    def backward(g):
        return (kernels.tanh_bwd(out, g),)

    return _record("tanh", out, (a,), backward,
                   lambda: kernels.tanh_fwd(a.data))


def softmax(a):
    a = as_tensor(a)
    p = kernels.softmax_fwd(a.data)

    def backward(g):
        return (kernels.softmax_bwd(p, g),)

    return _record("softmax", p, (a,), backward,
                   lambda: kernels.softmax_fwd(a.data))


def log_softmax(a):
    a = as_tensor(a)
    lp = kernels.log_softmax_fwd(a.data)

    def backward(g):
        return (kernels.log_softmax_bwd(lp, g),)

    return _record("log_softmax", lp, (a,), backward,
                   lambda: kernels.log_softmax_fwd(a.data))


# ---------------------------------------------------------------------------
# indexing


def embed_gather(table, idx):
    """table:(V,E) float leaf, idx: int array -> (idx.shape..., E)."""
    table = as_tensor(table)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embed_gather: idx must be integers")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= table.shape[0]:
        raise ShapeError("embed_gather: index out of range")
    out = table.data[idx]

    def backward(g):
        dt = np.zeros(table.shape)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _record("gather", out, (table,), backward,
                   lambda: table.data[idx])


def take_last(a, idx):
    """Pick one element along the last axis: out[...] = a[..., idx[...]]."""
    a = as_tensor(a)
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: idx{idx.shape} vs a{a.shape}")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def backward(g):
        da = np.zeros(a.shape)
        np.put_along_axis(da, expanded, np.expand_dims(g, -1), axis=-1)
        return (da,)

    return _record("take_last", out, (a,), backward,
                   lambda: np.take_along_axis(a.data, expanded, axis=-1)[..., 0])


# ---------------------------------------------------------------------------
# encodings


def sinusoidal_embed(tau, dim, f_min=1.0, f_max=1.0e4):
    """Sinusoidal features of tau:(B,) -> (B, dim); log-spaced frequencies."""
    tau = as_tensor(tau)
    if tau.ndim != 1 or dim % 2 != 0:
        raise ShapeError("sinusoidal_embed: tau must be 1-D and dim even")
    half = dim // 2
    freqs = np.logspace(np.log10(f_min), np.log10(f_max), half)
    phases = tau.data[:, None] * freqs[None, :]
    out = np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)

    def backward(g):
        dsin = g[..., :half] * np.cos(phases)
        dcos = -g[..., half:] * np.sin(phases)
        return (((dsin + dcos) * freqs[None, :]).sum(axis=-1),)

    return _record("sin_embed", out, (tau,), backward,
                   lambda: np.concatenate([np.sin(phases), np.cos(phases)], -1))


# ---------------------------------------------------------------------------
# vjp and gradient checking


def vjp_wrt_input(f, x, u):
    """u^T (df/dx) for a tensor-to-tensor f, parameters held constant."""
    x = as_tensor(x)
    with Tape() as tape:
        xt = tape.watch(x)
        y = f(xt)
    u = as_tensor(u)
    if u.shape != y.shape:
        raise ShapeError(f"vjp cotangent {u.shape} != output {y.shape}")
    return tape.backward(y, u)[x]


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    passed: bool
    n_probes: int

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"grad_check [{status}] max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tolerance:.1e} probes={self.n_probes}")


def _rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-10)
    return abs(a - b) / denom


def grad_check(f, x, tolerance, seed=0, n_probes=0, h=1e-5, ad_gradient=None):
    """Compare the AD gradient of a reduced f against central differences.

    Non-scalar outputs are reduced through a random cotangent. With
    n_probes=0 every coordinate of x is probed; otherwise `n_probes` random
    unit directions are used (directional derivatives), which is the only
    tractable mode for large x. `ad_gradient` overrides the tape gradient
    (used by negative-control tests).
    """
    x = as_tensor(x)
    rng = np.random.default_rng(seed)

    with Tape() as tape:
        xt = tape.watch(x)
        y = f(xt)
    cot = np.ones(y.shape) if y.size == 1 else rng.standard_normal(y.shape)

    if ad_gradient is None:
        g = tape.backward(y, cot)[x]
    else:
        g = np.asarray(ad_gradient, dtype=np.float64)

    def phi(arr):
        out = f(Tensor(arr))
        return float(np.sum(out.data * cot))

    max_err = 0.0
    if n_probes <= 0:
        flat = np.array(x.data).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = phi(flat.reshape(x.shape))
            flat[i] = orig - h
            fm = phi(flat.reshape(x.shape))
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            max_err = max(max_err, _rel_err(fd, g.reshape(-1)[i]))
        n_done = flat.size
    else:
        for _ in range(n_probes):
            v = rng.standard_normal(x.shape)
            v /= np.sqrt((v * v).sum())
            fp = phi(x.data + h * v)
            fm = phi(x.data - h * v)
            fd = (fp - fm) / (2 * h)
            ad = float((g * v).sum())
            max_err = max(max_err, _rel_err(fd, ad))
        n_done = n_probes

    return GradCheckReport(max_err, tolerance, max_err < tolerance, n_done)
