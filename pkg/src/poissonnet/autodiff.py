"""Reverse-mode differentiation on a linear tape of coarse numpy primitives.

Every primitive records its output together with a closure mapping the
output cotangent to input cotangents. Plain numpy arrays passed to a
primitive are treated as constants. Complex face fields use the stacked real
layout ``(2, F, C)`` with ``[0]`` the ``u1`` and ``[1]`` the ``u2`` component.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import poisson

GATE_EPS = 1e-12


class Parameter:
    """Named trainable array with a gradient accumulator."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Var:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

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

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


@dataclass
class _Record:
    out: int
    inputs: tuple
    vjp: object


class TapeError(RuntimeError):
    pass


@dataclass
class Tape:
    records: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    kinks: list = field(default_factory=list)
    n_vars: int = 0
    consumed: bool = False

    def _new(self, value):
        v = Var(value, self, self.n_vars)
        self.n_vars += 1
        return v

    def param(self, p: Parameter) -> Var:
        """Leaf variable reading ``p.value``; its gradient lands in ``p.grad``."""
        v = self._new(p.value)
        self.leaves[v.index] = p
        return v

    def record(self, value, inputs, vjp) -> Var:
        out = self._new(value)
        self.records.append(_Record(out.index, tuple(inputs), vjp))
        return out

    def backward(self, loss: Var, seed: float = 1.0):
        """Propagate ``d(seed * loss)`` to every parameter leaf reachable from ``loss``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("backward needs a loss recorded on this tape")
        if np.size(loss.value) != 1:
            raise TapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        self.consumed = True
        grads = [None] * self.n_vars
        grads[loss.index] = np.full(np.shape(loss.value), seed, dtype=np.float64)
        for rec in reversed(self.records):
            g = grads[rec.out]
            if g is None:
                continue
            grads[rec.out] = None
            in_grads = rec.vjp(g)
            for x, gx in zip(rec.inputs, in_grads):
                if gx is None or not isinstance(x, Var):
                    continue
                if grads[x.index] is None:
                    grads[x.index] = np.array(gx, dtype=np.float64)
                else:
                    grads[x.index] = grads[x.index] + gx
        for idx, p in self.leaves.items():
            if grads[idx] is not None:
                p.grad = p.grad + grads[idx]


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else x


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _note_kink(inputs, active):
    """Record the activation pattern of a piecewise primitive on its tape."""
    tape = _tape_of(*inputs)
    if tape is not None:
        tape.kinks.append(np.packbits(active).tobytes())


def _emit(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(value, inputs, vjp)


# ---------------------------------------------------------------------------
# generic dense primitives

def add(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    av, bv = _val(a), _val(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _emit(av * bv, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def matmul(a, b):
    av, bv = _val(a), _val(b)
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(x, W, b=None):
    """``x @ W + b`` with ``W`` of shape ``(in, out)``."""
    xv, Wv = _val(x), _val(W)
    out = xv @ Wv
    if b is not None:
        out = out + _val(b)

    def vjp(g):
        return (g @ Wv.T, xv.T @ g, None if b is None else g.sum(axis=0))

    return _emit(out, (x, W, b), vjp)


def spmm(A, x):
    """Constant sparse matrix times a dense variable."""
    return _emit(A @ _val(x), (x,), lambda g: (A.T @ g,))


def relu(x):
    xv = _val(x)
    mask = xv > 0
    _note_kink((x,), mask)
    return _emit(np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def softplus(x):
    xv = _val(x)
    out = np.logaddexp(0.0, xv)
    sig = 0.5 * (1 + np.tanh(0.5 * xv))
    return _emit(out, (x,), lambda g: (g * sig,))


def sin(x):
    xv = _val(x)
    return _emit(np.sin(xv), (x,), lambda g: (g * np.cos(xv),))


def cos(x):
    xv = _val(x)
    return _emit(np.cos(xv), (x,), lambda g: (-g * np.sin(xv),))


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _emit(np.concatenate(vals, axis=axis), xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_cols(x, start, stop):
    xv = _val(x)

    def vjp(g):
        out = np.zeros_like(xv)
        out[..., start:stop] = g
        return (out,)

    return _emit(xv[..., start:stop], (x,), vjp)


def sum_all(x):
    xv = _val(x)
    return _emit(np.asarray(xv.sum()), (x,), lambda g: (np.broadcast_to(g, xv.shape).copy(),))


def weighted_sum_sq(x, w):
    """``sum(w * x**2)`` with constant weights broadcastable to ``x``."""
    xv = _val(x)
    w = np.asarray(w)
    return _emit(np.asarray((w * xv * xv).sum()), (x,), lambda g: (2.0 * g * w * xv,))


def weighted_mean_rows(x, w):
    """Weighted average over rows, shape ``(1, C)``."""
    w = np.asarray(w, dtype=np.float64)
    wn = (w / w.sum())[None, :]
    return matmul(wn, x)


def mse(pred, target, weights=None):
    """Mean squared error; row weights make it a weighted mean over rows."""
    pv = _val(pred)
    diff = sub(pred, target)
    C = int(np.prod(pv.shape[1:])) if pv.ndim > 1 else 1
    if weights is None:
        w = np.full(pv.shape[0], 1.0 / (pv.shape[0] * C))
    else:
        w = np.asarray(weights, dtype=np.float64) / (np.sum(weights) * C)
    w = w.reshape((-1,) + (1,) * (pv.ndim - 1))
    return weighted_sum_sq(diff, w)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``logits`` ``(N, K)`` against integer labels."""
    lv = _val(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    N, K = lv.shape
    if labels.shape[0] != N:
        raise ValueError("labels and logits disagree in length")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"label out of range [0, {K})")
    shifted = lv - lv.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(N), labels].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(N), labels] -= 1.0
        return (g * p / N,)

    return _emit(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# geometric primitives

def face_grad(G, s):
    """Interleaved sparse gradient ``(2F, V)`` applied to ``s (V, C)``; returns ``(2, F, C)``."""
    sv = _val(s)
    F = G.shape[0] // 2
    out = (G @ sv).reshape(F, 2, -1).transpose(1, 0, 2)

    def vjp(g):
        return (G.T @ g.transpose(1, 0, 2).reshape(2 * F, -1),)

    return _emit(out, (s,), vjp)


def face_div(D, f):
    """Weighted divergence ``D = G^T M_F`` applied to a ``(2, F, C)`` field."""
    fv = _val(f)
    F = fv.shape[1]
    out = D @ fv.transpose(1, 0, 2).reshape(2 * F, -1)

    def vjp(g):
        return ((D.T @ g).reshape(F, 2, -1).transpose(1, 0, 2),)

    return _emit(out, (f,), vjp)


def complex_linear(f, W_re, W_im):
    """Per-face complex matrix product ``W f`` with ``W`` of shape ``(C_out, C_in)``."""
    fv, Wr, Wi = _val(f), _val(W_re), _val(W_im)
    re, im = fv[0], fv[1]
    out = np.stack([re @ Wr.T - im @ Wi.T, re @ Wi.T + im @ Wr.T])

    def vjp(g):
        gr, gi = g[0], g[1]
        df = np.stack([gr @ Wr + gi @ Wi, -gr @ Wi + gi @ Wr])
        dWr = gr.T @ re + gi.T @ im
        dWi = -gr.T @ im + gi.T @ re
        return df, dWr, dWi

    return _emit(out, (f, W_re, W_im), vjp)


def magnitude_gate(f, b):
    """Scale each complex entry by ``relu(r + b) / r`` where ``r = |f|``.

    Entries with ``r < 1e-12`` map to zero with zero gradient.
    """
    fv, bv = _val(f), _val(b)
    re, im = fv[0], fv[1]
    r = np.hypot(re, im)
    ok = r >= GATE_EPS
    rs = np.where(ok, r, 1.0)
    active = ok & (r + bv > 0)
    scale = np.where(active, (r + bv) / rs, 0.0)
    out = fv * scale
    _note_kink((f, b), active)

    def vjp(g):
        gr, gi = g[0], g[1]
        proj = np.where(active, (gr * re + gi * im) / rs, 0.0)
        q = np.where(active, -bv / (rs * rs), 0.0)
        df = np.stack([gr * scale + re * q * proj, gi * scale + im * q * proj])
        db = _unbroadcast(proj, np.shape(bv))
        return df, db

    return _emit(out, (f, b), vjp)


def rotate_scale(f, scale, theta):
    """Multiply each complex entry by ``scale * exp(i theta)``; both ``(F, C)``."""
    fv, k, th = _val(f), _val(scale), _val(theta)
    c, s = np.cos(th), np.sin(th)
    re, im = fv[0], fv[1]
    rot = np.stack([re * c - im * s, re * s + im * c])
    out = k * rot

    def vjp(g):
        gr, gi = g[0], g[1]
        df = k * np.stack([gr * c + gi * s, -gr * s + gi * c])
        dk = gr * rot[0] + gi * rot[1]
        dth = k * (-gr * rot[1] + gi * rot[0])
        return df, dk, dth

    return _emit(out, (f, scale, theta), vjp)


def poisson_solve(fact, rhs):
    """Centered Poisson solve; the backward pass reuses the same factorization."""
    out = poisson.solve_centered(fact, _val(rhs))
    return _emit(out, (rhs,), lambda g: (poisson.adjoint_solve(fact, g),))


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class GradCheckEntry:
    name: str
    n_checked: int
    n_excluded: int
    p90_rel_error: float
    max_rel_error: float
    max_abs_grad: float


@dataclass
class GradCheckReport:
    entries: list
    n_checked: int
    n_excluded: int
    h: float
    tol: float
    max_tol: float
    p90_rel_error: float
    max_rel_error: float
    passed: bool

    def to_dict(self):
        return {
            "h": self.h,
            "tol": self.tol,
            "max_tol": self.max_tol,
            "p90_rel_error": self.p90_rel_error,
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "n_checked": self.n_checked,
            "n_excluded": self.n_excluded,
            "parameters": [vars(e) for e in self.entries],
        }


def finite_diff_check(loss_fn, params, h=1e-5, tol=1e-5, max_tol=1e-3, atol=1e-6,
                      max_coords=None, seed=0):
    """Compare tape gradients to central differences, coordinate by coordinate.

    ``loss_fn(tape)`` must return a scalar :class:`Var` recorded on ``tape``.
    The relative error of a coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    A coordinate whose ``+-h`` stencil changes the activation pattern of any
    ReLU or magnitude gate straddles a nondifferentiable point; it is
    excluded and counted in ``n_excluded``. The check passes when the 90th
    percentile over the remaining coordinates is below ``tol`` and their
    maximum below ``max_tol``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss_fn(tape))
    base_kinks = tape.kinks
    rng = np.random.default_rng(seed)

    def value():
        t = Tape()
        return float(loss_fn(t).value), t.kinks

    entries, all_err, total_excluded = [], [], 0
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
        errs, excluded = [], 0
        analytic = p.grad.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            lp, kp = value()
            flat[i] = old - h
            lm, km = value()
            flat[i] = old
            if kp != base_kinks or km != base_kinks:
                excluded += 1
                continue
            num = (lp - lm) / (2 * h)
            a = analytic[i]
            errs.append(abs(a - num) / max(abs(a), abs(num), atol))
        errs = np.array(errs)
        all_err.append(errs)
        total_excluded += excluded
        entries.append(GradCheckEntry(
            name=p.name,
            n_checked=int(len(errs)),
            n_excluded=excluded,
            p90_rel_error=float(np.percentile(errs, 90)) if len(errs) else 0.0,
            max_rel_error=float(errs.max()) if len(errs) else 0.0,
            max_abs_grad=float(np.abs(analytic).max()) if analytic.size else 0.0,
        ))
    errs = np.concatenate(all_err) if all_err else np.zeros(0)
    p90 = float(np.percentile(errs, 90)) if len(errs) else 0.0
    mx = float(errs.max()) if len(errs) else 0.0
    return GradCheckReport(
        entries, int(len(errs)), total_excluded, h, tol, max_tol, p90, mx,
        bool(len(errs) and p90 < tol and mx < max_tol),
    )
