"""Dense float64 matrices, an SPD solver, and a reverse-mode tape.

All values are 2-D numpy arrays in double precision. The tape records a
flat list of nodes in construction order (inputs always precede their
consumers), so a single reverse sweep propagates gradients. The operation
set is exactly what the alignment pipeline needs, including `solve_through`,
which differentiates x = a^-1 b for symmetric positive definite a.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NonScalarLoss, NotPositiveDefinite, ShapeMismatch, ZeroNormFeature

_COSINE_MIN_NORM = 1e-12


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float64 2-D array.

    Scalars become 1x1, 1-D sequences become a single row.
    """
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size and not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(a)


def _cho_factor(a: np.ndarray):
    try:
        return scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def solve_spd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite a via Cholesky.

    Never forms an explicit inverse. Raises NotPositiveDefinite when the
    factorization hits a non-positive pivot.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeMismatch(f"a must be square, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeMismatch(f"a is {a.shape} but b has {b.shape[0]} rows")
    asym = np.abs(a - a.T).max() if n else 0.0
    if asym > 1e-10 * max(1.0, np.abs(a).max()):
        raise ValueError(f"a is not symmetric (max asymmetry {asym:.3e})")
    factor = _cho_factor(a)
    return scipy.linalg.cho_solve(factor, b, check_finite=False)


class Var:
    """Handle to one tape node: (tape, node id, shape)."""

    __slots__ = ("tape", "nid", "shape")

    def __init__(self, tape: "Tape", nid: int, shape: tuple[int, int]):
        self.tape = tape
        self.nid = nid
        self.shape = shape

    @property
    def value(self) -> np.ndarray:
        return self.tape.value_of(self)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    @property
    def T(self) -> "Var":
        return transpose(self)


class _Node:
    __slots__ = ("value", "inputs", "vjp")

    def __init__(self, value, inputs, vjp):
        self.value = value
        self.inputs = inputs
        self.vjp = vjp  # vjp(g) -> list of per-input gradient arrays


class _RowsGrad:
    """Gradient contribution covering rows [start, stop) of a larger node.

    Lets row slices scatter into the accumulator instead of materializing a
    full-size zero matrix per slice.
    """

    __slots__ = ("start", "stop", "grad", "shape")

    def __init__(self, start, stop, grad, shape):
        self.start = start
        self.stop = stop
        self.grad = grad
        self.shape = shape

    def materialize(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.start : self.stop] = self.grad
        return out

    def add_into(self, acc: np.ndarray) -> np.ndarray:
        acc[self.start : self.stop] += self.grad
        return acc


class Gradients:
    """Read-only gradient table from one backward pass, keyed by Var."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        return self._grads[var.nid]

    def __contains__(self, var: Var) -> bool:
        return var.nid in self._grads


class Tape:
    """Ordered record of matrix operations for one forward/backward build.

    Leaves (parameters and data) are registered with `var`; one backward
    pass per tape is supported, after which the tape should be discarded.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._used = False

    def var(self, value) -> Var:
        """Register a leaf node holding `value`."""
        v = as_matrix(value, "leaf")
        return self._record(v, (), None)

    def _record(self, value: np.ndarray, inputs: tuple[int, ...], vjp) -> Var:
        self._nodes.append(_Node(value, inputs, vjp))
        return Var(self, len(self._nodes) - 1, value.shape)

    def value_of(self, var: Var) -> np.ndarray:
        return self._nodes[var.nid].value

    def backward(self, loss: Var) -> Gradients:
        """Propagate d(loss)/d(node) to every node reachable from `loss`."""
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if self._used:
            raise RuntimeError("tape already differentiated; build a fresh one")
        self._used = True
        if loss.shape != (1, 1):
            raise NonScalarLoss(f"loss must be 1x1, got {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.nid: np.ones((1, 1))}
        for nid in range(loss.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            if isinstance(g, _RowsGrad):
                g = grads[nid] = g.materialize()
            node = self._nodes[nid]
            if not node.inputs:
                continue
            for iid, contrib in zip(node.inputs, node.vjp(g)):
                if contrib is None:
                    continue
                acc = grads.get(iid)
                if acc is None:
                    grads[iid] = contrib
                elif isinstance(contrib, _RowsGrad):
                    if isinstance(acc, _RowsGrad):
                        acc = grads[iid] = acc.materialize()
                    grads[iid] = contrib.add_into(acc)
                else:
                    if isinstance(acc, _RowsGrad):
                        acc = grads[iid] = acc.materialize()
                    grads[iid] = acc + contrib
        return Gradients(grads)


def _require_same_tape(*vars_: Var) -> Tape:
    tape = vars_[0].tape
    for v in vars_[1:]:
        if v.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Sum g back down to `shape` after a (1,1)/(1,C)/(R,1) broadcast."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _broadcastable(a: tuple[int, int], b: tuple[int, int]) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def matmul(a: Var, b: Var) -> Var:
    tape = _require_same_tape(a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    value = av @ bv

    def vjp(g):
        return [g @ bv.T, av.T @ g]

    return tape._record(value, (a.nid, b.nid), vjp)


def transpose(a: Var) -> Var:
    value = np.ascontiguousarray(a.value.T)

    def vjp(g):
        return [np.ascontiguousarray(g.T)]

    return a.tape._record(value, (a.nid,), vjp)


def _elementwise_pair(a: Var, b: Var, fwd, bwd_a, bwd_b, opname: str) -> Var:
    tape = _require_same_tape(a, b)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeMismatch(f"{opname} {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    value = fwd(av, bv)
    ash, bsh = a.shape, b.shape

    def vjp(g):
        return [_unbroadcast(bwd_a(g, av, bv), ash), _unbroadcast(bwd_b(g, av, bv), bsh)]

    return tape._record(value, (a.nid, b.nid), vjp)


def add(a: Var, b: Var) -> Var:
    return _elementwise_pair(
        a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add"
    )


def sub(a: Var, b: Var) -> Var:
    return _elementwise_pair(
        a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub"
    )


def mul(a: Var, b: Var) -> Var:
    return _elementwise_pair(
        a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul"
    )


def scale(a: Var, c: float) -> Var:
    c = float(c)
    value = a.value * c

    def vjp(g):
        return [g * c]

    return a.tape._record(value, (a.nid,), vjp)


def relu(a: Var) -> Var:
    av = a.value
    value = np.maximum(av, 0.0)

    def vjp(g):
        return [g * (av > 0.0)]

    return a.tape._record(value, (a.nid,), vjp)


def sigmoid(a: Var) -> Var:
    av = a.value
    value = np.empty_like(av)
    pos = av >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    value[~pos] = e / (1.0 + e)

    def vjp(g):
        return [g * value * (1.0 - value)]

    return a.tape._record(value, (a.nid,), vjp)


def exp(a: Var) -> Var:
    value = np.exp(a.value)

    def vjp(g):
        return [g * value]

    return a.tape._record(value, (a.nid,), vjp)


def log(a: Var) -> Var:
    av = a.value
    value = np.log(av)

    def vjp(g):
        return [g / av]

    return a.tape._record(value, (a.nid,), vjp)


def row_softmax(a: Var) -> Var:
    # Per-row max subtraction keeps exp() in range and makes the result
    # invariant to constant row shifts.
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * value).sum(axis=1, keepdims=True)
        return [value * (g - inner)]

    return a.tape._record(value, (a.nid,), vjp)


def row_log_softmax(a: Var) -> Var:
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    value = shifted - lse
    soft = np.exp(value)

    def vjp(g):
        return [g - soft * g.sum(axis=1, keepdims=True)]

    return a.tape._record(value, (a.nid,), vjp)


def frobenius_sq(a: Var) -> Var:
    av = a.value
    value = np.array([[float(np.sum(av * av))]])

    def vjp(g):
        return [2.0 * float(g[0, 0]) * av]

    return a.tape._record(value, (a.nid,), vjp)


def block_frobenius_sq(a: Var, rows_per_block: int) -> Var:
    """Column of squared Frobenius norms, one per `rows_per_block` row block.

    Batching trick: stacking B feature maps into one (B*R) x C matrix and
    reading off per-map distances in a single node.
    """
    av = a.value
    n, rpb = a.shape[0], int(rows_per_block)
    if rpb < 1 or n % rpb:
        raise ShapeMismatch(f"{n} rows do not split into blocks of {rpb}")
    blocks = n // rpb
    sq = (av * av).reshape(blocks, rpb * a.shape[1])
    value = sq.sum(axis=1).reshape(blocks, 1)

    def vjp(g):
        per_row = np.repeat(g[:, 0], rpb).reshape(n, 1)
        return [2.0 * per_row * av]

    return a.tape._record(value, (a.nid,), vjp)


def cosine(a: Var, b: Var) -> Var:
    """Cosine similarity of the two operands viewed as flat vectors."""
    tape = _require_same_tape(a, b)
    if a.shape[0] * a.shape[1] != b.shape[0] * b.shape[1]:
        raise ShapeMismatch(f"cosine {a.shape} vs {b.shape}")
    u = a.value.ravel()
    v = b.value.ravel()
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < _COSINE_MIN_NORM or nv < _COSINE_MIN_NORM:
        raise ZeroNormFeature(f"feature norm below {_COSINE_MIN_NORM:g}")
    c = float(u @ v) / (nu * nv)
    value = np.array([[c]])
    ash, bsh = a.shape, b.shape

    def vjp(g):
        gs = float(g[0, 0])
        du = gs * (v / (nu * nv) - c * u / (nu * nu))
        dv = gs * (u / (nu * nv) - c * v / (nv * nv))
        return [du.reshape(ash), dv.reshape(bsh)]

    return tape._record(value, (a.nid, b.nid), vjp)


def mean_over(a: Var, axes) -> Var:
    """Mean over a subset of {0, 1}, keeping both dimensions."""
    axes = tuple(sorted(set(int(x) for x in axes)))
    if not axes or any(x not in (0, 1) for x in axes):
        raise ValueError(f"axes must be a non-empty subset of {{0,1}}, got {axes}")
    av = a.value
    value = av.mean(axis=axes, keepdims=True)
    count = 1
    for ax in axes:
        count *= av.shape[ax]
    ash = a.shape

    def vjp(g):
        return [np.broadcast_to(g / count, ash).copy()]

    return a.tape._record(value, (a.nid,), vjp)


def vstack(parts: list[Var]) -> Var:
    if not parts:
        raise ValueError("vstack of nothing")
    tape = _require_same_tape(*parts)
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeMismatch(f"vstack column mismatch: {p.shape} vs {cols} cols")
    value = np.vstack([p.value for p in parts])
    sizes = [p.shape[0] for p in parts]

    def vjp(g):
        out, at = [], 0
        for r in sizes:
            out.append(g[at : at + r])
            at += r
        return out

    return tape._record(value, tuple(p.nid for p in parts), vjp)


def hstack(parts: list[Var]) -> Var:
    if not parts:
        raise ValueError("hstack of nothing")
    tape = _require_same_tape(*parts)
    rows_ = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows_:
            raise ShapeMismatch(f"hstack row mismatch: {p.shape} vs {rows_} rows")
    value = np.hstack([p.value for p in parts])
    sizes = [p.shape[1] for p in parts]

    def vjp(g):
        out, at = [], 0
        for c in sizes:
            out.append(np.ascontiguousarray(g[:, at : at + c]))
            at += c
        return out

    return tape._record(value, tuple(p.nid for p in parts), vjp)


def rows(a: Var, start: int, stop: int) -> Var:
    """Contiguous row slice a[start:stop]."""
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeMismatch(f"rows [{start}:{stop}] out of range for {a.shape}")
    value = np.ascontiguousarray(a.value[start:stop])
    ash = a.shape

    def vjp(g):
        return [_RowsGrad(start, stop, g, ash)]

    return a.tape._record(value, (a.nid,), vjp)


def solve_through(a: Var, b: Var) -> Var:
    """x = a^-1 b for SPD a, with the solve's adjoint registered.

    Backward: grad_b = a^-1 g; grad_a = -sym((a^-1 g) x^T). The forward
    value is the same Cholesky solve as solve_spd, bit for bit.
    """
    tape = _require_same_tape(a, b)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeMismatch(f"solve_through needs square a, got {a.shape}")
    if b.shape[0] != n:
        raise ShapeMismatch(f"a is {a.shape} but b has {b.shape[0]} rows")
    factor = _cho_factor(a.value)
    x = scipy.linalg.cho_solve(factor, b.value, check_finite=False)

    def vjp(g):
        gb = scipy.linalg.cho_solve(factor, g, check_finite=False)
        ga = -gb @ x.T
        return [0.5 * (ga + ga.T), gb]

    return tape._record(x, (a.nid, b.nid), vjp)
