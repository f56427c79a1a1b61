"""Reverse-mode automatic differentiation on a flat float64 tape.

A :class:`Tape` records every operation as a node; :class:`Var` is a
lightweight handle (tape, node id) returned by each op.  Calling
:func:`backward` on a scalar root walks the tape once in reverse and
returns adjoints keyed by node id.  Values are numpy float64 arrays:
0-d for scalars, 1-d for vectors, 2-d only for parameter matrices fed
to ``matvec``.

The op set is deliberately small: enough for log-space probability
arithmetic and small multilayer perceptrons, nothing more.  There is no
broadcasting beyond scalar-with-vector, no higher-order derivatives and
no in-place mutation of recorded values.

A tape constructed with ``record=False`` runs the same forward
computations (same shape and domain checks) without storing nodes,
which is what the filtering code uses when no gradients are needed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError

OP_KINDS = frozenset({
    "add", "sub", "mul", "neg", "exp", "log", "relu", "dot", "matvec",
    "sum", "logsumexp", "gather", "concat", "scale", "leaf",
})


class Node:
    __slots__ = ("kind", "inputs", "value", "aux")

    def __init__(self, kind, inputs, value, aux=None):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.aux = aux


class Var:
    """Handle to one tape node.  Supports ``+ - *`` and unary ``-``."""

    __slots__ = ("tape", "nid", "_value")

    def __init__(self, tape, nid, value=None):
        self.tape = tape
        self.nid = nid
        self._value = value

    @property
    def value(self) -> np.ndarray:
        if self.nid >= 0:
            return self.tape.nodes[self.nid].value
        return self._value

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, _as_var(self.tape, other))

    def __radd__(self, other):
        return add(_as_var(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _as_var(self.tape, other))

    def __rsub__(self, other):
        return sub(_as_var(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _as_var(self.tape, other))

    def __rmul__(self, other):
        return mul(_as_var(self.tape, other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(nid={self.nid}, value={self.value!r})"


def _as_var(tape, x):
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _coerce(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ContractError(f"values must be at most 2-d, got shape {arr.shape}")
    return arr


class Tape:
    """Append-only operation record with a parameter registry.

    One tape per training step; a single writer is assumed.  Parameters
    registered under the same name return the originally created Var,
    so every op in the step shares one node per parameter.
    """

    def __init__(self, record: bool = True):
        self.nodes: list[Node] = []
        self.param_registry: dict[str, int] = {}
        self.record = record
        self._detached_params: dict[str, Var] = {}

    def __len__(self):
        return len(self.nodes)

    def _emit(self, kind, inputs, value, aux=None) -> Var:
        if not self.record:
            return Var(self, -1, value)
        self.nodes.append(Node(kind, inputs, value, aux))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value) -> Var:
        return self._emit("leaf", (), _coerce(value))

    def param(self, name: str, value) -> Var:
        """Register (or fetch) a named leaf node for a parameter array."""
        if not self.record:
            var = self._detached_params.get(name)
            if var is None:
                var = Var(self, -1, _coerce(value))
                self._detached_params[name] = var
            return var
        nid = self.param_registry.get(name)
        if nid is not None:
            return Var(self, nid)
        var = self._emit("leaf", (), _coerce(value))
        self.param_registry[name] = var.nid
        return var

    def apply(self, kind: str, *inputs: Var, aux=None) -> Var:
        if kind not in OP_KINDS or kind == "leaf":
            raise ContractError(f"unknown op kind {kind!r}")
        for v in inputs:
            if not isinstance(v, Var):
                raise ContractError(f"{kind}: inputs must be Vars, got {type(v)}")
            if v.tape is not self:
                raise ContractError(f"{kind}: input from a different tape")
        value = _FORWARD[kind](inputs, aux)
        return self._emit(kind, tuple(v.nid for v in inputs), value, aux)


# ---------------------------------------------------------------------------
# forward rules


def _binary_shapes(kind, a, b):
    if a.ndim == 2 or b.ndim == 2:
        raise ContractError(f"{kind}: matrices only feed matvec")
    if a.ndim == b.ndim == 1 and a.shape != b.shape:
        raise ContractError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _fw_add(inputs, aux):
    a, b = inputs[0].value, inputs[1].value
    _binary_shapes("add", a, b)
    return a + b


def _fw_sub(inputs, aux):
    a, b = inputs[0].value, inputs[1].value
    _binary_shapes("sub", a, b)
    return a - b


def _fw_mul(inputs, aux):
    a, b = inputs[0].value, inputs[1].value
    _binary_shapes("mul", a, b)
    return a * b


def _fw_neg(inputs, aux):
    return -inputs[0].value


def _fw_exp(inputs, aux):
    out = np.exp(inputs[0].value)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp overflowed to non-finite")
    return out


def _fw_log(inputs, aux):
    x = inputs[0].value
    if not np.all(x > 0.0):
        raise DomainError("log requires strictly positive input")
    return np.log(x)


def _fw_relu(inputs, aux):
    return np.maximum(inputs[0].value, 0.0)


def _fw_dot(inputs, aux):
    a, b = inputs[0].value, inputs[1].value
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ContractError(f"dot: need equal-length vectors, got {a.shape}, {b.shape}")
    return np.asarray(np.dot(a, b))


def _fw_matvec(inputs, aux):
    w, x = inputs[0].value, inputs[1].value
    if w.ndim != 2 or x.ndim != 1 or w.shape[1] != x.shape[0]:
        raise ContractError(f"matvec: incompatible shapes {w.shape}, {x.shape}")
    return w @ x


def _fw_sum(inputs, aux):
    x = inputs[0].value
    if x.ndim != 1:
        raise ContractError("sum: vector input required")
    return np.asarray(np.sum(x))


def _fw_logsumexp(inputs, aux):
    x = inputs[0].value
    if x.ndim != 1 or x.size == 0:
        raise ContractError("logsumexp: non-empty vector required")
    m = np.max(x)
    return np.asarray(m + np.log(np.sum(np.exp(x - m))))


def _fw_gather(inputs, aux):
    x = inputs[0].value
    if x.ndim != 1:
        raise ContractError("gather: vector input required")
    idx = aux
    if not isinstance(idx, (int, np.integer)) or not (0 <= idx < x.size):
        raise ContractError(f"gather: index {idx!r} out of range for size {x.size}")
    return np.asarray(x[idx])


def _fw_concat(inputs, aux):
    if not inputs:
        raise ContractError("concat: at least one input")
    parts = [np.atleast_1d(v.value) for v in inputs]
    for p in parts:
        if p.ndim != 1:
            raise ContractError("concat: scalar or vector inputs only")
    return np.concatenate(parts)


def _fw_scale(inputs, aux):
    if not isinstance(aux, (int, float, np.floating, np.integer)):
        raise ContractError("scale: aux must be a plain number")
    return inputs[0].value * float(aux)


_FORWARD = {
    "add": _fw_add, "sub": _fw_sub, "mul": _fw_mul, "neg": _fw_neg,
    "exp": _fw_exp, "log": _fw_log, "relu": _fw_relu, "dot": _fw_dot,
    "matvec": _fw_matvec, "sum": _fw_sum, "logsumexp": _fw_logsumexp,
    "gather": _fw_gather, "concat": _fw_concat, "scale": _fw_scale,
}


# ---------------------------------------------------------------------------
# convenience wrappers


def apply(tape: Tape, kind: str, *inputs: Var, aux=None) -> Var:
    return tape.apply(kind, *inputs, aux=aux)


def add(a: Var, b: Var) -> Var:
    return a.tape.apply("add", a, b)


def sub(a: Var, b: Var) -> Var:
    return a.tape.apply("sub", a, b)


def mul(a: Var, b: Var) -> Var:
    return a.tape.apply("mul", a, b)


def neg(a: Var) -> Var:
    return a.tape.apply("neg", a)


def exp(a: Var) -> Var:
    return a.tape.apply("exp", a)


def log(a: Var) -> Var:
    return a.tape.apply("log", a)


def relu(a: Var) -> Var:
    return a.tape.apply("relu", a)


def dot(a: Var, b: Var) -> Var:
    return a.tape.apply("dot", a, b)


def matvec(w: Var, x: Var) -> Var:
    return w.tape.apply("matvec", w, x)


def vsum(a: Var) -> Var:
    return a.tape.apply("sum", a)


def logsumexp(a: Var) -> Var:
    return a.tape.apply("logsumexp", a)


def gather(a: Var, index: int) -> Var:
    return a.tape.apply("gather", a, aux=int(index))


def concat(*parts: Var) -> Var:
    return parts[0].tape.apply("concat", *parts)


def scale(a: Var, factor: float) -> Var:
    return a.tape.apply("scale", a, aux=factor)


# ---------------------------------------------------------------------------
# reverse pass


def _reachable(tape: Tape, root_id: int) -> set[int]:
    seen = {root_id}
    stack = [root_id]
    while stack:
        nid = stack.pop()
        for i in tape.nodes[nid].inputs:
            if i not in seen:
                seen.add(i)
                stack.append(i)
    return seen


def backward(root: Var) -> dict[int, np.ndarray]:
    """Adjoints of a scalar root with respect to every reachable node.

    Returns a dict keyed by node id; nodes not reachable from the root
    are absent.  The tape itself is left untouched, so calling backward
    twice on the same root is bit-identical.
    """
    tape = root.tape
    if not tape.record:
        raise ContractError("backward needs a recording tape")
    if root.value.ndim != 0:
        raise ContractError("backward root must be a scalar")
    involved = _reachable(tape, root.nid)
    adj: dict[int, np.ndarray] = {root.nid: np.asarray(1.0)}

    def acc(nid, g):
        prev = adj.get(nid)
        adj[nid] = g if prev is None else prev + g

    for nid in sorted(involved, reverse=True):
        g = adj.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        kind = node.kind
        if kind == "leaf":
            continue
        ins = node.inputs
        vals = [tape.nodes[i].value for i in ins]
        if kind == "add":
            acc(ins[0], _reduce_to(g, vals[0]))
            acc(ins[1], _reduce_to(g, vals[1]))
        elif kind == "sub":
            acc(ins[0], _reduce_to(g, vals[0]))
            acc(ins[1], _reduce_to(-g, vals[1]))
        elif kind == "mul":
            acc(ins[0], _reduce_to(g * vals[1], vals[0]))
            acc(ins[1], _reduce_to(g * vals[0], vals[1]))
        elif kind == "neg":
            acc(ins[0], -g)
        elif kind == "exp":
            acc(ins[0], g * node.value)
        elif kind == "log":
            acc(ins[0], g / vals[0])
        elif kind == "relu":
            acc(ins[0], g * (vals[0] > 0.0))
        elif kind == "dot":
            acc(ins[0], g * vals[1])
            acc(ins[1], g * vals[0])
        elif kind == "matvec":
            acc(ins[0], np.outer(g, vals[1]))
            acc(ins[1], vals[0].T @ g)
        elif kind == "sum":
            acc(ins[0], np.full_like(vals[0], float(g)))
        elif kind == "logsumexp":
            x = vals[0]
            sm = np.exp(x - node.value)
            acc(ins[0], float(g) * sm)
        elif kind == "gather":
            out = np.zeros_like(vals[0])
            out[node.aux] = float(g)
            acc(ins[0], out)
        elif kind == "concat":
            offset = 0
            for i, v in zip(ins, vals):
                width = 1 if v.ndim == 0 else v.shape[0]
                piece = g[offset:offset + width]
                acc(i, np.asarray(piece[0]) if v.ndim == 0 else piece)
                offset += width
        elif kind == "scale":
            acc(ins[0], g * node.aux)
        else:  # pragma: no cover - OP_KINDS is closed
            raise ContractError(f"no backward rule for {kind!r}")
    return adj


def _reduce_to(g, val):
    # scalar-with-vector broadcast: fold the adjoint back onto the scalar
    if val.ndim == 0 and np.ndim(g) == 1:
        return np.asarray(np.sum(g))
    return g


def grads_by_name(tape: Tape, adjoints: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Map registered parameter names to their adjoints (zeros if unused)."""
    out = {}
    for name, nid in tape.param_registry.items():
        g = adjoints.get(nid)
        if g is None:
            g = np.zeros_like(tape.nodes[nid].value)
        out[name] = g
    return out


def grad_check(f, point, h: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f(tape, x)`` must build a scalar Var from the vector parameter Var
    ``x``.  Relative error per coordinate is
    ``|analytic - fd| / max(1, |analytic|)``.
    """
    point = np.asarray(point, dtype=np.float64)

    def value_at(p) -> float:
        t = Tape()
        return float(f(t, t.param("x", p)).value)

    tape = Tape()
    x = tape.param("x", point)
    out = f(tape, x)
    if out.value.ndim != 0:
        raise ContractError("grad_check: f must return a scalar Var")
    analytic = backward(out).get(x.nid)
    if analytic is None:
        analytic = np.zeros_like(point)
    worst = 0.0
    flat = point.ravel()
    ana = np.asarray(analytic, dtype=np.float64).ravel()
    for j in range(flat.size):
        bumped = flat.copy()
        bumped[j] = flat[j] + h
        up = value_at(bumped.reshape(point.shape))
        bumped[j] = flat[j] - h
        down = value_at(bumped.reshape(point.shape))
        fd = (up - down) / (2.0 * h)
        rel = abs(ana[j] - fd) / max(1.0, abs(ana[j]))
        worst = max(worst, rel)
    return worst
