"""Minimal reverse-mode differentiation engine.

A ``Var`` wraps a numpy array and remembers how it was produced; calling
:func:`backward` on a scalar walks the graph once in reverse topological
order. Gradients are zeroed at the start of every backward pass and a
graph can only be differentiated once (repeated backward raises), which
rules out silent double accumulation.

:func:`finite_diff` is the independent central-difference oracle used by
:func:`gradcheck`; the registered checks live in ``psgr.gradchecks``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .tensor import DTYPES, Rng


class GraphConsumedError(ValidationError):
    """A computation graph was differentiated twice."""


class Var:
    """Node in the computation graph: value, gradient slot, backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name",
                 "_consumed", "_grad_borrowed")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None,
                 name=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.grad = None
        self._grad_borrowed = False
        rg = requires_grad
        if not rg:
            for p in parents:
                if p.requires_grad:
                    rg = True
                    break
        self.requires_grad = rg
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate(self, g):
        # first contribution is kept by reference (copy-on-write: backward
        # rules hand over fresh arrays and never mutate them afterwards)
        if self.grad is None:
            if (g.dtype != self.data.dtype or g.shape != self.data.shape
                    or not g.flags.c_contiguous):
                buf = np.empty(self.data.shape, dtype=self.data.dtype)
                np.copyto(buf, g)
                g = buf
            self.grad = g
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + g
            self._grad_borrowed = False
        else:
            self.grad += g

    def item(self):
        if self.data.size != 1:
            raise ValidationError(f"item: size {self.data.size} != 1")
        return float(self.data.reshape(()))

    def detach(self):
        return Var(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Var(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def as_var(x, dtype=None):
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(DTYPES[dtype] if isinstance(dtype, str) else dtype)
    return Var(arr)


def _toposort(root):
    """Iterative post-order over the ancestors of ``root`` that need grad."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Backpropagate from a scalar loss.

    Gradients land on ``.grad`` of every reachable Var that requires one;
    with ``params`` (a name -> Var mapping) a gradient map is returned in
    which unreachable parameters get explicit zeros.
    """
    if loss.data.size != 1:
        raise ValidationError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward: this graph was already differentiated")
    if not loss.requires_grad:
        raise ValidationError("backward: loss does not depend on any differentiable input")

    order = _toposort(loss)
    for node in order:
        node.grad = None
        node._grad_borrowed = False
    loss.accumulate(np.ones(loss.data.shape, dtype=loss.data.dtype))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    loss._consumed = True

    if params is not None:
        reached = {id(node) for node in order}
        return {name: (np.array(v.grad) if id(v) in reached and v.grad is not None
                       else np.zeros_like(v.data))
                for name, v in params.items()}
    return None


# ---------------------------------------------------------------------------
# finite-difference oracle and gradient checking

FD_EPS = 1e-5
REL_FLOOR = 1e-8


def finite_diff(f, x, eps=FD_EPS):
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(a, b):
    """|a-b| / max(|a|, |b|, 1e-8), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)
    return np.abs(a - b) / denom


@dataclass
class GradCheckReport:
    op: str
    max_abs_err: float = 0.0
    max_rel_err: float = 0.0
    per_param: dict = field(default_factory=dict)

    def update(self, param, analytic, numeric):
        abs_err = float(np.max(np.abs(np.asarray(analytic, dtype=np.float64) - numeric)))
        r = float(np.max(rel_err(analytic, numeric)))
        self.per_param[param] = (abs_err, r)
        self.max_abs_err = max(self.max_abs_err, abs_err)
        self.max_rel_err = max(self.max_rel_err, r)

    def passed(self, rel_tol=1e-4):
        return self.max_rel_err <= rel_tol


def run_gradcheck(op_name, build, seed=0, eps=FD_EPS):
    """Compare analytic and finite-difference gradients for one check.

    ``build(rng)`` returns ``(inputs, fn)`` where ``inputs`` maps names to
    f64 arrays and ``fn(vars)`` produces a scalar Var from same-named Vars.
    """
    rng = Rng(seed)
    inputs, fn = build(rng)
    variables = {k: Var(np.asarray(v, dtype=np.float64), requires_grad=True, name=k)
                 for k, v in inputs.items()}
    loss = fn(variables)
    grads = backward(loss, params=variables)

    report = GradCheckReport(op=op_name)
    for key, base in inputs.items():
        def scalar_at(x, _key=key):
            probe = dict(variables)
            probe[_key] = Var(x)
            return fn(probe).item()

        numeric = finite_diff(scalar_at, np.asarray(base, dtype=np.float64), eps=eps)
        report.update(key, grads[key], numeric)
    return report
