"""Reverse-mode differentiation over dense float64 tensors.

A Tape records primitive applications eagerly (forward values are
computed at record time) and backward() runs one reverse sweep over node
ids. The op set is deliberately small: what the orthogonalized-output
models and their losses need, nothing more. stop_grad is a first-class
primitive: identity forward, hard zero backward.

Gradient checking compares backward() against central finite
differences. Functions containing stop_grad are differentiated under
*frozen* semantics: during the perturbed evaluations every stop_grad
node replays the value it produced at the unperturbed point, so the
numeric derivative matches what backward() is defined to compute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonScalarLoss, ShapeMismatch


class Tape:
    """Append-only record of primitive applications.

    Single-writer: build the graph and run backward from one thread.
    Distinct tapes are fully independent.
    """

    __slots__ = ("values", "parents", "backprops", "leaf_names", "grads", "_pin", "_sg_log")

    def __init__(self, pinned_sg=None):
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.backprops: list = []
        self.leaf_names: dict[str, int] = {}
        self.grads: list | None = None
        # replay buffer for frozen-semantics finite differences
        self._pin = iter(pinned_sg) if pinned_sg is not None else None
        self._sg_log: list[np.ndarray] = []

    def _record(self, value: np.ndarray, parents: tuple[int, ...], backprop) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        self.backprops.append(backprop)
        return Var(self, len(self.values) - 1)

    def leaf(self, value: np.ndarray, name: str | None = None) -> "Var":
        """Register an input tensor. Named leaves are the parameters
        that backward() reports gradients for."""
        v = self._record(np.asarray(value, dtype=np.float64), (), None)
        if name is not None:
            if name in self.leaf_names:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaf_names[name] = v.idx
        return v

    def constant(self, value) -> "Var":
        """Unnamed leaf; never receives a reported gradient."""
        return self.leaf(value, None)

    @property
    def sg_values(self) -> list[np.ndarray]:
        """stop_grad outputs in construction order (for pinned replays)."""
        return self._sg_log


@dataclass(frozen=True)
class Var:
    """Handle to one tape node."""

    tape: Tape
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.idx].shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)


def _same_tape(*vs: Var) -> Tape:
    t = vs[0].tape
    for v in vs[1:]:
        if v.tape is not t:
            raise ValueError("operands live on different tapes")
    return t


def add(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    x, y = a.value, b.value
    if x.shape != y.shape:
        raise ShapeMismatch(f"add: {x.shape} vs {y.shape}")
    return t._record(x + y, (a.idx, b.idx), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    x, y = a.value, b.value
    if x.shape != y.shape:
        raise ShapeMismatch(f"sub: {x.shape} vs {y.shape}")
    return t._record(x - y, (a.idx, b.idx), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    """Elementwise product; one side may be scalar (0-d)."""
    t = _same_tape(a, b)
    x, y = a.value, b.value
    if x.shape != y.shape and x.ndim != 0 and y.ndim != 0:
        raise ShapeMismatch(f"mul: {x.shape} vs {y.shape}")

    def backprop(g):
        ga = g * y
        gb = g * x
        if x.ndim == 0 and g.ndim != 0:
            ga = np.sum(ga)
        if y.ndim == 0 and g.ndim != 0:
            gb = np.sum(gb)
        return (np.asarray(ga), np.asarray(gb))

    return t._record(x * y, (a.idx, b.idx), backprop)


def scale(a: Var, c: float) -> Var:
    """Multiply by a Python constant."""
    c = float(c)
    return a.tape._record(a.value * c, (a.idx,), lambda g: (g * c,))


def matmul(A: Var, B: Var) -> Var:
    """Matrix product for (m,n)@(n,), (m,n)@(n,p) and (m,)@(m,n)."""
    t = _same_tape(A, B)
    x, y = A.value, B.value
    if x.ndim == 2 and y.ndim == 1:
        if x.shape[1] != y.shape[0]:
            raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
        backprop = lambda g: (np.multiply.outer(g, y), x.T @ g)
    elif x.ndim == 2 and y.ndim == 2:
        if x.shape[1] != y.shape[0]:
            raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
        backprop = lambda g: (g @ y.T, x.T @ g)
    elif x.ndim == 1 and y.ndim == 2:
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"matmul: {x.shape} @ {y.shape}")
        backprop = lambda g: (y @ g, np.multiply.outer(x, g))
    else:
        raise ShapeMismatch(f"matmul: unsupported ranks {x.shape} @ {y.shape}")
    return t._record(x @ y, (A.idx, B.idx), backprop)


def leaky_relu(a: Var, slope: float = 0.1) -> Var:
    x = a.value
    mask = np.where(x >= 0.0, 1.0, slope)
    return a.tape._record(x * mask, (a.idx,), lambda g: (g * mask,))


def vsum(a: Var) -> Var:
    """Sum of all entries, scalar output."""
    x = a.value
    return a.tape._record(np.sum(x), (a.idx,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def dot(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    x, y = a.value, b.value
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeMismatch(f"dot: {x.shape} vs {y.shape}")
    return t._record(np.asarray(x @ y), (a.idx, b.idx), lambda g: (g * y, g * x))


def sqnorm(a: Var) -> Var:
    """Sum of squared entries, scalar output."""
    x = a.value
    return a.tape._record(np.asarray(np.sum(x * x)), (a.idx,), lambda g: (2.0 * g * x,))


def div_scalar(a: Var, s: Var) -> Var:
    """Divide a tensor by a scalar Var."""
    t = _same_tape(a, s)
    x, denom = a.value, s.value
    if denom.ndim != 0:
        raise ShapeMismatch(f"div_scalar: denominator has shape {denom.shape}")

    def backprop(g):
        return (g / denom, np.asarray(-np.sum(g * x) / (denom * denom)))

    return t._record(x / denom, (a.idx, s.idx), backprop)


def sqrt(a: Var) -> Var:
    x = a.value
    out = np.sqrt(x)
    return a.tape._record(out, (a.idx,), lambda g: (g * (0.5 / out),))


def concat(parts: list[Var]) -> Var:
    t = _same_tape(*parts)
    vals = [p.value for p in parts]
    if any(v.ndim != 1 for v in vals):
        raise ShapeMismatch("concat expects 1-D operands")
    sizes = [v.shape[0] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return t._record(np.concatenate(vals), tuple(p.idx for p in parts), backprop)


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    x = a.value
    return a.tape._record(x.reshape(shape), (a.idx,), lambda g: (g.reshape(x.shape),))


def stop_grad(a: Var) -> Var:
    """Identity forward, zero gradient backward.

    Recorded with no parents, so the reverse sweep structurally cannot
    push anything through it. On a pinned tape the forward value is
    replayed from the recording instead (frozen-semantics replays only;
    normal tapes always pass the input through bitwise).
    """
    t = a.tape
    if t._pin is not None:
        value = next(t._pin)
    else:
        value = a.value
    t._sg_log.append(value)
    return t._record(value, (), None)


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns gradients for every named leaf (zeros when unreachable).
    Accumulation order is fixed by node id, so repeated runs are bitwise
    identical. Node-level gradients stay available as ``tape.grads``.
    """
    if loss.tape is not tape:
        raise ValueError("loss does not belong to this tape")
    if loss.value.shape != ():
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    n = len(tape.values)
    grads: list = [None] * n
    grads[loss.idx] = np.ones(())
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        bp = tape.backprops[i]
        if bp is None:
            continue
        for pid, contrib in zip(tape.parents[i], bp(g)):
            if grads[pid] is None:
                grads[pid] = np.asarray(contrib, dtype=np.float64).copy()
            else:
                grads[pid] += contrib
    tape.grads = grads
    out = {}
    for name, idx in tape.leaf_names.items():
        g = grads[idx]
        out[name] = np.zeros_like(tape.values[idx]) if g is None else g
    return out


class ParamStore:
    """Named parameter tensors with stable iteration order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if arrays:
            for name, a in arrays.items():
                self.add(name, a)

    def add(self, name: str, array: np.ndarray) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        self._arrays[name] = np.asarray(array, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray) -> None:
        if name not in self._arrays:
            raise KeyError(name)
        if self._arrays[name].shape != np.shape(array):
            raise ShapeMismatch(f"parameter {name!r} has fixed shape {self._arrays[name].shape}")
        self._arrays[name] = np.asarray(array, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def items(self):
        return self._arrays.items()

    def names(self) -> list[str]:
        return list(self._arrays)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._arrays.items()})

    def leaves(self, tape: Tape, prefix: str = "") -> dict[str, Var]:
        """Place every parameter on a tape as a named leaf.

        The returned dict is keyed by the bare parameter name; the tape
        leaf (and hence the gradient map) uses ``prefix + name``, which
        lets several models share one tape without name clashes."""
        return {name: tape.leaf(a, prefix + name) for name, a in self._arrays.items()}

    def prefixed(self, prefix: str) -> "ParamStore":
        """Renamed view sharing the underlying arrays (no copies), so
        in-place optimizer updates are visible through both stores."""
        out = ParamStore()
        for name, a in self._arrays.items():
            out._arrays[prefix + name] = a
        return out

    def merged(self, other: "ParamStore") -> "ParamStore":
        """Union view sharing the underlying arrays of both stores."""
        out = ParamStore()
        for name, a in self._arrays.items():
            out._arrays[name] = a
        for name, a in other._arrays.items():
            if name in out._arrays:
                raise ValueError(f"duplicate parameter {name!r} in merge")
            out._arrays[name] = a
        return out


@dataclass
class AdamState:
    """Adam moments and step counter for one ParamStore."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: ParamStore, lr: float = 1e-3) -> "AdamState":
        st = cls(lr=lr)
        for name, a in params.items():
            st.m[name] = np.zeros_like(a)
            st.v[name] = np.zeros_like(a)
        return st


def adam_step(state: AdamState, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
    """One Adam update with bias correction; mutates params and state."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r}: {g.shape} vs {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def grad_check(
    build,
    params: ParamStore,
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``build(tape, params)`` must construct the loss deterministically and
    return its Var. Finite differences are evaluated with stop_grad nodes
    pinned to the base run's values, i.e. under the same frozen semantics
    that backward() differentiates. Relative error uses a
    max(|a|, |b|, 1e-8) denominator. When ``max_coords`` is set, at most
    that many coordinates are probed (sampled with ``rng``).
    """
    base_tape = Tape()
    loss = build(base_tape, params)
    analytic = backward(base_tape, loss)
    pinned = base_tape.sg_values

    def value_at(p: ParamStore) -> float:
        t = Tape(pinned_sg=pinned)
        out = build(t, p)
        if len(t.sg_values) != len(pinned):
            raise RuntimeError("stop_grad count changed between evaluations")
        return float(out.value)

    coords = [
        (name, i) for name, a in params.items() for i in range(a.size)
    ]
    if max_coords is not None and len(coords) > max_coords:
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in picks]

    worst = 0.0
    work = params.copy()
    for name, i in coords:
        flat = work[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = value_at(work)
        flat[i] = orig - eps
        f_minus = value_at(work)
        flat[i] = orig
        fd = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
