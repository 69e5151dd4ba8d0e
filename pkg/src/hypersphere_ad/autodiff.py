"""Dense tensors with reverse-mode automatic differentiation.

Every training step records its primitive operations on a ``Tape``;
``backward()`` walks the recorded nodes in reverse and accumulates
gradients into per-node slots.  The operator set is deliberately small:
2-D matmul/transpose, a handful of elementwise functions, axis
reductions, reshape and concatenation.  Layer-level primitives
(convolution, pooling, batch norm) register their own backward rules
through ``Tape.record``.

Conventions:

* float32 is the training dtype, float64 the testing dtype (finite
  difference checks need the extra precision).
* Broadcasting is restricted to scalar and leading-axis broadcast,
  e.g. ``(n, d) + (d,)``.  Anything fancier raises ``ShapeError``.
* Tensors are immutable values; a Tape is single threaded (one tape
  per training step).  Gradients accumulate additively into
  zero-initialized slots.
"""

from __future__ import annotations

import zlib

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An input value lies outside the operation's domain (e.g. log(-1))."""


class ContractError(ValueError):
    """An API precondition was violated (wrong tape, non-scalar loss, ...)."""


class Rng:
    """Deterministic random stream (PCG64 behind numpy's Generator).

    The same ``(seed, path)`` pair yields a bit-identical stream on a
    given platform.  ``child()`` derives independent substreams so that
    e.g. parameter init and batch shuffling never share draws.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in _path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([self.seed, *self.path]))
        )

    def child(self, key) -> "Rng":
        if isinstance(key, str):
            key = zlib.crc32(key.encode("utf-8"))
        return Rng(self.seed, self.path + (int(key),))

    def uniform(self, low, high, size=None, dtype=DEFAULT_DTYPE):
        return np.asarray(self._gen.uniform(low, high, size=size)).astype(dtype)

    def normal(self, loc=0.0, scale=1.0, size=None, dtype=DEFAULT_DTYPE):
        return np.asarray(self._gen.normal(loc, scale, size=size)).astype(dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ContractError(f"cannot draw {k} items from a pool of {n}")
        return self._gen.choice(n, size=k, replace=False)


class Tensor:
    """Immutable dense array recorded as a node on a Tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data: np.ndarray, tape: "Tape", nid: int):
        self.data = data
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, nid={self.nid})"

    # operator sugar -------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations plus gradient slots.

    Nodes are appended in execution order, so every node's inputs
    precede it and a single reverse sweep is a valid topological
    traversal.
    """

    def __init__(self):
        self._parents: list[tuple] = []
        self._backwards: list = []
        self.gradients: dict[int, np.ndarray] | None = None

    def __len__(self):
        return len(self._parents)

    def leaf(self, data, dtype=None) -> Tensor:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        return self.record(arr, (), None)

    def record(self, data: np.ndarray, parents: tuple, backward) -> Tensor:
        """Append a node.  ``backward(grad)`` must return one gradient
        array per parent (same order), or None for a constant parent."""
        nid = len(self._parents)
        self._parents.append(tuple(p.nid for p in parents))
        self._backwards.append(backward)
        return Tensor(data, self, nid)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss; returns grads keyed by node id."""
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if loss.data.shape != ():
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.nid: np.ones((), dtype=loss.data.dtype)
        }
        for nid in range(loss.nid, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            bwd = self._backwards[nid]
            if bwd is None:
                continue
            parent_grads = bwd(g)
            for pid, pg in zip(self._parents[nid], parent_grads):
                if pg is None:
                    continue
                slot = grads.get(pid)
                # reassign rather than += : rules may hand back shared views
                grads[pid] = pg if slot is None else slot + pg
        self.gradients = grads
        return grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss w.r.t. ``t`` (zeros if
        the loss does not depend on it)."""
        if self.gradients is None:
            raise ContractError("backward() has not been called on this tape")
        g = self.gradients.get(t.nid)
        if g is None:
            return np.zeros_like(t.data)
        return np.broadcast_to(g, t.data.shape).astype(t.data.dtype, copy=False)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers

def _tape_of(*args) -> Tape:
    tape = None
    for a in args:
        if isinstance(a, Tensor):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a Tensor")
    return tape


def _value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_broadcast(sa, sb):
    """Allow equal shapes, scalars, and leading-axis broadcast only."""
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) < len(sb) else (sb, sa)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shapes {sa} and {sb} do not broadcast (leading-axis only)")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _binary(a, b, fwd, bwd_a, bwd_b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    _check_broadcast(av.shape, bv.shape)
    out = fwd(av, bv)
    parents, rules = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        rules.append(lambda g: _unbroadcast(bwd_a(g, av, bv), av.shape))
    if isinstance(b, Tensor):
        parents.append(b)
        rules.append(lambda g: _unbroadcast(bwd_b(g, av, bv), bv.shape))

    def backward_rule(g):
        return [rule(g) for rule in rules]

    return tape.record(out, tuple(parents), backward_rule)


def _unary(x, fwd, bwd):
    tape = _tape_of(x)
    xv = x.data
    out = fwd(xv)

    def backward_rule(g, out=out, xv=xv):
        return [bwd(g, xv, out)]

    return tape.record(out, (x,), backward_rule)


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(x):
    return _unary(x, lambda v: -v, lambda g, v, o: -g)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"inner dimensions differ: {av.shape} @ {bv.shape}")
    out = av @ bv
    parents, rules = [], []
    if isinstance(a, Tensor):
        parents.append(a)
        rules.append(lambda g: g @ bv.T)
    if isinstance(b, Tensor):
        parents.append(b)
        rules.append(lambda g: av.T @ g)

    def backward_rule(g):
        return [rule(g) for rule in rules]

    return tape.record(out, tuple(parents), backward_rule)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose is 2-D only, got shape {x.data.shape}")
    return _unary(x, lambda v: v.T.copy(), lambda g, v, o: g.T)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    return _unary(x, lambda v: v.reshape(shape),
                  lambda g, v, o: g.reshape(old))


def concat(parts, axis=0):
    parts = list(parts)
    tape = _tape_of(*parts)
    values = [p.data for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward_rule(g):
        slicer = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)])
        return outs

    return tape.record(out, tuple(parts), backward_rule)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def sigmoid(x):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    return _unary(x, fwd, lambda g, v, o: g * o * (1.0 - o))


def tanh(x):
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o))


def exp(x):
    return _unary(x, np.exp, lambda g, v, o: g * o)


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    return _unary(x, np.log, lambda g, v, o: g / v)


def square(x):
    return _unary(x, np.square, lambda g, v, o: g * 2.0 * v)


def leaky_relu(x, slope=0.01):
    # derivative at exactly 0 is the positive-side slope 1
    def fwd(v):
        out = v.copy()
        neg = v < 0
        out[neg] *= slope
        return out

    def bwd(g, v, o):
        dg = g.copy()
        dg[v < 0] *= slope
        return dg

    return _unary(x, fwd, bwd)


def relu(x):
    return leaky_relu(x, 0.0)


# ---------------------------------------------------------------------------
# reductions

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim for a in axes))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axes}")
    return axes


def _check_nonempty(v, axes):
    for a in axes:
        if v.shape[a] == 0:
            raise DomainError(f"reduction over empty axis {a} (shape {v.shape})")


def _expand(g, shape, axes):
    full = list(shape)
    for a in axes:
        full[a] = 1
    return g.reshape(full)


def reduce_sum(x, axes=None):
    axes = _norm_axes(axes, x.data.ndim)
    _check_nonempty(x.data, axes)
    shape = x.data.shape

    def bwd(g, v, o):
        return np.broadcast_to(_expand(g, shape, axes), shape).astype(v.dtype, copy=False)

    return _unary(x, lambda v: v.sum(axis=axes), bwd)


def reduce_mean(x, axes=None):
    axes = _norm_axes(axes, x.data.ndim)
    _check_nonempty(x.data, axes)
    shape = x.data.shape
    count = int(np.prod([shape[a] for a in axes]))

    def bwd(g, v, o):
        return (np.broadcast_to(_expand(g, shape, axes), shape) / count).astype(
            v.dtype, copy=False
        )

    return _unary(x, lambda v: v.mean(axis=axes), bwd)


def reduce_max(x, axes=None):
    """Max over ``axes``; backward routes to the first argmax in
    row-major order on ties."""
    axes = _norm_axes(axes, x.data.ndim)
    _check_nonempty(x.data, axes)
    v = x.data
    kept = tuple(a for a in range(v.ndim) if a not in axes)
    moved = np.transpose(v, kept + axes)
    flat = moved.reshape(int(np.prod([v.shape[a] for a in kept], initial=1)), -1)
    arg = flat.argmax(axis=1)
    out = flat[np.arange(flat.shape[0]), arg].reshape([v.shape[a] for a in kept])

    def backward_rule(g):
        gflat = np.zeros_like(flat)
        gflat[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        gm = gflat.reshape(moved.shape)
        inv = np.argsort(kept + axes)
        return [np.transpose(gm, inv)]

    return x.tape.record(out, (x,), backward_rule)
