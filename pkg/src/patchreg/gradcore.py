"""Minimal reverse-mode automatic differentiation on numpy arrays.

Provides exactly the differentiable kernels the registration networks
need. A :class:`Tensor` wraps a float32 or float64 array together with a
same-shape gradient accumulator; operations record closures on a DAG and
:func:`backward` replays them in reverse topological order, visiting
each node once. Gradients accumulate across backward calls until
explicitly zeroed, so training loops must zero parameter grads between
steps.

float64 is the precision for finite-difference verification, float32 the
training default. Every kernel here is checked against central finite
differences in the test suite; :func:`grad_check` is the harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """An operation was called outside its stated contract."""


class DimensionError(ValueError):
    """Array shapes do not satisfy an operation's requirements."""


_FLOAT_TYPES = (np.float32, np.float64)

# Flipped by the verification CLI to prove the checker detects a wrong
# backward rule (negative control). Never enabled in normal operation.
_GRAD_FAULT = False


def set_grad_fault(enabled: bool) -> None:
    global _GRAD_FAULT
    _GRAD_FAULT = bool(enabled)


class Tensor:
    """Array value plus gradient slot, optionally produced by a graph node.

    ``data`` and ``grad`` always share shape and dtype. Leaf tensors
    (parameters, inputs) have no parents; non-leaf tensors carry the
    closure that routes an incoming gradient to their parents.
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else cadd(self, other)

    def __radd__(self, other):
        return cadd(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else cadd(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else cmul(self, other)

    def __rmul__(self, other):
        return cmul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not a supported kernel")
        return cmul(self, 1.0 / other)

    def backward(self) -> None:
        backward(self)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = np.zeros_like(data)
    out._parents = parents
    out._backward = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural kernels


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _node(data, (a, b), backward_fn)


def neg(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (-g,)

    return _node(-a.data, (a,), backward_fn)


def cadd(a: Tensor, k) -> Tensor:
    """Add a non-learnable constant (scalar or array)."""
    k = np.asarray(k, dtype=a.dtype)
    data = a.data + k

    def backward_fn(g):
        return (_unbroadcast(g, a.data.shape),)

    return _node(data, (a,), backward_fn)


def cmul(a: Tensor, k) -> Tensor:
    """Multiply by a non-learnable constant (scalar or array)."""
    k = np.asarray(k, dtype=a.dtype)
    data = a.data * k

    def backward_fn(g):
        return (_unbroadcast(g * k, a.data.shape),)

    return _node(data, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, plain 2-d or batched with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if (
        a.ndim < 2
        or b.ndim < 2
        or a.ndim != b.ndim
        or a.shape[-1] != b.shape[-2]
        or a.shape[:-2] != b.shape[:-2]
    ):
        raise DimensionError(f"cannot matmul shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ b.data.swapaxes(-1, -2)
        gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _node(data, (a, b), backward_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward_fn(g):
        return (g.transpose(inv),)

    return _node(data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    orig = a.data.shape

    def backward_fn(g):
        return (g.reshape(orig),)

    return _node(data, (a,), backward_fn)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Index along axis 0; backward scatter-adds (duplicate indices sum)."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward_fn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(data, (a,), backward_fn)


def slice_tensor(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing with scatter backward."""
    data = a.data[key]

    def backward_fn(g):
        z = np.zeros_like(a.data)
        z[key] = g
        return (z,)

    return _node(data, (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _node(data, (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return _node(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# neural-network kernels


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with the bias broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match output width {w.shape[1]}")
    data = x.data @ w.data + b.data

    def backward_fn(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _node(data, (x, w, b), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (biased
    estimator), then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: scale/shift must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        ggamma = (flat_g * flat_xhat).sum(axis=0)
        gbeta = flat_g.sum(axis=0)
        h = g * gamma.data
        gx = inv * (
            h
            - h.mean(axis=-1, keepdims=True)
            - xhat * (h * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _node(data, (x, gamma, beta), backward_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    data = 0.5 * x.data * (1.0 + t)

    def backward_fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
        if _GRAD_FAULT:
            d = -d
        return (g * d,)

    return _node(data, (x,), backward_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction.

    Rows may contain ``-inf`` entries (masked logits) as long as at
    least one entry per row is finite.
    """
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), backward_fn)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``grad`` of every reachable node.

    The root must be scalar. Each node is visited exactly once, in
    reverse topological order; repeated calls without zeroing add their
    gradients on top of the previous ones.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    order = _toposort(root)
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad += g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# parameters


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class ParamSet:
    """Named collection of learnable leaf tensors with seeded init.

    Parameters are created in a fixed order, so re-initializing with the
    same seed reproduces every value bit for bit at a fixed precision.
    """

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        if self.dtype.type not in _FLOAT_TYPES:
            raise ContractError(f"unsupported parameter dtype {self.dtype}")
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(self.seed)

    def add(self, name: str, shape, init: str = "trunc_normal", std: float = 0.02) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        shape = tuple(int(s) for s in shape)
        if init == "trunc_normal":
            arr = _trunc_normal(self._rng, shape, std)
        elif init == "zeros":
            arr = np.zeros(shape)
        elif init == "ones":
            arr = np.ones(shape)
        else:
            raise ContractError(f"unknown init '{init}'")
        t = Tensor(arr.astype(self.dtype))
        self._params[name] = t
        return t

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise DimensionError(
                    f"parameter {name}: stored shape {arr.shape} != model shape {t.data.shape}"
                )
            t.data[...] = arr.astype(self.dtype)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class ProbeResult:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    n_probes: int
    probes: list[ProbeResult]
    worst: ProbeResult | None


def grad_check(
    f,
    params: ParamSet,
    n_probes: int = 10,
    step: float = 1e-5,
    seed: int = 0,
    denom_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central finite
    differences at ``n_probes`` randomly chosen parameter coordinates.

    ``f`` must be a pure scalar function of the parameter values. The
    relative error denominator is floored at ``denom_floor`` so that
    coordinates where both gradients vanish do not dominate the report.
    """
    if n_probes < 1:
        raise ContractError("n_probes must be >= 1")
    if step <= 0:
        raise ContractError("step must be positive")
    if params.dtype != np.float64:
        raise ContractError("grad_check needs float64 parameters; the step is below float32 resolution")
    names = params.names()
    sizes = np.array([params[n].size for n in names], dtype=np.int64)
    if sizes.sum() == 0:
        raise ContractError("parameter set is empty")
    cum = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    flat_picks = rng.integers(0, cum[-1], size=n_probes)

    params.zero_grads()
    out = f(params)
    if out.size != 1:
        raise ContractError("grad_check target must be scalar")
    backward(out)
    analytic = {n: params[n].grad.copy() for n in names}

    probes: list[ProbeResult] = []
    for flat in flat_picks:
        which = int(np.searchsorted(cum, flat, side="right"))
        name = names[which]
        idx = int(flat - (cum[which] - sizes[which]))
        t = params[name]
        orig = t.data.flat[idx]
        t.data.flat[idx] = orig + step
        fp = f(params).item()
        t.data.flat[idx] = orig - step
        fm = f(params).item()
        t.data.flat[idx] = orig
        fd = (fp - fm) / (2.0 * step)
        an = float(analytic[name].flat[idx])
        rel = abs(fd - an) / max(abs(fd), abs(an), denom_floor)
        probes.append(ProbeResult(name, idx, an, fd, rel))

    rels = [p.rel_err for p in probes]
    worst = max(probes, key=lambda p: p.rel_err)
    return GradCheckReport(
        max_rel_err=max(rels),
        mean_rel_err=float(np.mean(rels)),
        n_probes=len(probes),
        probes=probes,
        worst=worst,
    )
