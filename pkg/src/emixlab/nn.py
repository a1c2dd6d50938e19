"""Minimal dense-network core with hand-rolled reverse-mode gradients.

Everything runs in float64 on NumPy. Gradients are exact reverse-mode on a
small set of array operations -- just enough for the fixed architectures in
this project (dense MLPs, the monotonic mixer and the surprise head). A
finite-difference checker provides the independent oracle for every analytic
gradient in the repo.

Parameters live in a :class:`ParamSet`: a named, ordered collection of value
arrays with matching gradient slots, so one optimizer step and one checkpoint
file cover an arbitrary collection of sub-networks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

import numpy as np


class NNError(Exception):
    """Base error for the network core."""


class DimensionError(NNError):
    """Shape mismatch between an input and a layer contract."""


class UsageError(NNError):
    """API misuse, e.g. backward before forward."""


class OptimizerError(NNError):
    """Optimizer precondition violated (non-finite gradients)."""


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class Param:
    """One named parameter array plus its gradient slot."""

    __slots__ = ("name", "values", "grad")

    def __init__(self, name: str, values: np.ndarray):
        self.name = name
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)


class ParamSet:
    """Ordered, named parameter arrays with gradient slots.

    Names are unique; gradients always have the shape of their values and
    accumulate additively across backward passes until :meth:`zero_grads`.
    """

    def __init__(self):
        self._entries: dict[str, Param] = {}
        self.step_count: int = 0

    def add(self, name: str, values: np.ndarray) -> None:
        if name in self._entries:
            raise NNError(f"duplicate parameter name '{name}'")
        self._entries[name] = Param(name, values)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterable[Param]:
        return self._entries.values()

    def param(self, name: str) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise NNError(f"unknown parameter '{name}'") from None

    def values(self, name: str) -> np.ndarray:
        return self.param(name).values

    def grad(self, name: str) -> np.ndarray:
        return self.param(name).grad

    def tensor(self, name: str) -> "Tensor":
        """Leaf graph node whose backward accumulates into the param grad."""
        p = self.param(name)
        return Tensor(p.values, param=p)

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad[...] = 0.0

    def n_values(self) -> int:
        return sum(p.values.size for p in self._entries.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for p in self._entries.values():
            out.add(p.name, p.values.copy())
        out.step_count = self.step_count
        return out

    def sync_from(self, other: "ParamSet") -> None:
        """Hard-copy values from a ParamSet with identical names/shapes."""
        if self.names() != other.names():
            raise NNError("ParamSet name mismatch in sync_from")
        for name in self._entries:
            src = other.values(name)
            dst = self._entries[name].values
            if src.shape != dst.shape:
                raise NNError(f"shape mismatch for '{name}' in sync_from")
            dst[...] = src


# ---------------------------------------------------------------------------
# Reverse-mode tape
# ---------------------------------------------------------------------------

class Tensor:
    """Node in the backward tape, wrapping a float64 ndarray.

    Operations below accept either Tensors or plain arrays; plain arrays are
    treated as constants. Calling :meth:`backward` on a scalar node pushes
    gradients to every reachable ParamSet leaf (accumulating with +=) and
    stores per-node gradients in ``.grad``.
    """

    __slots__ = ("data", "grad", "_parents", "_grad_fn", "_param")

    def __init__(self, data, parents=(), grad_fn=None, param: Optional[Param] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._grad_fn = grad_fn
        self._param = param

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed requires a scalar node")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            if node._param is not None:
                node._param.grad += g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _node(out, tensor_args, grad_fns):
    """Build a Tensor whose parents are the Tensor-valued args only."""
    parents = []
    fns = []
    for a, fn in zip(tensor_args, grad_fns):
        if _is_tensor(a):
            parents.append(a)
            fns.append(fn)

    def grad_fn(g):
        return [fn(g) for fn in fns]

    return Tensor(out, parents, grad_fn)


def add(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return _data(a) + _data(b)
    ad, bd = _data(a), _data(b)
    return _node(ad + bd, (a, b),
                 (lambda g: _unbroadcast(g, ad.shape),
                  lambda g: _unbroadcast(g, bd.shape)))


def mul(a, b):
    if not (_is_tensor(a) or _is_tensor(b)):
        return _data(a) * _data(b)
    ad, bd = _data(a), _data(b)
    return _node(ad * bd, (a, b),
                 (lambda g: _unbroadcast(g * bd, ad.shape),
                  lambda g: _unbroadcast(g * ad, bd.shape)))


def matmul(a, b):
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2:
        raise DimensionError("matmul supports 2-D operands only")
    if not (_is_tensor(a) or _is_tensor(b)):
        return ad @ bd
    return _node(ad @ bd, (a, b),
                 (lambda g: g @ bd.T,
                  lambda g: ad.T @ g))


def relu(x):
    xd = _data(x)
    out = np.maximum(xd, 0.0)
    if not _is_tensor(x):
        return out
    mask = (xd > 0.0).astype(np.float64)
    return _node(out, (x,), (lambda g: g * mask,))


def elu(x):
    xd = _data(x)
    out = np.where(xd > 0.0, xd, np.expm1(xd))
    if not _is_tensor(x):
        return out
    deriv = np.where(xd > 0.0, 1.0, out + 1.0)
    return _node(out, (x,), (lambda g: g * deriv,))


def tanh(x):
    xd = _data(x)
    out = np.tanh(xd)
    if not _is_tensor(x):
        return out
    return _node(out, (x,), (lambda g: g * (1.0 - out * out),))


def absval(x):
    xd = _data(x)
    if not _is_tensor(x):
        return np.abs(xd)
    sign = np.sign(xd)
    return _node(np.abs(xd), (x,), (lambda g: g * sign,))


def reshape(x, shape):
    xd = _data(x)
    if not _is_tensor(x):
        return xd.reshape(shape)
    old = xd.shape
    return _node(xd.reshape(shape), (x,), (lambda g: g.reshape(old),))


def asum(x, axis=None, keepdims=False):
    """Sum reduction (named to avoid shadowing the builtin)."""
    xd = _data(x)
    out = xd.sum(axis=axis, keepdims=keepdims)
    if not _is_tensor(x):
        return out

    def grad_fn(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, xd.shape).copy()

    return _node(out, (x,), (grad_fn,))


def amean(x, axis=None):
    xd = _data(x)
    n = xd.size if axis is None else xd.shape[axis]
    return mul(asum(x, axis=axis), 1.0 / n)


def logsumexp(x, axis=-1):
    """Overflow-safe log-sum-exp along an axis."""
    xd = _data(x)
    m = np.max(xd, axis=axis, keepdims=True)
    ex = np.exp(xd - m)
    out = np.squeeze(m, axis=axis) + np.log(ex.sum(axis=axis))
    if not _is_tensor(x):
        return out
    soft = ex / ex.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return np.expand_dims(np.asarray(g, dtype=np.float64), axis) * soft

    return _node(out, (x,), (grad_fn,))


# ---------------------------------------------------------------------------
# Dense layers
# ---------------------------------------------------------------------------

ACTIVATIONS = ("identity", "relu", "elu", "tanh", "abs_weights")


@dataclass(frozen=True)
class DenseSpec:
    """One dense layer. ``abs_weights`` wraps the affine output in an
    element-wise absolute value; it is reserved for hypernetwork heads that
    emit mixer weights (the monotonicity contract)."""

    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise DimensionError(f"DenseSpec dims must be positive, got {self}")
        if self.activation not in ACTIVATIONS:
            raise NNError(f"unknown activation '{self.activation}'")


def init_dense(params: ParamSet, prefix: str, spec: DenseSpec,
               rng: np.random.Generator) -> None:
    """Register weight/bias for one layer, uniform in +/- 1/sqrt(in_dim)."""
    bound = 1.0 / np.sqrt(spec.in_dim)
    params.add(f"{prefix}.W", rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim)))
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, (spec.out_dim,)))


def dense_forward(x, spec: DenseSpec, params: ParamSet, prefix: str,
                  trainable: bool = False):
    """activation(x @ W + b) for the layer registered under ``prefix``.

    With ``trainable=True`` the result is a graph Tensor whose backward
    accumulates into the ParamSet; otherwise everything stays plain NumPy
    (used for target networks and action selection).
    """
    xd = _data(x)
    if xd.ndim != 2 or xd.shape[1] != spec.in_dim:
        raise DimensionError(
            f"layer '{prefix}': expected input [batch x {spec.in_dim}], "
            f"got shape {xd.shape}")
    if trainable:
        W = params.tensor(f"{prefix}.W")
        b = params.tensor(f"{prefix}.b")
    else:
        W = params.values(f"{prefix}.W")
        b = params.values(f"{prefix}.b")
    out = add(matmul(x if _is_tensor(x) else xd, W), b)
    if spec.activation == "relu":
        return relu(out)
    if spec.activation == "elu":
        return elu(out)
    if spec.activation == "tanh":
        return tanh(out)
    if spec.activation == "abs_weights":
        return absval(out)
    return out


def init_mlp(params: ParamSet, prefix: str, specs: list[DenseSpec],
             rng: np.random.Generator) -> None:
    for i, spec in enumerate(specs):
        init_dense(params, f"{prefix}.l{i}", spec, rng)


def mlp_forward(x, specs: list[DenseSpec], params: ParamSet, prefix: str,
                trainable: bool = False):
    out = x
    for i, spec in enumerate(specs):
        out = dense_forward(out, spec, params, f"{prefix}.l{i}", trainable=trainable)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    learning_rate: float = 5e-4
    decay: float = 0.99
    epsilon_stability: float = 1e-5
    grad_clip_norm: Optional[float] = 10.0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise NNError("learning_rate must be > 0")
        if not (0.0 < self.decay < 1.0):
            raise NNError("decay must be in (0, 1)")


class RmsProp:
    """RMSProp with optional global-norm clipping, bound to one ParamSet."""

    def __init__(self, params: ParamSet, cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self._sq = {p.name: np.zeros_like(p.values) for p in params.items()}

    def step(self) -> None:
        cfg = self.cfg
        sq_total = 0.0
        for p in self.params.items():
            if not np.all(np.isfinite(p.grad)):
                raise OptimizerError(f"non-finite gradient in parameter '{p.name}'")
            sq_total += float(np.sum(p.grad * p.grad))
        scale = 1.0
        if cfg.grad_clip_norm is not None:
            norm = np.sqrt(sq_total)
            if norm > cfg.grad_clip_norm:
                scale = cfg.grad_clip_norm / norm
        for p in self.params.items():
            g = p.grad * scale
            sq = self._sq[p.name]
            sq *= cfg.decay
            sq += (1.0 - cfg.decay) * g * g
            p.values -= cfg.learning_rate * g / (np.sqrt(sq) + cfg.epsilon_stability)
        self.params.step_count += 1


def optimizer_step(opt: RmsProp) -> None:
    opt.step()


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def _scalar(out) -> float:
    d = _data(out)
    if d.size != 1:
        raise UsageError("finite_diff_check requires a scalar-valued function")
    return float(d.reshape(()))


def finite_diff_check(f: Callable[[ParamSet], object], params: ParamSet,
                      h: float = 1e-5, tol: float = 1e-4,
                      rng: Optional[np.random.Generator] = None,
                      max_coords: int = 200) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be deterministic given the ParamSet and return either a graph
    Tensor (backward is run here) or a plain scalar with grads already
    populated. A random subsample of at least 100 coordinates is checked
    (all of them when the ParamSet is smaller). The relative error uses an
    absolute floor of 1e-3 in the denominator so near-zero gradients compare
    on an absolute scale.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grads()
    out = f(params)
    if _is_tensor(out):
        out.backward()
    analytic = {p.name: p.grad.copy() for p in params.items()}

    coords: list[tuple[str, int]] = []
    for p in params.items():
        coords.extend((p.name, i) for i in range(p.values.size))
    n_check = min(len(coords), max(100, max_coords))
    if len(coords) > n_check:
        idx = rng.choice(len(coords), size=n_check, replace=False)
        coords = [coords[i] for i in idx]

    worst = 0.0
    worst_name = ""
    for name, i in coords:
        vals = params.values(name)
        orig = vals.flat[i]
        vals.flat[i] = orig + h
        f_plus = _scalar(f(params))
        vals.flat[i] = orig - h
        f_minus = _scalar(f(params))
        vals.flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name].flat[i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        if rel > worst:
            worst = rel
            worst_name = name
    return GradCheckReport(max_rel_error=worst, worst_param=worst_name,
                           n_checked=len(coords), tol=tol)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
#
# Single-file binary layout (all integers little-endian):
#   magic     8 bytes  b"EMIXPST1"
#   step      u64      ParamSet.step_count
#   n_params  u32
#   then per parameter, in order:
#     name_len u32, name utf-8 bytes,
#     ndim     u32, dims ndim x u64,
#     data     float64 little-endian, C order, prod(dims) values
# The layout is stable; readers must reject unknown magic.

_CKPT_MAGIC = b"EMIXPST1"


def save_checkpoint(params: ParamSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<QI", params.step_count, len(params)))
        for p in params.items():
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.values.ndim))
            fh.write(struct.pack(f"<{p.values.ndim}Q", *p.values.shape))
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def load_checkpoint(path) -> ParamSet:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CKPT_MAGIC:
            raise NNError(f"not a checkpoint file (bad magic): {path}")
        step, n = struct.unpack("<QI", fh.read(12))
        out = ParamSet()
        for _ in range(n):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            out.add(name, data.astype(np.float64))
        out.step_count = step
        return out
