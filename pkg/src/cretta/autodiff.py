"""Define-by-run reverse-mode differentiation on dense float64 arrays.

A Tensor wraps a numpy array plus an optional record of the op that made it
(parent tensors and a vector-Jacobian closure).  Graphs are rebuilt on every
forward pass and discarded after backward; tensors made from other tensors
require gradients exactly when one of their parents does, so frozen-model
forwards retain no tape at all.

backward() propagates through a scratch buffer per call and only then adds
into each tensor's .grad, so repeated calls accumulate additively without
cross-talk between passes.
"""

from __future__ import annotations

import numpy as np

from . import kernels


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the given operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] > 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense 64-bit float array participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None

    @classmethod
    def _from_op(cls, data, parents, vjp):
        out = cls(data, requires_grad=any(p.requires_grad for p in parents))
        if out.requires_grad:
            out._parents = parents
            out._vjp = vjp
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(ancestor) into .grad of every ancestor that
        requires gradients.  self must hold exactly one element."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor with no gradient history")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            node.grad = np.array(g) if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                flows[key] = flows[key] + pg if key in flows else pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.data.shape, other.data.shape
        out = self.data + other.data
        return Tensor._from_op(
            out, (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.data.shape, other.data.shape
        out = self.data - other.data
        return Tensor._from_op(
            out, (self, other),
            lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data * b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (unbroadcast(g * b.data, a.data.shape),
                       unbroadcast(g * a.data, b.data.shape)))

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __truediv__(self, other):
        if isinstance(other, Tensor) or np.ndim(other) != 0:
            raise TypeError("division is supported for scalar divisors only")
        return self * (1.0 / float(other))

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError("matmul expects 2-D operands")
        a, b = self, other
        out = a.data @ b.data
        return Tensor._from_op(
            out, (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g))

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def log(self):
        data = self.data
        return Tensor._from_op(np.log(data), (self,), lambda g: (g / data,))

    def relu(self):
        mask = self.data > 0
        return Tensor._from_op(
            np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def log_sigmoid(self):
        data = self.data
        out = kernels.log_sigmoid(data)
        return Tensor._from_op(
            np.asarray(out), (self,), lambda g: (g * kernels.sigmoid(-data),))

    # -- reductions and shape -----------------------------------------------

    def sum(self, axis=None):
        shape = self.data.shape
        out = self.data.sum(axis=axis)
        if axis is None:
            vjp = lambda g: (np.broadcast_to(g, shape),)
        else:
            vjp = lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),)
        return Tensor._from_op(out, (self,), vjp)

    def mean(self):
        size = self.data.size
        return self.sum() / size

    def reshape(self, *shape):
        old = self.data.shape
        return Tensor._from_op(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def take(self, indices):
        """Gather rows by integer index; backward scatter-adds."""
        idx = np.asarray(indices, dtype=np.int64)
        shape = self.data.shape

        def vjp(g):
            buf = np.zeros(shape)
            np.add.at(buf, idx, g)
            return (buf,)

        return Tensor._from_op(self.data[idx], (self,), vjp)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean, var,
               eps: float, stats_from_batch: bool) -> Tensor:
    """Fused batch-norm op.  With stats_from_batch the supplied moments must
    be the batch moments of x.data and the backward pass differentiates
    through them; otherwise they are treated as constants."""
    y, xhat, inv_std = kernels.batchnorm_forward(
        x.data, mean, var, gamma.data, beta.data, eps)
    gamma_data = gamma.data

    def vjp(g):
        if stats_from_batch:
            return kernels.batchnorm_backward_batch(g, xhat, gamma_data, inv_std)
        return kernels.batchnorm_backward_frozen(g, xhat, gamma_data, inv_std)

    return Tensor._from_op(y, (x, gamma, beta), vjp)


def finite_difference(f, params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    grad = np.empty_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + step
        f_plus = float(f(params))
        params[i] = orig - step
        f_minus = float(f(params))
        params[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad
