"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every operation of one forward pass. Leaves (inputs,
parameters) are plain :class:`Tensor` values created outside any tape; every
op is a method on the tape, so there is no global graph state and separate
tapes can live on separate threads.

    tape = Tape()
    y = tape.mean(tape.relu(tape.conv2d(x, w, padding=1)))
    grads = tape.backward(y)
    grads[w]            # dL/dw, same shape as w
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ids = itertools.count()

OP_KINDS = (
    "add", "sub", "mul", "scale", "matmul", "conv2d", "relu", "sigmoid",
    "softplus", "exp", "log", "sum", "mean", "concat", "slice", "broadcast",
    "reshape",
)


class ShapeError(ValueError):
    """Incompatible input shapes for an op."""


class ContractError(RuntimeError):
    """A caller broke a precondition (non-scalar loss, reused tape, ...)."""


class Tensor:
    """Immutable n-d array with an identity used as a graph node."""

    __slots__ = ("data", "requires_grad", "node_id", "op", "_parents", "_vjp", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            is_float_array = isinstance(data, np.ndarray) and data.dtype.kind == "f"
            dtype = data.dtype if is_float_array else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class GradientMap(dict):
    """node_id -> gradient array. Also indexable by the owning Tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().__contains__(key)

    def get(self, key, default=None):
        if isinstance(key, Tensor):
            key = key.node_id
        return super().get(key, default)


def _trailing_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)), dtype=np.float64).astype(grad.dtype)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tape:
    """Records one forward pass; :meth:`backward` consumes it once."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def _record(self, kind: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        out = Tensor.__new__(Tensor)
        data = np.asarray(data)
        data.flags.writeable = False
        out.data = data
        out.node_id = next(_ids)
        out.op = kind
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tape = self
        self.nodes.append(out)
        return out

    # elementwise binary ------------------------------------------------

    def _binary(self, kind, a, b):
        a, b = as_tensor(a), as_tensor(b)
        if not _trailing_compatible(a.shape, b.shape):
            raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")
        return a, b

    def add(self, a, b) -> Tensor:
        a, b = self._binary("add", a, b)
        return self._record("add", a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a, b) -> Tensor:
        a, b = self._binary("sub", a, b)
        return self._record("sub", a.data - b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a, b) -> Tensor:
        a, b = self._binary("mul", a, b)
        return self._record("mul", a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    def scale(self, a, c: float) -> Tensor:
        a = as_tensor(a)
        c = a.dtype.type(c)
        return self._record("scale", a.data * c, (a,), lambda g: (g * c,))

    def neg(self, a) -> Tensor:
        return self.scale(a, -1.0)

    # linear ------------------------------------------------------------

    def matmul(self, a, b) -> Tensor:
        a, b = as_tensor(a), as_tensor(b)
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        return self._record("matmul", a.data @ b.data, (a, b),
                            lambda g: (g @ b.data.T, a.data.T @ g))

    def conv2d(self, x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
        """Cross-correlation. x [B,C,H,W], w [O,C,kh,kw], b [O] or None."""
        x, w = as_tensor(x), as_tensor(w)
        if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
        if stride < 1 or padding < 0:
            raise ShapeError(f"conv2d: bad stride={stride} padding={padding}")
        B, C, H, W = x.shape
        O, _, kh, kw = w.shape
        Hp, Wp = H + 2 * padding, W + 2 * padding
        if Hp < kh or Wp < kw:
            raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {(Hp, Wp)}")
        Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        # im2col once, laid out [kh,kw,C,B,Ho,Wo] so every copy and scatter is a plain slice
        xt = xp.transpose(1, 0, 2, 3)
        cols = np.empty((kh, kw, C, B, Ho, Wo), dtype=np.result_type(x.dtype, w.dtype))
        for i in range(kh):
            for j in range(kw):
                cols[i, j] = xt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
        cols = cols.reshape(kh * kw * C, B * Ho * Wo)
        wk = w.data.transpose(0, 2, 3, 1).reshape(O, kh * kw * C)
        out = (wk @ cols).reshape(O, B, Ho, Wo)
        parents = [x, w]
        if b is not None:
            b = as_tensor(b)
            if b.shape != (O,):
                raise ShapeError(f"conv2d: bias shape {b.shape} != {(O,)}")
            out += b.data[:, None, None, None]
            parents.append(b)
        out = out.transpose(1, 0, 2, 3)

        def vjp(g):
            g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
            gw = (g2 @ cols.T).reshape(O, kh, kw, C).transpose(0, 3, 1, 2)
            dcols = (wk.T @ g2).reshape(kh, kw, C, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
            grads = [gx.transpose(1, 0, 2, 3), gw]
            if b is not None:
                grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype))
            return tuple(grads)

        return self._record("conv2d", np.ascontiguousarray(out), parents, vjp)

    # elementwise unary -------------------------------------------------

    def relu(self, a) -> Tensor:
        a = as_tensor(a)
        mask = a.data > 0
        # np.maximum keeps NaN, so bad inputs surface in the loss instead of vanishing
        return self._record("relu", np.maximum(a.data, 0).astype(a.dtype), (a,),
                            lambda g: (g * mask,))

    def sigmoid(self, a) -> Tensor:
        a = as_tensor(a)
        s = _sigmoid(a.data)
        return self._record("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))

    def softplus(self, a) -> Tensor:
        """log(1 + exp(a)), stable for large |a|."""
        a = as_tensor(a)
        return self._record("softplus", np.logaddexp(a.dtype.type(0), a.data), (a,),
                            lambda g: (g * _sigmoid(a.data),))

    def exp(self, a) -> Tensor:
        a = as_tensor(a)
        with np.errstate(over="ignore"):
            e = np.exp(a.data)
        return self._record("exp", e, (a,), lambda g: (g * e,))

    def log(self, a) -> Tensor:
        a = as_tensor(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a.data)
        return self._record("log", out, (a,), lambda g: (g / a.data,))

    # reductions --------------------------------------------------------

    def sum(self, a, axis=None) -> Tensor:
        a = as_tensor(a)
        out = a.data.sum(axis=axis, dtype=np.float64).astype(a.dtype)

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)

        return self._record("sum", out, (a,), vjp)

    def mean(self, a, axis=None) -> Tensor:
        a = as_tensor(a)
        out = a.data.mean(axis=axis, dtype=np.float64)
        n = a.data.size // max(out.size, 1)

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype),)

        return self._record("mean", out.astype(a.dtype), (a,), vjp)

    # structural --------------------------------------------------------

    def concat(self, tensors: Sequence, axis: int = 0) -> Tensor:
        tensors = [as_tensor(t) for t in tensors]
        ref = tensors[0].shape
        ax = axis % len(ref)
        for t in tensors[1:]:
            if len(t.shape) != len(ref) or any(d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != ax):
                raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
        bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
        return self._record("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                            lambda g: tuple(np.split(g, bounds, axis=ax)))

    def slice(self, a, index) -> Tensor:
        """Basic (slice/int) indexing only."""
        a = as_tensor(a)
        if not isinstance(index, tuple):
            index = (index,)
        if any(not isinstance(i, (slice, int)) for i in index) or len(index) > a.data.ndim:
            raise ShapeError(f"slice: unsupported index {index} for shape {a.shape}")

        def vjp(g):
            full = np.zeros(a.shape, dtype=g.dtype)
            full[index] = g
            return (full,)

        return self._record("slice", a.data[index].copy(), (a,), vjp)

    def broadcast(self, a, shape: Sequence[int]) -> Tensor:
        a = as_tensor(a)
        shape = tuple(shape)
        try:
            out = np.broadcast_to(a.data, shape).copy()
        except ValueError:
            raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None
        lead = len(shape) - a.data.ndim
        expanded = tuple(i + lead for i, d in enumerate(a.shape) if d == 1 and shape[i + lead] != 1)

        def vjp(g):
            g = g.sum(axis=tuple(range(lead)) + expanded, keepdims=True, dtype=np.float64)
            return (g.reshape(a.shape).astype(a.dtype),)

        return self._record("broadcast", out, (a,), vjp)

    def reshape(self, a, shape: Sequence[int]) -> Tensor:
        a = as_tensor(a)
        try:
            out = a.data.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
        return self._record("reshape", out.copy(), (a,), lambda g: (g.reshape(a.shape),))

    # composites (recorded as their primitive ops) ----------------------

    def upsample2x(self, a) -> Tensor:
        """Nearest-neighbour 2x upsampling of [B,C,H,W]."""
        B, C, H, W = a.shape
        t = self.reshape(a, (B, C, H, 1, W, 1))
        t = self.broadcast(t, (B, C, H, 2, W, 2))
        return self.reshape(t, (B, C, 2 * H, 2 * W))

    # backward ----------------------------------------------------------

    def backward(self, loss: Tensor) -> GradientMap:
        """Gradients of ``loss`` w.r.t. every reachable requires_grad leaf."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        if loss._tape is not self and loss.op != "leaf":
            raise ContractError("loss was not recorded on this tape")
        self.consumed = True
        result = GradientMap()
        if not loss.requires_grad:
            return result
        grads = {loss.node_id: np.ones(loss.shape, dtype=loss.dtype)}
        if loss.op == "leaf":
            result[loss.node_id] = grads[loss.node_id]
            return result
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
                if parent.op == "leaf":
                    result[parent.node_id] = grads[parent.node_id]
        return result


def backward(loss: Tensor) -> GradientMap:
    """Backpropagate through the tape that produced ``loss``."""
    if loss._tape is None:
        return Tape().backward(loss)
    return loss._tape.backward(loss)


def finite_diff_check(scalar_fn: Callable[..., Tensor], params: Sequence[Tensor],
                      eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``scalar_fn(tape, *params)`` must build a scalar loss on ``tape``.
    Everything is evaluated in float64 copies of ``params``.
    """
    if not 0 < eps <= 1e-2:
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    base = [np.asarray(p.data, dtype=np.float64) for p in params]

    def evaluate(arrays, with_grad=False):
        leaves = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        tape = Tape()
        loss = scalar_fn(tape, *leaves)
        if loss.size != 1:
            raise ContractError(f"scalar_fn returned shape {loss.shape}, expected a scalar")
        value = float(np.asarray(loss.data, dtype=np.float64).reshape(()))
        if not with_grad:
            return value
        grads = tape.backward(loss)
        return value, [np.asarray(grads.get(t, np.zeros(t.shape)), dtype=np.float64) for t in leaves]

    _, analytic = evaluate(base, with_grad=True)
    worst = 0.0
    for k, arr in enumerate(base):
        for idx in np.ndindex(arr.shape):
            plus = [a.copy() for a in base]
            minus = [a.copy() for a in base]
            plus[k][idx] += eps
            minus[k][idx] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            err = abs(analytic[k][idx] - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def iter_leaves(loss: Tensor) -> Iterator[Tensor]:
    """Leaves reachable from ``loss`` (debug helper)."""
    seen, stack = set(), [loss]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen.add(t.node_id)
        if t.op == "leaf":
            yield t
        stack.extend(t._parents)
