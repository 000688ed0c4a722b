"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything downstream (the conv stack, the Bayesian head, both training
objectives) is expressed through the primitives here, so gradients of any
recorded scalar come from a single backward pass over the tape.

Tensors are immutable values: no operation touches an operand's buffer.
Parameter updates go through :meth:`Tensor.assign`, which requires exclusive
access (single-threaded training steps). Tapes are kept on a thread-local
stack, so independent tapes may run concurrently on disjoint data.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradTape",
    "GradientError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "batch_norm",
    "conv2d_valid",
    "dropout",
    "exp",
    "linear",
    "log",
    "mean_pool",
    "mul",
    "neg",
    "reshape",
    "sigmoid",
    "sub",
    "sum_all",
]


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradientError(ValueError):
    """Backward pass asked to differentiate something it cannot."""


_uids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list["GradTape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError("tensor contains non-finite values")


class Tensor:
    """Immutable dense n-dimensional array of float64 scalars."""

    __slots__ = ("data", "requires_grad", "uid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)  # copy: caller keeps its buffer
        _check_finite(arr)
        arr.setflags(write=False)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.uid = next(_uids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def assign(self, data) -> None:
        """Replace the value in place (parameter update; exclusive access)."""
        arr = np.array(data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        _check_finite(arr)
        arr.setflags(write=False)
        self.data = arr

    def copy(self) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _fresh(arr: np.ndarray) -> Tensor:
    """Wrap an op-owned buffer without copying."""
    arr = np.asarray(arr, dtype=np.float64)
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    _check_finite(arr)
    arr.setflags(write=False)
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.uid = next(_uids)
    return t


class _Node:
    __slots__ = ("out_uid", "in_uids", "pull")

    def __init__(self, out_uid: int, in_uids: tuple[int, ...],
                 pull: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.out_uid = out_uid
        self.in_uids = in_uids
        self.pull = pull


class GradTape:
    """Ordered record of primitive operations.

    The backward pass visits nodes in exact reverse of recording order, so a
    tensor's consumers are always processed before its producer and gradient
    accumulation needs no topological sort.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[int, Tensor] = {}

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _tape_stack().pop()
        assert popped is self
        return False

    @property
    def parameter_ids(self) -> tuple[int, ...]:
        return tuple(self._params)

    def watch(self, tensor: Tensor) -> None:
        self._params[tensor.uid] = tensor


def _record(out: Tensor, inputs: Sequence[Tensor],
            pull: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> None:
    stack = _tape_stack()
    if not stack:
        return
    tape = stack[-1]
    for t in inputs:
        if t.requires_grad:
            tape._params.setdefault(t.uid, t)
    tape._nodes.append(_Node(out.uid, tuple(t.uid for t in inputs), pull))


def backward(loss: Tensor, tape: GradTape) -> dict[int, np.ndarray]:
    """Gradients of a recorded scalar w.r.t. every parameter on the tape.

    Returns a map from parameter uid to a gradient array of the parameter's
    shape. Parameters with no path to the loss get exact zeros.
    """
    if loss.ndim != 0:
        raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones((), dtype=np.float64)}
    for node in reversed(tape._nodes):
        gout = grads.pop(node.out_uid, None)
        if gout is None:
            continue
        for uid, g in zip(node.in_uids, node.pull(gout)):
            if g is None:
                continue
            held = grads.get(uid)
            grads[uid] = g if held is None else held + g
    return {
        uid: grads.get(uid, np.zeros_like(p.data))
        for uid, p in tape._params.items()
    }


def _as_operand(x) -> tuple[np.ndarray, Tensor | None]:
    """Split an operand into its array value and its tensor (None = constant)."""
    if isinstance(x, Tensor):
        return x.data, x
    return np.asarray(x, dtype=np.float64), None


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")


def _binary(a, b, fwd, pull_a, pull_b) -> Tensor:
    ad, at = _as_operand(a)
    bd, bt = _as_operand(b)
    if ad.shape != bd.shape and ad.shape != () and bd.shape != ():
        raise ShapeError(f"operand shapes {ad.shape} and {bd.shape} do not match")
    out = _fresh(fwd(ad, bd))
    inputs = [t for t in (at, bt) if t is not None]
    if inputs:
        def pull(gout: np.ndarray):
            gs = []
            if at is not None:
                gs.append(_reduce_to(pull_a(gout, ad, bd), ad.shape))
            if bt is not None:
                gs.append(_reduce_to(pull_b(gout, ad, bd), bd.shape))
            return tuple(gs)

        _record(out, inputs, pull)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(a: Tensor) -> Tensor:
    out = _fresh(-a.data)
    _record(out, [a], lambda g: (-g,))
    return out


def exp(a: Tensor) -> Tensor:
    out = _fresh(np.exp(a.data))
    od = out.data
    _record(out, [a], lambda g: (g * od,))
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    out = _fresh(np.log(a.data))
    ad = a.data
    _record(out, [a], lambda g: (g / ad,))
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _fresh(np.asarray(a.data.sum()))
    shape = a.data.shape
    _record(out, [a], lambda g: (np.broadcast_to(g, shape).copy(),))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = _fresh(a.data.reshape(shape))
    old = a.data.shape
    _record(out, [a], lambda g: (g.reshape(old),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)), computed without overflow on either tail."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    res = _fresh(out)
    od = res.data
    _record(res, [a], lambda g: (g * od * (1.0 - od),))
    return res


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map W.x + b for a single vector [d_in] or a batch [B, d_in]."""
    xd, wd, bd = x.data, weights.data, bias.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[0] != bd.shape[0]:
        raise ShapeError(f"weights {wd.shape} / bias {bd.shape} are not a [d_out,d_in]/[d_out] pair")
    single = xd.ndim == 1
    x2 = xd[None, :] if single else xd
    if x2.ndim != 2 or x2.shape[1] != wd.shape[1]:
        raise ShapeError(f"input {xd.shape} does not match weights {wd.shape}")
    out2 = x2 @ wd.T + bd
    out = _fresh(out2[0] if single else out2)

    def pull(gout: np.ndarray):
        g2 = gout[None, :] if single else gout
        gx = g2 @ wd
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        return (gx[0] if single else gx), gw, gb

    _record(out, [x, weights, bias], pull)
    return out


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def conv_output_size(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


def _windows(x4: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x4, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def conv2d_valid(x: Tensor, kernels: Tensor, bias: Tensor, stride=1) -> Tensor:
    """Valid cross-correlation of [C,H,W] or [B,C,H,W] input with [K,C,kh,kw] kernels.

    Lowered to an im2col matrix product so both passes run on BLAS.
    """
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be >= 1")
    kd, bd = kernels.data, bias.data
    if kd.ndim != 4:
        raise ShapeError(f"kernels must be [K,C,kh,kw], got {kd.shape}")
    K, C, kh, kw = kd.shape
    if bd.shape != (K,):
        raise ShapeError(f"bias must be [K]={K}, got {bd.shape}")
    single = x.ndim == 3
    x4 = x.data[None] if single else x.data
    if x4.ndim != 4 or x4.shape[1] != C:
        raise ShapeError(f"input {x.shape} does not match kernel channels {C}")
    B, _, H, W = x4.shape
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kh}x{kw} exceeds input {H}x{W}")
    win = _windows(x4, kh, kw, sh, sw)  # [B,C,Hp,Wp,kh,kw]
    Hp, Wp = win.shape[2], win.shape[3]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Hp * Wp, C * kh * kw)
    kflat = kd.reshape(K, C * kh * kw)
    out4 = (cols @ kflat.T).reshape(B, Hp, Wp, K).transpose(0, 3, 1, 2) \
        + bd[:, None, None]
    out = _fresh(out4[0] if single else out4)

    def pull(gout: np.ndarray):
        g4 = gout[None] if single else gout
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(B * Hp * Wp, K)
        gk = (g2.T @ cols).reshape(K, C, kh, kw)
        gb = g4.sum(axis=(0, 2, 3))
        gcols = (g2 @ kflat).reshape(B, Hp, Wp, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros_like(x4)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * (Hp - 1) + 1:sh,
                   j:j + sw * (Wp - 1) + 1:sw] += gcols[:, :, :, :, i, j]
        return (gx[0] if single else gx), gk, gb

    _record(out, [x, kernels, bias], pull)
    return out


def mean_pool(x: Tensor, kernel, stride) -> Tensor:
    """Window-averaging downsample over the spatial dims of [C,H,W] or [B,C,H,W]."""
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be >= 1")
    single = x.ndim == 3
    x4 = x.data[None] if single else x.data
    if x4.ndim != 4:
        raise ShapeError(f"input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    B, C, H, W = x4.shape
    if kh > H or kw > W:
        raise ShapeError(f"pool window {kh}x{kw} exceeds input {H}x{W}")
    win = _windows(x4, kh, kw, sh, sw)
    out4 = win.mean(axis=(-2, -1))
    out = _fresh(out4[0] if single else out4)
    Hp, Wp = out4.shape[2], out4.shape[3]
    inv = 1.0 / (kh * kw)

    def pull(gout: np.ndarray):
        g4 = (gout[None] if single else gout) * inv
        gx = np.zeros_like(x4)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + sh * (Hp - 1) + 1:sh, j:j + sw * (Wp - 1) + 1:sw] += g4
        return ((gx[0] if single else gx),)

    _record(out, [x], pull)
    return out


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization of [B,C] or [B,C,H,W] input.

    Train mode normalizes by batch statistics and folds them into the running
    buffers in place; infer mode reads the running buffers. ``scale`` and
    ``shift`` are the learnable per-channel affine parameters.
    """
    xd = x.data
    if xd.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects [B,C] or [B,C,H,W], got {xd.shape}")
    C = xd.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"scale/shift must be [C]={C}")
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    cshape = (1, C) if xd.ndim == 2 else (1, C, 1, 1)
    n = xd.shape[0] if xd.ndim == 2 else xd.shape[0] * xd.shape[2] * xd.shape[3]
    if training:
        if xd.shape[0] < 2:
            raise ShapeError("batch_norm in train mode needs a batch of at least 2")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(cshape)) * inv_std.reshape(cshape)
    out = _fresh(xhat * scale.data.reshape(cshape) + shift.data.reshape(cshape))

    def pull(gout: np.ndarray):
        gscale = (gout * xhat).sum(axis=axes)
        gshift = gout.sum(axis=axes)
        gxhat = gout * scale.data.reshape(cshape)
        if training:
            m1 = gxhat.mean(axis=axes).reshape(cshape)
            m2 = (gxhat * xhat).mean(axis=axes).reshape(cshape)
            gx = inv_std.reshape(cshape) * (gxhat - m1 - xhat * m2)
        else:
            gx = gxhat * inv_std.reshape(cshape)
        return gx, gscale, gshift

    _record(out, [x, scale, shift], pull)
    return out


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability ``rate`` and scales
    survivors by 1/(1-rate); infer mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit generator")
    keep = rng.random(x.shape) >= rate
    factor = keep / (1.0 - rate)
    out = _fresh(x.data * factor)
    _record(out, [x], lambda g: (g * factor,))
    return out
