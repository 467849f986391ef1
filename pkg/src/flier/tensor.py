"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  Outside a tape every op is a plain numpy
computation, which is what evaluation and sampling use.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: "OrderedDict[int, Tensor]" = OrderedDict()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced:
                self._leaves.setdefault(id(t), t)
        self.nodes.append(_Node(out, inputs, backward))
        self._produced.add(id(out))

    def reset(self) -> None:
        self.nodes.clear()
        self._produced.clear()
        self._leaves.clear()
        self._consumed = False

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf on ``tape``.

    Leaves recorded on the tape but unreachable from ``loss`` get zero grads.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise BackwardError("backward on an empty tape")
    if tape._consumed:
        raise BackwardError("tape already consumed by backward; call reset() first")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = needs
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible so divergence is not masked
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


# --- reductions and reshaping ----------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return _make(np.array([x.data.sum()]), (x,),
                 lambda g: (np.broadcast_to(g[0], x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array([x.data.mean()]), (x,),
                 lambda g: (np.full(x.shape, g[0] / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def mean_pool(x: Tensor) -> Tensor:
    """Global average over the spatial axes: [B,C,H,W] -> [B,C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"mean_pool expects [B,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))


def max_pool2x2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2 expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"max_pool2x2 needs even spatial dims, got H={H}, W={W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((B, C, H // 2, W // 2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(B, C, H, W),)

    return _make(out, (x,), bw)


# --- dense layers --------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [D, K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear inner dimension mismatch: features D={x.shape[1]} "
                         f"vs weight D={weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[1]},), got {bias.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def bw(g):
        grads = (g @ weight.data.T if x.requires_grad else None, x.data.T @ g)
        return grads + (g.sum(axis=0),) if bias is not None else grads

    return _make(out, inputs, bw)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int,
            out_hw: tuple[int, int] | None = None) -> np.ndarray:
    """[B,C,H,W] -> columns [C*kh*kw, B*Ho*Wo] built from kh*kw shifted slices."""
    B, C, H, W = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if out_hw is None:
        out_hw = ((H + 2 * padding - kh) // stride + 1, (W + 2 * padding - kw) // stride + 1)
    Ho, Wo = out_hw
    cols = np.empty((C, kh, kw, B, Ho, Wo))
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(C * kh * kw, B * Ho * Wo)


def _col2im(cols: np.ndarray, shape: tuple[int, int, int, int], kh: int, kw: int,
            out_hw: tuple[int, int], stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back into a [B,C,H,W] array."""
    B, C, H, W = shape
    Ho, Wo = out_hw
    cols = cols.reshape(C, kh, kw, B, Ho, Wo)
    out = np.zeros((C, B, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += cols[:, i, j]
    if padding:
        out = out[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def _to_rows(a: np.ndarray) -> np.ndarray:
    """[B,O,H,W] -> [O, B*H*W]."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_rows(a: np.ndarray, B: int, H: int, W: int) -> np.ndarray:
    """[O, B*H*W] -> contiguous [B,O,H,W]."""
    return np.ascontiguousarray(a.reshape(a.shape[0], B, H, W).transpose(1, 0, 2, 3))


def _check_conv_args(stride: int, padding: int) -> None:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C_in,H,W] with a [C_out,C_in,kH,kW] kernel."""
    _check_conv_args(stride, padding)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [C_out,C_in,kH,kW], got {kernel.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input C_in={C} vs kernel C_in={Ck}")
    if kh > H + 2 * padding:
        raise ShapeError(f"conv2d kernel height kH={kh} exceeds padded H={H + 2 * padding}")
    if kw > W + 2 * padding:
        raise ShapeError(f"conv2d kernel width kW={kw} exceeds padded W={W + 2 * padding}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")

    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    cols = _im2col(x.data, kh, kw, stride, padding)
    k2 = kernel.data.reshape(O, -1)
    out = k2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = _from_rows(out, B, Ho, Wo)

    def bw(g):
        g2 = _to_rows(g)
        dx = (_col2im(k2.T @ g2, x.shape, kh, kw, (Ho, Wo), stride, padding)
              if x.requires_grad else None)
        dk = (g2 @ cols.T).reshape(kernel.shape)
        if bias is None:
            return dx, dk
        return dx, dk, g2.sum(axis=1)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, bw)


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed convolution; kernel layout [C_in,C_out,kH,kW].

    Output spatial size is ``(H - 1) * stride - 2 * padding + kH``.
    """
    _check_conv_args(stride, padding)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d operands, got {x.shape} and {kernel.shape}")
    B, C, H, W = x.shape
    Ck, O, kh, kw = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv_transpose2d channel mismatch: input C_in={C} vs kernel C_in={Ck}")
    Ho = (H - 1) * stride - 2 * padding + kh
    Wo = (W - 1) * stride - 2 * padding + kw
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv_transpose2d output would be empty ({Ho}x{Wo})")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv_transpose2d bias must have shape ({O},), got {bias.shape}")

    k2 = kernel.data.reshape(C, -1)
    x2 = _to_rows(x.data)
    out = _col2im(k2.T @ x2, (B, O, Ho, Wo), kh, kw, (H, W), stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gcols = _im2col(g, kh, kw, stride, padding, out_hw=(H, W))
        dx = _from_rows(k2 @ gcols, B, H, W) if x.requires_grad else None
        dk = (x2 @ gcols.T).reshape(kernel.shape)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, bw)


# --- softmax family ------------------------------------------------------------

def _check_gamma(gamma: float) -> None:
    if not gamma > 0:
        raise ValueError(f"softmax temperature must be positive, got {gamma}")


def softmax_temp(logits: Tensor, gamma: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / gamma`` (max-subtracted)."""
    _check_gamma(gamma)
    z = logits.data / gamma
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / gamma,)

    return _make(p, (logits,), bw)


def log_softmax_temp(logits: Tensor, gamma: float = 1.0) -> Tensor:
    """Fused, stable ``log(softmax_temp(logits, gamma))``."""
    _check_gamma(gamma)
    z = logits.data / gamma
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / gamma,)

    return _make(out, (logits,), bw)


# --- parameters and gradient oracle --------------------------------------------

class ParameterSet:
    """Named trainable tensors, each tagged with a layer depth."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._depth: dict[str, int] = {}

    def add(self, name: str, value, depth: int = 0) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        self._depth[name] = depth
        return t

    def merge(self, prefix: str, other: "ParameterSet", depth_offset: int = 0) -> None:
        for name, t in other.items():
            full = f"{prefix}.{name}" if prefix else name
            if full in self._params:
                raise KeyError(f"duplicate parameter name {full!r}")
            self._params[full] = t
            self._depth[full] = other.depth(name) + depth_offset

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def depth(self, name: str) -> int:
        return self._depth[name]

    def max_depth(self) -> int:
        return max(self._depth.values()) if self._depth else 0

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load_state(self, state) -> None:
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {k!r}: expected shape {t.shape}, got {arr.shape}")
            t.data = arr.copy()


def finite_diff_check(loss_fn: Callable[[ParameterSet], Tensor], params: ParameterSet,
                      h: float = 1e-5, max_coords: int | None = None,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|a - c| / (|a| + |c| + 1e-12)``.  With
    ``max_coords`` set, that many coordinates are sampled per parameter.
    A non-finite loss anywhere yields ``inf``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h must lie in [1e-7, 1e-3], got {h}")
    rng = rng if rng is not None else np.random.default_rng(0)
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
    if not np.all(np.isfinite(loss.data)):
        return float("inf")
    backward(loss, tape)

    worst = 0.0
    for name, t in params.items():
        t.data = np.ascontiguousarray(t.data)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        if max_coords is None or max_coords >= flat.size:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params).item()
            flat[i] = orig - h
            down = loss_fn(params).item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return float("inf")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    params.zero_grad()
    return float(worst)
