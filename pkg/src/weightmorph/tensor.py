"""Dense float32 tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: only the operations the main networks and
the coordinate MLPs need, each with an exact backward rule. Forward results
are checked for NaN/Inf (a non-finite value anywhere is treated as a hard
error, never silently propagated).

Gradients flow through an explicit :class:`Tape`. Ops record onto the
innermost active tape only when some input has ``requires_grad`` set, so
running without a tape (or with constants) is plain numpy arithmetic.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient became NaN/Inf."""


def _f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to 1-d
    return arr


class Tensor:
    """A dense float32 array, optionally participating in differentiation.

    ``data`` is the row-major value buffer, ``grad`` (populated by
    ``Tape.backward``) has the same shape. Tensors are treated as immutable
    once created; only optimizer steps rewrite leaf ``data`` in place,
    between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Entry:
    """One recorded op: inputs, output, and the rule mapping d(out) -> d(inputs)."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of ops; reverse walk implements backpropagation.

    Entries are appended in execution order, so every op's inputs were
    produced by an earlier entry or are leaves of this tape. ``backward``
    visits each entry exactly once, in reverse, and deposits gradients into
    ``.grad`` of tape-leaf tensors that require them. Chaining tapes is
    equivalent to one tape: seed the outer call with the inner gradient.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        self._entries.append(_Entry(inputs, output, backward))
        self._produced.add(id(output))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(root)/d(leaf) into each tape leaf's ``.grad``.

        ``seed`` defaults to ones (for a scalar root this is the usual
        d(root)/d(root) = 1); pass the downstream gradient to chain tapes.
        """
        if seed is None:
            seed = np.ones(root.data.shape, dtype=np.float32)
        grads: dict[int, np.ndarray] = {id(root): _f32(seed)}

        for entry in reversed(self._entries):
            gout = grads.pop(id(entry.output), None)
            if gout is None:
                continue
            gins = entry.backward(gout)
            for t, g in zip(entry.inputs, gins):
                if g is None:
                    continue
                if id(t) in self._produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = g if acc is None else acc + g
                elif t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g
        # a root that is itself a leaf of this tape (no producing entry)
        if id(root) in grads and id(root) not in self._produced and root.requires_grad:
            if root.grad is None:
                root.grad = np.zeros_like(root.data)
            root.grad += grads[id(root)]


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data: np.ndarray, inputs: Sequence[Tensor], backward, opname: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{opname}: non-finite value in forward output")
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(inputs, out, backward)
    return out


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """C = A @ B for 2-D operands; dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make_output(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """y = x @ w^T + b with x [n, in], w [out, in], b [out]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} vs out dim {w.shape[0]}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gb = g.sum(axis=0) if b is not None else None
        return g @ wd, g.T @ xd, gb

    inputs = (x, w, b) if b is not None else (x, w)
    bwd = backward if b is not None else (lambda g: (g @ wd, g.T @ xd))
    return _make_output(out, inputs, bwd, "linear")


def _out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    cols = np.empty((b, c, k, k, ho, wo), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * k * k, ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip): x [B,Cin,H,W] * w [Cout,Cin,k,k].

    H' = floor((H + 2*pad - k)/stride) + 1, same for W'.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}")
    bs, cin, h, wd_ = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ShapeError("conv2d: non-square kernel")
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels {cin} != kernel channels {cin_w}")
    if k > h + 2 * pad or k > wd_ + 2 * pad:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} vs {cout} output channels")

    ho, wo = _out_hw(h, wd_, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)                        # [B, Cin*k*k, L]
    w2 = w.data.reshape(cout, cin * k * k)
    out = np.matmul(w2, cols).reshape(bs, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(bs, cout, ho * wo)
        gw = np.einsum("bol,bkl->ok", g2, cols, optimize=True).reshape(w.shape)
        gcols = np.matmul(w2.T, g2).reshape(bs, cin, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd_] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make_output(out, inputs, backward, "conv2d")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make_output(out, (x,), backward, "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a trailing-dim bias vector for b."""
    if a.shape == b.shape:
        bias = False
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias = True
    else:
        raise ShapeError(f"add: {a.shape} + {b.shape}")
    out = a.data + b.data

    def backward(g):
        if bias:
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, g

    return _make_output(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} - {b.shape}")
    out = a.data - b.data

    def backward(g):
        return g, -g

    return _make_output(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} * {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward(g):
        return g * bd, g * ad

    return _make_output(out, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = x.data * np.float32(s)

    def backward(g):
        return (g * np.float32(s),)

    return _make_output(out, (x,), backward, "scale")


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant array (no gradient to the constant)."""
    c = _f32(c)
    out = x.data * c

    def backward(g):
        gx = g * c
        if gx.shape != x.data.shape:  # undo broadcasting of c over x
            gx = gx.reshape(x.data.shape)
        return (gx,)

    return _make_output(out, (x,), backward, "mul_const")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    orig = x.data.shape

    def backward(g):
        return (g.reshape(orig),)

    return _make_output(out, (x,), backward, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: expected at least 2-D, got {x.shape}")
    return reshape(x, (x.shape[0], -1))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=np.float32)

    def backward(g):
        return (np.full(x.data.shape, float(g) / n, dtype=np.float32),)

    return _make_output(out, (x,), backward, "mean_all")


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=np.float32)

    def backward(g):
        return (np.full(x.data.shape, float(g), dtype=np.float32),)

    return _make_output(out, (x,), backward, "sum_all")


def mean_lastdim(x: Tensor) -> Tensor:
    """Mean over the trailing axis: [..., d] -> [...]."""
    if x.data.ndim < 1:
        raise ShapeError("mean_lastdim: scalar input")
    d = x.shape[-1]
    out = x.data.mean(axis=-1)

    def backward(g):
        return (np.repeat(g[..., None] / d, d, axis=-1).astype(np.float32),)

    return _make_output(out, (x,), backward, "mean_lastdim")


def crop_center2d(x: Tensor, k: int) -> Tensor:
    """Centered k x k window of the trailing two dims; offset floor((K-k)/2)."""
    kk = x.shape[-1]
    if x.shape[-2] != kk:
        raise ShapeError(f"crop_center2d: trailing dims {x.shape[-2:]} not square")
    if k > kk:
        raise ShapeError(f"crop_center2d: k={k} exceeds K={kk}")
    off = (kk - k) // 2
    out = np.ascontiguousarray(x.data[..., off:off + k, off:off + k])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., off:off + k, off:off + k] = g
        return (gx,)

    return _make_output(out, (x,), backward, "crop_center2d")


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the lowest flat index."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D, got {x.shape}")
    b, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"maxpool2d: {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    win = x.data.reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = np.ascontiguousarray(win).reshape(b, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)  # argmax takes the first (lowest flat) maximum
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((b, c, ho, wo, k * k), dtype=np.float32)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
        return (gw.reshape(b, c, h, w),)

    return _make_output(out, (x,), backward, "maxpool2d")


def global_avgpool2d(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C], mean over the spatial dims."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avgpool2d: expected 4-D, got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).astype(np.float32),)

    return _make_output(out, (x,), backward, "global_avgpool2d")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape}")
    bsz, ncls = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (bsz,):
        raise ShapeError(f"softmax_cross_entropy: labels {labels.shape} vs batch {bsz}")
    if labels.min() < 0 or labels.max() >= ncls:
        raise ShapeError(f"softmax_cross_entropy: label outside [0, {ncls})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    nll = -(z[np.arange(bsz), labels] - np.log(ez.sum(axis=1)))
    out = np.asarray(nll.mean(), dtype=np.float32)

    def backward(g):
        gl = probs.copy()
        gl[np.arange(bsz), labels] -= 1.0
        return (gl * (float(g) / bsz),)

    return _make_output(out, (logits,), backward, "softmax_cross_entropy")


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization on [B,C,H,W].

    In training mode the batch statistics normalize and the running buffers
    are updated in place (they live outside the tape). In inference mode the
    running statistics normalize.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected 4-D, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d: gamma/beta shape mismatch")
    xd = x.data
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        n = xd.shape[0] * xd.shape[2] * xd.shape[3]
        running_mean *= (1 - momentum)
        running_mean += momentum * mu
        running_var *= (1 - momentum)
        running_var += momentum * var * (n / max(n - 1, 1))  # unbiased for the buffer
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gi = gamma.data[None, :, None, None] * inv[None, :, None, None]
        if training:
            gx = gi * (g
                       - g.mean(axis=(0, 2, 3))[None, :, None, None]
                       - xhat * (g * xhat).mean(axis=(0, 2, 3))[None, :, None, None])
        else:
            gx = gi * g
        return gx.astype(np.float32), ggamma.astype(np.float32), gbeta.astype(np.float32)

    return _make_output(out.astype(np.float32), (x, gamma, beta), backward, "batchnorm2d")
