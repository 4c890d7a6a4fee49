"""Dense tensors with reverse-mode automatic differentiation.

Just large enough for a small CNN: convolution, batch norm, ReLU, 2x2 max
pooling, fully connected layers, softmax cross-entropy and mean squared
error, plus a handful of reductions. Values are numpy arrays; gradients are
recorded on an explicit tape and replayed in reverse.

Ops only record when a `Tape` is active, so plain inference never builds a
graph:

    with Tape():
        loss = softmax_cross_entropy(linear(x, w, b), labels)
        backward(loss)
    # w.grad / b.grad now hold d loss / d param
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class TapeError(RuntimeError):
    """Backward pass requested on something the tape cannot replay."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two values."""


_DEFAULT_DTYPE = np.float32
_DEBUG_CHECKS = False


def set_default_dtype(dtype) -> None:
    """Set the dtype used for freshly built tensors/models (f32 or f64)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype, e.g. for gradient checks."""

    def __init__(self, dtype):
        self.dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions after every forward op (slow; for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if _DEBUG_CHECKS and not np.isfinite(arr).all():
        raise FloatingPointError(f"{opname} produced non-finite values")


class Tensor:
    """N-dimensional array value, optionally linked into the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional["Node"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    """One recorded op: inputs, output, and the rule that pushes grads back."""

    __slots__ = ("inputs", "output", "backward_fn", "tape")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], None], tape: "Tape"):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn
        self.tape = tape


class Tape:
    """Ordered record of ops for one forward pass; consumed by one backward."""

    _active: list["Tape"] = []

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False


def _active_tape() -> Optional[Tape]:
    return Tape._active[-1] if Tape._active else None


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.tape_node is not None


def _record(inputs: Sequence[Tensor], output: Tensor,
            backward_fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is None or not any(_tracked(t) for t in inputs):
        return
    node = Node(inputs, output, backward_fn, tape)
    output.tape_node = node
    output.requires_grad = True
    tape.nodes.append(node)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate grads of every tracked tensor reachable from a scalar loss.

    The tape that recorded the loss is walked once in reverse and marked
    consumed; tracked leaves that the tape saw but that do not influence the
    loss end up with zero grads rather than None.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    node = loss.tape_node
    if node is None:
        raise TapeError("loss is not recorded on a tape")
    tape = node.tape
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    tape.consumed = True

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    for nd in reversed(tape.nodes):
        if nd.output.grad is None:
            continue  # branch that never reached the loss
        nd.backward_fn(nd.output.grad)
    for nd in tape.nodes:
        for inp in nd.inputs:
            if inp.requires_grad and inp.grad is None:
                inp.grad = np.zeros_like(inp.data)


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with FCkk filters.

    Output spatial size must divide exactly: H' = (H + 2p - kh)/stride + 1.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (N,C,H,W), got {tuple(x.shape)}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (F,C,kh,kw), got {tuple(weight.shape)}")
    N, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input has C={C}, weight expects C={Cw}")
    if bias.shape != (F,):
        raise ShapeError(f"conv2d bias must have shape ({F},), got {tuple(bias.shape)}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} larger than padded input "
            f"{H + 2 * padding}x{W + 2 * padding}")
    if (H + 2 * padding - kh) % stride or (W + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d output size not integral: input {H}x{W}, pad {padding}, "
            f"kernel {kh}x{kw}, stride {stride}")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(F, C * kh * kw)
    out_data = (cols @ wmat.T).reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2) + bias.data.reshape(1, F, 1, 1)
    out_data = np.ascontiguousarray(out_data)
    _check_finite(out_data, "conv2d")
    out = Tensor(out_data)

    x_tracked, w_tracked, b_tracked = _tracked(x), _tracked(weight), _tracked(bias)

    def bwd(g: np.ndarray) -> None:
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, F)
        if w_tracked:
            _accumulate(weight, (gm.T @ cols).reshape(weight.shape))
        if b_tracked:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x_tracked:
            dcols = (gm @ wmat).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + H, padding:padding + W]
            _accumulate(x, dxp)

    _record((x, weight, bias), out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    out = Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0))

    _record((x,), out, bwd)
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; ties route gradient to the first element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 input must be 4-D, got {tuple(x.shape)}")
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    Ho, Wo = H // 2, W // 2
    win = x.data.reshape(N, C, Ho, 2, Wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, 4)
    # argmax picks the first maximum, i.e. row-major order within the window
    idx = win.argmax(axis=-1)
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    out = Tensor(out_data)

    def bwd(g: np.ndarray) -> None:
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(N, C, Ho, Wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
        _accumulate(x, dx)

    _record((x,), out, bwd)
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                mode: str = "train", momentum: float = 0.1,
                eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes by batch statistics (differentiable through them)
    and folds them into the running buffers in place; eval mode uses the
    running buffers as constants.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be 4-D, got {tuple(x.shape)}")
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"batchnorm2d gamma/beta must have shape ({C},), got "
            f"{tuple(gamma.shape)} / {tuple(beta.shape)}")
    g_tracked, b_tracked, x_tracked = _tracked(gamma), _tracked(beta), _tracked(x)

    if mode == "train":
        m = N * H * W
        if m < 2:
            raise DegenerateBatchError(
                f"batchnorm2d train mode needs N*H*W >= 2 values per channel, got {m}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean[:] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[:] = (1.0 - momentum) * running_var + momentum * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        out_data = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)
        _check_finite(out_data, "batchnorm2d")
        out = Tensor(out_data)

        def bwd(g: np.ndarray) -> None:
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            if b_tracked:
                _accumulate(beta, dbeta)
            if g_tracked:
                _accumulate(gamma, dgamma)
            if x_tracked:
                k = (gamma.data * inv_std / m).reshape(1, C, 1, 1)
                dx = k * (m * g - dbeta.reshape(1, C, 1, 1) - xhat * dgamma.reshape(1, C, 1, 1))
                _accumulate(x, dx)

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        out_data = gamma.data.reshape(1, C, 1, 1) * xhat + beta.data.reshape(1, C, 1, 1)
        _check_finite(out_data, "batchnorm2d")
        out = Tensor(out_data)

        def bwd(g: np.ndarray) -> None:
            if b_tracked:
                _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if g_tracked:
                _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if x_tracked:
                _accumulate(x, g * (gamma.data * inv_std).reshape(1, C, 1, 1))

    else:
        raise ValueError(f"batchnorm2d mode must be 'train' or 'eval', got {mode!r}")

    _record((x, gamma, beta), out, bwd)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x @ weight.T + bias, for x of shape (N, D)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(
            f"linear needs 2-D input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}")
    N, D = x.shape
    O, Dw = weight.shape
    if Dw != D:
        raise ShapeError(f"linear inner dims differ: input D={D}, weight D={Dw}")
    if bias.shape != (O,):
        raise ShapeError(f"linear bias must have shape ({O},), got {tuple(bias.shape)}")
    out_data = x.data @ weight.data.T + bias.data
    _check_finite(out_data, "linear")
    out = Tensor(out_data)

    x_tracked, w_tracked, b_tracked = _tracked(x), _tracked(weight), _tracked(bias)

    def bwd(g: np.ndarray) -> None:
        if w_tracked:
            _accumulate(weight, g.T @ x.data)
        if b_tracked:
            _accumulate(bias, g.sum(axis=0))
        if x_tracked:
            _accumulate(x, g @ weight.data)

    _record((x, weight, bias), out, bwd)
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading batch dimension."""
    N = x.shape[0]
    out = Tensor(x.data.reshape(N, -1))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    _record((x,), out, bwd)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-shifted."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D (N,K), got {tuple(logits.shape)}")
    N, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (N,):
        raise ShapeError(f"labels must have shape ({N},), got {tuple(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        bad = labels[(labels < 0) | (labels >= K)]
        raise ValueError(f"labels out of range [0,{K}): {bad.tolist()}")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    sums = exps.sum(axis=1, keepdims=True)
    logp = shifted - np.log(sums)
    loss_val = -logp[np.arange(N), labels].mean()
    out = Tensor(np.asarray(loss_val, dtype=z.dtype))

    def bwd(g: np.ndarray) -> None:
        soft = exps / sums
        soft[np.arange(N), labels] -= 1.0
        _accumulate(logits, g * soft / N)

    _record((logits,), out, bwd)
    return out


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of (a - b)^2."""
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    diff = a.data - b.data
    out = Tensor(np.asarray((diff * diff).mean(), dtype=diff.dtype))
    scale_ = 2.0 / diff.size
    a_tracked, b_tracked = _tracked(a), _tracked(b)

    def bwd(g: np.ndarray) -> None:
        d = g * scale_ * diff
        if a_tracked:
            _accumulate(a, d)
        if b_tracked:
            _accumulate(b, -d)

    _record((a, b), out, bwd)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = Tensor(np.asarray(x.data.sum(), dtype=x.data.dtype))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype) * np.ones_like(x.data))

    _record((x,), out, bwd)
    return out


def scale(x: Tensor, alpha: float) -> Tensor:
    """Multiply by a python scalar."""
    out = Tensor(x.data * alpha)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * alpha)

    _record((x,), out, bwd)
    return out


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) for a constant weight array; yields a scalar tensor."""
    w = np.asarray(weights, dtype=x.data.dtype)
    if w.shape != x.data.shape:
        raise ShapeError(f"weighted_sum shapes differ: {tuple(x.shape)} vs {w.shape}")
    out = Tensor(np.asarray((x.data * w).sum(), dtype=x.data.dtype))

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * w)

    _record((x,), out, bwd)
    return out
