"""Differentiable primitives the coupling networks are built from.

Each primitive is a pure forward function paired with an explicit
backward function returning the exact adjoints. There is no computation
graph; callers chain backward calls by hand and accumulate into
Parameter.grad. Arrays keep their dtype: float32 for training and
inference, float64 for gradient-check runs where finite differences are
trustworthy.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class Parameter:
    """Named learnable tensor with an additive gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeMismatch(f"{self.name}: grad shape {self.grad.shape} "
                                f"!= value shape {self.value.shape}")

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _check_conv_shapes(x, w, b, dilation):
    if x.ndim != 2 or w.ndim != 3:
        raise ShapeMismatch(f"need input [C_in, T] and weight [C_out, C_in, K], "
                            f"got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"weight expects {w.shape[1]} input channels, got {x.shape[0]}")
    if w.shape[2] % 2 != 1:
        raise ShapeMismatch(f"kernel size must be odd, got {w.shape[2]}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} != ({w.shape[0]},)")
    if dilation < 1:
        raise ShapeMismatch(f"dilation must be >= 1, got {dilation}")


def dilated_conv1d(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int = 1) -> np.ndarray:
    """'Same'-padded dilated cross-correlation.

    x: [C_in, T], w: [C_out, C_in, K] with K odd, b: [C_out] -> [C_out, T].
    Out-of-range input is treated as zero.
    """
    _check_conv_shapes(x, w, b, dilation)
    c_in, t = x.shape
    c_out, _, k = w.shape
    pad = dilation * (k - 1) // 2
    xp = np.zeros((c_in, t + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    y = np.broadcast_to(b[:, None], (c_out, t)).astype(x.dtype).copy()
    for tap in range(k):
        y += w[:, :, tap] @ xp[:, tap * dilation:tap * dilation + t]
    return y


def dilated_conv1d_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray,
                            dilation: int = 1):
    """Adjoints of dilated_conv1d: (grad_x, grad_w, grad_b)."""
    c_in, t = x.shape
    c_out, _, k = w.shape
    if grad_y.shape != (c_out, t):
        raise ShapeMismatch(f"grad shape {grad_y.shape} != ({c_out}, {t})")
    pad = dilation * (k - 1) // 2
    xp = np.zeros((c_in, t + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for tap in range(k):
        sl = slice(tap * dilation, tap * dilation + t)
        grad_w[:, :, tap] = grad_y @ xp[:, sl].T
        grad_xp[:, sl] += w[:, :, tap].T @ grad_y
    grad_x = grad_xp[:, pad:pad + t] if pad else grad_xp
    return grad_x, grad_w, grad_y.sum(axis=1)


def pointwise_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-time-step dense map: x [C_in, T], w [C_out, C_in] -> [C_out, T]."""
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"pointwise shapes {w.shape} x {x.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {b.shape} != ({w.shape[0]},)")
    return w @ x + b[:, None]


def pointwise_conv_backward(grad_y: np.ndarray, x: np.ndarray, w: np.ndarray):
    if grad_y.shape != (w.shape[0], x.shape[1]):
        raise ShapeMismatch(f"grad shape {grad_y.shape} != ({w.shape[0]}, {x.shape[1]})")
    return w.T @ grad_y, grad_y @ x.T, grad_y.sum(axis=1)


def gated_activation(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise tanh(a) * sigmoid(b)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"gate halves {a.shape} vs {b.shape}")
    return np.tanh(a) * _sigmoid(b)


def gated_activation_backward(grad_y: np.ndarray, a: np.ndarray, b: np.ndarray):
    if grad_y.shape != a.shape or a.shape != b.shape:
        raise ShapeMismatch(f"gate backward shapes {grad_y.shape}, {a.shape}, {b.shape}")
    ta = np.tanh(a)
    sb = _sigmoid(b)
    return grad_y * (1.0 - ta * ta) * sb, grad_y * ta * sb * (1.0 - sb)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def grad_check(fn, inputs, epsilon: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    fn maps the list of arrays to (scalar, [grad per input]); returns the
    worst relative discrepancy over every coordinate of every input.
    Meaningful only on float64 inputs.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    _, analytic = fn(*inputs)
    worst = 0.0
    for arr, grad in zip(inputs, analytic):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi, _ = fn(*inputs)
            flat[i] = orig - epsilon
            lo, _ = fn(*inputs)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * epsilon)
            an = grad.reshape(-1)[i]
            err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
            worst = max(worst, err)
    return worst
