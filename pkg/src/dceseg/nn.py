"""Initialization, optimizer and loss used by both segmentation networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=np.float32) -> Tensor:
    """Weight tensor drawn i.i.d. uniform on [-limit, limit].

    limit = sqrt(6 / (fan_in + fan_out)); for a conv weight [K,C,kh,kw] the
    fans are C*kh*kw and K*kh*kw. Deterministic for a given generator state.
    """
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"glorot_uniform: fans must be positive, got {fan_in}/{fan_out}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=shape)
    return Tensor(data.astype(dtype), requires_grad=True)


@dataclass
class AdamState:
    """Adam optimizer state: first/second moment per parameter plus the step
    counter. Moment buffers are allocated lazily with the parameter's dtype."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update with bias correction, in place on the parameters.

    Reads each parameter's accumulated ``grad`` and leaves it untouched.
    Raises if any gradient is missing or non-finite, naming the parameter.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: parameter '{name}' has no gradient")
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} does not match parameter "
                f"'{name}' of shape {p.shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(
            p.data.dtype, copy=False)


DICE_SMOOTHING = 1e-5


def _check_dice_inputs(pred: Tensor, target: Tensor, smooth: float) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"dice: shape mismatch {pred.shape} vs {target.shape}")
    if smooth <= 0:
        raise ValueError(f"dice: smoothing must be positive, got {smooth}")
    td = target.data
    if not (((td == 0) | (td == 1)).all()):
        raise ValueError("dice: target must be binary")
    if pred.data.min() < 0 or pred.data.max() > 1:
        raise ValueError("dice: predictions must lie in [0, 1]")


def dice_similarity(pred: Tensor, target: Tensor, smooth: float = DICE_SMOOTHING) -> Tensor:
    """Soft Dice overlap (2*sum(x*y) + s) / (sum(x^2) + sum(y^2) + s).

    ``pred`` holds foreground probabilities, ``target`` the binary mask; the
    result is a scalar in (0, 1], differentiable in ``pred``.
    """
    _check_dice_inputs(pred, target, smooth)
    inter = (pred * target).sum()
    denom = (pred * pred).sum() + (target * target).sum() + smooth
    return (2.0 * inter + smooth) / denom


def dice_loss(pred: Tensor, target: Tensor, smooth: float = DICE_SMOOTHING) -> Tensor:
    """1 - dice_similarity; lies in [0, 1) and is minimized by exact overlap."""
    return 1.0 - dice_similarity(pred, target, smooth)
