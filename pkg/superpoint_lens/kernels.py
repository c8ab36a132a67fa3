"""Kernels.

The dense-tensor kernel set the model is built from. Each kernel is a
:class:`torch.autograd.Function` with a hand-derived backward pass, so every local gradient can be
checked against finite differences with :func:`finite_diff_check`. The surrounding graph is torch's
own autograd tape, recorded per forward pass and discarded after :func:`backward`.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Literal, Mapping, Optional, Tuple

import numpy as np
import torch
from jaxtyping import Float, Int

Gradients = Dict[str, torch.Tensor]
"""Mapping from parameter name to a gradient tensor with the parameter's shape."""

KERNEL_NAMES = ["matmul", "masked_softmax_rows", "sigmoid", "relu", "layer_norm", "superpoint_pool"]

# Multiplicative perturbation applied to a kernel's backward output; only set by corrupt_gradient.
_GRADIENT_CORRUPTION: Dict[str, float] = {}


class ShapeError(ValueError):
    """Raised when kernel inputs have incompatible shapes."""


class ContractError(ValueError):
    """Raised when a caller breaks a precondition of a kernel or helper."""


@contextmanager
def corrupt_gradient(kernel: str, scale: float = 1e-2) -> Iterator[None]:
    """Scale the backward output of one kernel by ``1 + scale`` while the context is active.

    Forward values are untouched, so only a gradient check can notice. Used as a negative control.
    """
    if kernel not in KERNEL_NAMES:
        raise ValueError(f"Unknown kernel {kernel}, expected one of {KERNEL_NAMES}")
    _GRADIENT_CORRUPTION[kernel] = 1.0 + scale
    try:
        yield
    finally:
        del _GRADIENT_CORRUPTION[kernel]


def _corrupted(kernel: str, grad: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
    if grad is None or kernel not in _GRADIENT_CORRUPTION:
        return grad
    return grad * _GRADIENT_CORRUPTION[kernel]


class _MatMul(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(a, b)
        return torch.matmul(a, b)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        a, b = ctx.saved_tensors
        grad_a = grad_b = None
        if ctx.needs_input_grad[0]:
            grad_a = _corrupted("matmul", torch.matmul(grad_output, b.transpose(-1, -2)))
        if ctx.needs_input_grad[1]:
            grad_b = _corrupted("matmul", torch.matmul(a.transpose(-1, -2), grad_output))
        return grad_a, grad_b


class _MaskedSoftmaxRows(torch.autograd.Function):
    @staticmethod
    def forward(ctx, logits: torch.Tensor, add_mask: torch.Tensor) -> torch.Tensor:
        # Rows with no admissible entry fall back to the unmasked distribution.
        fully_masked = torch.isneginf(add_mask).all(dim=-1, keepdim=True)
        add_mask = torch.where(fully_masked, torch.zeros_like(add_mask), add_mask)
        shifted = logits + add_mask
        shifted = shifted - shifted.max(dim=-1, keepdim=True).values
        weights = shifted.exp()
        pattern = weights / weights.sum(dim=-1, keepdim=True)
        ctx.save_for_backward(pattern)
        return pattern

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (pattern,) = ctx.saved_tensors
        inner = (grad_output * pattern).sum(dim=-1, keepdim=True)
        grad_logits = pattern * (grad_output - inner)
        return _corrupted("masked_softmax_rows", grad_logits), None


class _Sigmoid(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor) -> torch.Tensor:
        y = torch.sigmoid(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (y,) = ctx.saved_tensors
        return _corrupted("sigmoid", grad_output * y * (1 - y))


class _ReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(x)
        return x.clamp(min=0)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        (x,) = ctx.saved_tensors
        return _corrupted("relu", grad_output * (x > 0).to(grad_output.dtype))


class _LayerNorm(torch.autograd.Function):
    @staticmethod
    def forward(
        ctx, x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float
    ) -> torch.Tensor:
        centered = x - x.mean(dim=-1, keepdim=True)
        inv_scale = (centered.pow(2).mean(dim=-1, keepdim=True) + eps).rsqrt()
        normalized = centered * inv_scale
        ctx.save_for_backward(normalized, inv_scale, gain)
        return normalized * gain + bias

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        normalized, inv_scale, gain = ctx.saved_tensors
        reduce_dims = tuple(range(grad_output.dim() - 1))
        grad_x = grad_gain = grad_bias = None
        if ctx.needs_input_grad[0]:
            grad_normalized = grad_output * gain
            grad_x = inv_scale * (
                grad_normalized
                - grad_normalized.mean(dim=-1, keepdim=True)
                - normalized * (grad_normalized * normalized).mean(dim=-1, keepdim=True)
            )
            grad_x = _corrupted("layer_norm", grad_x)
        if ctx.needs_input_grad[1]:
            grad_gain = _corrupted("layer_norm", (grad_output * normalized).sum(dim=reduce_dims))
        if ctx.needs_input_grad[2]:
            grad_bias = _corrupted("layer_norm", grad_output.sum(dim=reduce_dims))
        return grad_x, grad_gain, grad_bias, None


class _SuperpointPool(torch.autograd.Function):
    @staticmethod
    def forward(
        ctx, features: torch.Tensor, superpoint_ids: torch.Tensor, n_superpoints: int
    ) -> torch.Tensor:
        counts = torch.bincount(superpoint_ids, minlength=n_superpoints).to(features.dtype)
        sums = features.new_zeros(n_superpoints, features.shape[-1])
        sums.index_add_(0, superpoint_ids, features)
        ctx.save_for_backward(superpoint_ids, counts)
        return sums / counts[:, None]

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        superpoint_ids, counts = ctx.saved_tensors
        grad_features = (grad_output / counts[:, None])[superpoint_ids]
        return _corrupted("superpoint_pool", grad_features), None, None


def matmul(
    a: Float[torch.Tensor, "... m k"], b: Float[torch.Tensor, "... k n"]
) -> Float[torch.Tensor, "... m n"]:
    """Matrix product, batched over equal leading dimensions.

    >>> matmul(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([[5.0], [6.0]]))
    tensor([[17.],
            [39.]])
    """
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"Cannot multiply tensors of shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return _MatMul.apply(a, b)


def masked_softmax_rows(
    logits: Float[torch.Tensor, "... rows cols"], add_mask: Float[torch.Tensor, "... rows cols"]
) -> Float[torch.Tensor, "... rows cols"]:
    """Row-wise softmax of ``logits + add_mask`` where ``add_mask`` holds 0 or -inf.

    Rows whose mask is entirely -inf are computed with an all-zeros mask instead, so every output
    row sums to one and masked entries of the other rows get exactly zero weight.
    """
    if logits.shape != add_mask.shape:
        raise ShapeError(
            f"Logits of shape {tuple(logits.shape)} do not match mask of shape "
            f"{tuple(add_mask.shape)}"
        )
    return _MaskedSoftmaxRows.apply(logits, add_mask.detach())


def pointwise(kind: Literal["sigmoid", "relu"], x: torch.Tensor) -> torch.Tensor:
    """Elementwise sigmoid or relu."""
    if kind == "sigmoid":
        return _Sigmoid.apply(x)
    elif kind == "relu":
        return _ReLU.apply(x)
    raise ValueError(f"Invalid pointwise kernel {kind}")


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return pointwise("sigmoid", x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return pointwise("relu", x)


def layer_norm(
    x: Float[torch.Tensor, "... d"],
    gain: Float[torch.Tensor, "d"],
    bias: Float[torch.Tensor, "d"],
    eps: float = 1e-5,
) -> Float[torch.Tensor, "... d"]:
    """Normalise the last dimension to zero mean and unit variance, then apply gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"Layer norm over {tuple(x.shape)} needs gain and bias of shape ({x.shape[-1]},), got "
            f"{tuple(gain.shape)} and {tuple(bias.shape)}"
        )
    return _LayerNorm.apply(x, gain, bias, eps)


def superpoint_pool(
    features: Float[torch.Tensor, "n_points d"],
    superpoint_ids: Int[torch.Tensor, "n_points"],
    n_superpoints: int,
) -> Float[torch.Tensor, "n_superpoints d"]:
    """Mean of the feature rows sharing a superpoint id.

    The gradient of a pooled row is split uniformly over its member points.
    """
    if features.dim() != 2 or superpoint_ids.shape != (features.shape[0],):
        raise ShapeError(
            f"Cannot pool features of shape {tuple(features.shape)} with ids of shape "
            f"{tuple(superpoint_ids.shape)}"
        )
    return _SuperpointPool.apply(features, superpoint_ids, n_superpoints)


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> Gradients:
    """Reverse-mode accumulation of ``loss`` with respect to every tensor in ``params``.

    Parameters the loss does not reach get an all-zero gradient.

    >>> x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    >>> backward(x * x, {"x": x})["x"].item()
    6.0
    """
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    names = [name for name, param in params.items() if param.requires_grad]
    grads = torch.autograd.grad(loss, [params[name] for name in names], allow_unused=True)
    gradients: Gradients = {}
    for name, grad in zip(names, grads):
        gradients[name] = torch.zeros_like(params[name]) if grad is None else grad
    return gradients


@dataclass
class FiniteDiffReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    """Largest relative error over all checked entries (inf when an evaluation was non-finite)."""

    param_name: Optional[str] = None
    """Parameter holding the worst entry."""

    index: Optional[Tuple[int, ...]] = None
    """Index of the worst entry inside its parameter."""

    finite: bool = True
    """False when the function produced a non-finite value."""

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.finite and self.max_rel_error < tolerance


def finite_diff_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-6,
    atol: float = 1e-8,
) -> FiniteDiffReport:
    """Compare :func:`backward` against central differences over every parameter entry.

    ``f`` must be a pure function of the current parameter values. Entries are perturbed in place
    and restored afterwards. The relative error of an entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``, so an entry whose gradient is
    below ``atol`` is held to an absolute error of ``atol`` times the tolerance.
    """
    if not 0 < step <= 1e-3:
        raise ContractError(f"Finite-difference step must lie in (0, 1e-3], got {step}")
    if atol <= 0:
        raise ContractError(f"Error floor must be positive, got {atol}")

    loss = f()
    if not torch.isfinite(loss).all():
        return FiniteDiffReport(math.inf, finite=False)
    analytic = backward(loss, params)

    report = FiniteDiffReport(0.0)
    with torch.no_grad():
        for name, param in params.items():
            if not param.requires_grad:
                continue
            flat = param.view(-1)
            grad = analytic[name].reshape(-1)
            for flat_index in range(flat.numel()):
                original = flat[flat_index].item()
                flat[flat_index] = original + step
                upper = f().item()
                flat[flat_index] = original - step
                lower = f().item()
                flat[flat_index] = original
                index = tuple(int(i) for i in np.unravel_index(flat_index, tuple(param.shape)))
                if not (math.isfinite(upper) and math.isfinite(lower)):
                    logging.warning("Non-finite value while perturbing %s%s", name, index)
                    return FiniteDiffReport(math.inf, name, index, finite=False)
                numeric = (upper - lower) / (2 * step)
                exact = grad[flat_index].item()
                rel_error = abs(exact - numeric) / max(abs(exact), abs(numeric), atol)
                if rel_error > report.max_rel_error or report.param_name is None:
                    report = FiniteDiffReport(max(rel_error, report.max_rel_error), name, index)
    return report
