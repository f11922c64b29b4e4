"""Differentiable primitives with hand-written adjoints.

torch supplies the tensors and the reverse-mode tape; the five primitives the
network is built from (fully connected, layer norm, GELU, the Gaussian
attention activation and softmax) carry their own forward/backward pairs so
they can be verified against finite differences and, for the fault-injection
check, deliberately broken.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

LAYER_NORM_EPS = 1e-5

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_faulty: set[str] = set()


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


@contextlib.contextmanager
def inject_fault(*names: str):
    """Negate the adjoint of the named primitives while the context is active."""
    _faulty.update(names)
    try:
        yield
    finally:
        _faulty.difference_update(names)


def _sign(name: str) -> float:
    return -1.0 if name in _faulty else 1.0


def _check(out: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    return out


def _fc_forward(x, weight, bias):
    out = x @ weight
    return out if bias is None else out + bias


def _ln_forward(x, scale, shift, eps):
    mean = x.mean(-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(-1, keepdim=True)
    inv = torch.rsqrt(var + eps)
    xhat = centered * inv
    return xhat * scale + shift, xhat, inv


def _gelu_forward(x):
    return x * 0.5 * (1.0 + torch.erf(x * _SQRT_HALF))


def _gaussian_forward(x):
    return torch.exp(-0.5 * x * x)


def _softmax_forward(x, axis):
    z = torch.exp(x - x.amax(axis, keepdim=True))
    return z / z.sum(axis, keepdim=True)


class _FullyConnected(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, weight, bias):
        ctx.save_for_backward(x, weight)
        ctx.has_bias = bias is not None
        return _check(_fc_forward(x, weight, bias), "fully_connected")

    @staticmethod
    def backward(ctx, g):
        x, weight = ctx.saved_tensors
        s = _sign("fully_connected")
        gx = s * (g @ weight.T)
        g2 = g.reshape(-1, g.shape[-1])
        gw = s * (x.reshape(-1, x.shape[-1]).T @ g2)
        gb = s * g2.sum(0) if ctx.has_bias else None
        return gx, gw, gb


class _LayerNorm(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale, shift, eps):
        out, xhat, inv = _ln_forward(x, scale, shift, eps)
        ctx.save_for_backward(xhat, inv, scale)
        return _check(out, "layer_norm")

    @staticmethod
    def backward(ctx, g):
        xhat, inv, scale = ctx.saved_tensors
        s = _sign("layer_norm")
        gxhat = g * scale
        gx = inv * (
            gxhat
            - gxhat.mean(-1, keepdim=True)
            - xhat * (gxhat * xhat).mean(-1, keepdim=True)
        )
        lead = tuple(range(g.dim() - 1))
        return s * gx, s * (g * xhat).sum(lead), s * g.sum(lead), None


class _Gelu(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return _check(_gelu_forward(x), "gelu")

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved_tensors
        cdf = 0.5 * (1.0 + torch.erf(x * _SQRT_HALF))
        pdf = _INV_SQRT_2PI * torch.exp(-0.5 * x * x)
        return _sign("gelu") * g * (cdf + x * pdf)


class _Gaussian(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        out = _gaussian_forward(x)
        ctx.save_for_backward(x, out)
        return _check(out, "gaussian_activation")

    @staticmethod
    def backward(ctx, g):
        x, out = ctx.saved_tensors
        return _sign("gaussian_activation") * g * (-x * out)


class _Softmax(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, axis):
        out = _softmax_forward(x, axis)
        ctx.save_for_backward(out)
        ctx.axis = axis
        return _check(out, "softmax")

    @staticmethod
    def backward(ctx, g):
        (out,) = ctx.saved_tensors
        gx = out * (g - (g * out).sum(ctx.axis, keepdim=True))
        return _sign("softmax") * gx, None


def _taped(*tensors) -> bool:
    # the tape is skipped when nothing needs a gradient; results are identical
    return torch.is_grad_enabled() and any(t is not None and t.requires_grad for t in tensors)


def fully_connected(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None):
    """Affine map over the trailing axis; ``weight`` has shape (D_in, D_out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(
            f"input trailing dimension {x.shape[-1]} does not match weight {tuple(weight.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    if _taped(x, weight, bias):
        return _FullyConnected.apply(x, weight, bias)
    return _check(_fc_forward(x, weight, bias), "fully_connected")


def layer_norm(x, scale, shift, eps: float = LAYER_NORM_EPS):
    if x.shape[-1] != scale.shape[-1] or x.shape[-1] != shift.shape[-1]:
        raise ValueError("layer_norm parameters do not match the trailing dimension")
    if _taped(x, scale, shift):
        return _LayerNorm.apply(x, scale, shift, eps)
    return _check(_ln_forward(x, scale, shift, eps)[0], "layer_norm")


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    if _taped(x):
        return _Gelu.apply(x)
    return _check(_gelu_forward(x), "gelu")


def gaussian_activation(x):
    """Elementwise ``exp(-x**2 / 2)``; equals 1 at 0 and lies in (0, 1]."""
    if _taped(x):
        return _Gaussian.apply(x)
    return _check(_gaussian_forward(x), "gaussian_activation")


def softmax(x, axis: int = -1):
    axis = axis % x.dim()
    if _taped(x):
        return _Softmax.apply(x, axis)
    return _check(_softmax_forward(x, axis), "softmax")


# -- parameter containers ----------------------------------------------------

def fan_in_uniform_(tensor: torch.Tensor, fan_in: int, generator: torch.Generator | None):
    bound = math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class Linear(nn.Module):
    """Fully connected layer backed by :func:`fully_connected`."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        if not zero_init:
            fan_in_uniform_(self.weight, d_in, generator)

    def forward(self, x):
        return fully_connected(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(dim))
        self.shift = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.scale, self.shift, self.eps)


class LinearNormGelu(nn.Module):
    """FC, then layer norm, then GELU."""

    def __init__(self, d_in: int, d_out: int, generator: torch.Generator | None = None):
        super().__init__()
        self.fc = Linear(d_in, d_out, generator=generator)
        self.norm = LayerNorm(d_out)

    def forward(self, x):
        return gelu(self.norm(self.fc(x)))


def backward(loss: torch.Tensor, params: nn.Module | Iterable[torch.Tensor]) -> None:
    """Populate ``.grad`` of every parameter; unreachable ones get zeros."""
    if loss.numel() != 1:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    tensors = list(params.parameters()) if isinstance(params, nn.Module) else list(params)
    for p in tensors:
        p.grad = None
    loss.reshape(()).backward()
    for p in tensors:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


# -- finite-difference verification -----------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    coords_checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.errors.items() if not err <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def merge(self, other: "GradCheckReport", prefix: str = "") -> None:
        for name, err in other.errors.items():
            self.errors[prefix + name] = err
        self.coords_checked += other.coords_checked


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_coords: int = 64,
    seed: int = 0,
    window: int | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` rebuilds the graph from the current parameter values and
    returns a scalar. Tensors with more than ``max_coords`` entries are
    sub-sampled: at random by default, or, with ``window=w``, as the w-th
    block of ``max_coords`` entries of a fixed permutation, so consecutive
    windows cover disjoint coordinates. Parameters must be float64.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise ValueError(f"grad_check needs float64 parameters, {name} is {p.dtype}")
    tensors = list(params.values())
    backward(loss_fn(), tensors)
    analytic = {name: p.grad.detach().clone() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            n = flat.numel()
            if n <= max_coords:
                coords = np.arange(n)
            elif window is None:
                coords = rng.choice(n, max_coords, replace=False)
            else:
                perm = np.random.default_rng(n).permutation(n)
                coords = np.take(perm, np.arange(max_coords) + window * max_coords, mode="wrap")
            worst = 0.0
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * step)
                worst = max(worst, relative_error(analytic[name].view(-1)[i].item(), numeric))
            report.errors[name] = worst
            report.coords_checked += len(coords)
    return report
