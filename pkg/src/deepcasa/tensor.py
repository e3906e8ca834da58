"""Differentiable array primitives in channels-last layout.

Feature maps are laid out ``[T, F, C]`` (or ``[B, T, F, C]`` with a leading
batch axis) and sequences ``[T, C]`` / ``[B, T, C]``.  Reverse-mode
differentiation is delegated to torch autograd; the channels-last layout maps
directly onto torch's ``channels_last`` memory format so no copies are made
around convolutions.

``grad_check`` is an independent central-difference oracle used to verify
every op and both models.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError, ParameterError, UsageError

LN_EPS = 1e-5


def _as_batched(x: torch.Tensor, spatial: int) -> tuple[torch.Tensor, bool]:
    """Add a batch axis if ``x`` has exactly ``spatial + 1`` dims."""
    if x.dim() == spatial + 1:
        return x.unsqueeze(0), True
    if x.dim() == spatial + 2:
        return x, False
    raise DimensionError(
        f"expected {spatial + 1} or {spatial + 2} dims, got shape {tuple(x.shape)}")


def _check_channels(x: torch.Tensor, expected: int, what: str = "kernel") -> None:
    if x.shape[-1] != expected:
        raise DimensionError(
            f"channel axis: input has {x.shape[-1]} channels, {what} expects {expected}")


def conv2d(x, kernel, bias=None, stride=(1, 1), padding="same"):
    """2-D cross-correlation.

    x: [..., T, F, Cin]; kernel: [kT, kF, Cin, Cout]; bias: [Cout] or None.
    ``padding`` is ``"same"`` (stride 1 only) or ``"valid"``.
    """
    xb, squeezed = _as_batched(x, 2)
    kt, kf, cin, cout = kernel.shape
    _check_channels(xb, cin)
    if padding == "same":
        if tuple(stride) != (1, 1):
            raise ParameterError("same padding requires stride 1")
        pt, pf = kt - 1, kf - 1
        xb = F.pad(xb, (0, 0, pf // 2, pf - pf // 2, pt // 2, pt - pt // 2))
    elif padding != "valid":
        raise ParameterError(f"unknown padding {padding!r}")
    for axis, name, k in ((1, "time", kt), (2, "frequency", kf)):
        if xb.shape[axis] < k:
            raise DimensionError(
                f"{name} axis: padded input length {xb.shape[axis]} < kernel size {k}")
    y = F.conv2d(xb.permute(0, 3, 1, 2), kernel.permute(3, 2, 0, 1), bias,
                 stride=tuple(stride))
    y = y.permute(0, 2, 3, 1)
    return y[0] if squeezed else y


def transpose_conv2d(x, kernel, bias=None, stride=(2, 2)):
    """Strided transpose convolution, the adjoint of ``conv2d`` with the same kernel.

    kernel is [kT, kF, Cout, Cin] where Cin is the channel count of ``x``:
    ``conv2d`` with this kernel maps Cout -> Cin, and this op maps back.
    """
    xb, squeezed = _as_batched(x, 2)
    kt, kf, cout, cin = kernel.shape
    _check_channels(xb, cin)
    if min(xb.shape[1], xb.shape[2]) <= 0 or min(stride) <= 0:
        raise DimensionError(f"non-positive dims: input {tuple(xb.shape)}, stride {stride}")
    y = F.conv_transpose2d(xb.permute(0, 3, 1, 2), kernel.permute(3, 2, 0, 1), bias,
                           stride=tuple(stride))
    y = y.permute(0, 2, 3, 1)
    return y[0] if squeezed else y


def depthwise_conv(x, kernel, dilation=1, mode="1d-dilated", bias=None):
    """Per-channel convolution.

    ``"2d-stride2"``: x [..., T, F, C], kernel [2, 2, C], valid, stride 2.
    ``"1d-dilated"``: x [..., T, C], kernel [3, C], same padding, taps at
    offsets ``-d, 0, +d``.
    """
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if mode == "2d-stride2":
        xb, squeezed = _as_batched(x, 2)
        c = kernel.shape[-1]
        _check_channels(xb, c)
        if xb.shape[1] < 2 or xb.shape[2] < 2:
            raise DimensionError(f"input {tuple(xb.shape)} too small for 2x2 stride-2 kernel")
        w = kernel.permute(2, 0, 1).unsqueeze(1)  # [C, 1, 2, 2]
        y = F.conv2d(xb.permute(0, 3, 1, 2), w, bias, stride=2, groups=c)
        y = y.permute(0, 2, 3, 1)
    elif mode == "1d-dilated":
        xb, squeezed = _as_batched(x, 1)
        k, c = kernel.shape
        _check_channels(xb, c)
        if k != 3:
            raise DimensionError(f"temporal kernel size must be 3, got {k}")
        w = kernel.t().unsqueeze(1)  # [C, 1, 3]
        y = F.conv1d(xb.transpose(1, 2), w, bias, padding=dilation,
                     dilation=dilation, groups=c)
        y = y.transpose(1, 2)
    else:
        raise ParameterError(f"unknown depthwise mode {mode!r}")
    return y[0] if squeezed else y


def layer_norm(x, gain, bias, norm_dims=2):
    """Normalise over the last ``norm_dims`` axes, then scale/shift the last axis."""
    if norm_dims < 1 or norm_dims >= x.dim() + 1:
        raise DimensionError(f"cannot normalise {norm_dims} axes of shape {tuple(x.shape)}")
    _check_channels(x, gain.shape[-1], "gain")
    shape = x.shape[-norm_dims:]
    return F.layer_norm(x, shape, gain.expand(shape), bias.expand(shape), eps=LN_EPS)


def elu(x):
    return F.elu(x)


def prelu(x, alpha):
    """PReLU with one slope per channel (last axis)."""
    _check_channels(x, alpha.shape[-1], "alpha")
    return torch.where(x > 0, x, alpha * x)


def activation(x, kind="linear", alpha=None):
    if kind == "elu":
        return elu(x)
    if kind == "prelu":
        return prelu(x, alpha)
    if kind == "linear":
        return x
    raise ParameterError(f"unknown activation {kind!r}")


def concat_channels(*xs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat: leading shape {tuple(x.shape[:-1])} != {tuple(lead)}")
    return torch.cat(xs, dim=-1)


def transpose_axes(x, a, b):
    return x.transpose(a, b)


def reshape(x, shape):
    shape = tuple(shape)
    if math.prod(s for s in shape if s != -1) == 0 or (
            -1 not in shape and math.prod(shape) != x.numel()):
        raise DimensionError(f"cannot reshape {tuple(x.shape)} to {shape}")
    return x.reshape(shape)


def slice_axis(x, axis, start, stop):
    n = x.shape[axis]
    if not (0 <= start <= stop <= n):
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of length {n}")
    return x.narrow(axis, start, stop - start)


def backward(loss: torch.Tensor) -> None:
    """Accumulate gradients of a scalar loss into every leaf that requires grad."""
    if loss.numel() != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


def grad_check(fn: Callable[[], torch.Tensor], inputs: Sequence[torch.Tensor],
               eps: float = 1e-5) -> float:
    """Compare autograd gradients with central differences.

    ``fn`` evaluates a scalar from ``inputs`` (float64 leaves, typically
    parameters).  For each input tensor the error is
    ``max|analytic - numeric| / max(max|numeric|, 1e-8)``; the maximum over
    inputs is returned.
    """
    for p in inputs:
        if p.dtype != torch.float64:
            raise UsageError("grad_check runs in 64-bit mode only")
        p.grad = None
    backward(fn())
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in inputs]
    worst = 0.0
    with torch.no_grad():
        for p, ga in zip(inputs, analytic):
            flat = p.view(-1)
            gn = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                gn[i] = (fp - fm) / (2 * eps)
            err = (ga.view(-1) - gn).abs().max().item() / max(gn.abs().max().item(), 1e-8)
            worst = max(worst, err)
    return worst


# -- module wrappers -------------------------------------------------------

def _kaiming_uniform(shape, fan_in, generator=None):
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=generator) * 2 - 1) * bound


class Conv2d(nn.Module):
    def __init__(self, cin, cout, kernel=(3, 3), padding="same", bias=True):
        super().__init__()
        kt, kf = kernel
        self.padding = padding
        self.weight = nn.Parameter(_kaiming_uniform((kt, kf, cin, cout), kt * kf * cin))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, padding=self.padding)


class Conv1x1(nn.Module):
    """Pointwise projection over the last axis (1x1 conv in any layout)."""

    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.weight = nn.Parameter(_kaiming_uniform((cin, cout), cin))
        self.bias = nn.Parameter(torch.zeros(cout)) if bias else None

    def forward(self, x):
        _check_channels(x, self.weight.shape[0])
        return F.linear(x, self.weight.t(), self.bias)


class LayerNorm(nn.Module):
    def __init__(self, channels, norm_dims=2):
        super().__init__()
        self.norm_dims = norm_dims
        self.gain = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.norm_dims)


class PReLU(nn.Module):
    def __init__(self, channels, init=0.25):
        super().__init__()
        self.alpha = nn.Parameter(torch.full((channels,), init))

    def forward(self, x):
        return prelu(x, self.alpha)


def orthogonal_(t: torch.Tensor, rows: int) -> torch.Tensor:
    """Fill ``t`` from a random orthogonal matrix of shape [rows, numel/rows].

    The result is rescaled so each row has unit expected norm.
    """
    cols = t.numel() // rows
    m = torch.empty(rows, cols)
    nn.init.orthogonal_(m)
    m *= math.sqrt(max(rows, cols) / cols)
    with torch.no_grad():
        t.copy_(m.reshape(t.shape))
    return t
