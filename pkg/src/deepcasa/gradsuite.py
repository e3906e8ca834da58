"""Finite-difference checks for every differentiable op and the micro models."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from . import objectives as ob
from . import tensor as tc
from .dsp import StftConfig, istft, stft
from .seq import TCN, TcnConfig, build_input_stack, drop_dilation_masks, weighted_dc_loss
from .simul import DenseUNet, DenseUNetConfig, model_input

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _leaf(*shape, gen, positive=False):
    t = torch.randn(*shape, generator=gen, dtype=torch.float64)
    if positive:
        t = t.abs() + 0.5
    return t.requires_grad_(True)


def _probe(out, gen):
    """Random linear functional, so every output element contributes."""
    w = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    return w


def op_cases(seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    x4 = _leaf(2, 5, 4, 3, gen=g)
    k = _leaf(3, 3, 3, 2, gen=g)
    b = _leaf(2, gen=g)
    kt = _leaf(2, 2, 2, 3, gen=g)
    x3 = _leaf(2, 9, 3, gen=g)
    kd = _leaf(3, 3, gen=g)
    kdw = _leaf(2, 2, 3, gen=g)
    gain = _leaf(3, gen=g, positive=True)
    bias = _leaf(3, gen=g)
    alpha = _leaf(3, gen=g)

    def lin(f, *inputs):
        w = _probe(f(), g)
        return (lambda: (f() * w).sum()), list(inputs)

    cases = {
        "conv2d": lin(lambda: tc.conv2d(x4, k, b), x4, k, b),
        "conv2d_valid": lin(lambda: tc.conv2d(x4, k, b, padding="valid"), x4, k, b),
        "transpose_conv2d": lin(lambda: tc.transpose_conv2d(x4, kt), x4, kt),
        "depthwise_conv_2d": lin(lambda: tc.depthwise_conv(x4, kdw, 1, "2d-stride2"), x4, kdw),
        "depthwise_conv_1d_dilated": lin(lambda: tc.depthwise_conv(x3, kd, 2), x3, kd),
        "layer_norm": lin(lambda: tc.layer_norm(x4, gain, bias, 2), x4, gain, bias),
        "layer_norm_1d": lin(lambda: tc.layer_norm(x3, gain, bias, 1), x3, gain, bias),
        "elu": lin(lambda: tc.elu(x4), x4),
        "prelu": lin(lambda: tc.prelu(x3, alpha), x3, alpha),
        "concat_channels": lin(lambda: tc.concat_channels(x4, x4 * 2), x4),
        "transpose_axes": lin(lambda: tc.transpose_axes(x4, 1, 2), x4),
        "reshape": lin(lambda: tc.reshape(x4, (2, 20, 3)), x4),
        "slice_axis": lin(lambda: tc.slice_axis(x4, 1, 1, 4), x4),
    }

    cfg = StftConfig(frame_len=16, hop=4)
    wav = _leaf(2, 40, gen=g)
    cases["stft"] = lin(lambda: torch.view_as_real(stft(wav, cfg)), wav)
    spec_re = _leaf(2, 11, 9, gen=g)
    spec_im = _leaf(2, 11, 9, gen=g)
    cases["istft"] = lin(lambda: istft(torch.complex(spec_re, spec_im), cfg, 40), spec_re, spec_im)

    Yr, Yi = _leaf(6, 5, gen=g), _leaf(6, 5, gen=g)
    Xs = torch.randn(2, 6, 5, dtype=torch.complex128, generator=g)
    masks = _leaf(2, 6, 5, gen=g)
    cm_re, cm_im = _leaf(2, 6, 5, gen=g), _leaf(2, 6, 5, gen=g)
    Y = lambda: torch.complex(Yr, Yi)
    cases["psa_frame_loss"] = (
        lambda: ob.psa_frame_loss(masks, Y().detach(), Xs, (1, 0)).sum(), [masks])
    cases["ca_frame_loss"] = (
        lambda: ob.ca_frame_loss(torch.complex(cm_re, cm_im), Y(), Xs, (0, 1)).sum(),
        [cm_re, cm_im, Yr, Yi])
    ref = torch.randn(2, 40, dtype=torch.float64, generator=g)
    s_re, s_im = _leaf(2, 11, 9, gen=g), _leaf(2, 11, 9, gen=g)
    cases["snr_objective"] = (
        lambda: ob.snr_objective(torch.complex(s_re, s_im), ref, cfg), [s_re, s_im])

    V = _leaf(7, 4, gen=g)
    A = torch.eye(2, dtype=torch.float64)[torch.randint(0, 2, (7,), generator=g)]
    w = torch.rand(7, generator=g, dtype=torch.float64)
    cases["weighted_dc_loss"] = (lambda: weighted_dc_loss(V, A, w / w.sum()), [V])
    return cases


def _jitter(module, gen, scale=0.1):
    # Zero-initialised biases make zero-padded frames constant, which puts
    # layer norm at its variance floor; checks run at a generic point instead.
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def model_cases(seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    unet = _jitter(DenseUNet(DenseUNetConfig.preset("micro")).double().eval(), g)
    Y = torch.randn(1, 5, 6, dtype=torch.complex128, generator=g)
    unet_masks = lambda: torch.view_as_real(unet(model_input(Y)))
    w = _probe(unet_masks(), g)
    cases = {"micro_dense_unet": (lambda: (unet_masks() * w).sum(),
                                  list(unet.parameters()))}

    tcfg = TcnConfig.preset("micro")
    tcn = _jitter(TCN(tcfg).double().train(), g)
    Yt = torch.randn(6, 5, dtype=torch.complex128, generator=g)
    est = torch.randn(2, 6, 5, dtype=torch.complex128, generator=g)
    feats = build_input_stack(Yt, est)
    masks = drop_dilation_masks(tcfg, g)
    wv = _probe(tcn(feats, masks), g)
    cases["micro_tcn"] = (lambda: (tcn(feats, masks) * wv).sum(), list(tcn.parameters()))
    return cases


def run(seed: int = 0, include_models: bool = True) -> list[GradResult]:
    results = [GradResult(n, tc.grad_check(fn, inputs, eps=1e-6), OP_TOL)
               for n, (fn, inputs) in op_cases(seed).items()]
    if include_models:
        results += [GradResult(n, tc.grad_check(fn, inputs, eps=1e-6), MODEL_TOL)
                    for n, (fn, inputs) in model_cases(seed).items()]
    return results
