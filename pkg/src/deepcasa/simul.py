"""Dense-UNet for frame-level (simultaneous) grouping.

The network alternates densely connected CNN blocks with 2x2 strided
depthwise downsampling and 2x2 transpose-conv upsampling, with channel-concat
skips between matching encoder/decoder levels.  The middle layer of every
dense block is a frequency-mapping layer (a frequency-wise fully connected
layer), which is why the frequency size of every level is fixed at
construction time through :func:`compute_padding`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensor as tc
from .errors import ConsistencyError, NumericError, SizingError


@dataclass(frozen=True)
class DenseUNetConfig:
    k: int = 64
    n_layers: int = 5
    n_levels: int = 4
    in_channels: int = 2
    complex_masks: bool = True
    n_bins: int = 129
    n_src: int = 2
    keep_prob: float = 0.9
    freq_mapping: bool = True
    last_valid: bool = True

    @property
    def n_blocks(self) -> int:
        return 2 * self.n_levels + 1

    @classmethod
    def preset(cls, name: str, **overrides) -> "DenseUNetConfig":
        presets = {
            "paper": dict(k=64, n_layers=5, n_levels=4),
            "desk": dict(k=16, n_layers=3, n_levels=2),
            "micro": dict(k=4, n_layers=3, n_levels=1, n_bins=6),
        }
        return cls(**{**presets[name], **overrides})


@dataclass(frozen=True)
class AxisPlan:
    size: int
    padded: int
    pad_before: int
    pad_after: int
    crop_start: int
    block_sizes: tuple[int, ...]  # input size of each dense block
    out_size: int


@dataclass(frozen=True)
class PaddingPlan:
    time: AxisPlan
    freq: AxisPlan
    shapes: tuple[tuple[str, int, int], ...] = field(default=())


def _propagate(p: int, levels: int, shrink: int):
    """Symbolic sizes through the U; None when some layer is ill-shaped."""
    sizes = []
    skips = []
    s = p
    for _ in range(levels):
        sizes.append(s)
        s -= shrink
        if s < 2 or s % 2:
            return None
        skips.append(s)
        s //= 2
    sizes.append(s)
    s -= shrink
    if s < 1:
        return None
    for lvl in reversed(range(levels)):
        s *= 2
        if skips[lvl] < s or (skips[lvl] - s) % 2:
            return None
        sizes.append(s)
        s -= shrink
        if s < 1:
            return None
    return sizes, s


def _plan_axis(n: int, levels: int, shrink: int) -> AxisPlan:
    if n < 1:
        raise SizingError(f"axis length must be positive, got {n}")
    for p in range(n, n + 8 * (2 ** levels) * (shrink + 2) + 8):
        res = _propagate(p, levels, shrink)
        if res is None:
            continue
        sizes, out = res
        if out < n:
            continue
        before = (p - n) // 2
        crop = before - (p - out) // 2
        if crop < 0 or crop + n > out:
            continue
        return AxisPlan(n, p, before, p - n - before, crop, tuple(sizes), out)
    raise SizingError(f"no padding makes a {levels}-level network well-shaped for length {n}")


def compute_padding(cfg: DenseUNetConfig, n_frames: int) -> PaddingPlan:
    """Minimal zero pre-padding of (T, F) so every layer is well-shaped.

    Padding is split evenly with the odd sample on the trailing side.
    """
    shrink = 2 if cfg.last_valid else 0
    tp = _plan_axis(n_frames, cfg.n_levels, shrink)
    fp = _plan_axis(cfg.n_bins, cfg.n_levels, shrink)
    names = [f"enc{i}" for i in range(cfg.n_levels)] + ["mid"] + \
            [f"dec{i}" for i in reversed(range(cfg.n_levels))]
    shapes = tuple((nm, t, f) for nm, t, f in zip(names, tp.block_sizes, fp.block_sizes))
    return PaddingPlan(tp, fp, shapes)


class FreqMapping(nn.Module):
    """1x1 channel reduction, then a fully connected layer across frequency.

    [T, F, K'] -> conv1x1 -> ELU -> LN -> transpose to [T, K, F] -> F x F
    projection -> ELU -> LN -> transpose back to [T, F, K].
    """

    def __init__(self, cin: int, k: int, n_freq: int):
        super().__init__()
        self.n_freq = n_freq
        self.reduce = tc.Conv1x1(cin, k)
        self.norm1 = tc.LayerNorm(k)
        self.fmap = tc.Conv1x1(n_freq, n_freq)
        self.norm2 = tc.LayerNorm(n_freq)

    def forward(self, x):
        if x.shape[-2] != self.n_freq:
            raise tc.DimensionError(
                f"frequency axis: got {x.shape[-2]} bins, mapping layer learned {self.n_freq}")
        z = self.norm1(tc.elu(self.reduce(x)))
        z = tc.transpose_axes(z, -1, -2)
        z = self.norm2(tc.elu(self.fmap(z)))
        return tc.transpose_axes(z, -1, -2)


class ConvLayer(nn.Module):
    """conv -> ELU -> layer norm."""

    def __init__(self, cin, cout, kernel=(3, 3), padding="same"):
        super().__init__()
        self.conv = tc.Conv2d(cin, cout, kernel, padding)
        self.norm = tc.LayerNorm(cout)

    def forward(self, x):
        return self.norm(tc.elu(self.conv(x)))


class DenseBlock(nn.Module):
    """Layer ``l`` sees the concatenation of all earlier outputs and the input.

    Returns the last layer's output only.
    """

    def __init__(self, cin, k, n_layers, kernel=(3, 3), n_freq=None,
                 freq_mapping=True, last_valid=True):
        super().__init__()
        self.layers = nn.ModuleList()
        mid = math.ceil(n_layers / 2)
        for l in range(1, n_layers + 1):
            c = cin + (l - 1) * k
            if freq_mapping and l == mid:
                self.layers.append(FreqMapping(c, k, n_freq))
            else:
                pad = "valid" if (last_valid and l == n_layers) else "same"
                self.layers.append(ConvLayer(c, k, kernel, pad))

    def layer_in_channels(self):
        return [layer.reduce.weight.shape[0] if isinstance(layer, FreqMapping)
                else layer.conv.weight.shape[2] for layer in self.layers]

    def forward(self, z0):
        feats = [z0]
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else tc.concat_channels(*reversed(feats))
            feats.append(layer(inp))
        return feats[-1]


def _channel_dropout(x, keep, training):
    if not training or keep >= 1.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.dim() - 2) + (x.shape[-1],)
    mask = torch.bernoulli(torch.full(shape, keep, dtype=x.dtype)) / keep
    return x * mask


class DenseUNet(nn.Module):
    def __init__(self, cfg: DenseUNetConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.k
        fplan = _plan_axis(cfg.n_bins, cfg.n_levels, 2 if cfg.last_valid else 0)
        fsizes = fplan.block_sizes

        def block(cin, i):
            return DenseBlock(cin, k, cfg.n_layers, n_freq=fsizes[i],
                              freq_mapping=cfg.freq_mapping, last_valid=cfg.last_valid)

        self.encoders = nn.ModuleList(
            [block(cfg.in_channels if i == 0 else k, i) for i in range(cfg.n_levels)])
        self.down = nn.ParameterList()
        self.down_bias = nn.ParameterList()
        for _ in range(cfg.n_levels):
            w = torch.empty(k, 4)
            tc.orthogonal_(w, k)
            self.down.append(nn.Parameter(w.t().reshape(2, 2, k).contiguous()))
            self.down_bias.append(nn.Parameter(torch.zeros(k)))
        self.middle = block(k, cfg.n_levels)
        self.up = nn.ParameterList()
        self.up_bias = nn.ParameterList()
        self.decoders = nn.ModuleList()
        for j in range(cfg.n_levels):
            w = torch.empty(k, 4 * k)  # rows: input channel of the transpose conv
            tc.orthogonal_(w, k)
            self.up.append(nn.Parameter(w.reshape(k, 2, 2, k).permute(1, 2, 3, 0).contiguous()))
            self.up_bias.append(nn.Parameter(torch.zeros(k)))
            self.decoders.append(block(2 * k, cfg.n_levels + 1 + j))
        self.reorg = ConvLayer(k, k, kernel=(1, 1))
        planes = 2 if cfg.complex_masks else 1
        self.heads = nn.ModuleList([tc.Conv1x1(k, planes) for _ in range(cfg.n_src)])
        self._plans: dict[int, PaddingPlan] = {}

    def plan(self, n_frames: int) -> PaddingPlan:
        if n_frames not in self._plans:
            self._plans[n_frames] = compute_padding(self.cfg, n_frames)
        return self._plans[n_frames]

    def _check(self, z, name, t, f):
        if z.shape[-3] != t or z.shape[-2] != f:
            raise ConsistencyError(f"{name}: shape {tuple(z.shape[-3:-1])} != planned {(t, f)}")
        if not torch.isfinite(z).all():
            raise NumericError(f"non-finite activations after {name}")

    def forward(self, x):
        """x: [B, T, F, Cin] input planes.  Returns masks [B, C, T, F]
        (complex when ``cfg.complex_masks``, else real)."""
        cfg = self.cfg
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        t_in, f_in = x.shape[1], x.shape[2]
        if f_in != cfg.n_bins:
            raise tc.DimensionError(f"frequency axis: got {f_in} bins, model expects {cfg.n_bins}")
        plan = self.plan(t_in)
        tp, fp = plan.time, plan.freq
        z = F.pad(x, (0, 0, fp.pad_before, fp.pad_after, tp.pad_before, tp.pad_after))
        shapes = iter(plan.shapes)

        skips = []
        for i, enc in enumerate(self.encoders):
            name, t, f = next(shapes)
            self._check(z, name, t, f)
            z = _channel_dropout(enc(z), cfg.keep_prob, self.training)
            skips.append(z)
            z = tc.depthwise_conv(z, self.down[i], mode="2d-stride2", bias=self.down_bias[i])
        name, t, f = next(shapes)
        self._check(z, name, t, f)
        z = _channel_dropout(self.middle(z), cfg.keep_prob, self.training)
        for j, dec in enumerate(self.decoders):
            z = tc.transpose_conv2d(z, self.up[j], self.up_bias[j])
            skip = skips[cfg.n_levels - 1 - j]
            ot = (skip.shape[1] - z.shape[1]) // 2
            of = (skip.shape[2] - z.shape[2]) // 2
            skip = skip[:, ot:ot + z.shape[1], of:of + z.shape[2]]
            z = tc.concat_channels(z, skip)
            name, t, f = next(shapes)
            self._check(z, name, t, f)
            z = _channel_dropout(dec(z), cfg.keep_prob, self.training)
        self._check(z, "output", tp.out_size, fp.out_size)
        z = z[:, tp.crop_start:tp.crop_start + t_in, fp.crop_start:fp.crop_start + f_in]
        z = self.reorg(z)
        outs = []
        for head in self.heads:
            h = head(z)
            if cfg.complex_masks:
                outs.append(torch.complex(h[..., 0], h[..., 1]))
            else:
                outs.append(tc.elu(h[..., 0]))
        masks = torch.stack(outs, dim=1)
        return masks[0] if squeeze else masks


def model_input(Y, complex_input: bool = True):
    """Network input planes from a mixture spectrogram [..., T, F]."""
    if complex_input:
        return torch.stack([Y.real, Y.imag], dim=-1)
    return Y.abs().unsqueeze(-1)


def apply_complex_mask(masks, Y):
    """X_hat_c = cRM_c * Y (pointwise complex product); masks [..., C, T, F]."""
    return masks * Y.unsqueeze(-3)


def estimate(model: DenseUNet, Y):
    """Run the model on mixture spectra and return complex estimates [..., C, T, F].

    Real (PSA) masks are applied to the mixture with its own phase.
    """
    masks = model(model_input(Y, model.cfg.in_channels == 2).to(Y.real.dtype))
    if not model.cfg.complex_masks:
        masks = masks.to(Y.dtype)
    return apply_complex_mask(masks, Y)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- training ---------------------------------------------------------------

OBJECTIVES = ("PSA", "CA", "SNR")
MODES = ("tPIT", "uPIT")


def config_for_objective(base: DenseUNetConfig, objective: str) -> DenseUNetConfig:
    """PSA uses magnitude input and ELU real masks; CA/SNR use re/im input and
    linear complex masks."""
    from dataclasses import replace
    if objective == "PSA":
        return replace(base, in_channels=1, complex_masks=False)
    return replace(base, in_channels=2, complex_masks=True)


def stage1_loss(model: DenseUNet, objective: str, mode: str, Y, X, x_ref, cfg):
    """Mean per-utterance loss of a batch (lower is better).

    PSA and CA losses are averaged over frames; SNR returns the negative
    SNR sum in dB.
    """
    from . import objectives as ob
    n_frames = Y.shape[-2]
    if objective == "SNR":
        est = estimate(model, Y)
        if mode == "tPIT":
            organized, _, _ = ob.organize_frames(est, X)
            j = ob.snr_objective(organized, x_ref, cfg)
        else:
            j, _ = ob.upit_snr(est, x_ref, cfg)
        return -j.mean()
    masks = model(model_input(Y, objective == "CA"))
    if objective == "PSA":
        table = ob.loss_table(ob.psa_frame_loss, 2, masks, Y, X)
    else:
        table = ob.loss_table(ob.ca_frame_loss, 2, masks, Y, X)
    if mode == "tPIT":
        loss, _ = ob.tpit_reduce(table)
    else:
        loss, _ = ob.upit_reduce(table.sum(dim=-2))
    return (loss / n_frames).mean()


def train_simultaneous(train, valid, objective: str = "SNR", mode: str = "tPIT",
                       model_cfg: DenseUNetConfig | None = None, train_cfg=None,
                       out_dir=None, crop: int | None = None, init=None):
    """Train a Dense-UNet on ``train``/``valid`` :class:`~deepcasa.corpus.Corpus` objects.

    ``crop`` limits training items to random windows of that many samples
    (validation always uses full utterances).  Returns ``(model, metrics_log)``.
    """
    import numpy as np
    from .trainer import TrainConfig, config_meta, fit

    if objective not in OBJECTIVES or mode not in MODES:
        raise ValueError(f"unknown objective/mode {objective}/{mode}")
    train_cfg = train_cfg or TrainConfig(initial_lr=1e-4)
    model_cfg = config_for_objective(model_cfg or DenseUNetConfig.preset("desk"), objective)
    torch.manual_seed(train_cfg.seed)
    model = init if init is not None else DenseUNet(model_cfg)
    rng = np.random.default_rng(train_cfg.seed + 1)
    stft_cfg = train.cfg

    def step_loss(idx):
        _, x, Y, X = train.batch(idx, crop, rng)
        return stage1_loss(model, objective, mode, Y, X, x, stft_cfg)

    def valid_loss():
        total = 0.0
        with torch.no_grad():
            for i in range(0, len(valid), train_cfg.batch_size):
                idx = list(range(i, min(len(valid), i + train_cfg.batch_size)))
                _, x, Y, X = valid.batch(idx)
                total += float(stage1_loss(model, objective, mode, Y, X, x, stft_cfg)) * len(idx)
        return total / len(valid)

    meta = config_meta(kind="simul", objective=objective, mode=mode, model=model_cfg,
                       train=train_cfg)
    mlog = fit({"simul": model}, step_loss, valid_loss, len(train), train_cfg, out_dir, meta)
    return model, mlog


def load_simul(path) -> DenseUNet:
    from .trainer import load_checkpoint, load_into
    tensors, meta = load_checkpoint(path)
    cfg = DenseUNetConfig(**meta["model"])
    model = DenseUNet(cfg)
    load_into(model, tensors, "simul.")
    model.eval()
    return model
