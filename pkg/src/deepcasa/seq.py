"""Sequential grouping: a TCN maps frame-level stage-1 outputs to unit-length
embeddings, trained with the LD-weighted deep-clustering objective; K-means
on the embeddings decides, frame by frame, whether the two outputs swap."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import objectives as ob
from . import tensor as tc
from .errors import NumericError, ParameterError
from .simul import DenseBlock, DenseUNet, estimate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TcnConfig:
    m: int = 7            # dilated blocks per stack, dilations 1..2^(m-1)
    repeats: int = 3
    b: int = 256          # bottleneck channels
    h: int = 512          # hidden channels
    d: int = 40           # embedding size
    keep_prob: float = 0.7
    pre_k: int = 16
    pre_layers: int = 4
    n_bins: int = 129
    in_channels: int = 9

    @property
    def n_blocks(self) -> int:
        return self.m * self.repeats

    def dilations(self) -> list[int]:
        return [2 ** i for _ in range(self.repeats) for i in range(self.m)]

    @classmethod
    def preset(cls, name: str, **overrides) -> "TcnConfig":
        presets = {
            "paper": {},
            "desk": dict(b=128, h=256, repeats=2),
            "micro": dict(b=8, h=16, m=2, repeats=1, d=4, pre_k=4, pre_layers=2, n_bins=5),
        }
        return cls(**{**presets[name], **overrides})


def receptive_field(cfg: TcnConfig) -> int:
    """Frames seen by one output of the dilated stacks (kernel 3)."""
    return 1 + 2 * (2 ** cfg.m - 1) * cfg.repeats


def build_input_stack(Y, est):
    """Planes (Y.re, Y.im, |Y|, X1.re, X1.im, |X1|, X2.re, X2.im, |X2|) -> [..., T, F, 9].

    Y: complex [..., T, F]; est: complex [..., 2, T, F].
    """
    if est.shape[-2:] != Y.shape[-2:] or est.shape[:-3] != Y.shape[:-2]:
        raise tc.DimensionError(
            f"estimates {tuple(est.shape)} do not align with mixture {tuple(Y.shape)}")
    planes = []
    for s in (Y, est[..., 0, :, :], est[..., 1, :, :]):
        planes += [s.real, s.imag, s.abs()]
    return torch.stack(planes, dim=-1)


def drop_dilation_masks(cfg: TcnConfig, generator: torch.Generator | None = None,
                        p: float | None = None) -> torch.Tensor:
    """Per-block tap masks ``[m_-d / p, 1, m_+d / p]`` with ``m ~ Bernoulli(p)``.

    Returns [n_blocks, 3].
    """
    p = cfg.keep_prob if p is None else p
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"keep rate must be in (0, 1], got {p}")
    side = torch.bernoulli(torch.full((cfg.n_blocks, 2), p, dtype=torch.float64),
                           generator=generator) / p
    return torch.stack([side[:, 0], torch.ones(cfg.n_blocks, dtype=torch.float64),
                        side[:, 1]], dim=1)


class DilatedBlock(nn.Module):
    def __init__(self, b: int, h: int, dilation: int):
        super().__init__()
        self.dilation = dilation
        self.expand = tc.Conv1x1(b, h)
        self.act1 = tc.PReLU(h)
        self.norm1 = tc.LayerNorm(h, norm_dims=1)
        self.kernel = nn.Parameter(tc._kaiming_uniform((3, h), 3))
        self.kernel_bias = nn.Parameter(torch.zeros(h))
        self.act2 = tc.PReLU(h)
        self.norm2 = tc.LayerNorm(h, norm_dims=1)
        self.project = tc.Conv1x1(h, b)

    def forward(self, x, tap_mask=None):
        z = self.norm1(self.act1(self.expand(x)))
        k = self.kernel if tap_mask is None else self.kernel * tap_mask.to(self.kernel.dtype)[:, None]
        z = tc.depthwise_conv(z, k, self.dilation, "1d-dilated", self.kernel_bias)
        z = self.norm2(self.act2(z))
        return x + self.project(z)


class TCN(nn.Module):
    def __init__(self, cfg: TcnConfig):
        super().__init__()
        self.cfg = cfg
        self.pre = DenseBlock(cfg.in_channels, cfg.pre_k, cfg.pre_layers, kernel=(1, 3),
                              freq_mapping=False, last_valid=False)
        self.bottleneck = tc.Conv1x1(cfg.n_bins * cfg.pre_k, cfg.b)
        self.bottleneck_norm = tc.LayerNorm(cfg.b, norm_dims=1)
        self.blocks = nn.ModuleList([DilatedBlock(cfg.b, cfg.h, d) for d in cfg.dilations()])
        self.embed = tc.Conv1x1(cfg.b, cfg.d)

    def forward(self, x, drop_masks=None):
        """x: [..., T, F, 9] -> unit-norm embeddings [..., T, D]."""
        if drop_masks is not None and not self.training:
            raise ParameterError("drop masks are only used in training mode")
        z = self.pre(x)
        z = tc.reshape(z, (*z.shape[:-2], z.shape[-2] * z.shape[-1]))
        z = self.bottleneck_norm(self.bottleneck(z))
        for i, blk in enumerate(self.blocks):
            z = blk(z, None if drop_masks is None else drop_masks[i])
            if not torch.isfinite(z).all():
                raise NumericError(f"non-finite activations after dilated block {i}")
        v = self.embed(z)
        return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


# -- targets and losses ------------------------------------------------------

def ld_weights(table):
    """w(t) = |LD(t)| / sum |LD| from a two-permutation loss table [..., T, 2].

    Falls back to uniform weights when every LD is zero.
    """
    ld = (table[..., 0] - table[..., 1]).abs()
    total = ld.sum(dim=-1, keepdim=True)
    uniform = torch.full_like(ld, 1.0 / ld.shape[-1])
    return torch.where(total > 0, ld / torch.where(total > 0, total, 1.0), uniform)


def dc_loss(V, A):
    """||V V^T - A A^T||_F^2 via the D x D / 2 x 2 expansion.  V [..., T, D], A [..., T, 2]."""
    vtv = V.transpose(-1, -2) @ V
    vta = V.transpose(-1, -2) @ A
    ata = A.transpose(-1, -2) @ A
    return (vtv ** 2).sum((-1, -2)) - 2 * (vta ** 2).sum((-1, -2)) + (ata ** 2).sum((-1, -2))


def weighted_dc_loss(V, A, w):
    """||W^1/2 (V V^T - A A^T) W^1/2||_F^2 with W = diag(w), w [..., T]."""
    if torch.any(w < 0):
        raise ParameterError("weights must be non-negative")
    s = w.sqrt().unsqueeze(-1)
    return dc_loss(V * s, A.to(V.dtype) * s)


# -- clustering ---------------------------------------------------------------

@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia: float


def _kmeans_pp(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(V, k: int = 2, seed: int = 0, n_init: int = 10, max_iter: int = 100,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts."""
    X = np.asarray(V, dtype=np.float64)
    if len(X) < k:
        raise ValueError(f"need at least {k} points, got {len(X)}")
    if len(np.unique(X, axis=0)) < k:
        warnings.warn(f"fewer than {k} distinct points; returning a single cluster")
        c = X.mean(axis=0, keepdims=True)
        return KMeansResult(np.zeros(len(X), dtype=int), c, float(np.sum((X - c) ** 2)))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp(X, k, rng)
        for _ in range(max_iter):
            d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
            labels = d2.argmin(1)
            new = centers.copy()
            for j in range(k):
                members = X[labels == j]
                if len(members):
                    new[j] = members.mean(0)
            shift = np.max(np.linalg.norm(new - centers, axis=1))
            centers = new
            if shift <= tol:
                break
        d2 = ((X[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = d2.argmin(1)
        inertia = float(d2[np.arange(len(X)), labels].sum())
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, centers, inertia)
    return best


def organize_outputs(est, labels):
    """Swap the two estimates in frames labelled 1.  est [..., 2, T, F]; labels [..., T]."""
    labels = torch.as_tensor(labels, device=est.device).long()
    return ob.apply_permutation(est, labels, 2)


def kmeans_labels(tcn: TCN, Y, est, seed: int = 0) -> torch.Tensor:
    """Cluster inference-mode embeddings of each utterance; returns [..., T] labels."""
    was_training = tcn.training
    tcn.eval()
    with torch.no_grad():
        V = tcn(build_input_stack(Y, est.detach()).to(_param_dtype(tcn)))
    tcn.train(was_training)
    flat = V.reshape(-1, V.shape[-2], V.shape[-1]).numpy()
    labs = np.stack([kmeans(v, 2, seed).labels for v in flat])
    return torch.from_numpy(labs.reshape(V.shape[:-1]))


def _param_dtype(module):
    return next(module.parameters()).dtype


# -- training -----------------------------------------------------------------

def _stage1_cache(stage1: DenseUNet, corpus, batch_size=8):
    """Frozen stage-1 estimates for every utterance of ``corpus``."""
    ests, Ys, Xs = [], [], []
    stage1.eval()
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            idx = list(range(i, min(len(corpus), i + batch_size)))
            _, _, Y, X = corpus.batch(idx)
            ests.append(estimate(stage1, Y))
            Ys.append(Y)
            Xs.append(X)
    return torch.cat(Ys), torch.cat(ests), torch.cat(Xs)


def sequential_loss(tcn: TCN, Y, est, X, drop_masks=None):
    """Weighted DC loss averaged over a batch; labels and weights come from the
    per-frame optimal assignment of ``est`` against ``X``."""
    _, choice, table = ob.organize_frames(est, X)
    A = ob.assignment_labels(choice)
    w = ld_weights(table)
    V = tcn(build_input_stack(Y, est).to(_param_dtype(tcn)), drop_masks)
    return weighted_dc_loss(V, A, w.to(V.dtype)).mean()


def _crop_frames(n_frames, crop, rng):
    if crop is None or crop >= n_frames:
        return slice(None)
    s = int(rng.integers(0, n_frames - crop + 1))
    return slice(s, s + crop)


def train_sequential(train, valid, stage1: DenseUNet, tcn_cfg: TcnConfig | None = None,
                     train_cfg=None, out_dir=None, crop_frames: int | None = None):
    """Train a TCN on top of a frozen stage-1 model.  Returns ``(tcn, metrics_log)``."""
    from .trainer import TrainConfig, config_meta, fit

    train_cfg = train_cfg or TrainConfig(initial_lr=2.5e-4)
    tcn_cfg = tcn_cfg or TcnConfig.preset("desk")
    torch.manual_seed(train_cfg.seed)
    tcn = TCN(tcn_cfg)
    for p in stage1.parameters():
        p.requires_grad_(False)
    tr = _stage1_cache(stage1, train)
    va = _stage1_cache(stage1, valid)
    rng = np.random.default_rng(train_cfg.seed + 1)
    gen = torch.Generator().manual_seed(train_cfg.seed + 2)

    def step_loss(idx):
        sl = _crop_frames(tr[0].shape[-2], crop_frames, rng)
        Y, est, X = (t[idx][..., sl, :] for t in tr)
        masks = drop_dilation_masks(tcn_cfg, gen)
        return sequential_loss(tcn, Y, est, X, masks)

    def valid_loss():
        with torch.no_grad():
            total = 0.0
            for i in range(0, len(valid), train_cfg.batch_size):
                sl = slice(i, min(len(valid), i + train_cfg.batch_size))
                total += float(sequential_loss(tcn, va[0][sl], va[1][sl], va[2][sl])) * (
                    sl.stop - sl.start)
        return total / len(valid)

    meta = config_meta(kind="seq", tcn=tcn_cfg, train=train_cfg)
    mlog = fit({"seq": tcn}, step_loss, valid_loss, len(train), train_cfg, out_dir, meta)
    return tcn, mlog


def joint_loss(stage1: DenseUNet, tcn: TCN, Y, X, x_ref, stft_cfg, drop_masks=None,
               seed: int = 0, labels=None):
    """Returns ``(stage1_loss, stage2_loss)`` for one joint step.

    K-means labels (computed from inference-mode embeddings unless given) are
    constants for the stage-1 SNR objective; the best whole-utterance stream
    permutation is scored since cluster identity is arbitrary.
    """
    est = estimate(stage1, Y)
    if labels is None:
        labels = kmeans_labels(tcn, Y, est, seed)
    streams = organize_outputs(est, labels)
    j, _ = ob.upit_snr(streams, x_ref, stft_cfg)
    loss2 = sequential_loss(tcn, Y, est.detach(), X, drop_masks)
    return -j.mean(), loss2


def joint_finetune(train, valid, stage1: DenseUNet, tcn: TCN, train_cfg=None,
                   lrs: tuple[float, float] = (1e-4, 2.5e-4), out_dir=None,
                   crop: int | None = None):
    """Fine-tune both stages together at 1/8 of their initial learning rates.

    Validation (model selection) uses the K-means-organised SNR objective.
    """
    from .trainer import TrainConfig, config_meta, fit

    train_cfg = train_cfg or TrainConfig(max_epochs=40)
    for p in stage1.parameters():
        p.requires_grad_(True)
    rng = np.random.default_rng(train_cfg.seed + 1)
    gen = torch.Generator().manual_seed(train_cfg.seed + 2)
    stft_cfg = train.cfg

    def step_loss(idx):
        _, x, Y, X = train.batch(idx, crop, rng)
        l1, l2 = joint_loss(stage1, tcn, Y, X, x, stft_cfg,
                            drop_dilation_masks(tcn.cfg, gen), train_cfg.seed)
        return l1 + l2

    def valid_loss():
        total = 0.0
        with torch.no_grad():
            for i in range(0, len(valid), train_cfg.batch_size):
                idx = list(range(i, min(len(valid), i + train_cfg.batch_size)))
                _, x, Y, X = valid.batch(idx)
                est = estimate(stage1, Y)
                streams = organize_outputs(est, kmeans_labels(tcn, Y, est, train_cfg.seed))
                j, _ = ob.upit_snr(streams, x, stft_cfg)
                total -= float(j.sum())
        return total / len(valid)

    meta = config_meta(kind="joint", model=stage1.cfg, tcn=tcn.cfg, train=train_cfg)
    module_lrs = {"simul": lrs[0] / 8, "seq": lrs[1] / 8}
    mlog = fit({"simul": stage1, "seq": tcn}, step_loss, valid_loss, len(train), train_cfg,
               out_dir, meta, module_lrs=module_lrs)
    return stage1, tcn, mlog


def load_tcn(path) -> TCN:
    from .trainer import load_checkpoint, load_into
    tensors, meta = load_checkpoint(path)
    tcn = TCN(TcnConfig(**meta["tcn"]))
    load_into(tcn, tensors, "seq.")
    tcn.eval()
    return tcn
