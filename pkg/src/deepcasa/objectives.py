"""Training objectives and permutation machinery.

Conventions: per-source tensors put the source axis before time,
``[..., C, T, F]`` for spectra/masks and ``[..., C, L]`` for waveforms;
the mixture spectrogram is ``[..., T, F]``.  Permutation ``p`` pairs output
``c`` with reference ``p[c]``; index 0 is always the identity.
"""
from __future__ import annotations

import itertools
from functools import lru_cache

import torch

from .dsp import StftConfig, istft
from .errors import NumericError

SNR_CLAMP = 1e-10
MASK_FLOOR = 1e-8


@lru_cache(maxsize=None)
def permutations(n_src: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.permutations(range(n_src)))


def _check_finite(*xs):
    for x in xs:
        if torch.isnan(x).any():
            raise NumericError("NaN in objective input")


def psa_target(Y, X):
    """|X| cos(angle(Y) - angle(X)) = Re(X conj(Y)) / |Y|  (0 where Y == 0)."""
    mag = Y.abs()
    safe = torch.where(mag > 0, mag, torch.ones_like(mag))
    return torch.where(mag > 0, (X * Y.conj()).real / safe, torch.zeros_like(mag))


def psa_frame_loss(masks, Y, X, perm):
    """Per-frame l1 PSA loss for one permutation.

    masks: real [..., C, T, F]; Y: complex [..., T, F]; X: complex [..., C, T, F].
    Returns [..., T].
    """
    _check_finite(masks)
    Ym = Y.abs().unsqueeze(-3)
    target = psa_target(Y.unsqueeze(-3), X)[..., list(perm), :, :]
    return (masks * Ym - target).abs().sum(dim=(-3, -1))


def ca_frame_loss(cmasks, Y, X, perm):
    """Per-frame complex-approximation loss, |Re| + |Im| of cRM*Y - X_perm."""
    _check_finite(torch.view_as_real(cmasks))
    est = cmasks * Y.unsqueeze(-3)
    return complex_l1_frame_loss(est, X, perm)


def complex_l1_frame_loss(est, X, perm):
    d = est - X[..., list(perm), :, :]
    return (d.real.abs() + d.imag.abs()).sum(dim=(-3, -1))


def loss_table(frame_loss, n_src: int, *args):
    """Stack ``frame_loss(*args, perm)`` over all permutations -> [..., T, P]."""
    return torch.stack([frame_loss(*args, p) for p in permutations(n_src)], dim=-1)


def _first_argmin(table):
    best = table.min(dim=-1).values
    idx = torch.arange(table.shape[-1], device=table.device)
    hit = torch.where(table == best.unsqueeze(-1), idx, table.shape[-1])
    return best, hit.min(dim=-1).values


def tpit_reduce(table):
    """Per-frame minimum over permutations.

    table: [..., T, P].  Returns ``(loss, choice)`` where ``loss`` sums the
    frame minima over T (shape [...]) and ``choice`` [..., T] holds the
    winning permutation index, ties resolved toward the identity.
    """
    best, choice = _first_argmin(table)
    return best.sum(dim=-1), choice


def assignment_labels(choice):
    """Two-source indicator A(t): [1, 0] for identity pairing, [0, 1] otherwise."""
    return torch.stack([(choice == 0), (choice != 0)], dim=-1).to(torch.get_default_dtype())


def upit_reduce(utt_losses):
    """Pick the single permutation with the lowest utterance loss.

    utt_losses: [..., P].  Returns ``(loss, perm_index)``.
    """
    return _first_argmin(utt_losses)


def apply_permutation(est, choice, n_src: int):
    """Reorder sources so ``out[..., s, t] = est[..., c, t]`` with ``perm_t(c) = s``.

    est: [..., C, T, F]; choice: [..., T] (per-frame) or [...] (whole utterance).
    """
    perms = torch.tensor(permutations(n_src), device=est.device)
    inv = torch.argsort(perms, dim=-1)  # inv[p][s] = c
    if choice.dim() == est.dim() - 3:  # utterance-level
        choice = choice.unsqueeze(-1).expand(*choice.shape, est.shape[-2])
    src_of = inv[choice]  # [..., T, C]
    index = src_of.transpose(-1, -2).unsqueeze(-1).expand_as(est)
    return torch.gather(est, -3, index)


def organize_frames(est, X):
    """Per-frame reordering of complex estimates by the complex-STFT l1 loss.

    The permutation choice is a constant (no gradient flows through it).
    Returns ``(organized, choice, table)``.
    """
    n_src = est.shape[-3]
    with torch.no_grad():
        table = loss_table(complex_l1_frame_loss, n_src, est.detach(), X)
        _, choice = _first_argmin(table)
    return apply_permutation(est, choice, n_src), choice, table


def snr_db(ref, est):
    """10 log10(sum ref^2 / sum (ref - est)^2) over the last axis, error clamped at 1e-10."""
    num = (ref ** 2).sum(dim=-1)
    den = ((ref - est) ** 2).sum(dim=-1).clamp_min(SNR_CLAMP)
    return 10 * torch.log10(num / den)


def snr_objective(organized, x_ref, cfg: StftConfig = StftConfig()):
    """Sum over sources of utterance SNR after iSTFT (to maximise).

    organized: complex [..., C, T, F]; x_ref: [..., C, L].  Returns [...].
    """
    x_hat = istft(organized, cfg, out_len=x_ref.shape[-1])
    return snr_db(x_ref, x_hat).sum(dim=-1)


def upit_snr(est, x_ref, cfg: StftConfig = StftConfig()):
    """Utterance-level PIT on the SNR objective.

    Returns ``(J, perm_index)``: the best SNR sum over whole-utterance
    permutations and the permutation achieving it.
    """
    n_src = est.shape[-3]
    x_hat = istft(est, cfg, out_len=x_ref.shape[-1])  # [..., C, L]
    losses = torch.stack([-snr_db(x_ref[..., list(p), :], x_hat).sum(dim=-1)
                          for p in permutations(n_src)], dim=-1)
    loss, idx = upit_reduce(losses)
    return -loss, idx


def cirm(Y, X):
    """Complex ideal ratio mask X / Y, zero where |Y| < 1e-8.

    X may carry an extra source axis ``[..., C, T, F]``.
    """
    if X.dim() == Y.dim() + 1:
        Y = Y.unsqueeze(-3)
    ok = Y.abs() >= MASK_FLOOR
    safe = torch.where(ok, Y, torch.ones_like(Y))
    return torch.where(ok, X / safe, torch.zeros_like(X))
