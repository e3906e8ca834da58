"""End-to-end separation (mixture waveform -> two streams) and test-set
evaluation under the different frame-assignment modes."""
from __future__ import annotations

import logging

import numpy as np
import torch

from . import objectives as ob
from .dsp import StftConfig, istft, stft
from .metrics import EvalReport, fae, frame_energy_profile, pair_eval
from .seq import TCN, kmeans_labels, organize_outputs
from .simul import DenseUNet, estimate

log = logging.getLogger(__name__)

MODES = ("default", "kmeans", "optimal", "oracle", "reference")


class Separator:
    """Stage-1 model plus optional TCN, applied to whole utterances.

    Modes: ``default`` keeps the network's output order, ``kmeans`` organises
    frames with TCN embeddings, ``optimal`` uses the reference-based per-frame
    assignment, and ``oracle`` skips the network and applies the ideal complex
    ratio mask (needs references).  ``reference`` returns the reference
    spectra themselves, a check of the metric plumbing.
    """

    def __init__(self, stage1: DenseUNet | None = None, tcn: TCN | None = None,
                 cfg: StftConfig = StftConfig(), seed: int = 0):
        self.stage1 = stage1
        self.tcn = tcn
        self.cfg = cfg
        self.seed = seed
        for m in (stage1, tcn):
            if m is not None:
                m.eval()

    def spectra(self, y, mode: str = "kmeans", refs=None):
        """Returns ``(streams [..., 2, T, F], raw stage-1 estimates or None, labels or None)``."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
        Y = stft(torch.as_tensor(y, dtype=torch.float64), self.cfg)
        X = None if refs is None else stft(torch.as_tensor(refs, dtype=torch.float64), self.cfg)
        if mode in ("optimal", "oracle", "reference") and X is None:
            raise ValueError(f"mode {mode!r} needs reference signals")
        if mode == "reference":
            return X, None, None
        if mode == "oracle":
            return ob.cirm(Y, X) * Y.unsqueeze(-3), None, None
        if self.stage1 is None:
            raise ValueError("no stage-1 model loaded")
        with torch.no_grad():
            est = estimate(self.stage1, Y.to(torch.complex64)).to(torch.complex128)
        if mode == "default":
            return est, est, torch.zeros(est.shape[:-3] + est.shape[-2:-1], dtype=torch.long)
        if mode == "optimal":
            org, choice, _ = ob.organize_frames(est, X)
            return org, est, choice
        if self.tcn is None:
            raise ValueError("kmeans mode needs a sequential-grouping model")
        labels = kmeans_labels(self.tcn, Y.to(torch.complex64), est.to(torch.complex64), self.seed)
        return organize_outputs(est, labels), est, labels

    def separate(self, y, mode: str = "kmeans", refs=None) -> np.ndarray:
        """Mixture [L] (or [B, L]) -> separated waveforms [2, L] (or [B, 2, L])."""
        y = np.asarray(y, dtype=np.float64)
        streams, _, _ = self.spectra(y, mode, refs)
        return istft(streams, self.cfg, out_len=y.shape[-1]).numpy()


def evaluate(separator: Separator, corpus, mode: str = "kmeans", names=None,
             gate_db: float = -20.0) -> EvalReport:
    """Score every utterance of ``corpus``; FAE is reported whenever a
    predicted per-frame assignment exists (default and kmeans modes)."""
    report = EvalReport(mode)
    for i in range(len(corpus)):
        y = corpus.mixtures[i].double().numpy()
        x = corpus.refs[i].double().numpy()
        streams, est, labels = separator.spectra(y, mode, x)
        w = istft(streams, separator.cfg, out_len=len(y)).numpy()
        score = pair_eval(w[0], w[1], x[0], x[1], y)
        err = None
        if est is not None and mode in ("default", "kmeans"):
            _, opt, _ = ob.organize_frames(est, stft(torch.as_tensor(x), separator.cfg))
            energy = frame_energy_profile(stft(torch.as_tensor(y), separator.cfg).numpy())
            err = fae(labels.numpy(), opt.numpy(), energy, gate_db)
        name = names[i] if names is not None else (
            f"{corpus.records[i].split}-{corpus.records[i].index:04d}" if corpus.records else str(i))
        report.add(name, score, err)
    return report
