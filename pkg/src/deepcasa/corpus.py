"""In-memory view of a manifest split as torch tensors."""
from __future__ import annotations

import numpy as np
import torch

from .data import load_arrays, load_manifest
from .dsp import StftConfig, stft


class Corpus:
    """Mixtures ``[n, L]`` and references ``[n, 2, L]`` of one split."""

    def __init__(self, mixtures, refs, records=None, cfg: StftConfig = StftConfig()):
        self.mixtures = torch.as_tensor(mixtures, dtype=torch.float32)
        self.refs = torch.as_tensor(refs, dtype=torch.float32)
        self.records = records
        self.cfg = cfg

    @classmethod
    def from_manifest(cls, path, split, limit=None, cfg: StftConfig = StftConfig()):
        records = load_manifest(path, split)[:limit]
        if not records:
            raise ValueError(f"no {split!r} records in {path}")
        mixes, refs = load_arrays(records)
        return cls(mixes, refs, records, cfg)

    def __len__(self):
        return self.mixtures.shape[0]

    def batch(self, idx, crop: int | None = None, rng: np.random.Generator | None = None):
        """Return ``(y, x, Y, X)``: waveforms [B, L], [B, 2, L] and their spectra.

        With ``crop`` (samples) every item is cut to a random window of that length.
        """
        y = self.mixtures[idx]
        x = self.refs[idx]
        if crop is not None and crop < y.shape[-1]:
            rng = rng or np.random.default_rng()
            starts = rng.integers(0, y.shape[-1] - crop + 1, size=len(idx))
            y = torch.stack([y[i, s:s + crop] for i, s in enumerate(starts)])
            x = torch.stack([x[i, :, s:s + crop] for i, s in enumerate(starts)])
        return y, x, stft(y, self.cfg), stft(x, self.cfg)
