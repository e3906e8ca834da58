"""Separation metrics: SI-SNR, SNR, best-pairing evaluation and frame
assignment error.  Everything here is numpy float64."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

CLAMP_DB = 100.0
FAE_GATE_DB = -20.0


def _clamped_ratio_db(num: float, den: float) -> float:
    if num <= 0.0:
        return -CLAMP_DB
    if den <= 0.0:
        return CLAMP_DB
    return float(np.clip(10 * np.log10(num / den), -CLAMP_DB, CLAMP_DB))


def si_snr(est, ref) -> float:
    """Scale-invariant SNR in dB (zero-mean inputs, clamped to +/-100 dB).

    Returns NaN (with a warning) when the reference has no energy.
    """
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        warnings.warn("zero-energy reference; SI-SNR undefined")
        return float("nan")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    return _clamped_ratio_db(float(target @ target), float(noise @ noise))


def snr(est, ref) -> float:
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    err = ref - est
    return _clamped_ratio_db(float(ref @ ref), float(err @ err))


@dataclass
class PairScore:
    si_snr: tuple[float, float]
    snr: tuple[float, float]
    delta_si_snr: float
    delta_snr: float
    swapped: bool


def pair_eval(est1, est2, ref1, ref2, mixture) -> PairScore:
    """Score both stream/reference pairings, keep the better total SI-SNR.

    Deltas subtract the mixture-vs-reference baseline, averaged over the two
    sources.
    """
    straight = (si_snr(est1, ref1), si_snr(est2, ref2))
    crossed = (si_snr(est2, ref1), si_snr(est1, ref2))
    swapped = sum(crossed) > sum(straight)
    e1, e2 = (est2, est1) if swapped else (est1, est2)
    s = crossed if swapped else straight
    n = (snr(e1, ref1), snr(e2, ref2))
    base_si = (si_snr(mixture, ref1), si_snr(mixture, ref2))
    base_n = (snr(mixture, ref1), snr(mixture, ref2))
    return PairScore(
        si_snr=s, snr=n,
        delta_si_snr=float(np.mean(s) - np.mean(base_si)),
        delta_snr=float(np.mean(n) - np.mean(base_n)),
        swapped=bool(swapped),
    )


def frame_energy_profile(Y) -> np.ndarray:
    """Per-frame energy in dB relative to the loudest frame; Y complex [T, F]."""
    e = np.sum(np.abs(np.asarray(Y)) ** 2, axis=-1).astype(np.float64)
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(e)
    top = np.max(db)
    if not np.isfinite(top):
        return np.full_like(db, -np.inf)
    return db - top


def fae(pred_labels, optimal_labels, frame_energy_db, gate_db: float = FAE_GATE_DB):
    """Percentage of gated frames whose assignment disagrees with the optimum.

    Labels are 0/1 per frame; the global polarity of ``pred_labels`` that
    agrees best with ``optimal_labels`` is used.  Returns None when no frame
    passes the energy gate.
    """
    pred = np.asarray(pred_labels).astype(int)
    opt = np.asarray(optimal_labels).astype(int)
    if pred.shape != opt.shape:
        raise ValueError(f"label length mismatch {pred.shape} vs {opt.shape}")
    gate = np.asarray(frame_energy_db) >= gate_db
    n = int(gate.sum())
    if n == 0:
        return None
    wrong = int(np.sum(pred[gate] != opt[gate]))
    return 100.0 * min(wrong, n - wrong) / n


@dataclass
class EvalReport:
    mode: str
    rows: list[dict] = field(default_factory=list)

    def add(self, name: str, score: PairScore, fae_pct=None):
        self.rows.append(dict(utterance=name, delta_si_snr=score.delta_si_snr,
                              delta_snr=score.delta_snr, si_snr=list(score.si_snr),
                              fae=fae_pct))

    def mean(self, key: str):
        vals = [r[key] for r in self.rows if r[key] is not None and np.isfinite(r[key])]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        return dict(mode=self.mode, n=len(self.rows), delta_si_snr=self.mean("delta_si_snr"),
                    delta_snr=self.mean("delta_snr"), fae=self.mean("fae"))

    def to_jsonl(self) -> str:
        lines = [json.dumps(dict(mode=self.mode, **r)) for r in self.rows]
        lines.append(json.dumps(dict(summary=True, **self.summary())))
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        s = self.summary()
        fae_txt = "-" if s["fae"] is None else f"{s['fae']:.2f}"
        return ("mode        n   dSI-SNR(dB)  dSNR(dB)  FAE(%)\n"
                f"{s['mode']:<10} {s['n']:>3}   {s['delta_si_snr']:>10.2f}  "
                f"{s['delta_snr']:>8.2f}  {fae_txt:>6}\n")
