"""Synthetic two-talker corpus.

Each "speaker" is a parametric harmonic source with its own pitch range,
vibrato, formant layout and syllable rate.  Utterances are mixed at a random
SNR in [0, 5] dB and stored as 16-bit WAV triplets plus a JSON-lines
manifest.  All randomness derives from ``(seed, split, index)`` so output
does not depend on generation order or worker count.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dsp import quantize, read_wav, write_wav

log = logging.getLogger(__name__)

SAMPLE_RATE = 8000
TARGET_RMS = 0.05
PEAK_LIMIT = 0.9
SPLITS = ("train", "valid", "test")
MANIFEST_FIELDS = ("split", "index", "mixture", "source1", "source2",
                   "speaker1", "speaker2", "snr_db")


@dataclass(frozen=True)
class SyntheticSpeaker:
    id: int
    pitch_range: tuple[float, float]
    vibrato_rate: float
    formant_centers: tuple[float, ...]
    am_rate: float


@dataclass
class MixtureRecord:
    split: str
    index: int
    mixture: str
    source1: str
    source2: str
    speaker1: int
    speaker2: int
    snr_db: float
    root: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, which: str) -> Path:
        return self.root / getattr(self, which)

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_FIELDS})


class ZeroEnergyError(ValueError):
    pass


def make_speaker(spk_id: int, rng: np.random.Generator) -> SyntheticSpeaker:
    center = math.exp(rng.uniform(math.log(90.0), math.log(320.0)))
    half = rng.uniform(0.08, 0.16)
    lo = max(60.0, center * (1 - half))
    hi = min(450.0, center * (1 + half))
    formants = (rng.uniform(350, 850), rng.uniform(1000, 2300), rng.uniform(2400, 3500))
    return SyntheticSpeaker(
        id=spk_id,
        pitch_range=(round(lo, 3), round(hi, 3)),
        vibrato_rate=round(rng.uniform(4.0, 7.0), 3),
        formant_centers=tuple(round(f, 3) for f in formants),
        am_rate=round(rng.uniform(2.5, 6.0), 3),
    )


def make_speakers(n: int, seed: int, first_id: int = 0) -> list[SyntheticSpeaker]:
    rng = np.random.default_rng([seed, 7919, first_id])
    return [make_speaker(first_id + i, rng) for i in range(n)]


def _envelope(n: int, spk: SyntheticSpeaker, rng: np.random.Generator) -> np.ndarray:
    """Syllabic amplitude envelope with exact-zero pauses covering 15-30% of the signal."""
    sr = SAMPLE_RATE
    n_pause = max(1, round(n / sr * 0.8))
    pause_total = int(rng.uniform(0.15, 0.3) * n)
    min_pause = int(0.08 * sr)
    pause_total = max(pause_total, n_pause * min_pause)
    pauses = min_pause + np.floor(
        rng.dirichlet(np.ones(n_pause)) * (pause_total - n_pause * min_pause)).astype(int)
    speech_total = n - pauses.sum()
    # speech segments before, between and after pauses
    speech = np.floor(rng.dirichlet(np.ones(n_pause + 1)) * speech_total).astype(int)
    speech[-1] += n - pauses.sum() - speech.sum()

    env = np.zeros(n)
    fade = int(0.02 * sr)
    pos = 0
    for i, seg in enumerate(speech):
        if seg > 0:
            t = np.arange(seg) / sr
            period = 1.0 / spk.am_rate
            phase = rng.uniform(0, period)
            syl = 0.35 + 0.65 * np.sin(np.pi * (t + phase) / period) ** 2
            taper = np.ones(seg)
            f = min(fade, seg // 2)
            if f > 0:
                ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(f) / f)
                taper[:f] = ramp
                taper[seg - f:] = ramp[::-1]
            env[pos:pos + seg] = syl * taper
        pos += seg
        if i < n_pause:
            pos += pauses[i]
    return env


def synth_source(spk: SyntheticSpeaker, dur: float, seed, return_f0: bool = False):
    """Harmonic source with a wandering pitch contour, formant envelope and pauses.

    Returns a float64 waveform with RMS exactly ``TARGET_RMS`` (and the
    per-sample f0 track when ``return_f0``).
    """
    if not 1.0 <= dur <= 10.0:
        raise ValueError(f"duration must be within [1, 10] s, got {dur}")
    rng = np.random.default_rng(seed)
    sr = SAMPLE_RATE
    n = int(round(dur * sr))
    t = np.arange(n) / sr
    lo, hi = spk.pitch_range

    # pitch: smooth interpolation between random targets every ~250 ms, plus vibrato
    n_ctrl = int(dur / 0.25) + 2
    ctrl_t = np.linspace(0, dur, n_ctrl)
    ctrl_f = rng.uniform(lo, hi, n_ctrl)
    u = np.interp(t, ctrl_t, np.arange(n_ctrl))
    k = np.minimum(np.floor(u).astype(int), n_ctrl - 2)
    frac = 0.5 - 0.5 * np.cos(np.pi * (u - k))
    f0 = ctrl_f[k] * (1 - frac) + ctrl_f[k + 1] * frac
    f0 = f0 * (1 + 0.015 * np.sin(2 * np.pi * spk.vibrato_rate * t + rng.uniform(0, 2 * np.pi)))
    f0 = np.clip(f0, lo, hi)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    # formants drift per syllable around the speaker's centres
    n_syl = int(dur * spk.am_rate) + 2
    syl_t = np.linspace(0, dur, n_syl)
    shifts = rng.uniform(0.88, 1.12, (n_syl, len(spk.formant_centers)))
    formants = np.stack([np.interp(t, syl_t, shifts[:, j]) * fc
                         for j, fc in enumerate(spk.formant_centers)])  # [K, n]
    bandwidths = np.array([90.0, 130.0, 200.0])[:len(spk.formant_centers), None]

    n_harm = int(3900 // lo)
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        fh = h * f0
        amp = np.sum(1.0 / (1.0 + ((fh - formants) / bandwidths) ** 2), axis=0) + 0.02
        amp = np.where(fh < 3900.0, amp / math.sqrt(h), 0.0)
        x += amp * np.sin(h * phase)
    x *= _envelope(n, spk, rng)

    rms = math.sqrt(np.mean(x ** 2))
    if rms == 0.0:
        raise ZeroEnergyError("silent source")
    x *= TARGET_RMS / rms
    return (x, f0) if return_f0 else x


def mix(x1: np.ndarray, x2: np.ndarray, snr_db: float):
    """Scale ``x2`` to the requested SNR, then limit the mixture peak to 0.9.

    Returns ``(y, x1, x2_scaled)`` with ``y == x1 + x2_scaled`` exactly.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise ValueError(f"length mismatch: {x1.shape} vs {x2.shape}")
    e1, e2 = float(np.sum(x1 ** 2)), float(np.sum(x2 ** 2))
    if e1 == 0.0 or e2 == 0.0:
        raise ZeroEnergyError("zero-energy source")
    x2s = x2 * math.sqrt(e1 / (e2 * 10 ** (snr_db / 10)))
    peak = float(np.max(np.abs(x1 + x2s)))
    if peak > PEAK_LIMIT:
        g = PEAK_LIMIT / peak
        x1 = x1 * g
        x2s = x2s * g
    return x1 + x2s, x1, x2s


def _make_utterance(args):
    split, index, seed, speakers, dur, out_dir = args
    split_code = SPLITS.index(split)
    attempt = 0
    while True:
        rng = np.random.default_rng([seed, split_code, index, attempt])
        i, j = rng.choice(len(speakers), size=2, replace=False)
        s1, s2 = speakers[i], speakers[j]
        snr = float(rng.uniform(0.0, 5.0))
        try:
            x1 = synth_source(s1, dur, rng.integers(2 ** 63))
            x2 = synth_source(s2, dur, rng.integers(2 ** 63))
            _, x1m, x2m = mix(x1, x2, snr)
        except ZeroEnergyError:
            attempt += 1
            continue
        break
    # quantise references first so the stored mixture is their exact sum
    q1 = quantize(x1m).astype(np.float64) / 32768
    q2 = quantize(x2m).astype(np.float64) / 32768
    y = q1 + q2
    stem = f"{split}/{index:05d}"
    rec = MixtureRecord(split, index, f"{stem}_mix.wav", f"{stem}_s1.wav", f"{stem}_s2.wav",
                        s1.id, s2.id, round(snr, 6), root=Path(out_dir))
    write_wav(rec.path("mixture"), y)
    write_wav(rec.path("source1"), q1)
    write_wav(rec.path("source2"), q2)
    return rec


def make_dataset(out_dir, n_train=500, n_valid=50, n_test=50, n_speakers=20,
                 n_test_speakers=8, dur=2.0, seed=0, workers=1) -> list[MixtureRecord]:
    """Generate WAV triplets and ``manifest.jsonl`` under ``out_dir``.

    Train and valid mixtures draw from ``n_speakers`` speakers; test
    mixtures from ``n_test_speakers`` disjoint ones.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_spk = make_speakers(n_speakers, seed, first_id=0)
    test_spk = make_speakers(n_test_speakers, seed, first_id=n_speakers)
    jobs = []
    for split, count, bank in (("train", n_train, train_spk), ("valid", n_valid, train_spk),
                               ("test", n_test, test_spk)):
        jobs += [(split, i, seed, bank, dur, str(out)) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_make_utterance, jobs, chunksize=8))
    else:
        records = [_make_utterance(j) for j in jobs]
    with open(out / "speakers.jsonl", "w") as f:
        for s in train_spk + test_spk:
            f.write(json.dumps(asdict(s)) + "\n")
    with open(out / "manifest.jsonl", "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")
    log.info("wrote %d mixtures to %s", len(records), out)
    return records


def load_manifest(path, split: str | None = None) -> list[MixtureRecord]:
    path = Path(path)
    records = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                rec = MixtureRecord(**{k: d[k] for k in MANIFEST_FIELDS}, root=path.parent)
                if split is None or rec.split == split:
                    records.append(rec)
    return records


def load_arrays(records: list[MixtureRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Load mixtures [n, L] and references [n, 2, L] (float32; equal lengths required)."""
    mixes = np.stack([read_wav(r.path("mixture")) for r in records])
    refs = np.stack([np.stack([read_wav(r.path("source1")), read_wav(r.path("source2"))])
                     for r in records])
    return mixes, refs
