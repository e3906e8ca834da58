import json

import numpy as np
import pytest
import torch

from deepcasa.data import (MANIFEST_FIELDS, load_arrays, load_manifest, make_dataset,
                           make_speakers, mix, synth_source)
from deepcasa.dsp import read_wav, stft


@pytest.fixture(scope="module")
def speaker():
    return make_speakers(1, seed=3)[0]


def test_synth_deterministic_and_normalised(speaker):
    a = synth_source(speaker, 2.0, 42)
    b = synth_source(speaker, 2.0, 42)
    assert np.array_equal(a, b)
    assert abs(np.sqrt(np.mean(a ** 2)) - 0.05) < 1e-6
    assert not np.array_equal(a, synth_source(speaker, 2.0, 43))


def test_synth_has_silent_gaps(speaker):
    x = synth_source(speaker, 3.0, 5)
    frames = x[: len(x) // 64 * 64].reshape(-1, 64)
    e = np.sum(frames ** 2, axis=1)
    with np.errstate(divide="ignore"):
        db = 10 * np.log10(e / e.max())
    assert np.mean(db < -30) >= 0.10


def test_synth_peaks_at_harmonics(speaker):
    x, f0 = synth_source(speaker, 2.0, 9, return_f0=True)
    S = stft(torch.from_numpy(x)).abs().numpy()
    bin_hz = 8000 / 256
    energy = (S ** 2).sum(1)
    hits = total = 0
    for t in np.flatnonzero(energy > 0.1 * energy.max()):
        centre = min(max(t * 64 - 192 + 128, 0), len(f0) - 1)  # frame centre in samples
        spec = S[t]
        peaks = [k for k in range(2, 120) if spec[k] > spec[k - 1] and spec[k] >= spec[k + 1]]
        peaks = sorted(peaks, key=lambda k: -spec[k])[:3]
        for k in peaks:
            h = max(1, round(k * bin_hz / f0[centre]))
            total += 1
            hits += abs(k * bin_hz - h * f0[centre]) <= bin_hz
    assert total > 50
    assert hits / total >= 0.9


def test_mix_snr_and_additivity(rng):
    x1, x2 = rng.standard_normal(4000) * 0.05, rng.standard_normal(4000) * 0.05
    for snr in (0.0, 5.0, 2.3):
        y, a, b = mix(x1, x2, snr)
        ratio = np.sum(a ** 2) / np.sum(b ** 2)
        assert abs(ratio / 10 ** (snr / 10) - 1) < 1e-6
        assert np.array_equal(y, a + b)
        assert np.max(np.abs(y)) <= 0.9


def test_mix_peak_limit_scales_both(rng):
    x1, x2 = rng.standard_normal(1000), rng.standard_normal(1000)
    y, a, b = mix(x1, x2, 0.0)
    assert abs(np.max(np.abs(y)) - 0.9) < 1e-12
    assert abs(np.sum(a ** 2) / np.sum(b ** 2) - 1) < 1e-9


@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    make_dataset(out, n_train=6, n_valid=2, n_test=3, n_speakers=5, n_test_speakers=3,
                 dur=1.0, seed=11)
    return out


def test_manifest_counts_and_fields(small_set):
    lines = (small_set / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 11
    assert list(json.loads(lines[0])) == list(MANIFEST_FIELDS)
    splits = [json.loads(l)["split"] for l in lines]
    assert splits.count("train") == 6 and splits.count("valid") == 2 and splits.count("test") == 3


def test_open_condition_speakers(small_set):
    recs = load_manifest(small_set / "manifest.jsonl")
    train = {s for r in recs if r.split != "test" for s in (r.speaker1, r.speaker2)}
    test = {s for r in recs if r.split == "test" for s in (r.speaker1, r.speaker2)}
    assert train and test and not (train & test)
    assert all(r.speaker1 != r.speaker2 for r in recs)


def test_stored_mixture_is_exact_sum(small_set):
    for r in load_manifest(small_set / "manifest.jsonl", "test"):
        y, s1, s2 = (read_wav(r.path(k)).astype(np.float64)
                     for k in ("mixture", "source1", "source2"))
        assert np.all(y - s1 - s2 == 0)
        snr = 10 * np.log10(np.sum(s1 ** 2) / np.sum(s2 ** 2))
        assert abs(snr - r.snr_db) < 0.01
    mixes, refs = load_arrays(load_manifest(small_set / "manifest.jsonl", "valid"))
    assert mixes.shape == (2, 8000) and refs.shape == (2, 2, 8000)


def test_same_seed_same_bytes_and_parallel(small_set, tmp_path):
    make_dataset(tmp_path, n_train=6, n_valid=2, n_test=3, n_speakers=5, n_test_speakers=3,
                 dur=1.0, seed=11, workers=2)
    assert (tmp_path / "manifest.jsonl").read_bytes() == (small_set / "manifest.jsonl").read_bytes()
    assert (tmp_path / "test/00002_mix.wav").read_bytes() == \
        (small_set / "test/00002_mix.wav").read_bytes()
