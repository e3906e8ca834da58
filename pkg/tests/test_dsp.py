import wave

import numpy as np
import pytest
import torch

from deepcasa.dsp import (StftConfig, istft, read_wav, sqrt_hann, stft, window_square_sum,
                          write_wav)
from deepcasa.errors import FormatError, ParameterError

CFG = StftConfig()


def test_sqrt_hann_values():
    w = sqrt_hann(256)
    assert w[0] == 0.0
    assert abs(w[128] - 1.0) < 1e-15
    with pytest.raises(ParameterError):
        sqrt_hann(0)


def test_window_square_sum_is_two_in_interior():
    # direct summation, independent of the library helper
    w2 = sqrt_hann(256).numpy() ** 2
    acc = np.zeros(64 * 40 + 256)
    for t in range(41):
        acc[t * 64:t * 64 + 256] += w2
    interior = acc[256:-256]
    np.testing.assert_allclose(interior, 2.0, atol=1e-12)
    np.testing.assert_allclose(window_square_sum(41, CFG).numpy(), acc, atol=1e-12)


def test_frame_count_rule():
    assert stft(torch.zeros(8000, dtype=torch.float64)).shape == (128, 129)
    assert CFG.n_frames(8000) == 128


def test_zero_signal_and_zero_spectrogram():
    assert torch.count_nonzero(stft(torch.zeros(1000, dtype=torch.float64))) == 0
    z = torch.zeros(20, 129, dtype=torch.complex128)
    assert torch.count_nonzero(istft(z, CFG, 900)) == 0


def test_cosine_peaks_at_its_bin():
    k = 17
    n = np.arange(4000)
    x = np.cos(2 * np.pi * k * n / 256)
    S = stft(torch.from_numpy(x)).abs().numpy()
    assert np.all(S[5:-5].argmax(axis=1) == k)


def test_perfect_reconstruction(rng):
    for length in (8000, 8001, 5003):
        x = rng.standard_normal(length)
        y = istft(stft(torch.from_numpy(x)), CFG, length).numpy()
        assert np.max(np.abs(y - x)) < 1e-6


def test_istft_linearity(rng):
    s1 = torch.from_numpy(rng.standard_normal((40, 129)) + 1j * rng.standard_normal((40, 129)))
    s2 = torch.from_numpy(rng.standard_normal((40, 129)) + 1j * rng.standard_normal((40, 129)))
    lhs = istft(s1 + s2, CFG, 2000)
    rhs = istft(s1, CFG, 2000) + istft(s2, CFG, 2000)
    assert torch.max(torch.abs(lhs - rhs)) < 1e-6


def test_batched_stft_matches_single(rng):
    x = torch.from_numpy(rng.standard_normal((3, 2, 1500)))
    S = stft(x)
    assert torch.allclose(S[1, 1], stft(x[1, 1]))


def test_wav_round_trip(tmp_path, rng):
    x = rng.uniform(-0.99, 0.99, 4000)
    write_wav(tmp_path / "a.wav", x)
    y = read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(y - x)) <= 1 / 32768


def test_full_scale_sine_does_not_wrap(tmp_path):
    x = np.sin(2 * np.pi * 440 * np.arange(8000) / 8000)
    write_wav(tmp_path / "s.wav", x)
    with wave.open(str(tmp_path / "s.wav")) as w:
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    assert raw.max() == 32767
    assert raw.min() == -32768
    # the positive crest is clamped, never wrapped to negative values
    assert np.all(raw[np.argmax(x)] > 0)


def _write_raw(path, channels=1, rate=8000, width=2):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\x00" * (width * channels * 100))


@pytest.mark.parametrize("kw,msg", [(dict(channels=2), "channel"), (dict(rate=16000), "rate"),
                                    (dict(width=1), "bit")])
def test_bad_wav_formats(tmp_path, kw, msg):
    _write_raw(tmp_path / "b.wav", **kw)
    with pytest.raises(FormatError, match=msg):
        read_wav(tmp_path / "b.wav")


def test_not_a_wav(tmp_path):
    (tmp_path / "c.wav").write_bytes(b"garbage")
    with pytest.raises(FormatError):
        read_wav(tmp_path / "c.wav")
