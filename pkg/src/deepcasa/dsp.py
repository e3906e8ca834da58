"""STFT analysis/synthesis with square-root Hann windows, and 16-bit WAV I/O.

Spectrograms are complex tensors shaped ``[..., T, F]`` with ``F = N/2 + 1``.
Both transforms work on torch tensors (and are differentiable); numpy arrays
are accepted and converted.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ParameterError


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 8000
    frame_len: int = 256
    hop: int = 64

    def __post_init__(self):
        if self.frame_len <= 0 or self.hop <= 0 or self.frame_len % self.hop:
            raise ParameterError(
                f"frame_len ({self.frame_len}) must be a positive multiple of hop ({self.hop})")

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    @property
    def pad(self) -> int:
        return self.frame_len - self.hop

    def n_frames(self, n_samples: int) -> int:
        return (n_samples + 2 * self.pad - self.frame_len) // self.hop + 1


def sqrt_hann(n: int, dtype=torch.float64) -> torch.Tensor:
    """Square root of the periodic Hann window."""
    if n <= 0 or n % 2:
        raise ParameterError(f"window length must be positive and even, got {n}")
    k = torch.arange(n, dtype=torch.float64)
    w = torch.sqrt((0.5 - 0.5 * torch.cos(2 * torch.pi * k / n)).clamp_min(0.0))
    return w.to(dtype)


def _to_tensor(x):
    if isinstance(x, np.ndarray):
        return torch.from_numpy(x)
    return x


def stft(x, cfg: StftConfig = StftConfig()) -> torch.Tensor:
    """Zero-pad ``N - R`` samples at both ends, frame at hop ``R``, window, rfft.

    x: [..., n] real.  Returns complex [..., T, N/2+1].
    """
    x = _to_tensor(x)
    if x.shape[-1] == 0:
        raise ParameterError("empty signal")
    n, r = cfg.frame_len, cfg.hop
    w = sqrt_hann(n, x.dtype)
    xp = torch.nn.functional.pad(x, (cfg.pad, cfg.pad))
    frames = xp.unfold(-1, n, r)  # [..., T, N]
    return torch.fft.rfft(frames * w, n=n, dim=-1)


def window_square_sum(n_frames: int, cfg: StftConfig, dtype=torch.float64) -> torch.Tensor:
    """Sum_t w^2(n - tR) over the padded signal support."""
    w2 = sqrt_hann(cfg.frame_len, dtype) ** 2
    total = (n_frames - 1) * cfg.hop + cfg.frame_len
    acc = torch.zeros(total, dtype=dtype)
    for t in range(n_frames):
        acc[t * cfg.hop:t * cfg.hop + cfg.frame_len] += w2
    return acc


_WSS_CACHE: dict = {}


def _cached_wss(n_frames, cfg, dtype):
    key = (n_frames, cfg, dtype)
    if key not in _WSS_CACHE:
        _WSS_CACHE[key] = window_square_sum(n_frames, cfg, dtype)
    return _WSS_CACHE[key]


def istft(spec, cfg: StftConfig = StftConfig(), out_len: int | None = None) -> torch.Tensor:
    """Inverse of :func:`stft`: irfft per frame, window, overlap-add, divide by
    the window-square sum and trim the padding.

    spec: complex [..., T, F].  Returns real [..., out_len].
    """
    spec = _to_tensor(spec)
    n, r = cfg.frame_len, cfg.hop
    t_frames = spec.shape[-2]
    real_dtype = spec.real.dtype
    w = sqrt_hann(n, real_dtype)
    frames = torch.fft.irfft(spec, n=n, dim=-1) * w  # [..., T, N]
    lead = frames.shape[:-2]
    total = (t_frames - 1) * r + n
    # overlap-add via fold: [B, N, T] -> [B, 1, 1, total]
    flat = frames.reshape(-1, t_frames, n).transpose(1, 2)
    ola = torch.nn.functional.fold(flat, output_size=(1, total), kernel_size=(1, n),
                                   stride=(1, r)).reshape(*lead, total)
    wss = _cached_wss(t_frames, cfg, real_dtype)
    if out_len is None:
        out_len = total - 2 * cfg.pad
    seg = slice(cfg.pad, cfg.pad + out_len)
    if cfg.pad + out_len > total:
        raise ParameterError(f"out_len {out_len} exceeds the {t_frames}-frame support")
    denom = wss[seg]
    if torch.any(denom <= 0):
        raise ParameterError("output region contains samples with zero window coverage")
    return ola[..., seg] / denom


# -- WAV --------------------------------------------------------------------

def read_wav(path, sample_rate: int = 8000) -> np.ndarray:
    """Read a mono 16-bit PCM WAV as float32 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as f:
            nch, width, rate = f.getnchannels(), f.getsampwidth(), f.getframerate()
            if f.getcomptype() != "NONE":
                raise FormatError(f"{path}: compressed WAV ({f.getcomptype()}) not supported")
            if nch != 1:
                raise FormatError(f"{path}: expected mono, got {nch} channels")
            if width != 2:
                raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
            if rate != sample_rate:
                raise FormatError(f"{path}: expected {sample_rate} Hz, got {rate} Hz")
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: not a readable WAV file ({e or 'truncated'})") from e
    return (np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0)


def quantize(x) -> np.ndarray:
    """Clamp to [-1, 1 - 2^-15] and round to the int16 grid."""
    x = np.asarray(x, dtype=np.float64)
    return np.round(np.clip(x, -1.0, 1.0 - 1.0 / 32768) * 32768).astype("<i2")


def write_wav(path, x, sample_rate: int = 8000) -> None:
    pcm = quantize(x)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())
