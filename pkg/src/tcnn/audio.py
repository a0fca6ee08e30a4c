"""Audio frontend: WAV decoding, down-mixing, resampling and log-mel features."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


class AudioError(ValueError):
    """Base class for audio decoding failures."""


class ContainerError(AudioError):
    """Not a RIFF/WAVE file, or a required chunk is missing."""


class UnsupportedEncodingError(AudioError):
    """WAVE payload is neither PCM16 nor IEEE float32."""


class TruncatedDataError(AudioError):
    """Data chunk is shorter than its header claims."""


class FilterbankError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray  # (n_channels, n_samples), float64
    sample_rate: int

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class StftConfig:
    window_length: int
    fft_size: int
    hop: int
    window_kind: str = "hann"

    def __post_init__(self):
        if self.hop < 1:
            raise ValueError("hop must be >= 1")
        if self.fft_size < self.window_length:
            raise ValueError("fft_size must be >= window_length")
        if self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.window_kind != "hann":
            raise ValueError(f"unsupported window {self.window_kind!r}")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist
    scale: str = "htk"


@dataclass
class Spectrogram:
    values: np.ndarray  # (n_mels, n_frames)
    sample_rate: int
    hop: int

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class Profile:
    sample_rate: int
    stft: StftConfig
    mel: MelConfig = field(default_factory=lambda: MelConfig(96))


PROFILES = {
    "phoneme44k": Profile(44100, StftConfig(1102, 2048, 441), MelConfig(80)),
    "irmas12k": Profile(12000, StftConfig(512, 512, 256), MelConfig(96)),
    # f_min=0 leaves the lowest of 128 filters without any FFT bin at 16 kHz/512
    "mtt16k": Profile(16000, StftConfig(512, 512, 256), MelConfig(128, f_min=150.0)),
}


# --- WAV I/O -----------------------------------------------------------------

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


def load_wav(path) -> AudioBuffer:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such audio file: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ContainerError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedDataError(
                    f"{path}: data chunk declares {size} bytes, found {len(body)}")
            data = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None or len(fmt) < 16:
        raise ContainerError(f"{path}: missing fmt chunk")
    if data is None:
        raise ContainerError(f"{path}: missing data chunk")
    tag, n_channels, sample_rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack_from("<H", fmt, 24)

    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedEncodingError(
            f"{path}: format tag {tag} with {bits} bits is not PCM16/float32")
    if n_channels < 1:
        raise ContainerError(f"{path}: zero channels")
    frame_bytes = n_channels * dtype.itemsize
    if len(data) % frame_bytes:
        raise TruncatedDataError(f"{path}: data chunk ends mid-frame")
    frames = np.frombuffer(data, dtype=dtype).reshape(-1, n_channels)
    samples = frames.T.astype(np.float64) * scale
    return AudioBuffer(samples, int(sample_rate))


def write_wav(path, buf: AudioBuffer, encoding: str = "pcm16") -> None:
    """Write interleaved PCM16 (clipped) or float32 WAVE."""
    x = np.asarray(buf.samples, dtype=np.float64).T
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    ch = buf.n_channels
    block = ch * bits // 8
    fmt = struct.pack("<HHIIHH", tag, ch, buf.sample_rate, buf.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# --- signal operations ---------------------------------------------------------

def downmix(buf: AudioBuffer) -> AudioBuffer:
    if buf.n_channels == 1:
        return buf
    return AudioBuffer(buf.samples.mean(axis=0, keepdims=True), buf.sample_rate)


def _kaiser_sinc_phases(up: int, down: int, taps: int, beta: float) -> np.ndarray:
    """Per-phase lowpass taps, each phase normalised to unit DC gain."""
    cutoff = min(1.0, up / down)
    half = taps // 2
    offsets = np.arange(-half + 1, half + 1)  # relative to floor(t)
    phases = np.arange(up)[:, None] / up
    x = offsets[None, :] - phases  # distance from the exact output instant
    window = np.i0(beta * np.sqrt(np.clip(1.0 - (x / half) ** 2, 0.0, None))) / np.i0(beta)
    h = cutoff * np.sinc(cutoff * x) * window
    return h / h.sum(axis=1, keepdims=True)


def resample(buf: AudioBuffer, target_sr: int, taps: int = 32, beta: float = 8.6) -> AudioBuffer:
    """Polyphase Kaiser-windowed sinc resampling of a mono buffer."""
    if target_sr <= 0:
        raise ValueError("target_sr must be positive")
    if buf.n_channels != 1:
        raise ValueError("resample expects a mono buffer; downmix first")
    if target_sr == buf.sample_rate:
        return buf
    ratio = Fraction(target_sr, buf.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    h = _kaiser_sinc_phases(up, down, taps, beta)

    x = buf.samples[0]
    n_out = int(round(len(x) * target_sr / buf.sample_rate))
    n = np.arange(n_out, dtype=np.int64)
    base = (n * down) // up
    phase = (n * down) % up
    half = taps // 2
    pad_lo, pad_hi = half, half + 1
    xp = np.concatenate([np.zeros(pad_lo), x, np.zeros(pad_hi)])
    idx = base[:, None] + np.arange(-half + 1, half + 1)[None, :] + pad_lo
    y = np.einsum("ij,ij->i", xp[idx], h[phase])
    return AudioBuffer(y[None, :], target_sr)


def n_frames_for(length: int, window_length: int, hop: int) -> int:
    return (length - window_length) // hop + 1


def stft_magnitude(buf: AudioBuffer, cfg: StftConfig) -> np.ndarray:
    x = buf.samples[0] if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    if len(x) < cfg.window_length:
        raise ValueError(
            f"signal of {len(x)} samples is shorter than one window ({cfg.window_length})")
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.window_length) / cfg.window_length)
    frames = sliding_window_view(x, cfg.window_length)[::cfg.hop]
    spec = np.fft.rfft(frames * window, n=cfg.fft_size, axis=1)
    return np.abs(spec).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig, fft_size: int, sample_rate: int) -> np.ndarray:
    f_max = sample_rate / 2 if cfg.f_max is None else cfg.f_max
    if cfg.scale != "htk":
        raise ValueError(f"unsupported mel scale {cfg.scale!r}")
    if cfg.n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0 <= cfg.f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}")

    centers = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lo, mid, hi = centers[:-2, None], centers[1:-1, None], centers[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    peak = fb.max(axis=1)
    empty = np.flatnonzero(peak <= 0)
    if empty.size:
        raise FilterbankError(
            f"{empty.size} mel filter(s) have no FFT bin in their support "
            f"(first: {empty[0]}); lower n_mels or raise fft_size")
    return fb / peak[:, None]


def log_compress(grid: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(grid, LOG_FLOOR))


def fit_norm_stats(spectrograms: Sequence[Spectrogram | np.ndarray]) -> NormStats:
    grids = [s.values if isinstance(s, Spectrogram) else np.asarray(s) for s in spectrograms]
    if not grids:
        raise ValueError("cannot fit normalisation statistics on an empty collection")
    if len({g.shape[0] for g in grids}) != 1:
        raise ValueError("spectrograms disagree on n_mels")
    pooled = np.concatenate([g.astype(np.float64) for g in grids], axis=1)
    mean = pooled.mean(axis=1)
    std = np.maximum(pooled.std(axis=1), STD_FLOOR)
    return NormStats(mean, std)


def normalize(spec: Spectrogram | np.ndarray, stats: NormStats):
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if values.shape[0] != len(stats.mean):
        raise ValueError(
            f"spectrogram has {values.shape[0]} mel bins, stats have {len(stats.mean)}")
    out = (values - stats.mean[:, None]) / stats.std[:, None]
    if isinstance(spec, Spectrogram):
        return Spectrogram(out.astype(spec.values.dtype), spec.sample_rate, spec.hop)
    return out


def featurize_buffer(buf: AudioBuffer, profile: str | Profile) -> Spectrogram:
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    mono = resample(downmix(buf), prof.sample_rate)
    mag = stft_magnitude(mono, prof.stft)
    fb = mel_filterbank(prof.mel, prof.stft.fft_size, prof.sample_rate)
    values = log_compress(fb @ mag).astype(np.float32)
    return Spectrogram(values, prof.sample_rate, prof.stft.hop)


def featurize(path, profile: str) -> Spectrogram:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    return featurize_buffer(load_wav(path), profile)


def profile_frames(profile: str, seconds: float) -> int:
    prof = PROFILES[profile]
    return n_frames_for(int(round(seconds * prof.sample_rate)), prof.stft.window_length, prof.stft.hop)

