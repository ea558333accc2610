"""Audio ingestion and the three spectral channels (MEL, STFT, MFCC)."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, IngestionError, UsageError

EPS = 1e-10
CHANNEL_ORDER = ("MEL", "STFT", "MFCC")


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise IngestionError(f"{self.source_id or 'clip'}: need a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise IngestionError(f"{self.source_id or 'clip'}: non-finite samples")
        if self.sample_rate <= 0:
            raise IngestionError(f"{self.source_id or 'clip'}: sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class SpectralConfig:
    sample_rate: int = 22050
    n_fft: int = 1024
    hop_length: int = 256
    n_mels: int = 64
    n_mfcc: int = 20
    f_min: float = 150.0
    f_max: float = 11025.0
    height: int = 64
    width: int = 64
    clip_seconds: float = 3.0
    clip_hop_seconds: float = 3.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ConfigError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop_length <= self.n_fft:
            raise ConfigError(f"hop_length must be in (0, n_fft], got {self.hop_length}")
        if not 1 <= self.n_mfcc <= self.n_mels:
            raise ConfigError(f"n_mfcc must be in [1, n_mels], got {self.n_mfcc}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={self.f_min}, f_max={self.f_max}"
            )
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"target grid must be at least 1x1, got {self.height}x{self.width}")
        if self.clip_seconds <= 0 or self.clip_hop_seconds <= 0:
            raise ConfigError("clip_seconds and clip_hop_seconds must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ WAV I/O

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav_bytes(data: bytes, source_id: str = "") -> AudioClip:
    name = source_id or "wav"
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise IngestionError(f"{name}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise IngestionError(f"{name}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise IngestionError(f"{name}: truncated extensible fmt chunk")
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise IngestionError(f"{name}: missing fmt chunk")
    if payload is None:
        raise IngestionError(f"{name}: missing data chunk")
    codec, channels, rate, _, block_align, bits = fmt
    if channels not in (1, 2):
        raise IngestionError(f"{name}: {channels} channels unsupported (mono or stereo only)")
    if codec == _PCM and bits == 16:
        dtype, divisor = np.dtype("<i2"), 32768.0
    elif codec == _FLOAT and bits == 32:
        dtype, divisor = np.dtype("<f4"), 1.0
    else:
        raise IngestionError(f"{name}: unsupported codec {codec} with {bits} bits")
    frame = dtype.itemsize * channels
    n_frames = len(payload) // frame
    if n_frames == 0:
        raise IngestionError(f"{name}: zero-length data")
    raw = np.frombuffer(payload[:n_frames * frame], dtype=dtype).astype(np.float64) / divisor
    samples = raw.reshape(n_frames, channels).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise IngestionError(f"{name}: non-finite samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), int(rate), source_id)


def load_wav(path, source_id: str | None = None) -> AudioClip:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IngestionError(f"{path}: {exc.strerror or exc}") from exc
    return read_wav_bytes(data, source_id if source_id is not None else path.stem)


def pcm16_bytes(samples: np.ndarray, sample_rate: int) -> bytes:
    ints = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, _PCM, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(path, samples: np.ndarray, sample_rate: int):
    Path(path).write_bytes(pcm16_bytes(samples, sample_rate))


# ------------------------------------------------------------------ segmentation

def segment(clip: AudioClip, cfg: SpectralConfig) -> list[AudioClip]:
    """Fixed-length windows; a trailing partial window is kept (zero-padded)
    when it covers at least half a window."""
    win = int(round(cfg.clip_seconds * clip.sample_rate))
    hop = int(round(cfg.clip_hop_seconds * clip.sample_rate))
    x = clip.samples
    n = x.size
    if n <= win:
        starts = [0]
    else:
        starts = list(range(0, n - win + 1, hop))
        tail = starts[-1] + hop
        if tail < n and (n - tail) * 2 >= win:
            starts.append(tail)
    out = []
    for i, s in enumerate(starts):
        piece = np.zeros(win)
        chunk = x[s:s + win]
        piece[:chunk.size] = chunk
        sid = clip.source_id if len(starts) == 1 else f"{clip.source_id}:{i}"
        out.append(AudioClip(piece, clip.sample_rate, sid))
    return out


# ------------------------------------------------------------------ FFT

def _fft_complex(z: np.ndarray) -> np.ndarray:
    """Radix-2 decimation-in-time FFT along the last axis (length a power of two).

    Direct DFTs of length <= 16 seed the recursion, then butterfly merges
    double the transform length until it reaches the full size.
    """
    n = z.shape[-1]
    lead = z.shape[:-1]
    base = min(n, 16)
    k = np.arange(base)
    dft = np.exp(-2j * np.pi * k[:, None] * k[None, :] / base)
    # column j of the reshape is the subsequence z[j::n/base]
    data = dft @ z.reshape(*lead, base, n // base)
    while data.shape[-2] < n:
        m = data.shape[-2]
        width = data.shape[-1] // 2
        odd = data[..., width:] * np.exp(-1j * np.pi * np.arange(m) / m)[:, None]
        merged = np.empty((*lead, 2 * m, width), dtype=np.complex128)
        np.add(data[..., :width], odd, out=merged[..., :m, :])
        np.subtract(data[..., :width], odd, out=merged[..., m:, :])
        data = merged
    return data.reshape(*lead, n)


def fft_real(frames: np.ndarray) -> np.ndarray:
    """One-sided DFT of real frames along the last axis: N/2 + 1 complex bins.

    Even and odd samples are packed into one complex sequence of half length,
    transformed, then separated.
    """
    x = np.asarray(frames, dtype=np.float64)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise UsageError(f"fft_real: length {n} is not a power of two")
    if n == 1:
        return x.astype(np.complex128)
    half = n // 2
    z = _fft_complex(x[..., 0::2] + 1j * x[..., 1::2])
    z_ext = np.concatenate([z, z[..., :1]], axis=-1)  # Z[half] wraps to Z[0]
    mirrored = np.conj(z_ext[..., ::-1])  # conj(Z[half - k]) for k = 0..half
    even = 0.5 * (z_ext + mirrored)
    odd = -0.5j * (z_ext - mirrored)
    return even + np.exp(-2j * np.pi * np.arange(half + 1) / n) * odd


def naive_dft(frame: np.ndarray) -> np.ndarray:
    x = np.asarray(frame, dtype=np.float64)
    n = x.size
    k = np.arange(n // 2 + 1)[:, None]
    return (x[None, :] * np.exp(-2j * np.pi * k * np.arange(n)[None, :] / n)).sum(axis=1)


def hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = 1 + (samples.size - n_fft) // hop
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def stft_magnitude(clip: AudioClip, cfg: SpectralConfig) -> np.ndarray:
    """|STFT| as (n_fft/2 + 1) x n_frames, Hann-windowed, no centering."""
    if clip.samples.size < cfg.n_fft:
        raise UsageError(
            f"{clip.source_id or 'clip'}: {clip.samples.size} samples is shorter than n_fft={cfg.n_fft}; "
            "segment or pad the clip first"
        )
    frames = frame_signal(clip.samples, cfg.n_fft, cfg.hop_length) * hann(cfg.n_fft)
    return np.abs(fft_real(frames)).T


def stft_log(clip: AudioClip, cfg: SpectralConfig) -> np.ndarray:
    return np.log(np.maximum(stft_magnitude(clip, cfg), EPS))


# ------------------------------------------------------------------ mel

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class FilterBank:
    weights: np.ndarray
    center_frequencies: np.ndarray
    bin_frequencies: np.ndarray = field(repr=False)


def mel_filterbank(cfg: SpectralConfig, sample_rate: int | None = None) -> FilterBank:
    sr = cfg.sample_rate if sample_rate is None else sample_rate
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_fft // 2 + 1) * sr / cfg.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1)
    empty = np.flatnonzero(peaks <= 0)
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filter {int(empty[0])} "
            f"({edges[empty[0] + 1]:.1f} Hz) covers no FFT bin"
        )
    return FilterBank(weights / peaks[:, None], edges[1:-1].copy(), freqs)


def mel_spectrogram(clip: AudioClip, cfg: SpectralConfig, bank: FilterBank | None = None) -> np.ndarray:
    bank = bank or mel_filterbank(cfg, clip.sample_rate)
    power = stft_magnitude(clip, cfg) ** 2
    return np.log(np.maximum(bank.weights @ power, EPS))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an (n, n) matrix acting on column vectors."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * i + 1) / (2 * n))
    mat[0] /= np.sqrt(2.0)
    return mat


def mfcc_from_logmel(logmel: np.ndarray, n_mfcc: int) -> np.ndarray:
    return dct_matrix(logmel.shape[0])[:n_mfcc] @ logmel


def mfcc(clip: AudioClip, cfg: SpectralConfig, bank: FilterBank | None = None) -> np.ndarray:
    return mfcc_from_logmel(mel_spectrogram(clip, cfg, bank), cfg.n_mfcc)


# ------------------------------------------------------------------ stacking

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    if n_in == 1:
        mat[:, 0] = 1.0
        return mat
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def resize_bilinear(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with corner alignment; output stays within the input range."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape == (height, width):
        return grid.copy()
    out = _interp_matrix(grid.shape[0], height) @ grid @ _interp_matrix(grid.shape[1], width).T
    return np.clip(out, grid.min(), grid.max())


@dataclass
class SpectralStack:
    channels: np.ndarray  # (3, H, W) in CHANNEL_ORDER
    source_id: str = ""

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[0] != 3:
            raise DimensionError(f"spectral stack must be 3 x H x W, got {self.channels.shape}")


def spectral_grids(clip: AudioClip, cfg: SpectralConfig, bank: FilterBank | None = None):
    """(log-mel, log-magnitude STFT, MFCC) at native resolution from one STFT pass."""
    if clip.sample_rate != cfg.sample_rate:
        raise IngestionError(
            f"{clip.source_id or 'clip'}: sample rate {clip.sample_rate} Hz does not match "
            f"configured {cfg.sample_rate} Hz (resampling is not supported)"
        )
    bank = bank or mel_filterbank(cfg, clip.sample_rate)
    mag = stft_magnitude(clip, cfg)
    logmel = np.log(np.maximum(bank.weights @ (mag ** 2), EPS))
    return logmel, np.log(np.maximum(mag, EPS)), mfcc_from_logmel(logmel, cfg.n_mfcc)


def stack_grids(grids, cfg: SpectralConfig, source_id: str = "") -> SpectralStack:
    return SpectralStack(np.stack([resize_bilinear(g, cfg.height, cfg.width) for g in grids]), source_id)


def build_spectral_stack(clip: AudioClip, cfg: SpectralConfig, stats: "ChannelStats | None" = None,
                         bank: FilterBank | None = None) -> SpectralStack:
    """[MEL, STFT, MFCC] channels resized to the target grid, optionally standardized."""
    stack = stack_grids(spectral_grids(clip, cfg, bank), cfg, clip.source_id)
    return stats.apply(stack) if stats is not None else stack


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, stacks) -> "ChannelStats":
        arr = np.stack([s.channels if isinstance(s, SpectralStack) else s for s in stacks])
        mean = arr.mean(axis=(0, 2, 3))
        std = arr.std(axis=(0, 2, 3))
        std[std == 0] = 1.0
        return cls(mean, std)

    def apply(self, stack: SpectralStack) -> SpectralStack:
        z = (stack.channels - self.mean[:, None, None]) / self.std[:, None, None]
        return SpectralStack(z, stack.source_id)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))
