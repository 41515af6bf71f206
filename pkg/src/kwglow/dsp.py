"""Audio I/O and the audio -> log-mel-spectrogram front end.

Conventions fixed here (and recorded in checkpoint headers so features and
models never mix them): periodic Hann window, centered framing with
mirrored padding of filter_length/2 giving n_frames = floor(N/hop) + 1,
the 2595*log10(1 + f/700) mel scale, and natural-log compression with a
1e-5 floor applied to magnitude (not power) mel energies.
"""

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (
    ConfigInvalid,
    CorruptFile,
    EmptyAudio,
    IoFailure,
    NotWav,
    UnsupportedFormat,
)

CORPUS_SAMPLE_RATE = 22050

MEL_FILE_MAGIC = b"KMEL1"


@dataclass
class AudioClip:
    """Mono waveform, amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    filter_length: int = 1024
    hop_length: int = 256
    win_length: int = 1024
    window: str = "hann"

    def validate(self) -> None:
        if min(self.filter_length, self.hop_length, self.win_length) <= 0:
            raise ConfigInvalid("filter/hop/win lengths must be positive")
        if self.win_length > self.filter_length:
            raise ConfigInvalid("win_length must not exceed filter_length")
        if self.hop_length > self.win_length:
            raise ConfigInvalid("hop_length must not exceed win_length")
        if self.window != "hann":
            raise ConfigInvalid(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.filter_length // 2 + 1


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    compression_floor: float = 1e-5

    def validate(self, sample_rate: int) -> None:
        if self.n_mels <= 0:
            raise ConfigInvalid("n_mels must be positive")
        if not 0.0 <= self.fmin < self.fmax:
            raise ConfigInvalid("need 0 <= fmin < fmax")
        if self.fmax > sample_rate / 2:
            raise ConfigInvalid(
                f"fmax {self.fmax} above Nyquist for rate {sample_rate}"
            )
        if self.compression_floor <= 0:
            raise ConfigInvalid("compression_floor must be positive")


@dataclass
class MelSpectrogram:
    """Log-compressed mel energies, one column per frame."""

    values: np.ndarray
    hop_length: int
    sample_rate: int

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def expected_frames(n_samples: int, hop_length: int) -> int:
    """Frame count under centered framing."""
    return n_samples // hop_length + 1


# --- WAV I/O (RIFF, 16-bit PCM mono) ---

def _parse_riff_chunks(data: bytes, path) -> dict:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotWav(f"{path}: not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        chunks[cid] = (pos + 8, size)
        pos += 8 + size + (size & 1)
    return chunks


def _read_fmt(data: bytes, chunks: dict, path):
    if b"fmt " not in chunks or b"data" not in chunks:
        raise NotWav(f"{path}: missing fmt/data chunk")
    off, size = chunks[b"fmt "]
    if size < 16:
        raise NotWav(f"{path}: truncated fmt chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, off)
    if audio_format != 1 or bits != 16:
        raise UnsupportedFormat(
            f"{path}: need 16-bit PCM, got format={audio_format} bits={bits}"
        )
    if channels != 1:
        raise UnsupportedFormat(f"{path}: need mono, got {channels} channels")
    return rate


def load_wav(path) -> AudioClip:
    """Decode a 16-bit PCM mono WAV to floats in [-1, 1) (divide by 32768)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    chunks = _parse_riff_chunks(data, path)
    rate = _read_fmt(data, chunks, path)
    off, size = chunks[b"data"]
    size = min(size, len(data) - off)
    n = size // 2
    if n == 0:
        raise EmptyAudio(f"{path}: zero samples")
    pcm = np.frombuffer(data, dtype="<i2", count=n, offset=off)
    return AudioClip(pcm.astype(np.float32) / 32768.0, rate)


def probe_wav(path) -> dict:
    """Header-only probe: format fields and the declared duration.

    Trusts the data chunk's declared size, so it works on metadata-only
    fixtures whose payload is absent.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read(4096)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    chunks = _parse_riff_chunks(data, path)
    rate = _read_fmt(data, chunks, path)
    _, size = chunks[b"data"]
    n = size // 2
    if n == 0:
        raise EmptyAudio(f"{path}: zero samples")
    return {"sample_rate": rate, "n_samples": n, "duration": n / rate}


def save_wav(clip: AudioClip, path) -> None:
    """Write 16-bit PCM mono; values clamped to [-1, 1 - 1/32768] first."""
    if len(clip) == 0:
        raise EmptyAudio("refusing to write an empty clip")
    x = np.clip(np.asarray(clip.samples, dtype=np.float64), -1.0, 32767 / 32768)
    pcm = np.round(x * 32768.0).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack(
        "<IHHIIHH", 16, 1, 1, clip.sample_rate, clip.sample_rate * 2, 2, 16
    )
    header += b"data" + struct.pack("<I", len(body))
    try:
        with open(path, "wb") as fh:
            fh.write(header + body)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# --- STFT / mel ---

def _mirror_indices(n: int, pad: int) -> np.ndarray:
    """Reflection indices (edge not repeated) valid for any pad, any n >= 1."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


@lru_cache(maxsize=8)
def _window_buffer(cfg: StftConfig) -> np.ndarray:
    # periodic Hann, zero-padded to filter_length when win_length is shorter
    n = cfg.win_length
    win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    buf = np.zeros(cfg.filter_length)
    off = (cfg.filter_length - n) // 2
    buf[off:off + n] = win
    return buf


def stft(clip: AudioClip, cfg: StftConfig) -> np.ndarray:
    """One-sided spectrum, shape (filter_length/2 + 1, n_frames)."""
    cfg.validate()
    x = np.asarray(clip.samples, dtype=np.float64)
    if x.size == 0:
        raise EmptyAudio("stft of an empty clip")
    pad = cfg.filter_length // 2
    padded = x[_mirror_indices(x.size, pad)]
    n_frames = expected_frames(x.size, cfg.hop_length)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.filter_length)
    frames = frames[::cfg.hop_length][:n_frames]
    spec = np.fft.rfft(frames * _window_buffer(cfg), axis=1)
    return spec.T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig, stft_cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """Triangular filters, centers equally spaced in mel between fmin and fmax."""
    cfg.validate(sample_rate)
    stft_cfg.validate()
    points = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    )
    bin_freqs = np.arange(stft_cfg.n_bins) * sample_rate / stft_cfg.filter_length
    lower = points[:-2, None]
    center = points[1:-1, None]
    upper = points[2:, None]
    rising = (bin_freqs - lower) / (center - lower)
    falling = (upper - bin_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_spectrogram(clip: AudioClip, stft_cfg: StftConfig, mel_cfg: MelConfig) -> MelSpectrogram:
    """ln(max(floor, filterbank @ |stft|)); natural log on magnitude spectra."""
    mel_cfg.validate(clip.sample_rate)
    fb = mel_filterbank(mel_cfg, stft_cfg, clip.sample_rate)
    magnitudes = np.abs(stft(clip, stft_cfg))
    values = np.log(np.maximum(mel_cfg.compression_floor, fb @ magnitudes))
    return MelSpectrogram(values.astype(np.float32), stft_cfg.hop_length, clip.sample_rate)


def sample_segment(clip: AudioClip, segment_length: int, rng: np.random.Generator) -> AudioClip:
    """Uniformly random contiguous window; short clips are zero-padded at the end."""
    if segment_length <= 0:
        raise ConfigInvalid("segment_length must be positive")
    x = clip.samples
    if len(x) >= segment_length:
        start = int(rng.integers(0, len(x) - segment_length + 1))
        seg = x[start:start + segment_length]
    else:
        seg = np.zeros(segment_length, dtype=x.dtype)
        seg[:len(x)] = x
    return AudioClip(np.array(seg, copy=True), clip.sample_rate)


# --- mel feature files ---

def write_mel_file(mel: MelSpectrogram, path) -> None:
    header = MEL_FILE_MAGIC + struct.pack(
        "<IIII", mel.n_mels, mel.n_frames, mel.hop_length, mel.sample_rate
    )
    body = np.ascontiguousarray(mel.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header + body)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_mel_file(path) -> MelSpectrogram:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if data[:5] != MEL_FILE_MAGIC:
        raise CorruptFile(f"{path}: bad magic")
    if len(data) < 5 + 16:
        raise CorruptFile(f"{path}: truncated header")
    n_mels, n_frames, hop, rate = struct.unpack_from("<IIII", data, 5)
    expected = 5 + 16 + 4 * n_mels * n_frames
    if len(data) != expected:
        raise CorruptFile(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=21).reshape(n_mels, n_frames)
    return MelSpectrogram(values.copy(), hop, rate)
