"""Audio I/O, framing and log mel-filterbank energies."""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
DEFAULT_SR = 16000
FRAME_MS = 25.0
HOP_MS = 10.0
N_MELS = 80

FEAT_MAGIC = b"DWFT"
FEAT_VERSION = 1


class FormatError(ValueError):
    """Raised for malformed or unsupported audio/feature files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class FeatureSequence:
    """``D x T`` log filterbank energies, frames in time order."""

    data: np.ndarray
    hop_ms: float = HOP_MS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise ValueError(f"feature data must be D x T with T >= 1, got {self.data.shape}")

    @property
    def n_mels(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


def as_matrix(x) -> np.ndarray:
    """The ``D x T`` array behind a FeatureSequence, or ``x`` itself as float64."""
    return x.data if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)


def ms_to_samples(ms: float, sample_rate: int) -> int:
    return int(round(ms * sample_rate / 1000.0))


def frame_signal(wave_: Waveform, frame_len_ms: float = FRAME_MS, hop_ms: float = HOP_MS) -> np.ndarray:
    """Cut a waveform into Hann-windowed frames, shape ``(n_frames, frame_len)``."""
    if not (frame_len_ms >= hop_ms > 0):
        raise ValueError(f"need frame_len_ms >= hop_ms > 0, got {frame_len_ms}, {hop_ms}")
    n = len(wave_.samples)
    if n == 0:
        raise ValueError("cannot frame an empty waveform")
    flen = ms_to_samples(frame_len_ms, wave_.sample_rate)
    hop = ms_to_samples(hop_ms, wave_.sample_rate)
    if n < flen:
        raise ValueError(f"waveform has {n} samples, shorter than one frame of {flen} samples")
    n_frames = 1 + (n - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(n_frames)[:, None]
    return wave_.samples[idx] * hann(flen)[None, :]


def hann(n: int) -> np.ndarray:
    # periodic Hann, the usual choice for STFT analysis
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    return edges[1:-1]


def mel_filters(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters (peak 1) from 0 Hz to Nyquist, shape ``(n_mels, n_fft//2+1)``."""
    n_bins = n_fft // 2 + 1
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if n_mels > n_bins - 2:
        raise ValueError(f"n_mels={n_mels} exceeds the {n_bins} usable DFT bins")
    freqs = np.arange(n_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    empty = np.nonzero(fb.sum(axis=1) == 0)[0]
    if len(empty):
        raise ValueError(f"n_mels={n_mels} too large for n_fft={n_fft}: filter {empty[0]} covers no DFT bin")
    return fb


def mel_filterbank(frames: np.ndarray, sample_rate: int = DEFAULT_SR, n_mels: int = N_MELS,
                   hop_ms: float = HOP_MS) -> FeatureSequence:
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] == 0:
        raise ValueError("no frames to analyse")
    n_fft = frames.shape[1]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    energies = power @ mel_filters(n_mels, n_fft, sample_rate).T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)).T, hop_ms=hop_ms)


def extract(wave_: Waveform, n_mels: int = N_MELS, frame_len_ms: float = FRAME_MS,
            hop_ms: float = HOP_MS) -> FeatureSequence:
    frames = frame_signal(wave_, frame_len_ms, hop_ms)
    return mel_filterbank(frames, wave_.sample_rate, n_mels, hop_ms)


# --------------------------------------------------------------------- WAV I/O


def read_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            n = w.getnframes()
            raw = w.readframes(n)
    except wave.Error as exc:
        raise FormatError(f"{path}: unsupported or malformed WAV ({exc})") from None
    except EOFError:
        raise FormatError(f"{path}: truncated WAV header") from None
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, file has {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, sample width is {8 * width} bits")
    if n == 0:
        raise FormatError(f"{path}: data chunk is empty")
    if len(raw) != 2 * n:
        raise FormatError(f"{path}: truncated data chunk ({len(raw) // 2} of {n} samples)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(pcm / 32768.0, rate)


def write_wav(wave_: Waveform, path) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(wave_.sample_rate))
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- feature file


def write_features(feats: FeatureSequence, path) -> None:
    D, T = feats.data.shape
    header = FEAT_MAGIC + struct.pack("<IIIf", FEAT_VERSION, D, T, feats.hop_ms)
    body = np.ascontiguousarray(feats.data.T, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_features(path) -> FeatureSequence:
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:4] != FEAT_MAGIC:
        raise FormatError(f"{path}: not a DWFT feature file")
    version, D, T, hop = struct.unpack("<IIIf", blob[4:20])
    if version != FEAT_VERSION:
        raise FormatError(f"{path}: unsupported feature file version {version}")
    need = 20 + 4 * D * T
    if len(blob) != need:
        raise FormatError(f"{path}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=20).reshape(T, D).T.astype(np.float64)
    return FeatureSequence(data, hop_ms=float(hop))
