"""WAV I/O, log10 mel-spectrogram extraction and Griffin-Lim reconstruction.

Extraction parameters: 16 kHz audio, 1024-point STFT with a periodic Hann
window of length 1024, hop 256, no centre padding, 80 triangular mel bands
between 80 Hz and 7600 Hz, energies clamped at 1e-5 before log10.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window, resample_poly

SAMPLE_RATE = 16000
N_FFT = 1024
WIN_LENGTH = 1024
HOP_LENGTH = 256
N_MELS = 80
FMIN = 80.0
FMAX = 7600.0
MEL_FLOOR = 1e-5
FRAME_RATE = SAMPLE_RATE / HOP_LENGTH  # 62.5 Hz

MELF_MAGIC = b"MELF"
MELF_VERSION = 1


class AudioError(ValueError):
    """Unreadable, unsupported or too-short audio."""


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T, 80) float32
    frame_rate: float = FRAME_RATE

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[1] != N_MELS:
            raise ValueError(f"mel frames must be (T, {N_MELS}), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    centers_hz: np.ndarray
    edges_hz: np.ndarray  # n_mels + 2 breakpoints


# -- wav io --------------------------------------------------------------------

def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise AudioError(f"unsupported WAV sample type {data.dtype}")


def resample(samples: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    """Windowed-sinc polyphase resampling."""
    if orig_sr == target_sr:
        return samples
    g = math.gcd(int(orig_sr), int(target_sr))
    return resample_poly(samples, target_sr // g, orig_sr // g)


def load_wav(path) -> AudioSignal:
    """Read a PCM/float WAV as a mono 16 kHz signal in [-1, 1]."""
    path = Path(path)
    try:
        sr, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: no such file") from None
    except Exception as exc:  # scipy raises ValueError / struct.error on bad headers
        raise AudioError(f"{path}: cannot read WAV ({exc})") from exc
    x = _to_float(np.asarray(data))
    if x.ndim == 2:
        x = x.mean(axis=1)
    elif x.ndim != 1:
        raise AudioError(f"{path}: unexpected WAV layout {data.shape}")
    x = resample(x, sr)
    x = np.clip(x, -1.0, 1.0)
    if not np.all(np.isfinite(x)):
        raise AudioError(f"{path}: non-finite samples")
    return AudioSignal(x, SAMPLE_RATE)


def save_wav(path, signal: AudioSignal) -> None:
    """Write 16-bit PCM."""
    pcm = np.round(np.clip(signal.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(Path(path), signal.sample_rate, pcm)


# -- mel ----------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(
    n_mels: int = N_MELS,
    n_fft: int = N_FFT,
    sr: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> MelFilterbank:
    """Unit-peak triangular filters with centres evenly spaced in mel."""
    if not 0 <= fmin < fmax:
        raise ValueError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if fmax > sr / 2:
        raise ValueError(f"fmax={fmax} exceeds the Nyquist frequency {sr / 2}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lo) / (center - lo)
    falling = (hi - bins[None, :]) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    if np.any(weights.max(axis=1) <= 0):
        raise ValueError("filterbank has an empty band; lower n_mels or raise n_fft")
    return MelFilterbank(weights, edges[1:-1].copy(), edges)


@functools.lru_cache(maxsize=None)
def default_filterbank() -> MelFilterbank:
    return build_mel_filterbank()


@functools.lru_cache(maxsize=None)
def _filterbank_pinv() -> np.ndarray:
    return np.linalg.pinv(default_filterbank().weights)


@functools.lru_cache(maxsize=None)
def hann_window(n: int = WIN_LENGTH) -> np.ndarray:
    return get_window("hann", n, fftbins=True)


def num_frames(n_samples: int) -> int:
    return (n_samples - WIN_LENGTH) // HOP_LENGTH + 1


def stft(x: np.ndarray) -> np.ndarray:
    """Complex STFT, (frames, n_fft // 2 + 1), no centre padding."""
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH]
    return np.fft.rfft(frames * hann_window(), n=N_FFT, axis=-1)


def istft(spec: np.ndarray) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n = spec.shape[0]
    length = (n - 1) * HOP_LENGTH + WIN_LENGTH
    win = hann_window()
    frames = np.fft.irfft(spec, n=N_FFT, axis=-1)[:, :WIN_LENGTH] * win
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n):
        s = t * HOP_LENGTH
        out[s : s + WIN_LENGTH] += frames[t]
        norm[s : s + WIN_LENGTH] += win * win
    return out / np.maximum(norm, 1e-3)


def _as_samples(signal) -> np.ndarray:
    if isinstance(signal, AudioSignal):
        if signal.sample_rate != SAMPLE_RATE:
            raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {signal.sample_rate}")
        return np.asarray(signal.samples, dtype=np.float64)
    return np.asarray(signal, dtype=np.float64)


def extract_mel(signal) -> MelSpectrogram:
    x = _as_samples(signal)
    if x.ndim != 1 or x.size < WIN_LENGTH:
        raise AudioError(
            f"signal has {x.size} samples; at least {WIN_LENGTH} ({WIN_LENGTH / SAMPLE_RATE * 1000:.0f} ms) required"
        )
    mag = np.abs(stft(x))
    mel = mag @ default_filterbank().weights.T
    return MelSpectrogram(np.log10(np.maximum(mel, MEL_FLOOR)).astype(np.float32))


def griffin_lim(mel, iterations: int = 60, *, seed: int = 0, trim: bool = False) -> AudioSignal:
    """Reconstruct audio from a log10 mel-spectrogram.

    The filterbank pseudo-inverse recovers approximate linear magnitudes
    (negative values clamped to zero), then phase is refined for
    ``iterations`` rounds.  The full output has (T - 1) * hop + n_fft samples,
    so re-extraction yields exactly T frames; ``trim=True`` drops
    (n_fft - hop) / 2 samples from each end, leaving T * hop samples.
    """
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if frames.ndim != 2 or frames.shape[1] != N_MELS or frames.shape[0] < 1:
        raise ValueError(f"mel must be (T >= 1, {N_MELS}), got {frames.shape}")
    mag = np.maximum(10.0 ** frames.astype(np.float64) @ _filterbank_pinv().T, 0.0)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase)
    for _ in range(iterations - 1):
        spec = stft(x)
        phase = np.exp(1j * np.angle(spec))
        x = istft(mag * phase)
    x = np.clip(x, -1.0, 1.0)
    if trim:
        cut = (WIN_LENGTH - HOP_LENGTH) // 2
        x = x[cut : len(x) - cut]
    return AudioSignal(x, SAMPLE_RATE)


# -- MELF feature files -----------------------------------------------------------------

def write_melf(path, mel: MelSpectrogram) -> None:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    t, n = frames.shape
    with open(path, "wb") as fh:
        fh.write(MELF_MAGIC + struct.pack("<III", MELF_VERSION, t, n))
        fh.write(frames.tobytes())


def read_melf(path) -> MelSpectrogram:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != MELF_MAGIC:
            raise AudioError(f"{path}: not a MELF file")
        version, t, n = struct.unpack("<III", header[4:])
        if version != MELF_VERSION:
            raise AudioError(f"{path}: unsupported MELF version {version}")
        if n != N_MELS:
            raise AudioError(f"{path}: expected {N_MELS} mel bands, found {n}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * n:
        raise AudioError(f"{path}: truncated MELF payload ({data.size} of {t * n} values)")
    return MelSpectrogram(data.reshape(t, n).astype(np.float32))
