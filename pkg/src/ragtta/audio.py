"""Waveform container, log-mel front end, WAV I/O and Griffin-Lim inversion."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
from scipy.io import wavfile

from .errors import RejectedInput

SAMPLE_RATE = 16000
N_FFT = 400  # 25 ms
HOP = 160  # 10 ms
N_MELS = 16
DB_FLOOR = -80.0
DB_CEIL = 10.0
GRIFFIN_LIM_ITERS = 32


@lru_cache(maxsize=None)
def mel_basis() -> np.ndarray:
    return librosa.filters.mel(sr=SAMPLE_RATE, n_fft=N_FFT, n_mels=N_MELS, fmin=0.0,
                               fmax=SAMPLE_RATE / 2, norm=None).astype(np.float64)


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    return librosa.filters.get_window("hann", N_FFT, fftbins=True)


@lru_cache(maxsize=None)
def _mel_pinv() -> np.ndarray:
    return np.linalg.pinv(mel_basis())


def n_frames_for(n_samples: int) -> int:
    """Frames produced by the uncentered STFT for ``n_samples`` samples."""
    if n_samples < N_FFT:
        return 0
    return 1 + (n_samples - N_FFT) // HOP


def log_mel(samples: np.ndarray) -> np.ndarray:
    """Log-mel grid in dB, shape (N_MELS, n_frames), floored at DB_FLOOR.

    Power is scaled so a unit-amplitude sinusoid centred on an FFT bin has
    peak bin power 1 (0 dB).
    """
    x = np.asarray(samples, dtype=np.float64)
    if n_frames_for(len(x)) == 0:
        return np.zeros((N_MELS, 0))
    spec = librosa.stft(x, n_fft=N_FFT, hop_length=HOP, win_length=N_FFT,
                        window=_window(), center=False)
    power = np.abs(spec) ** 2 / (np.sum(_window()) / 2.0) ** 2
    mel = mel_basis() @ power
    return 10.0 * np.log10(np.maximum(mel, 10.0 ** (DB_FLOOR / 10.0)))


def normalize_db(mel_db: np.ndarray) -> np.ndarray:
    """Map dB values in [DB_FLOOR, DB_CEIL] onto [-1, 1] (clipped)."""
    x = 2.0 * (np.asarray(mel_db) - DB_FLOOR) / (DB_CEIL - DB_FLOOR) - 1.0
    return np.clip(x, -1.0, 1.0)


def denormalize_db(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return (x + 1.0) / 2.0 * (DB_CEIL - DB_FLOOR) + DB_FLOOR


@dataclass
class AudioClip:
    """Mono 16 kHz waveform with its log-mel grid.

    ``mel`` is derived from ``samples`` unless supplied explicitly; generated
    clips carry the model's mel output, whose Griffin-Lim waveform is only
    an approximate rendering of it.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    _mel: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise RejectedInput(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float32)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def mel(self) -> np.ndarray:
        if self._mel is None:
            self._mel = log_mel(self.samples)
        return self._mel

    @property
    def mel_is_derived(self) -> bool:
        return self._mel is None or np.array_equal(self._mel, log_mel(self.samples))

    @classmethod
    def from_mel(cls, mel_db: np.ndarray, n_samples: int | None = None) -> "AudioClip":
        """Build a clip around a (generated) mel grid, rendering audio by Griffin-Lim."""
        samples = mel_to_audio(mel_db, n_samples)
        return cls(samples=samples, _mel=np.asarray(mel_db, dtype=np.float64))

    @classmethod
    def silence(cls, duration: float) -> "AudioClip":
        return cls(samples=np.zeros(int(round(duration * SAMPLE_RATE)), dtype=np.float32))


def mel_to_audio(mel_db: np.ndarray, n_samples: int | None = None,
                 n_iter: int = GRIFFIN_LIM_ITERS) -> np.ndarray:
    n_frames = mel_db.shape[1]
    if n_samples is None:
        n_samples = N_FFT + (n_frames - 1) * HOP
    power = 10.0 ** (np.asarray(mel_db, dtype=np.float64) / 10.0)
    power[np.asarray(mel_db) <= DB_FLOOR] = 0.0
    power *= (np.sum(_window()) / 2.0) ** 2
    # clipped pseudo-inverse; an exact non-negative solve costs minutes per clip here
    stft_power = _mel_pinv() @ power
    magnitude = np.sqrt(np.maximum(stft_power, 0.0))
    y = librosa.griffinlim(magnitude, n_iter=n_iter, hop_length=HOP, win_length=N_FFT,
                           window=_window(), center=False, length=n_samples,
                           random_state=0, momentum=0.99, init="random")
    peak = np.max(np.abs(y)) if len(y) else 0.0
    if peak > 1.0:
        y = y / peak
    return y.astype(np.float32)


def write_wav(path: str | Path, clip: AudioClip) -> None:
    """32-bit float PCM, mono, 16 kHz."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), clip.sample_rate, np.clip(clip.samples, -1.0, 1.0).astype("<f4"))


def read_wav(path: str | Path) -> AudioClip:
    sr, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise RejectedInput(f"{path}: expected mono audio")
    if data.dtype != np.float32:
        if np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.float32) / float(np.iinfo(data.dtype).max)
        else:
            data = data.astype(np.float32)
    return AudioClip(samples=data, sample_rate=int(sr))
