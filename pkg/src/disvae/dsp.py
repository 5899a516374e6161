"""Audio front end: WAV I/O, STFT, mel filterbank, log-mel features, Griffin-Lim.

Fixed settings: 16 kHz audio, 1024-sample Hamming window, hop 256, 80 mel
bins over 0-8000 Hz, power spectrum into the filterbank, log with a 1e-10
floor, and min/max normalization to [0, 1] with corpus-global statistics.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .errors import (
    FilterbankError,
    ParameterError,
    SampleRateError,
    SignalLengthError,
    StatsError,
    WavFormatError,
)

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10
N_MELS = 80


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise SampleRateError(f"expected {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class SpectrogramConfig:
    sample_rate: int = SAMPLE_RATE
    fft_size: int = 1024
    hop: int = 256
    n_mels: int = N_MELS
    fmin: float = 0.0
    fmax: float = 8000.0

    def __post_init__(self):
        if self.hop >= self.fft_size:
            raise ParameterError(f"hop ({self.hop}) must be smaller than fft_size ({self.fft_size})")
        if self.n_mels != N_MELS:
            raise ParameterError(f"n_mels is fixed at {N_MELS}, got {self.n_mels}")

    @property
    def window(self) -> np.ndarray:
        return np.hamming(self.fft_size)

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, fft_size // 2 + 1)
    centers_hz: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class NormalizationStats:
    min_val: float
    max_val: float

    def __post_init__(self):
        if not self.min_val < self.max_val:
            raise StatsError(f"min ({self.min_val}) must be below max ({self.max_val})")

    @property
    def stats_id(self) -> str:
        return f"{self.min_val!r}:{self.max_val!r}"


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T, 80)
    normalized: bool = False
    stats_id: str | None = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 2 or f.shape[1] != N_MELS or f.shape[0] < 1:
            raise ValueError(f"mel frames must be (T>=1, {N_MELS}), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("mel frames contain non-finite values")
        if self.normalized and (f.min() < 0 or f.max() > 1):
            raise ValueError("normalized mel entries must lie in [0, 1]")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# WAV


def load_wav(path) -> Waveform:
    """Read a 16-bit PCM WAV file; multi-channel files contribute their first channel."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAVE file ({exc})") from exc
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if rate != SAMPLE_RATE:
        raise SampleRateError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, n_channels)[:, 0]
    return Waveform(pcm.astype(np.float64) / 32768.0)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# STFT


def num_frames(n_samples: int, hop: int) -> int:
    return 1 + n_samples // hop


def _frames(padded: np.ndarray, n_frames: int, cfg: SpectrogramConfig) -> np.ndarray:
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return padded[idx] * cfg.window


def stft(w: Waveform | np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Complex centered STFT, shape (T, fft_size/2 + 1), reflect padding."""
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if len(x) < cfg.fft_size:
        raise SignalLengthError(f"signal of {len(x)} samples is shorter than one window ({cfg.fft_size})")
    pad = cfg.fft_size // 2
    padded = np.pad(x, pad, mode="reflect")
    return np.fft.rfft(_frames(padded, num_frames(len(x), cfg.hop), cfg), axis=1)


def stft_magnitude(w: Waveform | np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    return np.abs(stft(w, cfg))


# ---------------------------------------------------------------------------
# mel filterbank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(cfg: SpectrogramConfig) -> MelFilterbank:
    """Triangular filters (peak 1) with edges equally spaced on the mel scale."""
    if not (0 <= cfg.fmin < cfg.fmax <= cfg.sample_rate / 2):
        raise FilterbankError(f"need 0 <= fmin < fmax <= {cfg.sample_rate / 2}, got {cfg.fmin}, {cfg.fmax}")
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    freqs = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.max(axis=1) <= 0)
    if empty.size:
        raise FilterbankError(
            f"{empty.size} mel filters cover no FFT bin (first: {empty[0]}); "
            f"n_mels={cfg.n_mels} is too large for fft_size={cfg.fft_size}"
        )
    return MelFilterbank(weights, edges[1:-1].copy())


# ---------------------------------------------------------------------------
# log-mel features


def wav_to_logmel(w: Waveform, cfg: SpectrogramConfig, fb: MelFilterbank) -> MelSpectrogram:
    power = stft_magnitude(w, cfg) ** 2
    mel = power @ fb.weights.T
    return MelSpectrogram(np.log(np.maximum(mel, LOG_FLOOR)), normalized=False)


def normalize(m: MelSpectrogram, s: NormalizationStats) -> MelSpectrogram:
    if m.normalized:
        raise ValueError("mel spectrogram is already normalized")
    scaled = (m.frames - s.min_val) / (s.max_val - s.min_val)
    return MelSpectrogram(np.clip(scaled, 0.0, 1.0), normalized=True, stats_id=s.stats_id)


def denormalize(m: MelSpectrogram, s: NormalizationStats) -> MelSpectrogram:
    if not m.normalized:
        raise ValueError("mel spectrogram is not normalized")
    return MelSpectrogram(m.frames * (s.max_val - s.min_val) + s.min_val, normalized=False)


def compute_stats(mels) -> NormalizationStats:
    mels = list(mels)
    lo = min(float(m.frames.min()) for m in mels)
    hi = max(float(m.frames.max()) for m in mels)
    return NormalizationStats(lo, hi)


# ---------------------------------------------------------------------------
# Griffin-Lim


def mel_to_linear(m: MelSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Nonnegative least-squares estimate of the linear magnitude spectrogram."""
    if m.normalized:
        raise ValueError("Griffin-Lim needs a denormalized (log-mel) spectrogram")
    target = np.exp(m.frames)
    power = np.empty((m.n_frames, fb.weights.shape[1]))
    for t, row in enumerate(target):
        power[t], _ = nnls(fb.weights, row)
    return np.sqrt(power)


def _istft_padded(spec: np.ndarray, cfg: SpectrogramConfig) -> np.ndarray:
    """Least-squares signal for a (possibly inconsistent) STFT, in the padded domain."""
    n_frames = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * cfg.window
    length = cfg.hop * (n_frames - 1) + cfg.fft_size
    out = np.zeros(length)
    norm = np.zeros(length)
    win_sq = cfg.window**2
    for t in range(n_frames):
        sl = slice(t * cfg.hop, t * cfg.hop + cfg.fft_size)
        out[sl] += frames[t]
        norm[sl] += win_sq
    return out / norm


def _stft_padded(y: np.ndarray, n_frames: int, cfg: SpectrogramConfig) -> np.ndarray:
    return np.fft.rfft(_frames(y, n_frames, cfg), axis=1)


def griffin_lim_magnitude(magnitude: np.ndarray, cfg: SpectrogramConfig, iterations: int = 60,
                          seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """Estimate a signal whose STFT magnitude matches ``magnitude`` (T, n_bins).

    Iterates in the padded signal domain, where the overlap-add inverse is the
    exact least-squares projection; that makes the spectral-convergence
    residual ``||(|STFT(y)| - S)|| / ||S||`` non-increasing. Returns the
    unpadded signal (length T*hop) and the residual after every iteration.
    """
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    n_frames = magnitude.shape[0]
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    ref = max(float(np.linalg.norm(magnitude)), 1e-30)
    residuals = []
    y = _istft_padded(magnitude * phase, cfg)
    for _ in range(iterations):
        spec = _stft_padded(y, n_frames, cfg)
        residuals.append(float(np.linalg.norm(np.abs(spec) - magnitude)) / ref)
        y = _istft_padded(magnitude * np.exp(1j * np.angle(spec)), cfg)
    pad = cfg.fft_size // 2
    return y[pad : pad + n_frames * cfg.hop], residuals


def griffin_lim(m: MelSpectrogram, cfg: SpectrogramConfig, fb: MelFilterbank, iterations: int = 60,
                seed: int = 0) -> Waveform:
    if iterations < 1:
        raise ParameterError(f"iterations must be >= 1, got {iterations}")
    samples, _ = griffin_lim_magnitude(mel_to_linear(m, fb), cfg, iterations, seed)
    return Waveform(np.clip(samples, -1.0, 1.0))


# ---------------------------------------------------------------------------
# feature cache files

_DVF_MAGIC = b"DVF1"
_DVS_MAGIC = b"DVS1"


def save_features(path, m: MelSpectrogram):
    frames = np.ascontiguousarray(m.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_DVF_MAGIC)
        fh.write(struct.pack("<IIB", frames.shape[0], frames.shape[1], int(m.normalized)))
        fh.write(frames.tobytes())


def load_features(path) -> MelSpectrogram:
    data = Path(path).read_bytes()
    if data[:4] != _DVF_MAGIC:
        raise WavFormatError(f"{path}: not a DVF1 feature file")
    if len(data) < 13:
        raise WavFormatError(f"{path}: truncated DVF1 header")
    t, n_mels, flag = struct.unpack_from("<IIB", data, 4)
    if n_mels != N_MELS or len(data) != 13 + 4 * t * n_mels:
        raise WavFormatError(f"{path}: truncated or inconsistent DVF1 payload")
    body = np.frombuffer(data, dtype="<f4", offset=13)
    return MelSpectrogram(body.reshape(t, n_mels).astype(np.float32), normalized=bool(flag))


def save_stats(path, s: NormalizationStats):
    with open(path, "wb") as fh:
        fh.write(_DVS_MAGIC + struct.pack("<dd", s.min_val, s.max_val))


def load_stats(path) -> NormalizationStats:
    data = Path(path).read_bytes()
    if data[:4] != _DVS_MAGIC or len(data) != 20:
        raise StatsError(f"{path}: not a DVS1 stats file")
    return NormalizationStats(*struct.unpack("<dd", data[4:]))
