"""Synthetic two-speaker corpus for CPU-scale experiments.

A "speaker" is a fixed harmonic spectral envelope (formant bumps plus tilt).
"Content" is a melody: a sequence of voiced syllables with their own pitch
glides and loudness envelopes, separated by short pauses. Every content id
renders identically (same pitch track, same timing) for every speaker, so a
speaker-A rendition and a speaker-B rendition differ only in timbre.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, Waveform, write_wav


@dataclass(frozen=True)
class Timbre:
    formants: tuple[tuple[float, float, float], ...]  # (center Hz, bandwidth Hz, gain)
    tilt_db_per_octave: float

    def envelope(self, freqs: np.ndarray) -> np.ndarray:
        f = np.maximum(freqs, 1.0)
        amp = np.zeros_like(f) + 0.02
        for center, bw, gain in self.formants:
            amp += gain * np.exp(-0.5 * ((f - center) / bw) ** 2)
        tilt = 10 ** (self.tilt_db_per_octave * np.log2(f / 100.0) / 20)
        return amp * tilt


TIMBRES = {
    "spkA": Timbre(((650.0, 160.0, 1.0), (1500.0, 220.0, 0.7), (2700.0, 300.0, 0.35)), -3.0),
    "spkB": Timbre(((320.0, 110.0, 1.0), (2300.0, 260.0, 0.9), (3600.0, 350.0, 0.6)), -1.0),
}


def melody(content_id: int, duration: float = 3.0, sr: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample (f0, amplitude) tracks of one content item."""
    rng = np.random.default_rng(10_000 + content_id)
    n = int(duration * sr)
    f0 = np.full(n, 120.0)
    amp = np.zeros(n)
    pos = int(0.05 * sr)
    while pos < n - int(0.1 * sr):
        length = int(rng.uniform(0.25, 0.55) * sr)
        end = min(pos + length, n)
        t = np.linspace(0.0, 1.0, end - pos)
        start_f, end_f = rng.uniform(100.0, 230.0, size=2)
        f0[pos:end] = start_f + (end_f - start_f) * t
        attack = np.minimum(1.0, t / 0.15)
        release = np.minimum(1.0, (1.0 - t) / 0.25)
        amp[pos:end] = rng.uniform(0.5, 1.0) * attack * release
        pos = end + int(rng.uniform(0.03, 0.12) * sr)
    return f0, amp


def render(content_id: int, timbre: Timbre, noise_seed: int = 0, duration: float = 3.0) -> Waveform:
    sr = SAMPLE_RATE
    f0, amp = melody(content_id, duration)
    phase = 2 * np.pi * np.cumsum(f0) / sr
    x = np.zeros_like(f0)
    for h in range(1, int(7800 // 100) + 1):
        freq = h * f0
        weight = timbre.envelope(freq) * (freq < 7800)
        x += weight * np.sin(h * phase)
    x *= amp
    x *= 0.5 / max(np.abs(x).max(), 1e-9)
    rng = np.random.default_rng(noise_seed)
    x += 1e-3 * rng.standard_normal(len(x))
    return Waveform(np.clip(x, -1.0, 1.0))


def make_toy_corpus(root, n_utterances: int = 10, content_offset: int = 0, duration: float = 3.0) -> Path:
    """Write ``root/<speaker>/utt_<content>.wav`` for every toy speaker."""
    root = Path(root)
    for s_idx, (spk, timbre) in enumerate(sorted(TIMBRES.items())):
        d = root / spk
        d.mkdir(parents=True, exist_ok=True)
        for c in range(content_offset, content_offset + n_utterances):
            w = render(c, timbre, noise_seed=1000 * s_idx + c, duration=duration)
            write_wav(d / f"utt_{c:03d}.wav", w)
    return root
