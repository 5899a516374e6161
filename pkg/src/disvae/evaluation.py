"""Objective evaluation: mel-cepstra, DTW alignment and mel-cepstral distortion (dB)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.fft import dct

from . import dsp
from .dsp import MelFilterbank, MelSpectrogram, SpectrogramConfig
from .errors import DisVAEError, DomainError

log = logging.getLogger(__name__)

MCD_SCALE = 10.0 / math.log(10.0)
N_CEPS = 13


@dataclass(frozen=True)
class CepstralSequence:
    frames: np.ndarray  # (T, n_coeffs), c1..cN

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"cepstral frames must be (T>=1, n), got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("cepstral frames are not finite")

    def __len__(self):
        return self.frames.shape[0]


@dataclass(frozen=True)
class AlignmentPath:
    pairs: list[tuple[int, int]]

    def __post_init__(self):
        p = self.pairs
        if not p or p[0] != (0, 0):
            raise ValueError("alignment path must start at (0, 0)")
        for (i0, j0), (i1, j1) in zip(p, p[1:]):
            if (i1 - i0, j1 - j0) not in ((1, 0), (0, 1), (1, 1)):
                raise ValueError(f"illegal step {(i0, j0)} -> {(i1, j1)}")


def mel_cepstrum(m: MelSpectrogram, n_coeffs: int = N_CEPS) -> CepstralSequence:
    """Orthonormal DCT-II of each log-mel frame, keeping c1..c_n (c0 dropped)."""
    if m.normalized:
        raise DomainError("mel_cepstrum needs log-mel input; denormalize first")
    c = dct(np.asarray(m.frames, dtype=np.float64), type=2, norm="ortho", axis=1)
    return CepstralSequence(c[:, 1 : n_coeffs + 1])


def _frames(x) -> np.ndarray:
    f = x.frames if isinstance(x, CepstralSequence) else np.asarray(x, dtype=np.float64)
    return f.reshape(len(f), -1)


def dtw_align(a, b) -> tuple[AlignmentPath, float]:
    """Minimum-cost monotone alignment under Euclidean frame distance.

    Steps (1,0), (0,1), (1,1). Among equal-cost predecessors the diagonal is
    preferred, then (1,0), then (0,1).
    """
    fa, fb = _frames(a), _frames(b)
    n, m = len(fa), len(fb)
    if n == 0 or m == 0:
        raise ValueError("dtw_align needs nonempty sequences")
    dist = np.sqrt(((fa[:, None, :] - fb[None, :, :]) ** 2).sum(axis=-1))
    acc = np.full((n, m), np.inf)
    move = np.zeros((n, m), dtype=np.int8)  # 0 diag, 1 from (i-1, j), 2 from (i, j-1)
    acc[0, 0] = dist[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best, how = math.inf, 0
            if i > 0 and j > 0:
                best, how = acc[i - 1, j - 1], 0
            if i > 0 and acc[i - 1, j] < best:
                best, how = acc[i - 1, j], 1
            if j > 0 and acc[i, j - 1] < best:
                best, how = acc[i, j - 1], 2
            acc[i, j] = dist[i, j] + best
            move[i, j] = how
    i, j = n - 1, m - 1
    path = [(i, j)]
    while (i, j) != (0, 0):
        how = move[i, j]
        if how == 0:
            i, j = i - 1, j - 1
        elif how == 1:
            i -= 1
        else:
            j -= 1
        path.append((i, j))
    path.reverse()
    return AlignmentPath(path), float(acc[n - 1, m - 1])


def mcd(ref: CepstralSequence, conv: CepstralSequence) -> float:
    """Mean over the DTW path of (10/ln10) * sqrt(2 * sum_d (c_d - c'_d)^2), in dB."""
    path, _ = dtw_align(ref, conv)
    idx = np.array(path.pairs)
    diff = ref.frames[idx[:, 0]] - conv.frames[idx[:, 1]]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


def mcd_mels(ref: MelSpectrogram, conv: MelSpectrogram) -> float:
    return mcd(mel_cepstrum(ref), mel_cepstrum(conv))


@dataclass
class EvalReport:
    rows: list[tuple[str, str, float]]

    @property
    def values(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows if not math.isnan(r[2])])

    @property
    def mean(self) -> float:
        v = self.values
        return float(v.mean()) if v.size else math.nan

    @property
    def std(self) -> float:
        v = self.values
        return float(v.std()) if v.size else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ref", "conv", "mcd_db"])
            for ref, conv, value in self.rows:
                w.writerow([ref, conv, repr(value)])
            w.writerow(["MEAN", "", repr(self.mean)])
            w.writerow(["STD", "", repr(self.std)])


def evaluate_corpus(pairs: list[tuple[str, str]], cfg: SpectrogramConfig, fb: MelFilterbank | None = None,
                    out=None) -> EvalReport:
    """MCD for each (reference wav, converted wav); failures are logged and reported as NaN."""
    fb = fb or dsp.build_mel_filterbank(cfg)
    rows = []
    for ref, conv in pairs:
        try:
            m_ref = dsp.wav_to_logmel(dsp.load_wav(ref), cfg, fb)
            m_conv = dsp.wav_to_logmel(dsp.load_wav(conv), cfg, fb)
            value = mcd_mels(m_ref, m_conv)
        except (DisVAEError, OSError) as exc:
            log.error("failed on %s vs %s: %s", ref, conv, exc)
            value = math.nan
        rows.append((str(ref), str(conv), value))
    report = EvalReport(rows)
    if out is not None:
        report.write_csv(out)
    return report
