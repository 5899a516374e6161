"""Voice conversion: speaker embeddings from reference audio, latent swap, synthesis.

Inference is sampling-free. Speaker embeddings are the average speaker-block
mean over non-overlapping 64-frame chunks of the reference utterances; the
source contributes its content-block means chunk by chunk.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import dsp
from .dsp import MelFilterbank, MelSpectrogram, NormalizationStats, SpectrogramConfig, Waveform
from .errors import DomainError, SignalLengthError
from .model import DisentangledVAE, decode, encode, postnet_refine
from . import autograd as ag


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray  # (k1,)
    speaker_id: str | None = None
    n_chunks: int = 1

    def __post_init__(self):
        if self.n_chunks < 1:
            raise ValueError("an embedding needs at least one chunk")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding is not finite")


def split_chunks(frames: np.ndarray, size: int) -> list[np.ndarray]:
    return [frames[i : i + size] for i in range(0, frames.shape[0] - size + 1, size)]


def _require_normalized(m: MelSpectrogram):
    if not m.normalized:
        raise DomainError("model inputs must be normalized mel spectrograms")


def chunk_speaker_means(utterances: list[MelSpectrogram], model: DisentangledVAE) -> np.ndarray:
    """Speaker-block posterior mean of every full chunk, shape (n_chunks, k1)."""
    size = model.cfg.segment_frames
    model.eval()
    rows = []
    for m in utterances:
        _require_normalized(m)
        for chunk in split_chunks(m.frames, size):
            # one chunk per forward keeps every row independent of batch composition
            post = encode(model.as_input(chunk), model)
            rows.append(post.mu_s.data[0].astype(np.float64))
    if not rows:
        raise SignalLengthError(f"no utterance provides a full {size}-frame chunk")
    return np.stack(rows)


def extract_speaker_embedding(utterances: list[MelSpectrogram], model: DisentangledVAE,
                              speaker_id: str | None = None) -> SpeakerEmbedding:
    means = chunk_speaker_means(utterances, model)
    # exactly rounded sums make the result independent of utterance order
    vector = np.array([math.fsum(col) for col in means.T]) / means.shape[0]
    return SpeakerEmbedding(vector, speaker_id, means.shape[0])


def convert(source: MelSpectrogram, target: SpeakerEmbedding, model: DisentangledVAE) -> MelSpectrogram:
    """Decode the source's content means with the target speaker embedding."""
    _require_normalized(source)
    size = model.cfg.segment_frames
    t = source.n_frames
    n_chunks = -(-t // size)
    padded = np.zeros((n_chunks * size, source.frames.shape[1]), dtype=np.float32)
    padded[:t] = source.frames
    model.eval()
    x = model.as_input(padded.reshape(n_chunks, size, -1))
    post = encode(x, model)
    spk = np.broadcast_to(target.vector.astype(model.dtype), (n_chunks, target.vector.size))
    z = ag.concat([ag.Tensor(np.ascontiguousarray(spk)), post.mu_c], axis=-1)
    _, x_hat = postnet_refine(decode(z, model), model)
    frames = x_hat.data.reshape(n_chunks * size, -1)[:t]
    return MelSpectrogram(np.clip(frames, 0.0, 1.0), normalized=True, stats_id=source.stats_id)


def reconstruct(source: MelSpectrogram, model: DisentangledVAE) -> MelSpectrogram:
    """Identity conversion: swap in the source's own embedding."""
    return convert(source, extract_speaker_embedding([source], model), model)


def synthesize(converted: MelSpectrogram, stats: NormalizationStats, cfg: SpectrogramConfig,
               fb: MelFilterbank, iterations: int = 60) -> Waveform:
    return dsp.griffin_lim(dsp.denormalize(converted, stats), cfg, fb, iterations)


def write_embeddings_csv(path, rows: list[tuple[str, str, np.ndarray]]):
    """Rows of (speaker_id, utterance_id, vector) to "speaker_id,utterance_id,e1..eK"."""
    k = len(rows[0][2]) if rows else 8
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["speaker_id", "utterance_id"] + [f"e{i + 1}" for i in range(k)])
        for spk, utt, vec in rows:
            w.writerow([spk, utt] + [repr(float(v)) for v in vec])


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    return 1.0 - float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def separability(embeddings: dict[str, list[np.ndarray]]) -> tuple[float, float]:
    """Mean intra-speaker and inter-speaker cosine distances over all embedding pairs."""
    intra, inter = [], []
    items = [(spk, v) for spk, vs in embeddings.items() for v in vs]
    for i in range(len(items)):
        for j in range(i + 1, len(items)):
            d = cosine_distance(items[i][1], items[j][1])
            (intra if items[i][0] == items[j][0] else inter).append(d)
    return float(np.mean(intra)), float(np.mean(inter))
