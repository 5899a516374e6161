"""Corpus indexing, same-speaker pair sampling and feature caching."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp
from .dsp import MelFilterbank, MelSpectrogram, NormalizationStats, SpectrogramConfig
from .errors import DisVAEError, ManifestError

log = logging.getLogger(__name__)

SEGMENT_FRAMES = 64
AUDIO_SUFFIXES = (".wav", ".dvf")


@dataclass
class SpeakerEntry:
    speaker_id: str
    utterances: list[str]
    split: str = "train"


@dataclass
class CorpusManifest:
    speakers: list[SpeakerEntry]
    stats_path: str | None = None

    def train_speakers(self) -> list[SpeakerEntry]:
        return [s for s in self.speakers if s.split == "train"]

    def speaker(self, speaker_id: str) -> SpeakerEntry:
        for s in self.speakers:
            if s.speaker_id == speaker_id:
                return s
        raise KeyError(speaker_id)

    def without(self, reserved) -> "CorpusManifest":
        """Copy with the utterances named ``"<speaker_id>/<utterance_id>"`` removed.

        Used to keep seen-speaker test utterances out of training pairs.
        """
        reserved = set(reserved)
        known = {f"{s.speaker_id}/{utterance_id(u)}" for s in self.speakers for u in s.utterances}
        unknown = reserved - known
        if unknown:
            raise ManifestError(f"reserved utterances not in the manifest: {sorted(unknown)[:5]}")
        speakers = [SpeakerEntry(s.speaker_id, [u for u in s.utterances
                                                if f"{s.speaker_id}/{utterance_id(u)}" not in reserved], s.split)
                    for s in self.speakers]
        m = CorpusManifest(speakers, self.stats_path)
        m.validate()
        return m

    def validate(self):
        train = self.train_speakers()
        if not train:
            raise ManifestError("manifest has no training speakers")
        for s in train:
            if len(s.utterances) < 2:
                raise ManifestError(f"training speaker {s.speaker_id!r} has {len(s.utterances)} utterance(s); need 2")
        for s in self.speakers:
            for u in s.utterances:
                if not Path(u).exists():
                    raise ManifestError(f"missing file {u}")

    def to_json(self, base: Path | None = None) -> str:
        """JSON document; with ``base``, file paths are written relative to that directory."""
        def rel(p):
            return p if p is None or base is None else os.path.relpath(os.path.abspath(p), os.path.abspath(base))

        doc = {
            "speakers": [{"id": s.speaker_id, "split": s.split, "utterances": [rel(u) for u in s.utterances]}
                         for s in self.speakers],
            "stats": rel(self.stats_path),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def save(self, path):
        """Write the manifest; paths are stored relative to its directory so the tree can move."""
        path = Path(path)
        path.write_text(self.to_json(path.parent) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)

        def resolve(p):
            return p if p is None or os.path.isabs(p) else os.path.normpath(os.path.join(path.parent, p))

        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            speakers = [SpeakerEntry(s["id"], [resolve(u) for u in s["utterances"]], s.get("split", "train"))
                        for s in doc["speakers"]]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: unreadable manifest ({exc})") from exc
        m = cls(speakers, resolve(doc.get("stats")))
        m.validate()
        return m


@dataclass
class SegmentPair:
    x1: np.ndarray
    x2: np.ndarray
    speaker_id: str
    utterance_ids: tuple[str, str]
    offsets: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if self.x1.shape != (SEGMENT_FRAMES, dsp.N_MELS) or self.x2.shape != (SEGMENT_FRAMES, dsp.N_MELS):
            raise ValueError(f"segments must be {SEGMENT_FRAMES}x{dsp.N_MELS}, got {self.x1.shape}, {self.x2.shape}")


def read_split_file(path) -> dict[str, str]:
    """Parse "<speaker_id> <train|test>" lines."""
    split = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise ManifestError(f"{path}:{n}: expected '<speaker_id> <train|test>', got {line!r}")
        split[parts[0]] = parts[1]
    return split


def default_split(speaker_ids: list[str]) -> dict[str, str]:
    """Hold out the last speakers in the ratio 4 of 109, rounded (zero for tiny corpora)."""
    n_test = int(round(len(speaker_ids) * 4 / 109))
    ids = sorted(speaker_ids)
    return {sid: ("test" if i >= len(ids) - n_test else "train") for i, sid in enumerate(ids)}


def scan_corpus(root, split_spec: dict[str, str] | str | Path | None = None) -> CorpusManifest:
    """Index ``root/<speaker_id>/<utterance>.wav|.dvf`` in lexicographic order."""
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"corpus root {root} is not a directory")
    found = {}
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(str(f) for f in spk_dir.iterdir() if f.suffix.lower() in AUDIO_SUFFIXES)
        if files:
            found[spk_dir.name] = files
    if not found:
        raise ManifestError(f"no speaker directories with .wav/.dvf files under {root}")
    if split_spec is None:
        split = default_split(list(found))
    elif isinstance(split_spec, dict):
        split = split_spec
    else:
        split = read_split_file(split_spec)
    speakers = [SpeakerEntry(sid, files, split.get(sid, "train")) for sid, files in found.items()]
    manifest = CorpusManifest(speakers)
    manifest.validate()
    return manifest


def utterance_id(path: str) -> str:
    return Path(path).stem


class FeatureCache:
    """Lazy in-memory cache of normalized DVF1 features keyed by path."""

    def __init__(self):
        self._frames: dict[str, np.ndarray] = {}

    def __call__(self, path: str) -> np.ndarray:
        arr = self._frames.get(path)
        if arr is None:
            m = dsp.load_features(path)
            arr = m.frames.astype(np.float32)
            self._frames[path] = arr
        return arr


def crop_segment(frames: np.ndarray, rng: np.random.Generator, length: int = SEGMENT_FRAMES) -> tuple[np.ndarray, int]:
    """Uniform random contiguous crop; shorter inputs are right-padded with zeros."""
    t = frames.shape[0]
    if t < length:
        out = np.zeros((length, frames.shape[1]), dtype=np.float32)
        out[:t] = frames
        return out, 0
    offset = int(rng.integers(0, t - length + 1))
    return np.array(frames[offset : offset + length], dtype=np.float32), offset


def sample_pair(manifest: CorpusManifest, rng: np.random.Generator, cache: FeatureCache | None = None) -> SegmentPair:
    cache = cache or FeatureCache()
    speakers = manifest.train_speakers()
    spk = speakers[int(rng.integers(len(speakers)))]
    i, j = rng.choice(len(spk.utterances), size=2, replace=False)
    u1, u2 = spk.utterances[int(i)], spk.utterances[int(j)]
    x1, o1 = crop_segment(cache(u1), rng)
    x2, o2 = crop_segment(cache(u2), rng)
    return SegmentPair(x1, x2, spk.speaker_id, (utterance_id(u1), utterance_id(u2)), (o1, o2))


def sample_batch(manifest: CorpusManifest, rng: np.random.Generator, batch_size: int,
                 cache: FeatureCache | None = None) -> list[SegmentPair]:
    cache = cache or FeatureCache()
    return [sample_pair(manifest, rng, cache) for _ in range(batch_size)]


def precompute_features(manifest: CorpusManifest, cfg: SpectrogramConfig, fb: MelFilterbank, out_dir,
                        on_error: str = "abort") -> tuple[CorpusManifest, NormalizationStats]:
    """Two passes over the WAVs: global log-mel min/max on the train split, then normalized DVF1 files.

    Writes ``out_dir/<speaker>/<utterance>.dvf``, ``out_dir/stats.dvs`` and
    ``out_dir/manifest.json``; returns the feature manifest and the stats.
    With ``on_error="continue"`` unreadable files are logged and skipped.
    """
    if on_error not in ("abort", "continue"):
        raise ValueError("on_error must be 'abort' or 'continue'")
    out_dir = Path(out_dir)
    logmels: dict[str, MelSpectrogram] = {}
    for spk in manifest.speakers:
        for path in spk.utterances:
            try:
                logmels[path] = dsp.wav_to_logmel(dsp.load_wav(path), cfg, fb)
            except (DisVAEError, OSError) as exc:
                if on_error == "abort":
                    raise
                log.warning("skipping %s: %s", path, exc)

    train_paths = [p for s in manifest.train_speakers() for p in s.utterances if p in logmels]
    if not train_paths:
        raise ManifestError("no readable training utterances")
    stats = dsp.compute_stats(logmels[p] for p in train_paths)

    speakers = []
    for spk in manifest.speakers:
        spk_dir = out_dir / spk.speaker_id
        spk_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for path in spk.utterances:
            if path not in logmels:
                continue
            target = spk_dir / (Path(path).stem + ".dvf")
            dsp.save_features(target, dsp.normalize(logmels[path], stats))
            paths.append(str(target))
        speakers.append(SpeakerEntry(spk.speaker_id, paths, spk.split))
    stats_path = out_dir / "stats.dvs"
    dsp.save_stats(stats_path, stats)
    feats = CorpusManifest(speakers, str(stats_path))
    feats.validate()
    feats.save(out_dir / "manifest.json")
    return feats, stats
