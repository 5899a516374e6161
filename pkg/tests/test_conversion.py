import csv
import math

import numpy as np
import pytest

from disvae import conversion, dsp
from disvae.conversion import SpeakerEmbedding, convert, extract_speaker_embedding
from disvae.dsp import MelSpectrogram, NormalizationStats
from disvae.errors import DomainError, SignalLengthError
from disvae.model import DisentangledVAE, encode

from conftest import tiny_config


@pytest.fixture(scope="module")
def model():
    return DisentangledVAE(tiny_config(), seed=5).eval()


def mel(rng, t):
    return MelSpectrogram(rng.uniform(0, 1, (t, 80)).astype(np.float32), normalized=True)


class TestEmbedding:
    def test_single_chunk(self, model, rng):
        m = mel(rng, 64)
        emb = extract_speaker_embedding([m], model)
        assert emb.n_chunks == 1 and emb.vector.shape == (8,)
        np.testing.assert_array_equal(emb.vector, encode(model.as_input(m.frames), model).mu_s.data[0])

    def test_chunking_drops_partial_tail(self, model, rng):
        assert extract_speaker_embedding([mel(rng, 64 * 3 + 20)], model).n_chunks == 3

    def test_mean_of_chunks(self, model, rng):
        m = mel(rng, 128)
        rows = [encode(model.as_input(m.frames[i : i + 64]), model).mu_s.data[0] for i in (0, 64)]
        np.testing.assert_allclose(extract_speaker_embedding([m], model).vector, np.mean(np.array(rows, dtype=np.float64), axis=0), rtol=1e-12)

    def test_duplication_invariant(self, model, rng):
        utts = [mel(rng, 64), mel(rng, 150)]
        a = extract_speaker_embedding(utts, model).vector
        b = extract_speaker_embedding(utts + utts, model).vector
        np.testing.assert_array_equal(a, b)

    def test_permutation_invariant(self, model, rng):
        utts = [mel(rng, t) for t in (64, 200, 130, 70)]
        a = extract_speaker_embedding(utts, model).vector
        b = extract_speaker_embedding(utts[::-1], model).vector
        np.testing.assert_array_equal(a, b)

    def test_too_short(self, model, rng):
        with pytest.raises(SignalLengthError):
            extract_speaker_embedding([mel(rng, 63)], model)

    def test_requires_normalized(self, model):
        with pytest.raises(DomainError):
            extract_speaker_embedding([MelSpectrogram(np.zeros((64, 80)))], model)

    def test_invariants(self):
        with pytest.raises(ValueError):
            SpeakerEmbedding(np.zeros(8), n_chunks=0)
        with pytest.raises(ValueError):
            SpeakerEmbedding(np.full(8, np.inf))


class TestConvert:
    def test_frame_count_preserved(self, model, rng):
        emb = extract_speaker_embedding([mel(rng, 64)], model)
        for t in (1, 64, 100, 200):
            out = convert(mel(rng, t), emb, model)
            assert out.frames.shape == (t, 80) and out.normalized

    def test_identity_is_reconstruction(self, model, rng):
        src = mel(rng, 130)
        own = extract_speaker_embedding([src], model)
        np.testing.assert_array_equal(convert(src, own, model).frames, conversion.reconstruct(src, model).frames)

    def test_deterministic(self, model, rng):
        src, ref = mel(rng, 100), mel(rng, 64)
        emb = extract_speaker_embedding([ref], model)
        np.testing.assert_array_equal(convert(src, emb, model).frames, convert(src, emb, model).frames)

    def test_embedding_changes_output(self, model, rng):
        src = mel(rng, 64)
        a = convert(src, SpeakerEmbedding(np.zeros(8)), model).frames
        b = convert(src, SpeakerEmbedding(np.full(8, 3.0)), model).frames
        assert not np.array_equal(a, b)

    def test_requires_normalized(self, model):
        with pytest.raises(DomainError):
            convert(MelSpectrogram(np.zeros((10, 80))), SpeakerEmbedding(np.zeros(8)), model)


class TestSynthesize:
    CFG = dsp.SpectrogramConfig()
    FB = dsp.build_mel_filterbank(CFG)
    STATS = NormalizationStats(math.log(1e-10), 5.0)

    def test_silence(self):
        w = conversion.synthesize(MelSpectrogram(np.zeros((20, 80)), normalized=True), self.STATS, self.CFG, self.FB,
                                  iterations=10)
        assert np.sqrt(np.mean(w.samples**2)) < 1e-3

    def test_duration(self, rng):
        m = MelSpectrogram(rng.uniform(0, 0.5, (30, 80)), normalized=True)
        w = conversion.synthesize(m, self.STATS, self.CFG, self.FB, iterations=3)
        assert abs(w.duration - 30 * 256 / 16000) <= 1024 / 16000

    def test_sinusoid_round_trip(self):
        t = np.arange(16000) / 16000
        w = dsp.Waveform(0.5 * np.sin(2 * np.pi * 440 * t))
        logmel = dsp.wav_to_logmel(w, self.CFG, self.FB)
        stats = NormalizationStats(float(logmel.frames.min()), float(logmel.frames.max()))
        back = conversion.synthesize(dsp.normalize(logmel, stats), stats, self.CFG, self.FB)
        again = dsp.wav_to_logmel(back, self.CFG, self.FB)
        n = min(logmel.n_frames, again.n_frames)
        agree = logmel.frames[:n].argmax(axis=1) == again.frames[:n].argmax(axis=1)
        assert agree.mean() >= 0.95


class TestExport:
    def test_csv(self, tmp_path):
        conversion.write_embeddings_csv(tmp_path / "e.csv", [("spkA", "u1", np.arange(8) / 3)])
        rows = list(csv.reader(open(tmp_path / "e.csv")))
        assert rows[0] == ["speaker_id", "utterance_id"] + [f"e{i}" for i in range(1, 9)]
        assert float(rows[1][3]) == 1 / 3

    def test_separability(self):
        embs = {"a": [np.array([1.0, 0.0]), np.array([1.0, 0.1])], "b": [np.array([0.0, 1.0])]}
        intra, inter = conversion.separability(embs)
        assert intra == pytest.approx(conversion.cosine_distance(np.array([1.0, 0.0]), np.array([1.0, 0.1])))
        assert inter > intra
        assert conversion.cosine_distance(np.array([1.0, 0.0]), np.array([-2.0, 0.0])) == pytest.approx(2.0)
