import numpy as np
import pytest
from scipy.stats import chisquare

from disvae import data, dsp
from disvae.data import CorpusManifest, SpeakerEntry
from disvae.dsp import MelSpectrogram
from disvae.errors import ManifestError, WavFormatError


def feature_corpus(root, lengths: dict[str, list[int]], seed=0):
    """Write normalized DVF1 files root/<spk>/<n>.dvf with the given frame counts."""
    rng = np.random.default_rng(seed)
    for spk, ts in lengths.items():
        (root / spk).mkdir(parents=True)
        for n, t in enumerate(ts):
            frames = rng.uniform(0.05, 1.0, (t, 80)).astype(np.float32)
            dsp.save_features(root / spk / f"u{n}.dvf", MelSpectrogram(frames, normalized=True))
    return root


def tone_wavs(root, spec: dict[str, list[float]]):
    for spk, freqs in spec.items():
        (root / spk).mkdir(parents=True)
        for n, f in enumerate(freqs):
            t = np.arange(8000) / 16000
            dsp.write_wav(root / spk / f"w{n}.wav", dsp.Waveform(0.3 * np.sin(2 * np.pi * f * t)))
    return root


class TestScanCorpus:
    def test_empty_directory(self, tmp_path):
        with pytest.raises(ManifestError):
            data.scan_corpus(tmp_path)

    def test_two_speakers_three_files(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"s1": [70] * 3, "s2": [70] * 3}))
        assert [s.speaker_id for s in m.speakers] == ["s1", "s2"]
        assert [len(s.utterances) for s in m.speakers] == [3, 3]

    def test_deterministic(self, tmp_path):
        root = feature_corpus(tmp_path, {"b": [70] * 2, "a": [70] * 3})
        assert data.scan_corpus(root).to_json() == data.scan_corpus(root).to_json()

    def test_lexicographic_order(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"zz": [70] * 2, "aa": [70] * 12}))
        assert m.speakers[0].speaker_id == "aa"
        assert m.speakers[0].utterances == sorted(m.speakers[0].utterances)

    def test_single_utterance_speaker(self, tmp_path):
        with pytest.raises(ManifestError):
            data.scan_corpus(feature_corpus(tmp_path, {"s1": [70], "s2": [70] * 2}))

    def test_single_utterance_test_speaker_allowed(self, tmp_path):
        root = feature_corpus(tmp_path, {"s1": [70], "s2": [70] * 2})
        m = data.scan_corpus(root, {"s1": "test", "s2": "train"})
        assert [s.speaker_id for s in m.train_speakers()] == ["s2"]

    def test_split_file(self, tmp_path):
        root = feature_corpus(tmp_path / "c", {"s1": [70] * 2, "s2": [70] * 2})
        (tmp_path / "split.txt").write_text("# speakers\ns1 train\ns2 test\n")
        m = data.scan_corpus(root, tmp_path / "split.txt")
        assert [s.split for s in m.speakers] == ["train", "test"]

    def test_bad_split_file(self, tmp_path):
        (tmp_path / "split.txt").write_text("s1 validation\n")
        with pytest.raises(ManifestError):
            data.read_split_file(tmp_path / "split.txt")

    def test_default_split_ratio(self):
        split = data.default_split([f"p{i:03d}" for i in range(109)])
        assert sum(v == "test" for v in split.values()) == 4
        assert data.default_split(["a", "b"]) == {"a": "train", "b": "train"}

    def test_manifest_round_trip(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path / "c", {"s1": [70] * 2}))
        m.save(tmp_path / "m.json")
        assert CorpusManifest.load(tmp_path / "m.json").to_json() == m.to_json()

    def test_manifest_relocatable(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path / "a" / "c", {"s1": [70] * 2}))
        m.save(tmp_path / "a" / "m.json")
        assert '"c/s1/u0.dvf"' in (tmp_path / "a" / "m.json").read_text()
        (tmp_path / "a").rename(tmp_path / "b")
        moved = CorpusManifest.load(tmp_path / "b" / "m.json")
        assert moved.speakers[0].utterances[0] == str(tmp_path / "b" / "c" / "s1" / "u0.dvf")

    def test_without_reserved(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"s1": [70] * 3, "s2": [70] * 2}))
        kept = m.without(["s1/u1"])
        assert [data.utterance_id(u) for u in kept.speaker("s1").utterances] == ["u0", "u2"]
        assert kept.speaker("s2").utterances == m.speaker("s2").utterances
        assert len(m.speaker("s1").utterances) == 3

    @pytest.mark.parametrize("reserved", [["s1/u9"], ["s2/u0"]])
    def test_without_rejects(self, tmp_path, reserved):
        m = data.scan_corpus(feature_corpus(tmp_path, {"s1": [70] * 3, "s2": [70] * 2}))
        with pytest.raises(ManifestError):
            m.without(reserved)

    def test_missing_file(self, tmp_path):
        m = CorpusManifest([SpeakerEntry("s", [str(tmp_path / "a.dvf"), str(tmp_path / "b.dvf")])])
        with pytest.raises(ManifestError):
            m.validate()

    def test_unreadable_manifest(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(ManifestError):
            CorpusManifest.load(tmp_path / "m.json")


class TestSampling:
    def test_forced_pair(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"only": [80, 90]}))
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert sorted(data.sample_pair(m, rng).utterance_ids) == ["u0", "u1"]

    def test_invariants_and_crop_source(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"s1": [70, 100, 65], "s2": [80, 64]}))
        cache = data.FeatureCache()
        rng = np.random.default_rng(1)
        for _ in range(50):
            p = data.sample_pair(m, rng, cache)
            assert p.x1.shape == p.x2.shape == (64, 80)
            assert p.utterance_ids[0] != p.utterance_ids[1]
            files = {data.utterance_id(u): u for u in m.speaker(p.speaker_id).utterances}
            for x, uid, off in zip((p.x1, p.x2), p.utterance_ids, p.offsets):
                np.testing.assert_array_equal(x, cache(files[uid])[off : off + 64])

    def test_seeded_sequence(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {"s1": [70, 100, 65], "s2": [80, 64]}))
        a = data.sample_batch(m, np.random.default_rng(5), 8)
        b = data.sample_batch(m, np.random.default_rng(5), 8)
        for p, q in zip(a, b):
            assert (p.speaker_id, p.utterance_ids, p.offsets) == (q.speaker_id, q.utterance_ids, q.offsets)
            np.testing.assert_array_equal(p.x1, q.x1)

    def test_speaker_uniformity(self, tmp_path):
        m = data.scan_corpus(feature_corpus(tmp_path, {f"s{i}": [64, 64] for i in range(4)}))
        rng = np.random.default_rng(11)
        cache = data.FeatureCache()
        ids = [data.sample_pair(m, rng, cache).speaker_id for _ in range(10_000)]
        counts = np.array([ids.count(f"s{i}") for i in range(4)])
        assert np.all((counts / 10_000 >= 0.22) & (counts / 10_000 <= 0.28))
        assert chisquare(counts).pvalue > 0.01

    def test_short_utterance_padding(self, rng):
        frames = rng.uniform(0.1, 1, (10, 80)).astype(np.float32)
        seg, offset = data.crop_segment(frames, rng)
        assert offset == 0 and seg.shape == (64, 80)
        np.testing.assert_array_equal(seg[:10], frames)
        assert not seg[10:].any()

    def test_crop_offsets_cover_range(self):
        frames = np.arange(66 * 80, dtype=np.float32).reshape(66, 80)
        rng = np.random.default_rng(0)
        assert {data.crop_segment(frames, rng)[1] for _ in range(200)} == {0, 1, 2}


class TestPrecompute:
    def test_stats_and_files(self, tmp_path):
        wav = tone_wavs(tmp_path / "wav", {"a": [300, 500], "b": [700, 900]})
        cfg, fb = dsp.SpectrogramConfig(), dsp.build_mel_filterbank(dsp.SpectrogramConfig())
        feats, stats = data.precompute_features(data.scan_corpus(wav), cfg, fb, tmp_path / "f")
        logmels = [dsp.wav_to_logmel(dsp.load_wav(p), cfg, fb) for p in sorted(wav.glob("*/*.wav"))]
        assert stats.min_val == min(m.frames.min() for m in logmels)
        assert stats.max_val == max(m.frames.max() for m in logmels)
        assert dsp.load_stats(tmp_path / "f" / "stats.dvs") == stats
        assert CorpusManifest.load(tmp_path / "f" / "manifest.json").to_json() == feats.to_json()
        m = dsp.load_features(feats.speakers[0].utterances[0])
        assert m.normalized and m.frames.min() >= 0 and m.frames.max() <= 1

    def test_rerun_byte_identical(self, tmp_path):
        wav = tone_wavs(tmp_path / "wav", {"a": [300, 500]})
        cfg, fb = dsp.SpectrogramConfig(), dsp.build_mel_filterbank(dsp.SpectrogramConfig())
        man = data.scan_corpus(wav)
        data.precompute_features(man, cfg, fb, tmp_path / "f1")
        data.precompute_features(man, cfg, fb, tmp_path / "f2")
        for name in ("a/w0.dvf", "a/w1.dvf", "stats.dvs"):
            assert (tmp_path / "f1" / name).read_bytes() == (tmp_path / "f2" / name).read_bytes()

    def test_test_split_uses_train_stats(self, tmp_path):
        wav = tone_wavs(tmp_path / "wav", {"a": [300, 500], "b": [700, 900], "c": [1000]})
        wav.joinpath("c", "w0.wav").unlink()
        dsp.write_wav(wav / "c" / "w0.wav", dsp.Waveform(np.zeros(8000)))
        cfg, fb = dsp.SpectrogramConfig(), dsp.build_mel_filterbank(dsp.SpectrogramConfig())
        feats, _ = data.precompute_features(data.scan_corpus(wav, {"c": "test"}), cfg, fb, tmp_path / "f")
        silent = dsp.load_features(feats.speaker("c").utterances[0])
        assert np.all(silent.frames == 0.0)

    def test_continue_on_error(self, tmp_path):
        wav = tone_wavs(tmp_path / "wav", {"a": [300, 500, 700]})
        (wav / "a" / "w1.wav").write_bytes(b"garbage")
        cfg, fb = dsp.SpectrogramConfig(), dsp.build_mel_filterbank(dsp.SpectrogramConfig())
        man = data.scan_corpus(wav)
        with pytest.raises(WavFormatError):
            data.precompute_features(man, cfg, fb, tmp_path / "f")
        feats, _ = data.precompute_features(man, cfg, fb, tmp_path / "g", on_error="continue")
        assert [data.utterance_id(u) for u in feats.speakers[0].utterances] == ["w0", "w2"]
