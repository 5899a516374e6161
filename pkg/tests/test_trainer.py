import struct

import numpy as np
import pytest

from disvae import data
from disvae.checkpoint import checkpoint_bytes, load_checkpoint, save_checkpoint
from disvae.errors import CheckpointError, TrainingError
from disvae.model import DisentangledVAE, encode
from disvae.optim import Adam
from disvae.trainer import TrainConfig, checkpoint_path, read_loss_log, step_rng, train_loop, train_step

from conftest import tiny_config
from test_data import feature_corpus


@pytest.fixture
def manifest(tmp_path):
    return data.scan_corpus(feature_corpus(tmp_path / "feats", {"s1": [70, 90, 64], "s2": [80, 75]}))


def fixed_pairs(rng, n=4):
    return [data.SegmentPair(rng.uniform(0, 1, (64, 80)).astype(np.float32),
                             rng.uniform(0, 1, (64, 80)).astype(np.float32), "s", ("a", "b")) for _ in range(n)]


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(lr=0.0), dict(beta=0.9), dict(precision="f16")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.lr, cfg.beta) == (8, 1e-4, 1.0)


class TestTrainStep:
    def test_batch_size_enforced(self, rng):
        model = DisentangledVAE(tiny_config())
        with pytest.raises(ValueError):
            train_step(model, Adam(model.parameters()), fixed_pairs(rng, 3), TrainConfig(batch_size=4), rng)

    def test_same_seed_same_loss(self, rng):
        pairs = fixed_pairs(rng)
        losses = []
        for _ in range(2):
            model = DisentangledVAE(tiny_config(), seed=3)
            opt = Adam(model.parameters())
            cfg = TrainConfig(batch_size=4)
            losses.append([train_step(model, opt, pairs, cfg, step_rng(0, s), s)[0] for s in (1, 2)])
        assert losses[0] == losses[1]

    def test_kl_diagnostics_nonnegative_and_overfit(self, rng):
        pairs = fixed_pairs(rng)
        model = DisentangledVAE(tiny_config(), seed=0)
        opt = Adam(model.parameters(), lr=1e-4)
        cfg = TrainConfig(batch_size=4)
        losses = []
        for s in range(1, 501):
            loss, diag = train_step(model, opt, pairs, cfg, step_rng(0, s), s)
            assert diag["kl_s"] >= 0 and diag["kl_c"] >= 0
            losses.append(loss)
        assert losses[-1] < 0.5 * losses[0]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_reports_provenance(self, rng):
        model = DisentangledVAE(tiny_config())
        model.decoder.out.bias.data[:] = np.float32(3e38)
        pairs = fixed_pairs(rng, 1)
        with pytest.raises(TrainingError, match=r"step 7: .*s:a@0\+b@0"):
            train_step(model, Adam(model.parameters()), pairs, TrainConfig(batch_size=1), rng, step=7)


class TestTrainLoop:
    def test_zero_steps(self, manifest, tmp_path):
        final = train_loop(manifest, tiny_config(), TrainConfig(total_steps=0, batch_size=2), tmp_path / "run")
        assert final == checkpoint_path(tmp_path / "run", 0)
        assert sorted(p.name for p in (tmp_path / "run").glob("*.dvc")) == ["ckpt_0000000.dvc"]
        assert (tmp_path / "run" / "loss.csv").read_text() == "step,total,recon,kl\n"

    def test_log_rows_and_checkpoints(self, manifest, tmp_path):
        cfg = TrainConfig(total_steps=7, checkpoint_every=3, batch_size=2)
        train_loop(manifest, tiny_config(), cfg, tmp_path / "run")
        log = read_loss_log(tmp_path / "run" / "loss.csv")
        assert log.shape == (7, 4)
        np.testing.assert_array_equal(log[:, 0], np.arange(1, 8))
        assert np.all(log[:, 3] >= 0)
        names = sorted(p.name for p in (tmp_path / "run").glob("*.dvc"))
        assert names == ["ckpt_0000000.dvc", "ckpt_0000003.dvc", "ckpt_0000006.dvc", "ckpt_0000007.dvc"]

    def test_bitwise_reproducible(self, manifest, tmp_path):
        cfg = TrainConfig(total_steps=5, batch_size=2, seed=4)
        a = train_loop(manifest, tiny_config(), cfg, tmp_path / "a")
        b = train_loop(manifest, tiny_config(), cfg, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()

    def test_resume_equivalence(self, manifest, tmp_path):
        full = TrainConfig(total_steps=200, checkpoint_every=100, batch_size=2, seed=1)
        ref = train_loop(manifest, tiny_config(), full, tmp_path / "ref")
        half = TrainConfig(total_steps=100, checkpoint_every=100, batch_size=2, seed=1)
        mid = train_loop(manifest, tiny_config(), half, tmp_path / "run")
        # a crashed continuation left extra rows behind; resume must drop them
        with open(tmp_path / "run" / "loss.csv", "a") as fh:
            fh.write("101,1.0,1.0,0.0\n")
        out = train_loop(manifest, tiny_config(), full, tmp_path / "run", resume=mid)
        assert out.read_bytes() == ref.read_bytes()
        assert (tmp_path / "run" / "loss.csv").read_bytes() == (tmp_path / "ref" / "loss.csv").read_bytes()


    def test_reserved_utterances_never_train(self, manifest, tmp_path):
        cfg = TrainConfig(total_steps=3, batch_size=2, reserved_utterances=["s1/u2"])
        assert cfg.reserved_utterances == ("s1/u2",)
        a = train_loop(manifest, tiny_config(), cfg, tmp_path / "a")
        trimmed = data.CorpusManifest([data.SpeakerEntry("s1", manifest.speakers[0].utterances[:2]),
                                       manifest.speakers[1]])
        b = train_loop(trimmed, tiny_config(), TrainConfig(total_steps=3, batch_size=2), tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()


class TestCheckpoint:
    def test_round_trip_forward(self, tmp_path, rng):
        model = DisentangledVAE(tiny_config(), seed=2)
        opt = Adam(model.parameters())
        train_step(model, opt, fixed_pairs(rng, 2), TrainConfig(batch_size=2), rng)
        save_checkpoint(tmp_path / "c.dvc", model, 1)
        loaded, step = load_checkpoint(tmp_path / "c.dvc")
        assert step == 1 and loaded.cfg == model.cfg
        probe = model.as_input(rng.uniform(0, 1, (64, 80)))
        a = encode(probe, model.eval()).mu_c.data
        b = encode(probe, loaded.eval()).mu_c.data
        np.testing.assert_allclose(a, b, atol=1e-7)
        for (n, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
            assert p.step_count == q.step_count == 1
            np.testing.assert_array_equal(p.adam_v, q.adam_v)

    def test_layout(self):
        model = DisentangledVAE(tiny_config())
        raw = checkpoint_bytes(model, 12)
        assert raw[:4] == b"DVC1"
        (hlen,) = struct.unpack_from("<I", raw, 4)
        (count,) = struct.unpack_from("<I", raw, 8 + hlen)
        assert count == len(model.state_arrays())
        assert b"OPT1" in raw

    def test_truncated(self, tmp_path):
        raw = checkpoint_bytes(DisentangledVAE(tiny_config()), 0)
        (tmp_path / "c.dvc").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.dvc")

    def test_wrong_magic(self, tmp_path):
        (tmp_path / "c.dvc").write_bytes(b"NOPE" + b"\0" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.dvc")
