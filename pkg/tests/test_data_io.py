"""Bank/checkpoint persistence, split protocols, synthetic generation."""

import json

import numpy as np
import pytest

from eegtransfer import data_io as io
from eegtransfer import model as M
from eegtransfer import training as T
from eegtransfer.config import ModelConfig, SynthSpec
from eegtransfer.dsp import extract_de

SMALL = SynthSpec(n_subjects=2, n_classes=3, n_channels=8, trials_per_subject=3,
                  samples_per_trial=4, seed=11)


@pytest.fixture()
def small_bank():
    return io.gen_synthetic(SMALL)


class TestBankRoundTrip:
    def test_feature_bank_bitwise(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        loaded = io.read_bank(tmp_path / "bank")
        assert io.bank_equal(small_bank, loaded)
        # and a second generation pass is bit-identical too
        assert io.bank_equal(small_bank, io.gen_synthetic(SMALL))

    def test_raw_bank_bitwise(self, tmp_path):
        spec = SynthSpec(n_subjects=1, n_classes=2, n_channels=4,
                         trials_per_subject=2, samples_per_trial=3, seed=5,
                         mode="timeseries")
        bank = io.gen_synthetic(spec)
        assert bank.raw_trials and not bank.samples
        io.write_bank(bank, tmp_path / "raw")
        loaded = io.read_bank(tmp_path / "raw")
        assert io.bank_equal(bank, loaded)
        again_dir = tmp_path / "again"
        io.write_bank(loaded, again_dir)
        assert io.bank_equal(loaded, io.read_bank(again_dir))

    def test_manifest_has_documented_keys(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        manifest = json.loads((tmp_path / "bank" / "manifest.json").read_text())
        for key in ("format_version", "dataset", "classes", "bands",
                    "montage_file", "counts", "samples"):
            assert key in manifest
        assert manifest["format_version"] == 1
        assert manifest["counts"]["n_samples"] == len(small_bank.samples)

    def test_magic_bytes(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        blob = (tmp_path / "bank" / "features.bin").read_bytes()
        assert blob[:8] == b"CLDTAFB1"

    def test_bad_magic_raises(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        f = tmp_path / "bank" / "features.bin"
        blob = bytearray(f.read_bytes())
        blob[:8] = b"NOTMYFMT"
        f.write_bytes(bytes(blob))
        with pytest.raises(io.BadMagicError):
            io.read_bank(tmp_path / "bank")

    def test_truncated_payload_raises(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        f = tmp_path / "bank" / "features.bin"
        blob = f.read_bytes()
        f.write_bytes(blob[:-1])  # one byte short
        with pytest.raises(io.TruncatedPayloadError):
            io.read_bank(tmp_path / "bank")

    def test_count_mismatch_raises(self, small_bank, tmp_path):
        io.write_bank(small_bank, tmp_path / "bank")
        f = tmp_path / "bank" / "features.bin"
        blob = f.read_bytes()
        record = 8 * 5 * 4
        f.write_bytes(blob[:-record])  # drop exactly one sample
        with pytest.raises(io.ManifestMismatchError):
            io.read_bank(tmp_path / "bank")


class TestCheckpoints:
    def make_model(self):
        cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, ffn_hidden=8,
                          n_channels=8, n_bands=5, proj_dims=(8, 8, 8),
                          clf_hidden=(4, 4), n_classes=3)
        return cfg, M.init_parameters(cfg, seed=3)

    def test_round_trip_identical_forward(self, small_bank, tmp_path):
        cfg, dta = self.make_model()
        path = tmp_path / "model.ckpt"
        io.save_checkpoint(dta, path)
        loaded, opt = io.load_checkpoint(path)
        assert opt is None
        probe = np.stack([s.de for s in small_bank.samples[:4]]).astype(np.float64)
        a = M.encode(probe, small_bank.montage.positions, dta, train=False).q_final.data
        b = M.encode(probe, small_bank.montage.positions, loaded, train=False).q_final.data
        assert np.array_equal(a, b)

    def test_optimizer_state_round_trip(self, tmp_path):
        cfg, dta = self.make_model()
        opt = T.AdamState(lr=1e-3, weight_decay=0.01)
        for name, t in dta.params.items():
            t.grad = np.ones_like(t.data)
        T.adam_step(dta.params, opt)
        path = tmp_path / "with_opt.ckpt"
        io.save_checkpoint(dta, path, optimizer=opt)
        _, opt2 = io.load_checkpoint(path)
        assert opt2.step == 1 and opt2.lr == 1e-3
        for name in opt.m:
            assert np.array_equal(opt.m[name], opt2.m[name])
            assert np.array_equal(opt.v[name], opt2.v[name])

    def test_config_mismatch_rejected(self, tmp_path):
        cfg, dta = self.make_model()
        path = tmp_path / "model.ckpt"
        io.save_checkpoint(dta, path)
        other = ModelConfig(n_layers=1, d_model=8, n_heads=2, ffn_hidden=8,
                            n_channels=16, n_bands=5, proj_dims=(8, 8, 8),
                            clf_hidden=(4, 4), n_classes=3)
        with pytest.raises(io.CheckpointError, match="config"):
            io.load_checkpoint(path, expected_config=other)

    def test_float32_cast_on_load(self, tmp_path):
        cfg, dta = self.make_model()
        path = tmp_path / "model.ckpt"
        io.save_checkpoint(dta, path)
        f32, _ = io.load_checkpoint(path, dtype=np.float32)
        assert f32.dtype == np.float32
        for name in dta.params.names():
            assert np.array_equal(
                f32.params[name].data,
                dta.params[name].data.astype(np.float32))

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"CLDTACK1" + b"\x00\x00\x00\x10" + b"notjson")
        with pytest.raises(io.CheckpointError):
            io.load_checkpoint(path)
        path.write_bytes(b"WRONGMAG" + b"\x00" * 32)
        with pytest.raises(io.CheckpointError, match="magic"):
            io.load_checkpoint(path)


class TestSplits:
    def seed_style_bank(self, trials=15):
        spec = SynthSpec(n_subjects=1, n_classes=3, n_channels=4,
                         trials_per_subject=trials, samples_per_trial=30, seed=2)
        return io.gen_synthetic(spec)

    def test_first9_last6_sample_counts(self):
        bank = self.seed_style_bank(15)
        train, test = io.apply_split(bank, io.get_protocol("first9-last6"))
        assert len(train.samples) == 270
        assert len(test.samples) == 180

    def test_ratio_80_20_trial_counts(self):
        bank = self.seed_style_bank(40)
        train, test = io.apply_split(bank, io.get_protocol("ratio80"))
        train_trials = {s.trial_id for s in train.samples}
        test_trials = {s.trial_id for s in test.samples}
        assert len(train_trials) == 32
        assert len(test_trials) == 8

    def test_split_partitions_bank(self):
        bank = self.seed_style_bank(15)
        train, test = io.apply_split(bank, io.get_protocol("first9-last6"))
        key = lambda s: (s.subject_id, s.session_id, s.trial_id, s.window_index)
        union = {key(s) for s in train.samples} | {key(s) for s in test.samples}
        assert union == {key(s) for s in bank.samples}
        assert not ({key(s) for s in train.samples} & {key(s) for s in test.samples})

    def test_overlapping_protocol_rejected(self):
        with pytest.raises(io.SplitError, match="overlap"):
            io.SplitProtocol("bad", (0, 1, 2), (2, 3))

    def test_protocol_wanting_missing_trial_rejected(self):
        bank = self.seed_style_bank(8)
        with pytest.raises(io.SplitError):
            io.apply_split(bank, io.get_protocol("first9-last6"))

    def test_unknown_protocol_name(self):
        with pytest.raises(io.SplitError, match="unknown"):
            io.get_protocol("nope")


class TestSynthetic:
    def test_sample_counting(self):
        spec = SynthSpec(n_subjects=5, n_classes=3, trials_per_subject=10,
                         samples_per_trial=30, n_channels=8, seed=1)
        bank = io.gen_synthetic(spec)
        assert len(bank.samples) == 5 * 10 * 30

    def test_same_seed_bit_identical(self):
        a = io.gen_synthetic(SMALL)
        b = io.gen_synthetic(SMALL)
        assert io.bank_equal(a, b)

    def test_class_means_recovered_from_samples(self):
        spec = SynthSpec(n_subjects=4, n_classes=3, n_channels=6,
                         trials_per_subject=9, samples_per_trial=40, seed=3)
        bank = io.gen_synthetic(spec)
        mu, delta, _ = io.synth_factors(spec)
        feats, labels = bank.feature_array()
        for c in range(3):
            got = feats[labels == c].mean(axis=0)
            # per-class mean converges to mu[c] + mean over subjects of delta
            want = mu[c] + delta.mean(axis=0)
            n = (labels == c).sum()
            tol = 3.0 * spec.sample_noise_std / np.sqrt(n) + 3.0 * 0.02
            assert np.abs(got - want).max() < tol + 0.2  # subject-shift sampling slack

    def test_between_class_separation_positive(self):
        bank = io.gen_synthetic(SMALL)
        feats, labels = bank.feature_array()
        means = np.stack([feats[labels == c].mean(axis=0) for c in range(3)])
        d01 = np.linalg.norm(means[0] - means[1])
        assert d01 > 0.5

    def test_timeseries_mode_recovers_separable_features(self):
        spec = SynthSpec(n_subjects=2, n_classes=2, n_channels=4,
                         trials_per_subject=4, samples_per_trial=6, seed=9,
                         mode="timeseries")
        bank = io.gen_synthetic(spec)
        feat_bank = io.extract_bank_features(bank, smooth=False)
        assert len(feat_bank.samples) == 2 * 4 * 6
        feats, labels = feat_bank.feature_array()
        mu, _, _ = io.synth_factors(spec)
        # class contrast of band log-amplitudes shows up in the features
        got = feats[labels == 0].mean(axis=0) - feats[labels == 1].mean(axis=0)
        want = mu[0] - mu[1]
        corr = np.corrcoef(got.ravel(), want.ravel())[0, 1]
        assert corr > 0.8

    def test_invalid_spec_rejected(self):
        with pytest.raises(Exception):
            SynthSpec(n_subjects=0)
        with pytest.raises(Exception):
            SynthSpec(mode="other")


def test_extract_bank_features_window_counts():
    spec = SynthSpec(n_subjects=1, n_classes=2, n_channels=4,
                     trials_per_subject=2, samples_per_trial=5, seed=4,
                     mode="timeseries")
    bank = io.gen_synthetic(spec)
    feat = io.extract_bank_features(bank, smooth=True)
    per_trial = {}
    for s in feat.samples:
        per_trial.setdefault(s.trial_id, []).append(s.window_index)
    for trial, windows in per_trial.items():
        assert windows == list(range(5))
