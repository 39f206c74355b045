import numpy as np
import pytest

from ddos_mos.augment import DEFAULT_SPECS, AugmentSpec, apply_spec, augment_corpus, pitch, speed, tempo
from ddos_mos.dataset import CorpusError
from ddos_mos.simulator import SimulatorConfig, simulate_corpus


def frames(T=20, D=6, seed=0):
    return np.random.default_rng(seed).normal(size=(T, D)).astype(np.float32)


class TestOps:
    def test_lengths(self):
        x = frames(100)
        assert speed(x, 0.9).shape == (111, 6)
        assert speed(x, 1.1).shape == (91, 6)
        assert tempo(x, 1.25).shape == (80, 6)
        assert tempo(x, 0.8).shape == (125, 6)

    def test_identity_factors(self):
        x = frames()
        np.testing.assert_array_equal(speed(x, 1.0), x)
        np.testing.assert_array_equal(tempo(x, 1.0), x)
        np.testing.assert_array_equal(pitch(x, 0), x)

    def test_speed_endpoints_and_linearity(self):
        x = np.linspace(0, 1, 11)[:, None].repeat(2, axis=1)
        y = speed(x, 0.5)
        np.testing.assert_allclose(y[:, 0], np.linspace(0, 1, 22), atol=1e-12)

    def test_tempo_uses_whole_frames(self):
        x = frames(30)
        y = tempo(x, 1.1)
        rows = {r.tobytes() for r in x}
        assert all(r.tobytes() in rows for r in y)

    def test_pitch_roll_and_noise_untouched(self):
        x = np.arange(12.0).reshape(1, 12)
        y = pitch(x, 1, tonal_channels=4)
        np.testing.assert_array_equal(y[0, :4], [3, 0, 1, 2])
        np.testing.assert_array_equal(y[0, 4:], x[0, 4:])
        np.testing.assert_array_equal(pitch(pitch(x, 1, 4), -1, 4), x)

    def test_shape_preserved(self):
        x = frames(17, 16)
        for spec in DEFAULT_SPECS:
            assert apply_spec(x, spec, 6).shape[1] == 16

    def test_validation(self):
        with pytest.raises(ValueError):
            AugmentSpec("speed", 3.0)
        with pytest.raises(ValueError):
            AugmentSpec("echo", 1.0)
        with pytest.raises(ValueError):
            AugmentSpec("pitch", 0.5)
        with pytest.raises(ValueError):
            pitch(frames(5, 4), 4)

    def test_suffixes(self):
        assert [s.suffix for s in DEFAULT_SPECS] == [
            "~speed0.9", "~speed1.1", "~tempo0.9", "~tempo1.1", "~pitch-1", "~pitch+1"]


class TestCorpus:
    def corpus(self):
        cfg = SimulatorConfig(n_systems=2, utts_per_system=3, n_judges=5, ratings_per_utterance=3,
                              frame_range=(10, 20))
        return simulate_corpus(cfg)[0]

    def test_labels_copied(self):
        c = self.corpus()
        aug = augment_corpus(c, DEFAULT_SPECS, 6)
        assert len(aug) == len(c) * (1 + len(DEFAULT_SPECS))
        by_id = {u.utterance_id: u for u in c}
        for u in aug:
            base = by_id[u.utterance_id.split("~")[0]]
            assert u.mos == base.mos and u.system_id == base.system_id
            assert [(r.judge_id, r.score) for r in u.ratings] == [(r.judge_id, r.score) for r in base.ratings]
        assert all(uid in aug.features for uid in by_id)

    def test_empty_specs_identity(self):
        c = self.corpus()
        assert augment_corpus(c, ()) is c

    def test_collision(self):
        c = augment_corpus(self.corpus(), [AugmentSpec("speed", 0.9)])
        with pytest.raises(CorpusError, match="collides"):
            augment_corpus(augment_corpus(c, [AugmentSpec("tempo", 1.1)]), [AugmentSpec("tempo", 1.1)])

    def test_duplicate_specs(self):
        with pytest.raises(CorpusError):
            augment_corpus(self.corpus(), [AugmentSpec("pitch", 1), AugmentSpec("pitch", 1)])
