from dataclasses import replace

import numpy as np
import pytest

from ddos_mos.baselines import mean_pool
from ddos_mos.metrics import pearson
from ddos_mos.simulator import (
    SimulatorConfig, domain_profile, read_latents, round_half_up, shift_domain, simulate_corpus,
    strip_labels, synthesize_features, write_latents,
)


def small(**kw):
    return SimulatorConfig(**{"n_systems": 5, "utts_per_system": 10, "n_judges": 20, **kw})


class TestCorpus:
    def test_counts_and_distinct_judges(self):
        corpus, latents = simulate_corpus(small(ratings_per_utterance=8))
        assert len(corpus) == 50 and len(latents) == 50
        for u in corpus:
            judges = [r.judge_id for r in u.ratings]
            assert len(judges) == 8 and len(set(judges)) == 8
            assert all(1 <= j <= 20 for j in judges)
            assert all(r.score in (1, 2, 3, 4, 5) for r in u.ratings)

    def test_k_greater_than_n(self):
        with pytest.raises(ValueError, match="exceeds"):
            simulate_corpus(small(ratings_per_utterance=21))

    def test_noise_free_limit(self):
        cfg = small(judge_bias_sd=0.0, judge_noise_range=(0.0, 0.0), utterance_jitter_sd=0.0)
        corpus, latents = simulate_corpus(cfg)
        q = {lq.utterance_id: lq.q_u for lq in latents}
        for u in corpus:
            expected = min(max(round_half_up(q[u.utterance_id]), 1), 5)
            assert all(r.score == expected for r in u.ratings)

    def test_integer_quality_noise_free(self):
        cfg = small(judge_bias_sd=0.0, judge_noise_range=(0.0, 0.0), utterance_jitter_sd=0.0,
                    quality_range=(3.0, 3.0))
        corpus, _ = simulate_corpus(cfg)
        assert {u.mos for u in corpus} == {3.0}

    def test_system_means_track_quality(self):
        # Monte-Carlo over 10 seeds with the default 40 x 25 design
        for seed in range(10):
            corpus, latents = simulate_corpus(SimulatorConfig(seed=seed, feature_dim=16))
            q_s = {lq.system_id: lq.q_s for lq in latents}
            systems = sorted(q_s)
            means = [np.mean([u.mos for u in corpus if u.system_id == s]) for s in systems]
            assert pearson(means, [q_s[s] for s in systems]) >= 0.9

    def test_deterministic(self):
        a, la = simulate_corpus(small(seed=4))
        b, lb = simulate_corpus(small(seed=4))
        assert a == b and la == lb
        for uid in a.features:
            assert a.features[uid].tobytes() == b.features[uid].tobytes()
        c, _ = simulate_corpus(small(seed=5))
        assert a != c

    def test_latents_clamped(self):
        _, latents = simulate_corpus(small(utterance_jitter_sd=3.0))
        assert all(1 <= lq.q_u <= 5 and 1 <= lq.q_s <= 5 for lq in latents)

    def test_latent_sidecar(self, tmp_path):
        _, latents = simulate_corpus(small())
        write_latents(tmp_path / "lat.csv", latents)
        assert (tmp_path / "lat.csv").read_text().splitlines()[0] == "utterance_id,system_id,q_s,q_u"
        assert sorted(read_latents(tmp_path / "lat.csv"), key=lambda x: x.utterance_id) == \
            sorted(latents, key=lambda x: x.utterance_id)

    def test_strip_labels(self):
        corpus, _ = simulate_corpus(small())
        unl = strip_labels(corpus)
        assert unl.split_tag == "unlabeled" and all(not u.ratings and u.mos is None for u in unl)


class TestFeatures:
    def test_noise_variance_monotone(self):
        hi = synthesize_features(5.0, 200, 0, np.random.default_rng(0))
        lo = synthesize_features(1.0, 200, 0, np.random.default_rng(0))
        assert hi[:, 6:].var(axis=0).mean() < lo[:, 6:].var(axis=0).mean()
        assert np.abs(hi[:, :6]).mean() > np.abs(lo[:, :6]).mean()

    def test_deterministic(self):
        a = synthesize_features(3.3, 40, 1, np.random.default_rng(9))
        b = synthesize_features(3.3, 40, 1, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes() and a.dtype == np.float32 and a.shape == (40, 16)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            synthesize_features(5.5, 10, 0, np.random.default_rng(0))

    def test_linear_probe_r2(self):
        cfg = SimulatorConfig(n_systems=20, utts_per_system=25, seed=11)
        corpus, latents = simulate_corpus(cfg)
        q = {lq.utterance_id: lq.q_u for lq in latents}
        X = np.c_[mean_pool(corpus), np.ones(len(corpus))]
        y = np.array([q[u.utterance_id] for u in corpus])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        r2 = 1 - np.sum((X @ coef - y) ** 2) / np.sum((y - y.mean()) ** 2)
        assert len(corpus) == 500 and r2 >= 0.7

    def test_profile(self):
        ident = domain_profile(0, 16, 6)
        x = np.random.default_rng(0).normal(size=(5, 16))
        np.testing.assert_array_equal(ident.apply(x), x)
        p = domain_profile(1, 16, 6)
        assert sorted(p.perm[:6]) == list(range(6)) and sorted(p.perm[6:]) == list(range(6, 16))
        assert not np.allclose(p.apply(x), x)
        q = domain_profile(1, 16, 6)
        np.testing.assert_array_equal(p.offset, q.offset)


class TestShift:
    def test_identity_on_other_fields(self):
        cfg = small(seed=3)
        shifted = shift_domain(cfg, 1)
        assert shifted.domain_profile_id == 1 and shifted.seed != cfg.seed
        assert replace(shifted, domain_profile_id=0, seed=3) == cfg

    def test_same_profile_same_statistics(self):
        a, _ = simulate_corpus(small(seed=1, domain_profile_id=1))
        b, _ = simulate_corpus(small(seed=2, domain_profile_id=1))
        fa = np.concatenate(list(a.features.values()))
        fb = np.concatenate(list(b.features.values()))
        np.testing.assert_allclose(fa.mean(axis=0), fb.mean(axis=0), atol=0.35)

    def test_shift_moves_statistics(self):
        a, _ = simulate_corpus(small(seed=1))
        b, _ = simulate_corpus(shift_domain(small(seed=1), 1))
        fa = np.concatenate(list(a.features.values()))
        fb = np.concatenate(list(b.features.values()))
        assert np.abs(fa.mean(axis=0) - fb.mean(axis=0)).max() > 0.5
