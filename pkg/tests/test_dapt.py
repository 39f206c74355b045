from dataclasses import replace

import numpy as np
import pytest

from ddos_mos import nncore as nn
from ddos_mos.config import PipelineConfig
from ddos_mos.dapt import DaptConfig, ReconstructionHead, dapt_step_loss, mask_frames, run_dapt
from ddos_mos.dataset import Corpus, CorpusError, UtteranceRecord, split_corpus
from ddos_mos.model import Encoder
from ddos_mos.pipeline import stage_dapt, stage_train
from ddos_mos.simulator import SimulatorConfig, shift_domain, simulate_corpus, strip_labels


def corpus(seed=0, **kw):
    cfg = SimulatorConfig(**{"n_systems": 4, "utts_per_system": 8, "n_judges": 6, "ratings_per_utterance": 3,
                             "frame_range": (10, 20), "seed": seed, **kw})
    return simulate_corpus(cfg)[0]


class TestMasking:
    def test_ratio_and_fill(self):
        x = np.ones((1000, 4), np.float32)
        m, idx = mask_frames(x, 0.15, np.random.default_rng(0), mask_vector=np.full(4, 7.0))
        assert abs(len(idx) / 1000 - 0.15) < 0.04
        assert np.all(m[idx] == 7.0)
        keep = np.setdiff1d(np.arange(1000), idx)
        assert np.all(m[keep] == 1.0) and np.all(x == 1.0)

    def test_seeded(self):
        x = np.zeros((50, 2))
        assert np.array_equal(mask_frames(x, 0.3, np.random.default_rng(1))[1],
                              mask_frames(x, 0.3, np.random.default_rng(1))[1])

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            mask_frames(np.zeros((3, 2)), 1.5, np.random.default_rng())


class TestLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.enc = Encoder(4, hidden=8, rng=rng)
        self.head = ReconstructionHead(8, 4, rng)
        self.x = rng.normal(size=(12, 4)).astype(np.float32)

    def test_zero_output_is_mean_square(self):
        self.head["dapt.recon.W"][...] = 0
        idx = np.array([1, 5, 9])
        loss = dapt_step_loss(self.enc, self.head, self.x, self.x, idx)
        assert loss == pytest.approx(float(np.mean(self.x[idx].astype(np.float64) ** 2)), rel=1e-6)

    def test_perfect_reconstructor(self):
        # zero weights plus a bias equal to a constant input reconstructs it exactly
        self.head["dapt.recon.W"][...] = 0
        self.head["dapt.recon.b"][...] = 2.0
        x = np.full((6, 4), 2.0, np.float32)
        assert dapt_step_loss(self.enc, self.head, x, x, np.array([0, 3])) == 0.0

    def test_empty_mask_warns(self):
        with pytest.warns(RuntimeWarning, match="empty mask"):
            assert dapt_step_loss(self.enc, self.head, self.x, self.x, np.array([], int)) == 0.0

    def test_gradient(self):
        m, idx = mask_frames(self.x, 0.4, np.random.default_rng(2), self.head["dapt.mask_vector"])
        params = self.enc.parameters() + self.head.parameters()

        def fn():
            for p in params:
                p.zero_grad()
            # masked frames read the mask vector, so rebuild them on every evaluation
            masked = self.x.copy()
            masked[idx] = self.head["dapt.mask_vector"]
            return dapt_step_loss(self.enc, self.head, self.x, masked, idx, backward=True)

        assert nn.grad_check(fn, params) < 1e-2


class TestRun:
    def test_zero_epochs(self):
        enc = Encoder(16, rng=np.random.default_rng(0))
        out = run_dapt(enc, [corpus()], DaptConfig(epochs=0))
        for k, v in enc.state_dict().items():
            np.testing.assert_array_equal(out.state_dict()[k], v)

    def test_unlabeled_accepted_and_deterministic(self):
        unl = strip_labels(corpus(1))
        enc = Encoder(16, rng=np.random.default_rng(0))
        a = run_dapt(enc, [unl], DaptConfig(epochs=2))
        b = run_dapt(enc, [unl], DaptConfig(epochs=2))
        assert all(a.state_dict()[k].tobytes() == b.state_dict()[k].tobytes() for k in a.params)
        assert list(a.state_dict()) == [k for k in enc.state_dict()] and all(k.startswith("encoder.") for k in a.params)

    def test_ratings_never_read(self):
        c = corpus(2)
        enc = Encoder(16, rng=np.random.default_rng(0))
        plain = run_dapt(enc, [c], DaptConfig(epochs=1))
        blind = run_dapt(enc, [strip_labels(c)], DaptConfig(epochs=1))
        assert all(plain.state_dict()[k].tobytes() == blind.state_dict()[k].tobytes() for k in plain.params)

    def test_loss_decreases(self):
        c = corpus(3, n_systems=8)
        history = []
        run_dapt(Encoder(16, rng=np.random.default_rng(0)), [c], DaptConfig(epochs=60, batch_size=16), history)
        assert len(history) >= 200
        assert np.mean(history[-20:]) < np.mean(history[:20])

    def test_dim_mismatch(self):
        other = Corpus((UtteranceRecord("z", "s", "f"),), 6, "unlabeled", {"z": np.zeros((5, 8), np.float32)})
        with pytest.raises(CorpusError):
            run_dapt(Encoder(16), [corpus(), other], DaptConfig(epochs=1))
        with pytest.raises(CorpusError):
            run_dapt(Encoder(16), [other], DaptConfig(epochs=1))


@pytest.mark.xfail(strict=True, reason="reconstruction pre-training raises early dev loss on this simulator; see notes")
def test_dapt_init_lowers_dev_loss_at_step_500():
    gaps = []
    for seed in (0, 1, 2):
        cfg = PipelineConfig().with_seed(seed)
        cfg = replace(cfg, train=replace(cfg.train, total_steps=500, validation_every=500))
        shifted, _ = simulate_corpus(shift_domain(cfg.sim, 1))
        train, dev, _ = split_corpus(shifted, (0.7, 0.15, 0.15), seed)
        encoder = stage_dapt(cfg, [train], train.feature_dim)
        _, pre = stage_train(cfg, train, dev, encoder)
        _, scratch = stage_train(cfg.with_flags(no_dapt=True), train, dev)
        gaps.append(scratch[-1].dev_loss - pre[-1].dev_loss)
    assert np.median(gaps) > 0
