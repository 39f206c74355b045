import warnings
import numpy as np
import pytest

from ddos_mos.baselines import LinearProbe, constant_predictor
from ddos_mos.config import (
    ConfigError, PipelineConfig, load_config, parse_config_text, to_flat, write_config,
)
from ddos_mos.metrics import UndefinedCorrelation, aggregate_reports, evaluate
from ddos_mos.pipeline import (
    StageError, few_shot_subset, model_config, run_transfer, simulate_all, stage_train,
)


def tiny_cfg(**flags):
    cfg = load_config(overrides={"sim.n_systems": "6", "sim.utts_per_system": "6", "target.n_systems": "6",
                                 "target.utts_per_system": "10", "target.unlabeled_utts_per_system": "2",
                                 "train.total_steps": "20", "train.validation_every": "10",
                                 "dapt.epochs": "1", "transfer.epochs": "2"})
    return cfg.with_flags(**flags)


@pytest.fixture(scope="module")
def corpora():
    return simulate_all(tiny_cfg())


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = tiny_cfg(no_aug=True).with_seed(7)
        write_config(tmp_path / "c.txt", cfg)
        assert load_config(tmp_path / "c.txt") == cfg

    def test_seed_propagates(self):
        cfg = PipelineConfig().with_seed(5)
        assert cfg.sim.seed == cfg.train.seed == cfg.dapt.seed == cfg.transfer.seed == 5
        assert load_config(overrides={"seed": "5"}) == cfg

    def test_digest_tracks_content(self):
        assert PipelineConfig().digest() == PipelineConfig().digest()
        assert PipelineConfig().digest() != PipelineConfig().with_seed(1).digest()

    def test_errors(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"nope": "1"})
        with pytest.raises(ConfigError):
            load_config(overrides={"flags.no_aug": "maybe"})
        with pytest.raises(ConfigError):
            load_config(overrides={"transfer.mode": "half_shot"})
        with pytest.raises(ConfigError):
            parse_config_text("just words")

    def test_augment_specs(self):
        cfg = load_config(overrides={"augment.specs": "speed:0.8, pitch:2"})
        assert [(s.kind, s.magnitude) for s in cfg.augment] == [("speed", 0.8), ("pitch", 2.0)]
        assert to_flat(cfg)["augment.specs"] == "speed:0.8, pitch:2"

    def test_flag_names_map_to_model(self):
        mc = model_config(PipelineConfig().with_flags(no_dist_head=True, linear_heads=True), 16, 30)
        assert not mc.use_dist_head and mc.use_reg_head and mc.linear_heads


class TestSimulateAll:
    def test_sizes_and_disjoint_ids(self, corpora):
        assert len(corpora.source_train) + len(corpora.source_dev) + len(corpora.source_test) == 36
        assert len(corpora.target_train) == 10
        unl = {u.utterance_id for u in corpora.target_unlabeled}
        labeled = {u.utterance_id for part in (corpora.target_train, corpora.target_dev, corpora.target_test)
                   for u in part}
        assert not unl & labeled and all(uid.endswith("_x") for uid in unl)
        assert all(not u.ratings for u in corpora.target_unlabeled)


@pytest.fixture(scope="module")
def model(corpora):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m, _ = stage_train(tiny_cfg(), corpora.source_train, corpora.source_dev)
    return m


class TestTransfer:
    def test_zero_shot_has_no_refinement(self, corpora, model):
        res = run_transfer(tiny_cfg(), model, corpora.target_train, corpora.target_test, "zero_shot")
        assert res.refinement is None and res.model is model
        assert len(res.predictions) == len(corpora.target_test)

    def test_few_shot_subset(self, corpora):
        sub = few_shot_subset(tiny_cfg(), corpora.target_train)
        assert len(sub) == 10
        small = corpora.target_train.subset([u.utterance_id for u in corpora.target_train.utterances[:9]])
        with pytest.raises(StageError, match="10"):
            few_shot_subset(tiny_cfg(), small)

    def test_few_shot_warns_in_report(self, corpora, model):
        res = run_transfer(tiny_cfg(), model, corpora.target_train, corpora.target_test, "few_shot")
        assert res.refinement is not None
        assert any("10 utterances" in w for w in res.warnings)

    def test_full_no_refine(self, corpora, model):
        res = run_transfer(tiny_cfg(no_refine=True), model, corpora.target_train, corpora.target_test, "full")
        assert res.refinement is None and res.model is not model


class TestBaselines:
    def test_constant_raises(self, corpora):
        with pytest.raises(UndefinedCorrelation):
            evaluate(corpora.source_test, constant_predictor(3.0))

    def test_probe_is_least_squares(self, corpora):
        probe = LinearProbe.fit(corpora.source_train)
        preds = probe(corpora.source_train)
        y = np.array([u.mos for u in corpora.source_train])
        # residuals are orthogonal to the intercept column
        assert abs(np.sum(preds - y)) < 1e-8


def test_aggregate_reports():
    docs = [{"a": 1.0, "n_utt": 4, "note": "x"}, {"a": 3.0, "n_utt": 4, "note": "y"}, {"a": 8.0, "n_utt": 4}]
    assert aggregate_reports(docs) == {"a": 4.0, "n_utt": 4.0}
    assert aggregate_reports(docs, "median")["a"] == 3.0
    with pytest.raises(ValueError):
        aggregate_reports([])
