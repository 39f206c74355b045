"""The three training stages, evaluation and the transfer setups, wired together.

Everything here works on in-memory corpora; :mod:`ddos_mos.cli` adds the
file handling around it.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .augment import augment_corpus
from .config import PipelineConfig
from .dapt import run_dapt
from .dataset import Corpus, CorpusError, split_corpus
from .metrics import MetricsReport, evaluate, metrics_from_predictions
from .model import DdosModel, ModelConfig, TrainConfig, predict_corpus, train_stage2
from .refine import RefinementLayer, apply_refinement, fit_refinement
from .simulator import shift_domain, simulate_corpus, strip_labels

log = logging.getLogger(__name__)

UNLABELED_SEED_OFFSET = 500


class StageError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


@dataclass
class Corpora:
    source_train: Corpus
    source_dev: Corpus
    source_test: Corpus
    target_train: Corpus
    target_dev: Corpus
    target_test: Corpus
    target_unlabeled: Corpus
    latents: dict


def simulate_all(cfg: PipelineConfig) -> Corpora:
    """Source corpus split 70/15/15 plus the shifted-domain target corpus and its unlabeled set."""
    source, lat_src = simulate_corpus(cfg.sim)
    train, dev, test = split_corpus(source, cfg.split, seed=cfg.seed)
    tcfg = target_sim_config(cfg)
    target, lat_tgt = simulate_corpus(tcfg)
    t_train, t_dev, t_test = split_corpus(target, cfg.target.split, seed=cfg.seed + 1)
    ucfg = replace(tcfg, utts_per_system=cfg.target.unlabeled_utts_per_system,
                   seed=tcfg.seed + UNLABELED_SEED_OFFSET)
    unlabeled, _ = simulate_corpus(ucfg)
    unlabeled = strip_labels(unlabeled)
    # unlabeled ids must not collide with the labeled target ids
    unlabeled = _rename(unlabeled, "x")
    latents = {lq.utterance_id: lq for lq in lat_src + lat_tgt}
    return Corpora(train, dev, test, t_train, t_dev, t_test, unlabeled, latents)


def target_sim_config(cfg: PipelineConfig):
    shifted = shift_domain(cfg.sim, cfg.target.profile_id)
    return replace(shifted, n_systems=cfg.target.n_systems, utts_per_system=cfg.target.utts_per_system)


def _rename(corpus: Corpus, tag: str) -> Corpus:
    from .dataset import UtteranceRecord, feature_filename

    utts, feats = [], {}
    for u in corpus.utterances:
        new_id = f"{u.utterance_id}_{tag}"
        utts.append(UtteranceRecord(new_id, u.system_id, feature_filename(new_id)))
        feats[new_id] = corpus.features[u.utterance_id]
    return Corpus(tuple(utts), corpus.judge_count, corpus.split_tag, feats)


def model_config(cfg: PipelineConfig, feature_dim: int, judge_count: int) -> ModelConfig:
    return ModelConfig(feature_dim, judge_count,
                       use_reg_head=not cfg.flags.no_reg_head,
                       use_dist_head=not cfg.flags.no_dist_head,
                       linear_heads=cfg.flags.linear_heads)


def stage_dapt(cfg: PipelineConfig, corpora_for_dapt, feature_dim: int, history=None):
    """Stage 1: returns the pre-trained encoder state."""
    from .model import Encoder

    encoder = Encoder(feature_dim, rng=np.random.default_rng(cfg.seed))
    try:
        encoder = run_dapt(encoder, corpora_for_dapt, cfg.dapt, history)
    except (CorpusError, FloatingPointError) as exc:
        raise StageError(f"dapt: {exc}") from exc
    return encoder.state_dict()


def stage_train(cfg: PipelineConfig, train: Corpus, dev: Corpus, encoder_state=None,
                tonal_channels=None):
    """Stage 2: augmentation (unless disabled) then fine-tuning; returns (model, log)."""
    if train.features and tonal_channels is None:
        tonal_channels = cfg.sim.signal_channels
    model = DdosModel(model_config(cfg, train.feature_dim, train.judge_count), seed=cfg.seed)
    if encoder_state is not None:
        model.load_encoder(encoder_state)
    elif not cfg.flags.no_dapt:
        warnings.warn("stage 2 started without a DAPT encoder", RuntimeWarning, stacklevel=2)
    data = train if cfg.flags.no_aug else augment_corpus(train, cfg.augment, tonal_channels)
    try:
        return train_stage2(model, data, dev, cfg.train)
    except FloatingPointError as exc:
        raise StageError(f"train: {exc}") from exc


def stage_refine(model: DdosModel, train: Corpus) -> RefinementLayer:
    """Stage 3: closed-form affine fit on every training prediction at once."""
    preds = predict_corpus(model, train)
    try:
        return fit_refinement(preds, [u.mos for u in train.utterances])
    except ValueError as exc:
        raise StageError(f"refine: {exc}") from exc


def predictor(model: DdosModel, layer: RefinementLayer | None = None):
    def run(corpus):
        preds = predict_corpus(model, corpus)
        return preds if layer is None else apply_refinement(layer, preds)
    return run


def finetune(cfg: PipelineConfig, model: DdosModel, corpus: Corpus) -> DdosModel:
    """Fine-tune on target labels for ``transfer.epochs`` passes, keeping the final parameters."""
    t = cfg.transfer
    steps = max(2, math.ceil(t.epochs * len(corpus) / t.batch_size))
    tc = TrainConfig(total_steps=steps, batch_size=t.batch_size, peak_lr=t.lr,
                     warmup_steps=max(1, steps // 10), validation_every=0,
                     loss_weight=cfg.train.loss_weight, seed=t.seed)
    tuned, _ = train_stage2(model, corpus, None, tc)
    return tuned


def few_shot_subset(cfg: PipelineConfig, corpus: Corpus) -> Corpus:
    n = cfg.transfer.few_shot_n
    if len(corpus) < n:
        raise StageError(f"transfer: few_shot needs {n} target training utterances, have {len(corpus)}")
    rng = np.random.default_rng([cfg.transfer.seed, 10])
    pick = rng.choice(len(corpus), size=n, replace=False)
    return corpus.subset([corpus.utterances[i].utterance_id for i in pick])


@dataclass
class TransferResult:
    mode: str
    report: MetricsReport
    refinement: RefinementLayer | None
    warnings: tuple = ()
    model: DdosModel | None = None
    predictions: np.ndarray | None = None


def run_transfer(cfg: PipelineConfig, model: DdosModel, target_train: Corpus, target_test: Corpus,
                 mode: str) -> TransferResult:
    """Evaluate a source-trained model on the target test split under one transfer setup."""
    if mode == "zero_shot":
        preds = predictor(model)(target_test)
        return TransferResult(mode, _score(target_test, preds), None, (), model, preds)
    if mode == "few_shot":
        data = few_shot_subset(cfg, target_train)
    elif mode == "full":
        data = target_train
    else:
        raise StageError(f"transfer: unknown mode {mode!r}")
    tuned = finetune(cfg, model, data)
    notes = []
    layer = None
    if not cfg.flags.no_refine:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            layer = stage_refine(tuned, data)
        notes = [str(w.message) for w in caught]
        if mode == "few_shot":
            notes.append(f"refinement refit on only {len(data)} utterances")
    preds = predictor(tuned, layer)(target_test)
    return TransferResult(mode, _score(target_test, preds), layer, tuple(notes), tuned, preds)


def _score(corpus: Corpus, preds) -> MetricsReport:
    return metrics_from_predictions(preds, [u.mos for u in corpus.utterances],
                                    [u.system_id for u in corpus.utterances])


@dataclass
class ExperimentResult:
    model: DdosModel
    refinement: RefinementLayer | None
    train_log: list
    source_report: MetricsReport
    transfer: dict


def run_experiment(cfg: PipelineConfig, corpora: Corpora | None = None, modes=("zero_shot",)) -> ExperimentResult:
    """Full pipeline on simulated data: DAPT, stage 2, refinement, source test and transfer."""
    c = corpora or simulate_all(cfg)
    encoder_state = None
    if not cfg.flags.no_dapt:
        encoder_state = stage_dapt(cfg, [c.source_train, c.target_train, c.target_unlabeled],
                                   c.source_train.feature_dim)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model, rows = stage_train(cfg, c.source_train, c.source_dev, encoder_state)
    layer = None if cfg.flags.no_refine else stage_refine(model, c.source_train)
    report = evaluate(c.source_test, predictor(model, layer))
    transfer = {m: run_transfer(cfg, model, c.target_train, c.target_test, m) for m in modes}
    return ExperimentResult(model, layer, rows, report, transfer)
