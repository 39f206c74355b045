"""Synthetic rated-speech corpora with known latent quality.

Each utterance gets a latent quality q_u around its system's q_s. Judges
rate it with an additive personal bias plus personal noise, and its frames
encode q_u twice: a tonal block whose amplitude grows with q_u, and a
noise block whose variance grows as q_u drops. Domain profiles other than
0 apply a fixed channel permutation and per-channel affine distortion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import Corpus, Rating, UtteranceRecord, feature_filename

PROFILE_SEED_STRIDE = 1000
PROFILE_SCALE_RANGE = (0.6, 1.6)
PROFILE_OFFSET_SD = 1.0
LATENT_HEADER = ["utterance_id", "system_id", "q_s", "q_u"]


@dataclass(frozen=True)
class SimulatorConfig:
    n_systems: int = 40
    utts_per_system: int = 25
    n_judges: int = 30
    ratings_per_utterance: int = 8
    feature_dim: int = 16
    frame_range: tuple = (30, 60)
    judge_bias_sd: float = 0.3
    judge_noise_range: tuple = (0.3, 0.8)
    utterance_jitter_sd: float = 0.4
    domain_profile_id: int = 0
    seed: int = 0
    quality_range: tuple = (1.3, 4.7)
    signal_channels: int = 6

    def validate(self):
        if self.ratings_per_utterance > self.n_judges:
            raise ValueError(
                f"ratings_per_utterance K={self.ratings_per_utterance} exceeds n_judges N={self.n_judges}")
        if self.ratings_per_utterance < 1 or self.n_systems < 1 or self.utts_per_system < 1:
            raise ValueError("n_systems, utts_per_system and ratings_per_utterance must be positive")
        t_min, t_max = self.frame_range
        if t_min < 1 or t_max < t_min:
            raise ValueError(f"bad frame_range {self.frame_range}")
        lo, hi = self.judge_noise_range
        if self.judge_bias_sd < 0 or self.utterance_jitter_sd < 0 or lo < 0 or hi < lo:
            raise ValueError("spreads must be non-negative")
        if not 1 <= self.signal_channels < self.feature_dim:
            raise ValueError("signal_channels must leave at least one noise channel")
        return self


@dataclass(frozen=True)
class LatentQuality:
    utterance_id: str
    system_id: str
    q_s: float
    q_u: float


def _stream(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _clamp(q):
    return min(max(float(q), 1.0), 5.0)


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


@dataclass(frozen=True)
class DomainProfile:
    perm: np.ndarray
    scale: np.ndarray
    offset: np.ndarray

    def apply(self, frames):
        return frames[:, self.perm] * self.scale + self.offset


def domain_profile(profile_id: int, feature_dim: int, signal_channels: int) -> DomainProfile:
    """Fixed per-profile distortion; profile 0 is the identity.

    The permutation acts within the tonal block and within the noise block
    separately, so the block layout survives the shift.
    """
    if profile_id == 0:
        return DomainProfile(np.arange(feature_dim), np.ones(feature_dim), np.zeros(feature_dim))
    rng = _stream(7919, profile_id, feature_dim, signal_channels)
    perm = np.concatenate([rng.permutation(signal_channels),
                           signal_channels + rng.permutation(feature_dim - signal_channels)])
    lo, hi = PROFILE_SCALE_RANGE
    scale = np.exp(rng.uniform(np.log(lo), np.log(hi), size=feature_dim))
    offset = rng.normal(0.0, PROFILE_OFFSET_SD, size=feature_dim)
    return DomainProfile(perm, scale, offset)


def tonal_profile(signal_channels: int) -> np.ndarray:
    return 1.0 / np.sqrt(1.0 + np.arange(signal_channels))


def synthesize_features(q_u, T, domain_profile_id, rng, feature_dim=16, signal_channels=6):
    """T x D frames encoding quality ``q_u`` in [1, 5]."""
    if not 1.0 <= q_u <= 5.0:
        raise ValueError(f"q_u {q_u} outside [1, 5]")
    n_noise = feature_dim - signal_channels
    t = np.arange(T)
    period = rng.uniform(8.0, 20.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    envelope = 1.0 + 0.3 * np.sin(2 * np.pi * t / period + phase)
    gain = np.exp(rng.normal(0.0, 0.18))
    amplitude = 0.3 + 0.35 * (q_u - 1.0)
    tonal = (gain * amplitude) * envelope[:, None] * tonal_profile(signal_channels)[None, :]
    tonal = tonal + 0.25 * rng.standard_normal((T, signal_channels))
    noise_sd = 0.2 + 0.3 * (5.0 - q_u)
    noise = noise_sd * rng.standard_normal((T, n_noise))
    frames = np.concatenate([tonal, noise], axis=1)
    if domain_profile_id:
        frames = domain_profile(domain_profile_id, feature_dim, signal_channels).apply(frames)
    return frames.astype(np.float32)


def simulate_corpus(config: SimulatorConfig, split_tag="train"):
    """Returns (Corpus with in-memory features, list of LatentQuality)."""
    config.validate()
    seed, prof = config.seed, config.domain_profile_id
    lo, hi = config.quality_range
    q_sys = _stream(seed, 0).uniform(lo, hi, size=config.n_systems)
    judge_rng = _stream(seed, 1)
    bias = judge_rng.normal(0.0, config.judge_bias_sd, size=config.n_judges)
    noise_sd = judge_rng.uniform(*config.judge_noise_range, size=config.n_judges)

    records, latents, features = [], [], {}
    t_min, t_max = config.frame_range
    for s in range(config.n_systems):
        sys_id = f"d{prof}_s{s:03d}"
        for u in range(config.utts_per_system):
            index = s * config.utts_per_system + u
            rng = _stream(seed, 2, index)
            q_u = _clamp(q_sys[s] + config.utterance_jitter_sd * rng.standard_normal())
            utt_id = f"{sys_id}_u{u:03d}"
            judges = np.sort(rng.choice(config.n_judges, size=config.ratings_per_utterance, replace=False))
            raw = q_u + bias[judges] + noise_sd[judges] * rng.standard_normal(len(judges))
            scores = np.clip(round_half_up(raw), 1, 5).astype(int)
            ratings = tuple(Rating(utt_id, sys_id, int(j) + 1, int(sc)) for j, sc in zip(judges, scores))
            T = int(rng.integers(t_min, t_max + 1))
            features[utt_id] = synthesize_features(q_u, T, prof, rng, config.feature_dim, config.signal_channels)
            records.append(UtteranceRecord(utt_id, sys_id, feature_filename(utt_id), ratings))
            latents.append(LatentQuality(utt_id, sys_id, float(q_sys[s]), q_u))
    corpus = Corpus(tuple(sorted(records, key=lambda r: r.utterance_id)), config.n_judges, split_tag, features)
    return corpus, latents


def shift_domain(config: SimulatorConfig, new_profile_id: int) -> SimulatorConfig:
    offset = PROFILE_SEED_STRIDE * (new_profile_id - config.domain_profile_id)
    return replace(config, domain_profile_id=new_profile_id, seed=config.seed + offset)


def strip_labels(corpus: Corpus) -> Corpus:
    """Drop every rating, yielding an ``unlabeled`` corpus over the same features."""
    utts = tuple(UtteranceRecord(u.utterance_id, u.system_id, u.feature_ref) for u in corpus.utterances)
    return Corpus(utts, corpus.judge_count, "unlabeled", corpus.features)


def write_latents(path, latents) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENT_HEADER)
        for lq in sorted(latents, key=lambda x: x.utterance_id):
            w.writerow([lq.utterance_id, lq.system_id, repr(lq.q_s), repr(lq.q_u)])


def read_latents(path):
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LATENT_HEADER:
            raise ValueError(f"{path}: header must be {','.join(LATENT_HEADER)}")
        return [LatentQuality(r["utterance_id"], r["system_id"], float(r["q_s"]), float(r["q_u"]))
                for r in reader]
