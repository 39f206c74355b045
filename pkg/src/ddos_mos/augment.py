"""Label-preserving feature-space analogs of speed, tempo and pitch changes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Corpus, CorpusError, UtteranceRecord, feature_filename

KINDS = ("speed", "tempo", "pitch")


@dataclass(frozen=True)
class AugmentSpec:
    kind: str
    magnitude: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if self.kind in ("speed", "tempo") and not 0.5 <= self.magnitude <= 2.0:
            raise ValueError(f"{self.kind} factor {self.magnitude} outside [0.5, 2.0]")
        if self.kind == "pitch" and self.magnitude != int(self.magnitude):
            raise ValueError("pitch shift must be a whole number of channels")

    @property
    def suffix(self) -> str:
        mag = int(self.magnitude) if self.kind == "pitch" else self.magnitude
        return f"~{self.kind}{mag:+d}" if self.kind == "pitch" else f"~{self.kind}{mag:g}"


DEFAULT_SPECS = (AugmentSpec("speed", 0.9), AugmentSpec("speed", 1.1),
                 AugmentSpec("tempo", 0.9), AugmentSpec("tempo", 1.1),
                 AugmentSpec("pitch", -1), AugmentSpec("pitch", 1))


def _new_length(T, factor):
    return max(1, int(np.floor(T / factor + 0.5)))


def speed(features, factor):
    """Resample the time axis by linear interpolation to round(T / factor) frames."""
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"speed factor {factor} outside [0.5, 2.0]")
    x = np.asarray(features)
    T = x.shape[0]
    n = _new_length(T, factor)
    if n == T:
        return x.copy()
    pos = np.linspace(0.0, T - 1, n) if n > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T - 1)
    w = (pos - lo)[:, None]
    return ((1 - w) * x[lo] + w * x[hi]).astype(x.dtype)


def tempo(features, factor):
    """Drop or repeat whole frames at evenly spaced positions to round(T / factor) frames."""
    if not 0.5 <= factor <= 2.0:
        raise ValueError(f"tempo factor {factor} outside [0.5, 2.0]")
    x = np.asarray(features)
    T = x.shape[0]
    n = _new_length(T, factor)
    idx = (np.arange(n) * T) // n
    return x[idx].copy()


def pitch(features, shift_k, tonal_channels=None):
    """Cyclically shift the tonal channel block by ``shift_k`` channels.

    ``tonal_channels`` is the size of the leading tonal block (default: all
    channels); the remaining channels are left untouched.
    """
    x = np.asarray(features)
    D = x.shape[1]
    block = D if tonal_channels is None else tonal_channels
    if shift_k != int(shift_k) or abs(shift_k) >= D:
        raise ValueError(f"pitch shift {shift_k} must be an integer with |k| < {D}")
    out = x.copy()
    out[:, :block] = np.roll(x[:, :block], int(shift_k), axis=1)
    return out


def apply_spec(features, spec: AugmentSpec, tonal_channels=None):
    if spec.kind == "speed":
        return speed(features, spec.magnitude)
    if spec.kind == "tempo":
        return tempo(features, spec.magnitude)
    return pitch(features, int(spec.magnitude), tonal_channels)


def augment_corpus(corpus: Corpus, specs=DEFAULT_SPECS, tonal_channels=None) -> Corpus:
    """Original utterances plus one relabeled copy per spec, sharing ratings and system."""
    specs = list(specs)
    if not specs:
        return corpus
    suffixes = [s.suffix for s in specs]
    if len(set(suffixes)) != len(suffixes):
        raise CorpusError(f"duplicate augmentation suffixes in {suffixes}")
    records = list(corpus.utterances)
    features = dict(corpus.features)
    existing = {u.utterance_id for u in records}
    for u in corpus.utterances:
        src = corpus.features_of(u.utterance_id)
        for spec, suffix in zip(specs, suffixes):
            new_id = u.utterance_id + suffix
            if new_id in existing:
                raise CorpusError(f"augmented id {new_id!r} collides with an existing utterance")
            existing.add(new_id)
            ratings = tuple(type(r)(new_id, r.system_id, r.judge_id, r.score) for r in u.ratings)
            records.append(UtteranceRecord(new_id, u.system_id, feature_filename(new_id), ratings, u.mos))
            features[new_id] = apply_spec(src, spec, tonal_channels)
    records.sort(key=lambda r: r.utterance_id)
    return Corpus(tuple(records), corpus.judge_count, corpus.split_tag, features)
