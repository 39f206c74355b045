"""Rated-utterance corpora: data model, MOS targets and file I/O.

On disk a corpus is a directory holding ``ratings.csv`` (one rating per row)
and a ``features/`` directory of DDFS frame files.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_BINS = 5
SPLIT_TAGS = ("train", "dev", "test", "unlabeled")
RATINGS_HEADER = ["utterance_id", "system_id", "judge_id", "score"]
FEATURE_MAGIC = b"DDFS"


class CorpusError(ValueError):
    """Raised for malformed or inconsistent corpus data."""


@dataclass(frozen=True)
class Rating:
    utterance_id: str
    system_id: str
    judge_id: int
    score: int

    def __post_init__(self):
        if isinstance(self.score, bool) or not isinstance(self.score, (int, np.integer)):
            raise CorpusError(f"score must be an integer, got {self.score!r}")
        if not 1 <= self.score <= N_BINS:
            raise CorpusError(f"score {self.score} outside 1..{N_BINS}")
        if self.judge_id < 1:
            raise CorpusError(f"judge_id must be >= 1, got {self.judge_id}")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    system_id: str
    feature_ref: str
    ratings: tuple[Rating, ...] = ()
    mos: float | None = None

    def __post_init__(self):
        for r in self.ratings:
            if r.utterance_id != self.utterance_id:
                raise CorpusError(
                    f"rating for {r.utterance_id!r} attached to {self.utterance_id!r}")
        if self.ratings:
            expected = compute_mos(self.ratings)
            if self.mos is None:
                object.__setattr__(self, "mos", expected)
            elif self.mos != expected:
                raise CorpusError(
                    f"{self.utterance_id}: stored mos {self.mos} != mean of ratings {expected}")
        elif self.mos is not None:
            raise CorpusError(f"{self.utterance_id}: mos given without ratings")

    @property
    def labeled(self) -> bool:
        return bool(self.ratings)


@dataclass(frozen=True)
class Corpus:
    """Immutable set of utterances. ``features`` maps utterance_id to a T x D float32 matrix."""

    utterances: tuple[UtteranceRecord, ...]
    judge_count: int
    split_tag: str = "train"
    features: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.judge_count < 1:
            raise CorpusError("judge_count must be positive")
        if self.split_tag not in SPLIT_TAGS:
            raise CorpusError(f"unknown split tag {self.split_tag!r}")
        seen = set()
        for u in self.utterances:
            if u.utterance_id in seen:
                raise CorpusError(f"duplicate utterance_id {u.utterance_id!r}")
            seen.add(u.utterance_id)
            for r in u.ratings:
                if r.judge_id > self.judge_count:
                    raise CorpusError(
                        f"judge_id {r.judge_id} exceeds judge_count {self.judge_count}")
            if self.split_tag != "unlabeled" and not u.ratings:
                raise CorpusError(f"{u.utterance_id}: unrated utterance in a {self.split_tag} split")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def feature_dim(self) -> int:
        if not self.features:
            raise CorpusError("corpus carries no features")
        return next(iter(self.features.values())).shape[1]

    def features_of(self, utterance_id: str) -> np.ndarray:
        try:
            return self.features[utterance_id]
        except KeyError:
            raise CorpusError(f"no features loaded for {utterance_id!r}") from None

    def subset(self, utterance_ids: Iterable[str], split_tag: str | None = None) -> "Corpus":
        ids = set(utterance_ids)
        utts = tuple(u for u in self.utterances if u.utterance_id in ids)
        feats = {u.utterance_id: self.features[u.utterance_id]
                 for u in utts if u.utterance_id in self.features}
        return Corpus(utts, self.judge_count, split_tag or self.split_tag, feats)

    def with_tag(self, split_tag: str) -> "Corpus":
        return Corpus(self.utterances, self.judge_count, split_tag, self.features)


def compute_mos(ratings: Sequence[Rating]) -> float:
    if not ratings:
        raise CorpusError("no ratings")
    return math.fsum(r.score for r in ratings) / len(ratings)


def empirical_distribution(ratings: Sequence[Rating]) -> np.ndarray:
    """Fraction of ratings falling on each score 1..5."""
    if not ratings:
        raise CorpusError("no ratings")
    counts = np.zeros(N_BINS, dtype=np.float64)
    for r in ratings:
        counts[r.score - 1] += 1
    return counts / len(ratings)


# ---------------------------------------------------------------- features

def validate_features(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
        raise CorpusError(f"feature matrix must be T x D with T >= 1, got {frames.shape}")
    if not np.all(np.isfinite(frames)):
        raise CorpusError("feature matrix holds non-finite values")
    return frames.astype(np.float32, copy=False)


def write_features(path: str | os.PathLike, frames: np.ndarray) -> None:
    frames = validate_features(frames)
    t, d = frames.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", t, d))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def read_features(path: str | os.PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CorpusError(f"missing feature file {path}") from None
    if len(blob) < 12 or blob[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: not a DDFS feature file")
    t, d = struct.unpack("<II", blob[4:12])
    payload = blob[12:]
    if len(payload) != 4 * t * d:
        raise CorpusError(f"{path}: expected {t}x{d} reals, payload is {len(payload)} bytes")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, d).astype(np.float32)
    return validate_features(frames)


# ---------------------------------------------------------------- corpora

def feature_filename(utterance_id: str) -> str:
    return f"features/{utterance_id}.ddfs"


def load_corpus(ratings_path, features_dir=None, judge_count: int | None = None,
                split_tag: str = "train") -> Corpus:
    """Load a ratings CSV and its feature files.

    Rows with blank ``judge_id`` and ``score`` declare unrated utterances and
    are only accepted for the ``unlabeled`` split. ``judge_count`` defaults to
    the largest judge id seen.
    """
    ratings_path = Path(ratings_path)
    features_dir = Path(features_dir) if features_dir is not None else ratings_path.parent / "features"
    by_utt: dict[str, dict] = {}
    try:
        fh = open(ratings_path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError(f"missing ratings file {ratings_path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RATINGS_HEADER:
            raise CorpusError(f"{ratings_path}: header must be {','.join(RATINGS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise CorpusError(f"{ratings_path}:{lineno}: expected 4 fields, got {len(row)}")
            utt, sys_id, judge, score = row
            entry = by_utt.setdefault(utt, {"system_id": sys_id, "ratings": []})
            if entry["system_id"] != sys_id:
                raise CorpusError(f"{ratings_path}:{lineno}: {utt} listed under two systems")
            if judge == "" and score == "":
                continue
            try:
                judge_i = int(judge)
                score_i = int(score)
            except ValueError:
                raise CorpusError(
                    f"{ratings_path}:{lineno}: judge_id/score must be integers, got {judge!r},{score!r}"
                ) from None
            try:
                entry["ratings"].append(Rating(utt, sys_id, judge_i, score_i))
            except CorpusError as exc:
                raise CorpusError(f"{ratings_path}:{lineno}: {exc}") from None

    if judge_count is None:
        judge_count = max((r.judge_id for e in by_utt.values() for r in e["ratings"]), default=1)
    records = []
    features = {}
    for utt in sorted(by_utt):
        entry = by_utt[utt]
        fpath = features_dir / Path(feature_filename(utt)).name
        features[utt] = read_features(fpath)
        records.append(UtteranceRecord(utt, entry["system_id"], feature_filename(utt),
                                       tuple(entry["ratings"])))
    corpus = Corpus(tuple(records), judge_count, split_tag, features)
    dims = {f.shape[1] for f in features.values()}
    if len(dims) > 1:
        raise CorpusError(f"{ratings_path}: mixed feature dimensions {sorted(dims)}")
    return corpus


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ratings.csv and feature files; returns the ratings path."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    ratings_path = out_dir / "ratings.csv"
    with open(ratings_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATINGS_HEADER)
        for u in sorted(corpus.utterances, key=lambda u: u.utterance_id):
            if not u.ratings:
                w.writerow([u.utterance_id, u.system_id, "", ""])
            for r in u.ratings:
                w.writerow([r.utterance_id, r.system_id, r.judge_id, r.score])
            write_features(out_dir / feature_filename(u.utterance_id), corpus.features_of(u.utterance_id))
    return ratings_path


def split_corpus(corpus: Corpus, ratios=(0.7, 0.15, 0.15), seed: int = 0):
    """Random per-utterance train/dev/test partition with rounded shares."""
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"split ratios must be 3 non-negative reals summing to 1, got {ratios}")
    n = len(corpus)
    n_train = round(n * ratios[0])
    n_dev = min(round(n * ratios[1]), n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    ids = [corpus.utterances[i].utterance_id for i in order]
    parts = (ids[:n_train], ids[n_train:n_train + n_dev], ids[n_train + n_dev:])
    return tuple(corpus.subset(p, tag) for p, tag in zip(parts, ("train", "dev", "test")))
