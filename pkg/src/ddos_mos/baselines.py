"""Reference predictors the trained model is compared against."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Corpus


def mean_pool(corpus: Corpus) -> np.ndarray:
    return np.stack([corpus.features_of(u.utterance_id).astype(np.float64).mean(axis=0)
                     for u in corpus.utterances])


@dataclass(frozen=True)
class LinearProbe:
    """Least-squares map from mean-pooled frames to MOS."""

    weights: np.ndarray
    bias: float

    @classmethod
    def fit(cls, corpus: Corpus) -> "LinearProbe":
        X = mean_pool(corpus)
        y = np.array([u.mos for u in corpus.utterances], dtype=np.float64)
        A = np.c_[X, np.ones(len(X))]
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        return cls(coef[:-1], float(coef[-1]))

    def __call__(self, corpus: Corpus) -> np.ndarray:
        return mean_pool(corpus) @ self.weights + self.bias


def constant_predictor(value: float):
    def run(corpus: Corpus) -> np.ndarray:
        return np.full(len(corpus), float(value))
    return run
