"""Domain-adaptive pre-training of the encoder by masked-frame reconstruction.

Only feature sequences are consumed; ratings and MOS are never read.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .dataset import CorpusError
from .model import Encoder, ParamSet, pad_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DaptConfig:
    mask_ratio: float = 0.15
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio {self.mask_ratio} outside [0, 1]")


class ReconstructionHead(ParamSet):
    """Throwaway pieces of the pre-training task: linear decoder and learned mask vector."""

    def __init__(self, hidden, feature_dim, rng):
        super().__init__()
        self.add("dapt.recon.W", nn.uniform_init(rng, (hidden, feature_dim), hidden))
        self.add("dapt.recon.b", np.zeros(feature_dim, dtype=nn.DTYPE))
        self.add("dapt.mask_vector", np.zeros(feature_dim, dtype=nn.DTYPE))


def mask_frames(features, mask_ratio, rng, mask_vector=None):
    """Replace each frame by ``mask_vector`` with probability ``mask_ratio``.

    Returns the masked copy and the sorted indices of masked frames.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside [0, 1]")
    x = np.array(features, copy=True)
    hit = rng.random(x.shape[0]) < mask_ratio
    idx = np.flatnonzero(hit)
    x[idx] = 0.0 if mask_vector is None else mask_vector
    return x, idx


def _masked_batch(seqs, mask_ratio, rng, mask_vector):
    masked, sets = [], []
    for s in seqs:
        m, idx = mask_frames(s, mask_ratio, rng, mask_vector)
        masked.append(m)
        sets.append(idx)
    x_orig, valid = pad_batch(seqs)
    x_mask, _ = pad_batch(masked)
    sel = np.zeros(valid.shape, dtype=bool)
    for b, idx in enumerate(sets):
        sel[b, idx] = True
    return x_orig, x_mask, valid, sel


def dapt_step_loss(encoder: Encoder, head: ReconstructionHead, original, masked, mask_set,
                   valid=None, backward=False) -> float:
    """MSE between reconstructed and original frames at masked positions only.

    Accepts a single T x D sequence with an index array, or padded batches with
    a boolean ``mask_set[B, T]``. With ``backward`` gradients are accumulated
    into the encoder and the head, including the mask vector.
    """
    if np.ndim(original) == 2:
        sel = np.zeros((1, original.shape[0]), dtype=bool)
        sel[0, np.asarray(mask_set, dtype=int)] = True
        return dapt_step_loss(encoder, head, original[None], masked[None], sel,
                              None if valid is None else valid[None], backward)
    if valid is None:
        valid = np.ones(original.shape[:2], dtype=nn.DTYPE)
    sel = np.asarray(mask_set, dtype=bool) & (valid > 0)
    n_masked = int(sel.sum())
    if n_masked == 0:
        warnings.warn("empty mask set: reconstruction loss is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    H, c_enc = encoder.forward(masked, valid)
    recon, c_lin = nn.linear_forward(H, head["dapt.recon.W"], head["dapt.recon.b"])
    diff = (recon - original).astype(np.float64) * sel[..., None]
    D = original.shape[-1]
    loss = float(np.sum(diff * diff) / (n_masked * D))
    if backward:
        drecon = (2 * diff / (n_masked * D)).astype(recon.dtype)
        dH, dW, db = nn.linear_backward(drecon, c_lin)
        head.grad("dapt.recon.W")[...] += dW
        head.grad("dapt.recon.b")[...] += db
        dx = encoder.backward(dH, c_enc)
        head.grad("dapt.mask_vector")[...] += np.sum(dx[sel], axis=0, dtype=np.float64).astype(nn.DTYPE)
    return loss


def _collect_features(corpora):
    seqs = []
    dims = set()
    for corpus in corpora:
        for record in corpus.utterances:
            f = corpus.features_of(record.utterance_id)
            dims.add(f.shape[1])
            seqs.append(f)
    if len(dims) > 1:
        raise CorpusError(f"DAPT corpora disagree on feature_dim: {sorted(dims)}")
    return seqs


def run_dapt(encoder: Encoder, corpora, config: DaptConfig, history=None) -> Encoder:
    """Pre-train a copy of ``encoder`` on the union of ``corpora``; the head is discarded.

    When ``history`` is a list, the mean loss of every step is appended to it.
    """
    import copy

    encoder = copy.deepcopy(encoder)
    seqs = _collect_features(list(corpora))
    if seqs and seqs[0].shape[1] != encoder.feature_dim:
        raise CorpusError(f"features have dim {seqs[0].shape[1]}, encoder expects {encoder.feature_dim}")
    if config.epochs == 0 or not seqs:
        return encoder
    rng = np.random.default_rng(config.seed)
    head = ReconstructionHead(encoder.hidden, encoder.feature_dim, np.random.default_rng([config.seed, 1]))
    opt = nn.Adam(encoder.parameters() + head.parameters())
    steps_per_epoch = int(np.ceil(len(seqs) / config.batch_size))
    for epoch in range(config.epochs):
        order = rng.permutation(len(seqs))
        total = 0.0
        for k in range(steps_per_epoch):
            batch = [seqs[i] for i in order[k * config.batch_size:(k + 1) * config.batch_size]]
            x_orig, x_mask, valid, sel = _masked_batch(batch, config.mask_ratio, rng, head["dapt.mask_vector"])
            encoder.zero_grad()
            head.zero_grad()
            if not sel.any():
                continue
            loss = dapt_step_loss(encoder, head, x_orig, x_mask, sel, valid, backward=True)
            opt.step(config.lr)
            total += loss
            if history is not None:
                history.append(loss)
        log.debug("dapt epoch %d mean loss %.4f", epoch, total / steps_per_epoch)
    return encoder
