"""Dual-head MOS predictor with judge-id conditioning, and its stage-2 trainer."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .dataset import N_BINS, Corpus, CorpusError, empirical_distribution

log = logging.getLogger(__name__)

BINS = np.arange(1, N_BINS + 1, dtype=np.float64)
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    judge_count: int
    hidden: int = 32
    kernel_size: int = 3
    use_reg_head: bool = True
    use_dist_head: bool = True
    linear_heads: bool = False

    def __post_init__(self):
        if not (self.use_reg_head or self.use_dist_head):
            raise ValueError("at least one prediction head must be enabled")


@dataclass(frozen=True)
class PredictionOut:
    r: float | None
    p: np.ndarray | None
    s_hat: float


@dataclass(frozen=True)
class BatchItem:
    features: np.ndarray
    judge_id: int
    target_score: float
    target_dist: np.ndarray


def pad_batch(seqs):
    """Stack variable-length T x D sequences into ``x[B, Tmax, D]`` plus a frame mask."""
    T = max(s.shape[0] for s in seqs)
    D = seqs[0].shape[1]
    x = np.zeros((len(seqs), T, D), dtype=nn.DTYPE)
    mask = np.zeros((len(seqs), T), dtype=nn.DTYPE)
    for i, s in enumerate(seqs):
        if s.shape[1] != D:
            raise nn.ShapeError(f"feature dim {s.shape[1]} != {D}")
        x[i, :s.shape[0]] = s
        mask[i, :s.shape[0]] = 1
    return x, mask


class ParamSet:
    """Ordered collection of named parameters."""

    def __init__(self):
        self.params: dict[str, nn.Parameter] = {}

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self.params[name] = nn.Parameter(name, value)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name].value

    def grad(self, name):
        return self.params[name].grad

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self):
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state, strict=True):
        if strict:
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            if missing or extra:
                raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            if name not in state:
                continue
            v = np.asarray(state[name])
            if v.shape != p.value.shape:
                raise ValueError(f"{name}: checkpoint shape {v.shape} != model shape {p.value.shape}")
            p.value[...] = v


class Encoder(ParamSet):
    """Two same-padded conv1d + ReLU layers mapping D -> hidden -> hidden."""

    def __init__(self, feature_dim, hidden=32, kernel_size=3, rng=None, prefix="encoder."):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.prefix = prefix
        self.feature_dim, self.hidden, self.kernel_size = feature_dim, hidden, kernel_size
        k = kernel_size
        for i, (din, dout) in enumerate([(feature_dim, hidden), (hidden, hidden)], start=1):
            self.add(f"{prefix}conv{i}.W", nn.uniform_init(rng, (k, din, dout), k * din))
            self.add(f"{prefix}conv{i}.b", nn.uniform_init(rng, (dout,), k * din))

    def forward(self, x, mask):
        caches = []
        h = x
        for i in (1, 2):
            h, c_conv = nn.conv1d_forward(h, self[f"{self.prefix}conv{i}.W"], self[f"{self.prefix}conv{i}.b"], mask)
            h, c_relu = nn.relu_forward(h)
            h = h * mask[..., None]
            caches.append((c_conv, c_relu))
        return h, (caches, mask)

    def backward(self, dh, cache):
        caches, mask = cache
        for i in (2, 1):
            c_conv, c_relu = caches[i - 1]
            dh = nn.relu_backward(dh * mask[..., None], c_relu)
            dh, dW, db = nn.conv1d_backward(dh, c_conv)
            self.grad(f"{self.prefix}conv{i}.W")[...] += dW
            self.grad(f"{self.prefix}conv{i}.b")[...] += db
        return dh


class Head:
    """Attentive pooling followed by an MLP (or a single linear map)."""

    def __init__(self, owner: ParamSet, prefix, hidden, out_dim, linear, rng, out_bias=0.0):
        self.owner, self.prefix, self.linear = owner, prefix, linear
        owner.add(f"{prefix}pool.V", nn.uniform_init(rng, (hidden, hidden), hidden))
        owner.add(f"{prefix}pool.c", np.zeros(hidden, dtype=nn.DTYPE))
        owner.add(f"{prefix}pool.u", nn.uniform_init(rng, (hidden,), hidden))
        dims = [(hidden, out_dim)] if linear else [(hidden, hidden), (hidden, hidden), (hidden, out_dim)]
        self.n_layers = len(dims)
        for i, (din, dout) in enumerate(dims):
            owner.add(f"{prefix}mlp.{i}.W", nn.uniform_init(rng, (din, dout), din))
            b = nn.uniform_init(rng, (dout,), din) if i < len(dims) - 1 else np.full(dout, out_bias, dtype=nn.DTYPE)
            owner.add(f"{prefix}mlp.{i}.b", b)

    def forward(self, H, mask):
        o = self.owner
        pooled, c_pool = nn.attentive_pool_forward(
            H, o[f"{self.prefix}pool.V"], o[f"{self.prefix}pool.c"], o[f"{self.prefix}pool.u"], mask)
        h = pooled
        caches = []
        for i in range(self.n_layers):
            W, b = o[f"{self.prefix}mlp.{i}.W"], o[f"{self.prefix}mlp.{i}.b"]
            if i == self.n_layers - 1:
                # head outputs are kept at 64-bit accumulation precision
                h, W, b = h.astype(np.float64), W.astype(np.float64), b.astype(np.float64)
            h, c_lin = nn.linear_forward(h, W, b)
            c_relu = None
            if i < self.n_layers - 1:
                h, c_relu = nn.relu_forward(h)
            caches.append((c_lin, c_relu))
        return h, (c_pool, caches)

    def backward(self, dout, cache):
        o = self.owner
        c_pool, caches = cache
        d = dout
        for i in reversed(range(self.n_layers)):
            c_lin, c_relu = caches[i]
            if c_relu is not None:
                d = nn.relu_backward(d, c_relu)
            d, dW, db = nn.linear_backward(d, c_lin)
            o.grad(f"{self.prefix}mlp.{i}.W")[...] += dW
            o.grad(f"{self.prefix}mlp.{i}.b")[...] += db
            d = d.astype(o[f"{self.prefix}mlp.{i}.W"].dtype)
        dH, dV, dc, du = nn.attentive_pool_backward(d, c_pool)
        o.grad(f"{self.prefix}pool.V")[...] += dV
        o.grad(f"{self.prefix}pool.c")[...] += dc
        o.grad(f"{self.prefix}pool.u")[...] += du
        return dH


class DdosModel(ParamSet):
    """Encoder, judge embedding table (row 0 = the MOS judge) and two heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(config.feature_dim, config.hidden, config.kernel_size, rng)
        self.params.update(self.encoder.params)
        self.add("judge_table", nn.uniform_init(rng, (config.judge_count + 1, config.hidden), config.hidden))
        self.reg_head = self.dist_head = None
        if config.use_reg_head:
            self.reg_head = Head(self, "reg.", config.hidden, 1, config.linear_heads, rng, out_bias=3.0)
        if config.use_dist_head:
            self.dist_head = Head(self, "dist.", config.hidden, N_BINS, config.linear_heads, rng)

    def copy(self) -> "DdosModel":
        return copy.deepcopy(self)

    def load_encoder(self, state):
        enc = {k: v for k, v in state.items() if k.startswith("encoder.")}
        self.encoder.load_state_dict(enc)

    def forward_batch(self, x, mask, judge_ids):
        """Returns (r[B] or None, p[B, 5] or None, cache)."""
        judge_ids = np.asarray(judge_ids)
        if np.any(judge_ids < 0) or np.any(judge_ids > self.config.judge_count):
            raise ValueError(f"judge_id outside 0..{self.config.judge_count}")
        H, c_enc = self.encoder.forward(x, mask)
        emb, c_emb = nn.embedding_forward(self["judge_table"], judge_ids)
        Hj = H + emb[:, None, :]
        r = p = c_reg = c_dist = c_sm = None
        if self.reg_head is not None:
            out, c_reg = self.reg_head.forward(Hj, mask)
            r = out[:, 0]
        if self.dist_head is not None:
            logits, c_dist = self.dist_head.forward(Hj, mask)
            p, c_sm = nn.softmax_forward(logits, axis=-1)
        return r, p, (c_enc, c_emb, mask, c_reg, c_dist, c_sm)

    def backward(self, cache, dr=None, dp=None):
        c_enc, c_emb, mask, c_reg, c_dist, c_sm = cache
        dHj = 0
        if self.reg_head is not None and dr is not None:
            dHj = dHj + self.reg_head.backward(dr[:, None], c_reg)
        if self.dist_head is not None and dp is not None:
            dlogits = nn.softmax_backward(dp, c_sm)
            dHj = dHj + self.dist_head.backward(dlogits, c_dist)
        if isinstance(dHj, int):
            return
        dHj = dHj * mask[..., None]
        self.grad("judge_table")[...] += nn.embedding_backward(
            np.sum(dHj, axis=1, dtype=np.float64).astype(dHj.dtype), c_emb)
        self.encoder.backward(dHj, c_enc)

    def forward(self, features, judge_id=0) -> PredictionOut:
        x, mask = pad_batch([np.asarray(features, dtype=nn.DTYPE)])
        r, p, _ = self.forward_batch(x, mask, [judge_id])
        return make_prediction(None if r is None else r[0], None if p is None else p[0])


def make_prediction(r, p) -> PredictionOut:
    r = None if r is None else float(r)
    if p is not None:
        p = np.asarray(p, dtype=np.float64)
    if r is not None and p is not None:
        s_hat = (r + expectation(p)) / 2
    elif r is not None:
        s_hat = r
    else:
        s_hat = expectation(p)
    return PredictionOut(r, p, s_hat)


def expectation(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_BINS,) or abs(p.sum() - 1.0) > 1e-4 or np.any(p < 0):
        raise ValueError(f"not a 5-bin distribution: {p}")
    return float(np.dot(BINS, p))


def regression_loss(r, target):
    """Squared error per item (mean over a batch) and its gradient w.r.t. r."""
    r = np.asarray(r, dtype=np.float64)
    diff = r - np.asarray(target, dtype=np.float64)
    return float(np.mean(diff * diff)), 2 * diff / diff.size


def distribution_loss(p, target):
    """Cross-entropy -sum t log p per item (mean over a batch) and its gradient w.r.t. p."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    clamped = np.maximum(p, LOG_FLOOR)
    losses = -np.sum(t * np.log(clamped), axis=1)
    grad = np.where(p >= LOG_FLOOR, -t / clamped, 0.0) / p.shape[0]
    return float(np.mean(losses)), grad


def batch_loss(model: DdosModel, items, loss_weight=0.5, backward=True) -> float:
    """Head-weighted loss over a batch; accumulates gradients when ``backward``.

    A disabled head drops out of the loss, leaving the other with weight 1.
    """
    x, mask = pad_batch([it.features for it in items])
    r, p, cache = model.forward_batch(x, mask, [it.judge_id for it in items])
    w_reg = loss_weight if p is not None else 1.0
    w_dist = (1 - loss_weight) if r is not None else 1.0
    total = 0.0
    dr = dp = None
    if r is not None:
        l_reg, g = regression_loss(r, [it.target_score for it in items])
        total += w_reg * l_reg
        dr = (w_reg * g).astype(r.dtype)
    if p is not None:
        l_dist, g = distribution_loss(p, np.stack([it.target_dist for it in items]))
        total += w_dist * l_dist
        dp = (w_dist * g).astype(p.dtype)
    if backward:
        model.backward(cache, dr, dp)
    return total


def one_hot(score: int) -> np.ndarray:
    t = np.zeros(N_BINS)
    t[score - 1] = 1.0
    return t


def mos_item(corpus: Corpus, utt) -> BatchItem:
    return BatchItem(corpus.features_of(utt.utterance_id), 0, utt.mos, empirical_distribution(utt.ratings))


def judge_item(corpus: Corpus, rating) -> BatchItem:
    return BatchItem(corpus.features_of(rating.utterance_id), rating.judge_id,
                     float(rating.score), one_hot(rating.score))


def build_batch(corpus: Corpus, batch_size: int, rng: np.random.Generator):
    """Sample utterances with replacement; each yields the MOS item or one judge's item with equal odds."""
    if len(corpus) == 0:
        raise CorpusError("cannot batch an empty corpus")
    items = []
    for _ in range(batch_size):
        utt = corpus.utterances[int(rng.integers(len(corpus)))]
        if rng.random() < 0.5:
            items.append(mos_item(corpus, utt))
        else:
            items.append(judge_item(corpus, utt.ratings[int(rng.integers(len(utt.ratings)))]))
    return items


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 16
    peak_lr: float = 2e-3
    warmup_steps: int = 50
    validation_every: int = 100
    loss_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.loss_weight <= 1:
            raise ValueError("loss_weight must lie in [0, 1]")
        if self.total_steps < 0 or self.batch_size < 1 or self.validation_every < 0:
            raise ValueError("total_steps, batch_size and validation_every must be non-negative")

    @property
    def schedule(self) -> nn.LrSchedule:
        warmup = min(max(self.warmup_steps, 1), max(self.total_steps - 1, 1))
        return nn.LrSchedule(self.peak_lr, warmup, max(self.total_steps, warmup + 1))


@dataclass(frozen=True)
class LogRow:
    step: int
    lr: float
    train_loss: float
    dev_loss: float | None


def dev_loss(model: DdosModel, corpus: Corpus, loss_weight=0.5, chunk=128) -> float:
    """Judge-0 loss averaged over every utterance of ``corpus``."""
    items = [mos_item(corpus, u) for u in corpus.utterances]
    total = 0.0
    for i in range(0, len(items), chunk):
        part = items[i:i + chunk]
        total += batch_loss(model, part, loss_weight, backward=False) * len(part)
    return total / len(items)


def train_stage2(model: DdosModel, train: Corpus, dev: Corpus | None, config: TrainConfig,
                 params=None):
    """Fine-tune ``model`` on ``train``; returns (best model, log rows).

    When ``dev`` is given the returned parameters are those with minimum dev
    loss among the initial point and every validation step; otherwise the
    final parameters are returned. ``params`` restricts which parameters move.
    """
    model = model.copy()
    rows = []
    if dev is not None:
        best_loss = dev_loss(model, dev, config.loss_weight)
        best_state = model.state_dict()
        rows.append(LogRow(0, 0.0, math.nan, best_loss))
    if config.total_steps == 0:
        return model, rows
    schedule = config.schedule
    trainable = params if params is not None else model.parameters()
    opt = nn.Adam(trainable)
    rng = np.random.default_rng(config.seed)
    for step in range(1, config.total_steps + 1):
        lr = nn.lr_at(schedule, step)
        model.zero_grad()
        loss = batch_loss(model, build_batch(train, config.batch_size, rng), config.loss_weight)
        if not math.isfinite(loss):
            raise nn.NonFiniteError(f"non-finite training loss at step {step}")
        opt.step(lr)
        dl = None
        if dev is not None and config.validation_every and (
                step % config.validation_every == 0 or step == config.total_steps):
            dl = dev_loss(model, dev, config.loss_weight)
            if dl < best_loss:
                best_loss, best_state = dl, model.state_dict()
            log.debug("step %d lr %.2e train %.4f dev %.4f", step, lr, loss, dl)
        rows.append(LogRow(step, lr, loss, dl))
    if dev is not None:
        model.load_state_dict(best_state)
    return model, rows


def predict_batch(model: DdosModel, seqs, judge_id=0, chunk=128) -> np.ndarray:
    """Combined score s_hat for each sequence."""
    out = []
    for i in range(0, len(seqs), chunk):
        part = seqs[i:i + chunk]
        x, mask = pad_batch(part)
        r, p, _ = model.forward_batch(x, mask, [judge_id] * len(part))
        r64 = None if r is None else r.astype(np.float64)
        e = None if p is None else p.astype(np.float64) @ BINS
        if r64 is not None and e is not None:
            out.append((r64 + e) / 2)
        else:
            out.append(r64 if r64 is not None else e)
    return np.concatenate(out) if out else np.zeros(0)


def predict_mos(model: DdosModel, features) -> float:
    return model.forward(features, 0).s_hat


def predict_corpus(model: DdosModel, corpus: Corpus) -> np.ndarray:
    return predict_batch(model, [corpus.features_of(u.utterance_id) for u in corpus.utterances])


# ----------------------------------------------------------------- checkpoints

def model_from_state(state: dict, seed: int = 0) -> DdosModel:
    """Rebuild a model whose architecture matches the tensors in ``state``."""
    W1 = state["encoder.conv1.W"]
    k, D, hidden = W1.shape
    N = state["judge_table"].shape[0] - 1
    use_reg = "reg.pool.V" in state
    use_dist = "dist.pool.V" in state
    head = "reg." if use_reg else "dist."
    linear = f"{head}mlp.1.W" not in state
    cfg = ModelConfig(D, N, hidden, k, use_reg, use_dist, linear)
    model = DdosModel(cfg, seed)
    model.load_state_dict({k_: v for k_, v in state.items() if k_ in model.params})
    return model


def save_model(path, model: DdosModel, extra: dict | None = None) -> None:
    tensors = model.state_dict()
    tensors.update(extra or {})
    nn.save_checkpoint(path, tensors)


def load_model(path):
    """Returns (model, remaining non-model tensors such as ``refine.a``)."""
    state = nn.load_checkpoint(path)
    model = model_from_state(state)
    extra = {k: v for k, v in state.items() if k not in model.params}
    return model, extra
