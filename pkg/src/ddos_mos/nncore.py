"""Dense layers with hand-written backward passes, Adam, LR schedule, checkpoints.

Every layer is a pair of functions: ``*_forward`` returns ``(out, cache)`` and
``*_backward`` maps the upstream gradient and cache to input/parameter
gradients. Sequence layers work on padded batches ``x[B, T, D]`` with a
``mask[B, T]`` marking valid frames.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    def zero_grad(self):
        self.grad[...] = 0


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=None) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype or DTYPE)


def _sum64(a, axis=None):
    # reductions accumulate in float64, result cast back to the operand dtype
    return np.sum(a, axis=axis, dtype=np.float64).astype(a.dtype)


# ----------------------------------------------------------------- layers

def linear_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def linear_backward(dout, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = (x2.astype(np.float64).T @ d2.astype(np.float64)).astype(W.dtype)
    db = _sum64(d2, axis=0)
    dx = dout @ W.T
    return dx, dW, db


class _GateReplay:
    """ReLU gate patterns captured on one forward pass and replayed on later ones."""

    def __init__(self):
        self.masks = []
        self.recording = True
        self.cursor = 0

    def gate(self, x):
        if self.recording:
            m = x > 0
            self.masks.append(m)
            return m
        m = self.masks[self.cursor]
        self.cursor += 1
        if m.shape != x.shape:
            raise ShapeError("forward pass topology changed while gates were frozen")
        return m

    def rewind(self):
        self.recording = False
        self.cursor = 0


_gates: _GateReplay | None = None


@contextmanager
def frozen_gates():
    """Freeze ReLU activation patterns at those of the first forward pass in the block.

    Later passes evaluate the piecewise-linear network on the same linear
    region, which is what a finite-difference check should probe.
    """
    global _gates
    prev, _gates = _gates, _GateReplay()
    try:
        yield _gates
    finally:
        _gates = prev


def relu_forward(x):
    m = x > 0 if _gates is None else _gates.gate(x)
    return x * m, m


def relu_backward(dout, cache):
    return dout * cache


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dout, y):
    return dout * (1 - y * y)


def conv1d_forward(x, W, b, mask=None):
    """Same-padded 1-D convolution over time.

    x: [B, T, Din], W: [k, Din, Dout] with odd k, b: [Dout]. Padding frames are
    zero, so with ``mask`` set each sequence sees exactly its own zero padding.
    """
    if x.ndim == 2:
        out, cache = conv1d_forward(x[None], W, b, None if mask is None else mask[None])
        return out[0], ("unbatched", cache)
    k, din, dout_ = W.shape
    if k % 2 != 1 or x.shape[-1] != din or b.shape != (dout_,):
        raise ShapeError(f"conv1d: x {x.shape}, W {W.shape}, b {b.shape}")
    B, T, _ = x.shape
    if mask is not None:
        x = x * mask[..., None]
    pad = k // 2
    xp = np.zeros((B, T + 2 * pad, din), dtype=x.dtype)
    xp[:, pad:pad + T] = x
    cols = np.concatenate([xp[:, j:j + T] for j in range(k)], axis=-1)  # [B, T, k*Din]
    out = cols @ W.reshape(k * din, dout_) + b
    return out, (cols, W, mask, T)


def conv1d_backward(dout, cache):
    if isinstance(cache[0], str):
        dx, dW, db = conv1d_backward(dout[None], cache[1])
        return dx[0], dW, db
    cols, W, mask, T = cache
    k, din, dout_ = W.shape
    pad = k // 2
    c2 = cols.reshape(-1, k * din).astype(np.float64)
    d2 = dout.reshape(-1, dout_)
    dW = (c2.T @ d2.astype(np.float64)).astype(W.dtype).reshape(W.shape)
    db = _sum64(d2, axis=0)
    dcols = dout @ W.reshape(k * din, dout_).T
    B = dout.shape[0]
    dxp = np.zeros((B, T + 2 * pad, din), dtype=dout.dtype)
    for j in range(k):
        dxp[:, j:j + T] += dcols[..., j * din:(j + 1) * din]
    dx = dxp[:, pad:pad + T]
    if mask is not None:
        dx = dx * mask[..., None]
    return dx, dW, db


def softmax_forward(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)
    return p, (p, axis)


def softmax_backward(dout, cache):
    p, axis = cache
    inner = np.sum(dout * p, axis=axis, keepdims=True, dtype=np.float64).astype(p.dtype)
    return p * (dout - inner)


def embedding_forward(table, ids):
    ids = np.asarray(ids)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ShapeError(f"embedding ids out of range 0..{table.shape[0] - 1}")
    return table[ids], (ids, table.shape)


def embedding_backward(dout, cache):
    ids, shape = cache
    dtable = np.zeros(shape, dtype=np.float64)
    np.add.at(dtable, ids, dout)
    return dtable.astype(dout.dtype)


def attentive_pool_forward(H, V, c, u, mask=None):
    """Single-query attentive pooling.

    Frame scores are ``u . tanh(V^T h_t + c)``; the output is the
    softmax(score)-weighted sum of frames. H: [B, T, d], V: [d, a], c: [a], u: [a].
    """
    if H.ndim == 2:
        out, cache = attentive_pool_forward(H[None], V, c, u, None if mask is None else mask[None])
        return out[0], ("unbatched", cache)
    if H.shape[1] < 1 or V.shape[0] != H.shape[-1] or c.shape != (V.shape[1],) or u.shape != c.shape:
        raise ShapeError(f"attentive_pool: H {H.shape}, V {V.shape}, c {c.shape}, u {u.shape}")
    Z = np.tanh(H @ V + c)                      # [B, T, a]
    scores = Z @ u                              # [B, T]
    if mask is not None:
        scores = np.where(mask > 0, scores, -np.inf)
    alpha, sm_cache = softmax_forward(scores, axis=1)
    out = np.einsum("bt,btd->bd", alpha, H)
    return out, (H, V, u, Z, alpha, sm_cache)


def attentive_pool_backward(dout, cache):
    if isinstance(cache[0], str):
        dH, dV, dc, du = attentive_pool_backward(dout[None], cache[1])
        return dH[0], dV, dc, du
    H, V, u, Z, alpha, sm_cache = cache
    dH = alpha[..., None] * dout[:, None, :]
    dalpha = np.einsum("bd,btd->bt", dout, H)
    dscores = softmax_backward(dalpha, sm_cache)
    du = _sum64(Z * dscores[..., None], axis=(0, 1))
    dpre = dscores[..., None] * u * (1 - Z * Z)   # [B, T, a]
    dc = _sum64(dpre, axis=(0, 1))
    a = V.shape[1]
    dV = (H.reshape(-1, H.shape[-1]).astype(np.float64).T
          @ dpre.reshape(-1, a).astype(np.float64)).astype(V.dtype)
    dH = dH + dpre @ V.T
    return dH, dV, dc, du


# --------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``peak_lr`` then linear decay to zero at ``total_steps``."""

    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside 0..{schedule.total_steps}")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * (step / schedule.warmup_steps)
    return schedule.peak_lr * ((schedule.total_steps - step) / (schedule.total_steps - schedule.warmup_steps))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in self.params}
        self.v = {p.name: np.zeros(p.value.shape, dtype=np.float64) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            g = p.grad.astype(np.float64)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update.astype(p.value.dtype)


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


# -------------------------------------------------------------- grad check

def grad_check(loss_fn, params, eps: float = 1e-3, max_coords: int = 10_000,
               seed: int = 0, floor_ratio: float = 1e-2, freeze_relu: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return the scalar loss and leave analytic gradients in
    each ``Parameter.grad``. The error of coordinate i is
    ``|a_i - n_i| / max(|a_i|, |n_i|, floor)`` where ``floor`` is
    ``floor_ratio`` times the largest analytic gradient magnitude, so that
    coordinates with near-zero gradient are judged on an absolute scale.
    When the parameters hold more than ``max_coords`` coordinates a seeded
    random subsample is checked. With ``freeze_relu`` the perturbed passes
    reuse the ReLU gates of the unperturbed one, so a perturbation that
    crosses a kink does not masquerade as a gradient error.
    """
    if freeze_relu:
        with frozen_gates() as gates:
            return _grad_check(loss_fn, list(params), eps, max_coords, seed, floor_ratio, gates)
    return _grad_check(loss_fn, list(params), eps, max_coords, seed, floor_ratio, None)


def _grad_check(loss_fn, params, eps, max_coords, seed, floor_ratio, gates):
    def evaluate():
        if gates is not None and not gates.recording:
            gates.rewind()
        return float(loss_fn())

    evaluate()
    if gates is not None:
        gates.rewind()
    analytic = [p.grad.astype(np.float64).copy() for p in params]
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.value.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]
    a_vals = np.empty(len(coords))
    n_vals = np.empty(len(coords))
    for k, (pi, j) in enumerate(coords):
        flat = params[pi].value.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = evaluate()
        flat[j] = orig - eps
        down = evaluate()
        flat[j] = orig
        # actual perturbation after rounding to the parameter dtype
        h = float(np.asarray(orig + eps, flat.dtype)) - float(np.asarray(orig - eps, flat.dtype))
        n_vals[k] = (up - down) / h
        a_vals[k] = analytic[pi].reshape(-1)[j]
    evaluate()  # restore grads for the unperturbed point
    if len(coords) == 0:
        return 0.0
    scale = max(np.max(np.abs(a_vals)), np.max(np.abs(n_vals)))
    floor = max(floor_ratio * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(a_vals), np.abs(n_vals)), floor)
    return float(np.max(np.abs(a_vals - n_vals) / denom))


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DDCK"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    """Write named float32 tensors in insertion order.

    Layout: b"DDCK", u32 version, then per record: u32 name length, UTF-8
    name, u32 ndim, ndim x u32 dims, prod(dims) little-endian float32.
    All integers are little-endian.
    """
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a DDCK checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            if pos + 4 * count > len(blob):
                raise ValueError("truncated payload")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            if name in out:
                raise ValueError(f"duplicate record {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint ({exc})") from None
    return out
