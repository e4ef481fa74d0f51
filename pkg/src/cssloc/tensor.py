"""Dense tensor kernels with a small reverse-mode tape.

Only the layer set used by the encoder and predictor is covered: 2-D
convolution, non-overlapping max-pooling, ReLU, fully connected layers,
softmax cross-entropy, L2 normalization and the InfoNCE loss.  Every kernel
works on a leading batch axis and preserves the input dtype, so the same code
trains in float32 and is gradient-checked in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the op contract."""


class DegenerateVectorError(ValueError):
    """A vector with (near) zero norm was passed where a direction is required."""


# ---------------------------------------------------------------------------
# Forward / backward kernels
# ---------------------------------------------------------------------------


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1) -> np.ndarray:
    """Cross-correlation of ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw), zero padded."""
    if x.ndim != 4 or w.ndim != 4 or b.shape != (w.shape[0],) or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x{x.shape}, w{w.shape}, b{b.shape}")
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, ho, wo, o), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.tensordot(patch, w[:, :, i, j], axes=([1], [1]))
    out += b
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of :func:`conv2d_forward` with respect to ``x``, ``w`` and ``b``."""
    _, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dw[:, :, i, j] = np.tensordot(dout, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
            dxp[sl] += np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    h, wd = x.shape[2:]
    return dxp[:, :, pad : pad + h, pad : pad + wd], dw, db


def maxpool2d_forward(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping ``k`` x ``k`` max pooling; trailing rows/cols are dropped.

    Returns the pooled tensor and the flat in-window argmax (first maximum in
    row-major order on ties), which the backward pass needs.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if k < 1 or h < k or w < k:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{w}")
    ho, wo = h // k, w // k
    win = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2d_backward(dout: np.ndarray, arg: np.ndarray, x_shape: Sequence[int], k: int) -> np.ndarray:
    n, c, h, w = x_shape
    ho, wo = dout.shape[2:]
    win = np.zeros((n, c, ho, wo, k * k), dtype=dout.dtype)
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    win = win.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    dx = np.zeros(tuple(x_shape), dtype=dout.dtype)
    dx[:, :, : ho * k, : wo * k] = win
    return dx


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``x`` (N, n) times ``w`` (m, n) transposed, plus ``b`` (m,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x{x.shape}, w{w.shape}, b{b.shape}")
    return x @ w.T + b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise unit-norm scaling; raises on rows with norm <= 1e-12."""
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm <= NORM_EPS):
        raise DegenerateVectorError("cannot normalize a zero-norm vector")
    return x / norm


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= NORM_EPS or nb <= NORM_EPS:
        raise DegenerateVectorError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def info_nce_logits(q: np.ndarray, pos: np.ndarray, negatives: np.ndarray | None, temperature: float) -> np.ndarray:
    """Logit matrix with the positive in column 0 followed by the negatives.

    With ``negatives=None`` the batch's own keys serve as negatives, so the
    logits are ``q @ pos.T`` and the positive sits on the diagonal.
    """
    if negatives is None:
        return (q @ pos.T) / temperature
    lpos = np.einsum("nd,nd->n", q, pos)[:, None]
    return np.concatenate([lpos, q @ negatives.T], axis=1) / temperature


def info_nce(q: np.ndarray, pos: np.ndarray, negatives: np.ndarray | None, temperature: float) -> float:
    """Mean InfoNCE loss over queries; the denominator holds the positive and all negatives."""
    logits = info_nce_logits(q, pos, negatives, temperature)
    target = np.arange(len(q)) if negatives is None else np.zeros(len(q), dtype=int)
    return float(-log_softmax(logits)[np.arange(len(q)), target].mean())


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Var:
    """A value on a :class:`Tape` together with its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var({self.name or ''}{self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Var
    inputs: tuple[Var, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class Tape:
    """Records differentiable ops; :meth:`backward` replays them in reverse.

    Only ops with at least one gradient-requiring input are recorded, so a
    forward pass over constants (e.g. a frozen or momentum encoder) costs no
    tape memory.
    """

    records: list[_Record] = field(default_factory=list)

    def param(self, value: np.ndarray, name: str | None = None) -> Var:
        return Var(value, requires_grad=True, name=name)

    def constant(self, value: np.ndarray) -> Var:
        return Var(value, requires_grad=False)

    def detach(self, v: Var) -> Var:
        return Var(v.value, requires_grad=False, name=v.name)

    def _record(self, value: np.ndarray, inputs: tuple[Var, ...], backward) -> Var:
        out = Var(value, requires_grad=any(i.requires_grad for i in inputs))
        if out.requires_grad:
            self.records.append(_Record(out, inputs, backward))
        return out

    def backward(self, loss: Var, grad: np.ndarray | None = None) -> None:
        loss.grad = np.ones_like(loss.value) if grad is None else grad
        for rec in reversed(self.records):
            if rec.out.grad is None:
                continue
            for v, g in zip(rec.inputs, rec.backward(rec.out.grad)):
                if g is None or not v.requires_grad:
                    continue
                v.grad = g if v.grad is None else v.grad + g

    # -- ops ---------------------------------------------------------------

    def conv2d(self, x: Var, w: Var, b: Var, stride: int = 1, pad: int = 1) -> Var:
        out = conv2d_forward(x.value, w.value, b.value, stride, pad)
        return self._record(out, (x, w, b), lambda g: conv2d_backward(g, x.value, w.value, stride, pad))

    def maxpool2d(self, x: Var, k: int) -> Var:
        out, arg = maxpool2d_forward(x.value, k)
        return self._record(out, (x,), lambda g: (maxpool2d_backward(g, arg, x.shape, k),))

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        return self._record(x.value * mask, (x,), lambda g: (g * mask,))

    def flatten(self, x: Var) -> Var:
        shape = x.shape
        return self._record(x.value.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))

    def linear(self, x: Var, w: Var, b: Var) -> Var:
        out = linear_forward(x.value, w.value, b.value)
        return self._record(out, (x, w, b), lambda g: (g @ w.value, g.T @ x.value, g.sum(axis=0)))

    def l2_normalize(self, x: Var) -> Var:
        norm = np.linalg.norm(x.value, axis=-1, keepdims=True)
        y = l2_normalize(x.value)

        def back(g):
            return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

        return self._record(y, (x,), back)

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean softmax cross-entropy; the gradient is ``(softmax - onehot) / N``."""
        n = logits.shape[0]
        logp = log_softmax(logits.value)
        loss = -logp[np.arange(n), labels].mean()

        def back(g):
            d = np.exp(logp)
            d[np.arange(n), labels] -= 1
            return (g * d / n,)

        return self._record(np.asarray(loss, dtype=logits.value.dtype), (logits,), back)

    def info_nce(self, q: Var, pos: Var, negatives: np.ndarray | None, temperature: float) -> Var:
        """Batch-mean InfoNCE; ``negatives`` is a constant key matrix or None (in-batch)."""
        logits = info_nce_logits(q.value, pos.value, negatives, temperature)
        n = len(q.value)
        target = np.arange(n) if negatives is None else np.zeros(n, dtype=int)
        logp = log_softmax(logits)
        loss = -logp[np.arange(n), target].mean()

        def back(g):
            d = np.exp(logp)
            d[np.arange(n), target] -= 1
            d *= g / (n * temperature)
            if negatives is None:
                return d @ pos.value, d.T @ q.value
            dq = d[:, :1] * pos.value + d[:, 1:] @ negatives
            return dq, d[:, :1] * q.value

        return self._record(np.asarray(loss, dtype=q.value.dtype), (q, pos), back)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """In-place Adam update with bias correction and decoupled weight decay.

    Weight decay shrinks each parameter by ``lr * weight_decay * param`` before
    the Adam delta is applied.  Parameters missing from ``grads`` only decay.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for name, p in params.items():
        if state.weight_decay:
            p -= (state.lr * state.weight_decay) * p
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def kaiming_uniform(rng: np.random.Generator, shape: Iterable[int], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(dtype)
