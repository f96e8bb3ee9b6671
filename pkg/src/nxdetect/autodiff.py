"""Minimal reverse-mode automatic differentiation on numpy arrays.

A Tape records each primitive operation as it executes; replaying the tape
backward accumulates gradients into every participating Tensor.  Ops take the
tape as their first argument; passing tape=None runs forward-only (inference).
All ops are batched: the leading axis is the sample axis.  Arrays keep the
dtype of their inputs, so the same graph runs in float32 for training and in
float64 for verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError


class ShapeMismatch(DataError):
    """Operand shapes are incompatible."""


class IndexOutOfRange(DataError):
    """An id or label falls outside its table."""


class PoolTooLarge(DataError):
    """Pool width exceeds the sequence length."""


class InvalidProbability(DataError):
    """A probability input falls outside [0, 1]."""


class EmptyClass(DataError):
    """A class has a non-positive sample count."""


# losses clamp probabilities away from 0 and 1 before taking logs
LOSS_CLAMP = 1e-7


class Tensor:
    """Array value plus the gradient accumulated for it during backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


class Tape:
    """Ordered record of executed primitives; backward replays it in reverse."""

    def __init__(self) -> None:
        self.records: list[tuple[str, Callable[[], None]]] = []

    def record(self, name: str, backward: Callable[[], None]) -> None:
        self.records.append((name, backward))


def tape_backward(tape: Tape, loss: Tensor) -> None:
    """Seed d(loss)/d(loss) = 1 and replay the tape in reverse."""
    if loss.data.ndim != 0:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for _name, backward in reversed(tape.records):
        backward()


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    # callers hand over freshly allocated arrays (or views of spent buffers),
    # so taking ownership on first write is safe
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad += grad


# ---------------------------------------------------------------------------
# lookup and linear ops
# ---------------------------------------------------------------------------

def embedding_forward(tape: Tape | None, table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table for each id; ids shape (n, length)."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-d, got {table.data.shape}")
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexOutOfRange(f"ids must lie in [0, {vocab})")
    out = Tensor(table.data[ids])
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            dim = table.data.shape[1]
            onehot = _onehot(ids.reshape(-1), vocab, table.data.dtype)
            _accumulate(table, onehot.T @ out.grad.reshape(-1, dim))
        tape.record("embedding", backward)
    return out


def _onehot(flat_ids: np.ndarray, vocab: int, dtype: np.dtype) -> np.ndarray:
    onehot = np.zeros((flat_ids.size, vocab), dtype=dtype)
    onehot[np.arange(flat_ids.size), flat_ids] = 1
    return onehot


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Zero-padded sliding windows: (n, length, channels) -> (n*length, k*channels)."""
    n, length, channels = x.shape
    left = k // 2
    out = np.zeros((n, length, k, channels), dtype=x.dtype)
    for j in range(k):
        # window tap j of output position i reads x[i + j - left]
        dst_lo = max(0, left - j)
        dst_hi = min(length, length + left - j)
        out[:, dst_lo:dst_hi, j, :] = x[:, dst_lo + j - left:dst_hi + j - left, :]
    return out.reshape(n * length, k * channels)


# A conv closure may keep its forward column matrix alive for the backward
# pass, but only below this size: the tape holds every closure at once, so
# large graphs (many wide convs) must rebuild instead of pinning gigabytes.
_COLS_CACHE_BYTES = 128 * 2**20


def conv1d_forward(tape: Tape | None, x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-d cross-correlation with zero padding, stride 1.

    x is (n, length, c_in), kernel is (k, c_in, c_out), bias is (c_out,).
    Output position i sums kernel taps j over x[i + j - k//2].
    """
    n, length, c_in = x.data.shape
    k, kc_in, c_out = kernel.data.shape
    if kc_in != c_in:
        raise ShapeMismatch(f"kernel expects {kc_in} input channels, x has {c_in}")
    if bias.data.shape != (c_out,):
        raise ShapeMismatch(f"bias shape {bias.data.shape} != ({c_out},)")
    cols = _im2col(x.data, k)
    flat_kernel = kernel.data.reshape(k * c_in, c_out)
    out = Tensor((cols @ flat_kernel + bias.data).reshape(n, length, c_out))
    if tape is not None:
        kept_cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None

        def backward() -> None:
            if out.grad is None:
                return
            dy = out.grad.reshape(n * length, c_out)
            cols_again = kept_cols if kept_cols is not None else _im2col(x.data, k)
            _accumulate(kernel, (cols_again.T @ dy).reshape(k, c_in, c_out))
            _accumulate(bias, dy.sum(axis=0))
            dcols = (dy @ flat_kernel.T).reshape(n, length, k, c_in)
            left = k // 2
            dpad = np.zeros((n, length + k - 1, c_in), dtype=x.data.dtype)
            for j in range(k):
                dpad[:, j:j + length, :] += dcols[:, :, j, :]
            _accumulate(x, dpad[:, left:left + length, :])
        tape.record("conv1d", backward)
    return out


def embedded_conv1d_forward(
    tape: Tape | None,
    table: Tensor,
    kernel: Tensor,
    bias: Tensor,
    ids: np.ndarray,
) -> Tensor:
    """conv1d_forward(embedding_forward(ids)) computed through a product table.

    Because the conv input is an embedding of a small discrete vocabulary, the
    per-tap products collapse into a (vocab, k, c_out) table and the conv
    becomes k gathers plus adds.  Same math as the unfused pair, far cheaper.
    """
    ids = np.asarray(ids)
    n, length = ids.shape
    vocab, c_in = table.data.shape
    k, kc_in, c_out = kernel.data.shape
    if kc_in != c_in:
        raise ShapeMismatch(f"kernel expects {kc_in} input channels, table has {c_in}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexOutOfRange(f"ids must lie in [0, {vocab})")
    products = np.einsum("vc,kco->vko", table.data, kernel.data)
    left = k // 2
    out_data = np.empty((n, length, c_out), dtype=table.data.dtype)
    out_data[:] = bias.data
    spans = []
    for j in range(k):
        # output position i reads source position i + j - left
        dst_lo = max(0, left - j)
        dst_hi = min(length, length + left - j)
        src_lo = dst_lo + j - left
        src_hi = dst_hi + j - left
        spans.append((j, dst_lo, dst_hi, src_lo, src_hi))
        out_data[:, dst_lo:dst_hi, :] += products[ids[:, src_lo:src_hi], j, :]
    out = Tensor(out_data)
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            dproducts = np.zeros_like(products)
            onehot = _onehot(ids.reshape(-1), vocab, table.data.dtype).reshape(n, length, vocab)
            for j, dst_lo, dst_hi, src_lo, src_hi in spans:
                hot = onehot[:, src_lo:src_hi, :].reshape(-1, vocab)
                dy = out.grad[:, dst_lo:dst_hi, :].reshape(-1, c_out)
                dproducts[:, j, :] += hot.T @ dy
            _accumulate(kernel, np.einsum("vc,vko->kco", table.data, dproducts))
            _accumulate(table, np.einsum("kco,vko->vc", kernel.data, dproducts))
            _accumulate(bias, out.grad.sum(axis=(0, 1)))
        tape.record("embedded_conv1d", backward)
    return out


def dense_forward(tape: Tape | None, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map: (n, d) @ (d, m) + (m,)."""
    if x.data.ndim != 2 or x.data.shape[1] != weights.data.shape[0]:
        raise ShapeMismatch(
            f"dense input {x.data.shape} incompatible with weights {weights.data.shape}"
        )
    out = Tensor(x.data @ weights.data + bias.data)
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            _accumulate(weights, x.data.T @ out.grad)
            _accumulate(bias, out.grad.sum(axis=0))
            _accumulate(x, out.grad @ weights.data.T)
        tape.record("dense", backward)
    return out


# ---------------------------------------------------------------------------
# pointwise and structural ops
# ---------------------------------------------------------------------------

def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        mask = x.data > 0
        def backward() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad * mask)
        tape.record("relu", backward)
    return out


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors (residual merge)."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add shapes differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            _accumulate(a, out.grad.copy())
            _accumulate(b, out.grad.copy())
        tape.record("add", backward)
    return out


def max_pool1d(tape: Tape | None, x: Tensor, pool: int) -> Tensor:
    """Non-overlapping max pooling along the length axis.

    Windows tile from the sequence end, so when the length is not a multiple
    of the pool width the *leading* remainder is dropped.  Inputs here are
    left-padded, which keeps the discarded positions on the padding side.
    """
    n, length, channels = x.data.shape
    if pool < 1 or pool > length:
        raise PoolTooLarge(f"pool width {pool} invalid for length {length}")
    pooled_len = length // pool
    offset = length - pooled_len * pool
    trimmed = x.data[:, offset:, :].reshape(n, pooled_len, pool, channels)
    out = Tensor(trimmed.max(axis=2))
    if tape is not None:
        # ties route to the first maximal element per window
        winners = trimmed.argmax(axis=2)
        def backward() -> None:
            if out.grad is None:
                return
            dx = np.zeros_like(x.data)
            dwin = dx[:, offset:, :].reshape(n, pooled_len, pool, channels)
            np.put_along_axis(dwin, winners[:, :, None, :], out.grad[:, :, None, :], axis=2)
            _accumulate(x, dx)
        tape.record("max_pool1d", backward)
    return out


def flatten(tape: Tape | None, x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis, position-major."""
    n = x.data.shape[0]
    out = Tensor(x.data.reshape(n, -1))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad.reshape(x.data.shape))
        tape.record("flatten", backward)
    return out


def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    data = x.data
    out_data = np.empty_like(data)
    pos = data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-data[pos]))
    ex = np.exp(data[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            _accumulate(x, out.grad * out.data * (1.0 - out.data))
        tape.record("sigmoid", backward)
    return out


def softmax(tape: Tape | None, x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    out = Tensor(ex / ex.sum(axis=-1, keepdims=True))
    if tape is not None:
        def backward() -> None:
            if out.grad is None:
                return
            inner = (out.grad * out.data).sum(axis=-1, keepdims=True)
            _accumulate(x, out.data * (out.grad - inner))
        tape.record("softmax", backward)
    return out


# ---------------------------------------------------------------------------
# losses and class weighting
# ---------------------------------------------------------------------------

def bce_loss(tape: Tape | None, probs: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy over same-shape probs and 0/1 targets."""
    targets = np.asarray(targets, dtype=probs.data.dtype)
    if probs.data.shape != targets.shape:
        raise ShapeMismatch(f"probs {probs.data.shape} vs targets {targets.shape}")
    if probs.data.size and (probs.data.min() < 0 or probs.data.max() > 1):
        raise InvalidProbability("probabilities must lie in [0, 1]")
    clamped = np.clip(probs.data, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    n = probs.data.size
    out = Tensor(np.asarray(
        -(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped)).mean(),
        dtype=probs.data.dtype,
    ))
    if tape is not None:
        inside = (probs.data > LOSS_CLAMP) & (probs.data < 1.0 - LOSS_CLAMP)
        def backward() -> None:
            if out.grad is None:
                return
            dp = (clamped - targets) / (clamped * (1.0 - clamped) * n)
            _accumulate(probs, out.grad * dp * inside)
        tape.record("bce_loss", backward)
    return out


def cce_loss(
    tape: Tape | None,
    probs: Tensor,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
) -> Tensor:
    """Mean class-weighted categorical cross entropy.

    probs is (n, k) rows of class probabilities, labels is (n,) ints, weights
    is (k,) per-class cost multipliers (None means all ones).
    """
    labels = np.asarray(labels)
    n, k = probs.data.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexOutOfRange(f"labels must lie in [0, {k})")
    if probs.data.size and (probs.data.min() < 0 or probs.data.max() > 1):
        raise InvalidProbability("probabilities must lie in [0, 1]")
    if weights is None:
        sample_weights = np.ones(n, dtype=probs.data.dtype)
    else:
        weights = np.asarray(weights, dtype=probs.data.dtype)
        if weights.shape != (k,):
            raise ShapeMismatch(f"weights shape {weights.shape} != ({k},)")
        sample_weights = weights[labels]
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clamped = np.clip(picked, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    out = Tensor(np.asarray(
        -(sample_weights * np.log(clamped)).mean(), dtype=probs.data.dtype
    ))
    if tape is not None:
        inside = (picked > LOSS_CLAMP) & (picked < 1.0 - LOSS_CLAMP)
        def backward() -> None:
            if out.grad is None:
                return
            dprobs = np.zeros_like(probs.data)
            dprobs[rows, labels] = -out.grad * sample_weights * inside / (clamped * n)
            _accumulate(probs, dprobs)
        tape.record("cce_loss", backward)
    return out


def class_weights(counts: np.ndarray | list[int], gamma: float) -> np.ndarray:
    """Per-class cost multipliers (total / count_i) ** gamma as float64."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise EmptyClass("every class needs a positive sample count")
    if gamma < 0:
        raise DataError(f"gamma must be non-negative, got {gamma}")
    return (counts.sum() / counts) ** gamma


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment estimates and the shared step counter."""

    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_init(params: list[Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    state: AdamState,
    params: list[Tensor],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; missing grads count as zero."""
    if len(state.m) != len(params):
        raise ShapeMismatch("optimizer state does not match the parameter list")
    state.step += 1
    t = state.step
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
