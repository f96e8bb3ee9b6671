"""Character-level residual convolution models over encoded domain names.

Two architectures share one graph builder: a binary detector (one residual
block, sigmoid head) and a multiclass family attributor (eleven residual
blocks with progressive pooling, softmax head).  Training runs mini-batch
Adam with a holdout-loss early stop; inference has a fast path that skips
recomputing the constant left-padding prefix shared by every short domain.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec
from .errors import DataError


class EmptyDataset(DataError):
    """No samples to train or evaluate on."""


class LabelOutOfRange(DataError):
    """A label falls outside the declared class count."""


class UnsupportedVersion(DataError):
    """Model file declares a format version this code cannot read."""


class CorruptFile(DataError):
    """Model file is truncated, malformed, or internally inconsistent."""


MODEL_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# architecture specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockSpec:
    """One residual block: y = conv2(relu(conv1(x))) + P(x).

    projection enables a width-1 conv on the skip path (needed exactly when
    the channel count changes).  relu_after / pool_after describe what happens
    to the block output; pooling only fires while the sequence is longer
    than one position.
    """

    kernel: int
    filters: int
    projection: bool = False
    relu_after: bool = True
    pool_after: int = 0


@dataclass(frozen=True)
class ModelSpec:
    kind: str  # "binary" or "multiclass"
    num_classes: int
    blocks: tuple[BlockSpec, ...]
    vocab_size: int = codec.VOCAB_SIZE
    embed_dim: int = 128
    input_length: int = codec.MAX_DOMAIN_LENGTH


def binary_spec() -> ModelSpec:
    """Single residual block (k=4, 128 filters), relu, pool 4, sigmoid head."""
    spec = ModelSpec(
        kind="binary",
        num_classes=1,
        blocks=(BlockSpec(kernel=4, filters=128, relu_after=True, pool_after=4),),
    )
    assert _pool_trajectory(spec) == (63,)
    return spec


# kernel widths of the eleven multiclass blocks, in order
_MULTICLASS_KERNELS = (4, 3, 2, 2, 2, 2, 2, 2, 2, 2, 2)


def multiclass_spec(num_classes: int) -> ModelSpec:
    """Eleven residual blocks at 256 filters; pooling halves length to 1."""
    if num_classes < 2:
        raise DataError(f"multiclass needs at least 2 classes, got {num_classes}")
    blocks = []
    for i, k in enumerate(_MULTICLASS_KERNELS):
        last = i == len(_MULTICLASS_KERNELS) - 1
        blocks.append(BlockSpec(
            kernel=k,
            filters=256,
            projection=(i == 0),  # channel count changes 128 -> 256 here only
            relu_after=not last,
            pool_after=0 if last else 2,
        ))
    spec = ModelSpec(kind="multiclass", num_classes=num_classes, blocks=tuple(blocks))
    assert _pool_trajectory(spec) == (126, 63, 31, 15, 7, 3, 1)
    return spec


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_params(
    spec: ModelSpec,
    seed_or_rng: int | np.random.Generator,
    dtype: type = np.float32,
) -> dict[str, ad.Tensor]:
    """Seeded parameter init in a fixed draw order.

    Embedding and dense weights are uniform(-0.05, 0.05); conv kernels are
    fan-in-scaled uniform(+-sqrt(1 / (k * c_in))); all biases start at zero.
    Draws happen in parameter insertion order, so one seed fixes every weight.
    """
    rng = np.random.default_rng(seed_or_rng)
    params: dict[str, ad.Tensor] = {}

    def uniform(shape, bound):
        return ad.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))

    params["embedding"] = uniform((spec.vocab_size, spec.embed_dim), 0.05)
    c_in = spec.embed_dim
    for i, blk in enumerate(spec.blocks):
        k, f = blk.kernel, blk.filters
        params[f"block{i}.conv1.kernel"] = uniform((k, c_in, f), (1.0 / (k * c_in)) ** 0.5)
        params[f"block{i}.conv1.bias"] = ad.Tensor(np.zeros(f, dtype=dtype))
        params[f"block{i}.conv2.kernel"] = uniform((k, f, f), (1.0 / (k * f)) ** 0.5)
        params[f"block{i}.conv2.bias"] = ad.Tensor(np.zeros(f, dtype=dtype))
        if blk.projection:
            params[f"block{i}.proj.kernel"] = uniform((1, c_in, f), (1.0 / c_in) ** 0.5)
            params[f"block{i}.proj.bias"] = ad.Tensor(np.zeros(f, dtype=dtype))
        c_in = f
    flat_width = _flat_width(spec)
    params["dense.weights"] = uniform((flat_width, spec.num_classes), 0.05)
    params["dense.bias"] = ad.Tensor(np.zeros(spec.num_classes, dtype=dtype))
    return params


def _pool_trajectory(spec: ModelSpec) -> tuple[int, ...]:
    """Sequence lengths after each pooling that actually fires."""
    length = spec.input_length
    out = []
    for blk in spec.blocks:
        if blk.pool_after and length > 1:
            length //= blk.pool_after
            out.append(length)
    return tuple(out)


def _flat_width(spec: ModelSpec) -> int:
    trajectory = _pool_trajectory(spec)
    length = trajectory[-1] if trajectory else spec.input_length
    return length * spec.blocks[-1].filters


def count_parameters(params: dict[str, ad.Tensor]) -> int:
    return sum(int(t.data.size) for t in params.values())


@dataclass
class Model:
    """Spec plus named weights plus the alphabet the ids were encoded with."""

    spec: ModelSpec
    params: dict[str, ad.Tensor]
    alphabet: str = codec.ALPHABET

    def predict(self, ids: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return predict_arrays(
            {k: t.data for k, t in self.params.items()}, self.spec, ids, batch_size
        )

    def predict_domains(self, domains: list[str], batch_size: int = 1024) -> np.ndarray:
        return self.predict(codec.encode_batch(domains), batch_size)


# ---------------------------------------------------------------------------
# forward graph
# ---------------------------------------------------------------------------

def forward(
    tape: ad.Tape | None,
    params: dict[str, ad.Tensor],
    spec: ModelSpec,
    ids: np.ndarray,
) -> ad.Tensor:
    """Run the full graph; returns (n, 1) sigmoid or (n, k) softmax output.

    The first conv of block 0 consumes the raw ids through the fused
    embedding-conv op (same math as conv1d over the embedded input).
    """
    table = params["embedding"]
    x = ad.embedding_forward(tape, table, ids)
    for i, blk in enumerate(spec.blocks):
        k1 = params[f"block{i}.conv1.kernel"]
        b1 = params[f"block{i}.conv1.bias"]
        if i == 0:
            h = ad.embedded_conv1d_forward(tape, table, k1, b1, ids)
        else:
            h = ad.conv1d_forward(tape, x, k1, b1)
        h = ad.relu(tape, h)
        h = ad.conv1d_forward(
            tape, h, params[f"block{i}.conv2.kernel"], params[f"block{i}.conv2.bias"]
        )
        if blk.projection:
            skip = ad.conv1d_forward(
                tape, x, params[f"block{i}.proj.kernel"], params[f"block{i}.proj.bias"]
            )
        else:
            skip = x
        x = ad.add(tape, h, skip)
        if blk.relu_after:
            x = ad.relu(tape, x)
        if blk.pool_after and x.data.shape[1] > 1:
            x = ad.max_pool1d(tape, x, blk.pool_after)
    flat = ad.flatten(tape, x)
    logits = ad.dense_forward(tape, flat, params["dense.weights"], params["dense.bias"])
    if spec.kind == "binary":
        return ad.sigmoid(tape, logits)
    return ad.softmax(tape, logits)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

# BLAS picks a different (differently ordered) kernel below this row count,
# so inference matmuls pad their row dimension up to it; per-row results are
# otherwise independent of how many rows share the call
_ROW_STABLE_MIN = 32


def _matmul_rowsafe(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b whose per-row results do not depend on a's row count or layout."""
    # BLAS also reorders accumulation for non-contiguous operands; a reshape of
    # a transposed window view stays a view only for some batch sizes, so the
    # layout must be pinned down before the bits can be batch independent
    a = np.ascontiguousarray(a)
    m = a.shape[0]
    if m >= _ROW_STABLE_MIN:
        return a @ b
    padded = np.zeros((_ROW_STABLE_MIN, a.shape[1]), dtype=a.dtype)
    padded[:m] = a
    return (padded @ b)[:m]


def _infer_conv1d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    n, length, c_in = x.shape
    k, _, c_out = kernel.shape
    cols = _im2col_np(x, k)
    return (_matmul_rowsafe(cols, kernel.reshape(k * c_in, c_out)) + bias).reshape(
        n, length, c_out
    )


def _im2col_np(x: np.ndarray, k: int) -> np.ndarray:
    n, length, channels = x.shape
    left = k // 2
    padded = np.zeros((n, length + k - 1, channels), dtype=x.dtype)
    padded[:, left:left + length, :] = x
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)
    return windows.transpose(0, 1, 3, 2).reshape(n * length, k * channels)


def _infer_forward(weights: dict[str, np.ndarray], spec: ModelSpec,
                   ids: np.ndarray) -> np.ndarray:
    """Inference-only forward whose per-sample bits never depend on the batch."""
    x = weights["embedding"][ids]
    for i, blk in enumerate(spec.blocks):
        h = _infer_conv1d(x, weights[f"block{i}.conv1.kernel"],
                          weights[f"block{i}.conv1.bias"])
        np.maximum(h, 0.0, out=h)
        h = _infer_conv1d(h, weights[f"block{i}.conv2.kernel"],
                          weights[f"block{i}.conv2.bias"])
        if blk.projection:
            skip = _infer_conv1d(x, weights[f"block{i}.proj.kernel"],
                                 weights[f"block{i}.proj.bias"])
        else:
            skip = x
        x = h + skip
        if blk.relu_after:
            np.maximum(x, 0.0, out=x)
        if blk.pool_after and x.shape[1] > 1:
            n, length, f = x.shape
            pooled_len = length // blk.pool_after
            offset = length - pooled_len * blk.pool_after
            x = x[:, offset:, :].reshape(
                n, pooled_len, blk.pool_after, f
            ).max(axis=2)
    flat = x.reshape(x.shape[0], -1)
    dense = weights["dense.weights"]
    if spec.kind == "binary":
        # single-column matmul is a BLAS gemv with row-count-dependent bits,
        # so use an elementwise product and a per-row pairwise sum instead
        logits = (flat * dense[:, 0]).sum(axis=1) + weights["dense.bias"][0]
        return _stable_sigmoid(logits)
    logits = _matmul_rowsafe(flat, dense) + weights["dense.bias"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def predict_arrays(
    weights: dict[str, np.ndarray],
    spec: ModelSpec,
    ids: np.ndarray,
    batch_size: int = 1024,
) -> np.ndarray:
    """Scores for encoded ids: (n,) probabilities or (n, k) class rows.

    Work is chunked to bound memory.  Every domain takes a code path chosen
    only by its own length, so results do not depend on batch composition.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != spec.input_length:
        raise ad.ShapeMismatch(f"ids must be (n, {spec.input_length}), got {ids.shape}")
    n = ids.shape[0]
    if spec.kind == "binary":
        out = np.empty(n, dtype=np.float32)
    else:
        out = np.empty((n, spec.num_classes), dtype=np.float32)
    fast = _FastBinaryPath.build(weights, spec) if spec.kind == "binary" else None
    for lo in range(0, n, batch_size):
        chunk = ids[lo:lo + batch_size]
        if fast is not None:
            out[lo:lo + batch_size] = fast.scores(chunk)
        else:
            out[lo:lo + batch_size] = _infer_forward(weights, spec, chunk)
    return out


class _FastBinaryPath:
    """Inference shortcut for the single-block binary model.

    Left padding makes the block output constant over the pad run, so pooled
    prefix rows and their dense contribution are precomputed once from an
    all-pad forward pass; per domain only the content suffix is convolved.
    Domains too long for a safe prefix fall back to the full forward.
    """

    def __init__(self, weights, spec, products, pad_pooled, prefix_logit):
        self.weights = weights
        self.spec = spec
        self.products = products        # (vocab, k, f) embedding-kernel table
        self.pad_pooled = pad_pooled    # (pooled_len, f) all-pad pooled rows
        self.prefix_logit = prefix_logit  # cumulative dense mass of prefix rows

    @staticmethod
    def build(weights: dict[str, np.ndarray], spec: ModelSpec) -> "_FastBinaryPath | None":
        blk = spec.blocks[0]
        if len(spec.blocks) != 1 or blk.projection or blk.kernel != 4 or blk.pool_after != 4:
            return None
        table = weights["embedding"]
        k1 = weights["block0.conv1.kernel"]
        products = np.einsum("vc,kco->vko", table, k1)
        tensors = {k: ad.Tensor(v) for k, v in weights.items()}
        pad_ids = np.zeros((1, spec.input_length), dtype=np.int64)
        pad_x = ad.embedding_forward(None, tensors["embedding"], pad_ids)
        h = ad.conv1d_forward(None, pad_x, tensors["block0.conv1.kernel"],
                              tensors["block0.conv1.bias"])
        h = ad.relu(None, h)
        h = ad.conv1d_forward(None, h, tensors["block0.conv2.kernel"],
                              tensors["block0.conv2.bias"])
        block_out = np.maximum(h.data + pad_x.data, 0)
        pooled_len = spec.input_length // blk.pool_after
        offset = spec.input_length - pooled_len * blk.pool_after
        pad_pooled = block_out[0, offset:, :].reshape(
            pooled_len, blk.pool_after, blk.filters
        ).max(axis=1)
        dense = weights["dense.weights"].reshape(pooled_len, blk.filters, spec.num_classes)
        per_row = np.einsum("wf,wfo->wo", pad_pooled, dense)
        prefix_logit = np.concatenate(
            [np.zeros((1, spec.num_classes), dtype=per_row.dtype), np.cumsum(per_row, axis=0)]
        )
        return _FastBinaryPath(weights, spec, products, pad_pooled, prefix_logit)

    def scores(self, ids: np.ndarray) -> np.ndarray:
        length = self.spec.input_length
        pool = self.spec.blocks[0].pool_after
        offset = length - (length // pool) * pool
        n = ids.shape[0]
        content_start = np.where(
            (ids != 0).any(axis=1), (ids != 0).argmax(axis=1), length
        )
        # start on a pool-window boundary, clear of both the left edge and
        # the content (block row r mixes inputs up to r + 2)
        starts = offset + pool * ((content_start - 2 - offset) // pool)
        out = np.empty(n, dtype=np.float32)
        order = np.argsort(starts, kind="stable")
        lo = 0
        while lo < n:
            hi = lo + 1
            while hi < n and starts[order[hi]] == starts[order[lo]]:
                hi += 1
            group = order[lo:hi]
            p0 = int(starts[group[0]])
            if p0 < 9:
                out[group] = self._full(ids[group])
            else:
                out[group] = self._suffix(ids[group], p0)
            lo = hi
        return out

    def _full(self, ids: np.ndarray) -> np.ndarray:
        return _infer_forward(self.weights, self.spec, ids)

    def _suffix(self, ids: np.ndarray, p0: int) -> np.ndarray:
        w = self.weights
        spec = self.spec
        f = spec.blocks[0].filters
        length = spec.input_length
        n = ids.shape[0]
        ls = length - p0
        # first conv over positions [p0-2, length) via the product table
        y1 = np.empty((n, ls + 2, f), dtype=np.float32)
        y1[:] = w["block0.conv1.bias"]
        for j in range(4):
            q_lo = p0 - 2
            q_hi = min(length, length + 2 - j)
            p_lo = q_lo + j - 2
            p_hi = q_hi + j - 2
            y1[:, q_lo - (p0 - 2):q_hi - (p0 - 2), :] += self.products[ids[:, p_lo:p_hi], j, :]
        np.maximum(y1, 0.0, out=y1)
        # second conv produces positions [p0, length); right edge needs one zero row
        padded = np.zeros((n, ls + 3, f), dtype=np.float32)
        padded[:, :ls + 2, :] = y1
        windows = np.lib.stride_tricks.sliding_window_view(padded, 4, axis=1)
        cols = windows.transpose(0, 1, 3, 2).reshape(n * ls, 4 * f)
        y2 = _matmul_rowsafe(cols, w["block0.conv2.kernel"].reshape(4 * f, f))
        y2 += w["block0.conv2.bias"]
        block = y2.reshape(n, ls, f) + w["embedding"][ids[:, p0:]]
        np.maximum(block, 0.0, out=block)
        # p0 sits on a window boundary, so the suffix is whole windows
        pooled = block.reshape(n, ls // 4, 4, f).max(axis=2)
        w0 = (p0 - (length - (length // 4) * 4)) // 4
        tail = w["dense.weights"][w0 * f:, 0]
        logits = (pooled.reshape(n, -1) * tail).sum(axis=1)
        logits += w["dense.bias"][0] + self.prefix_logit[w0, 0]
        return _stable_sigmoid(logits)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    seed: int
    batch_size: int | None = None  # None means 128 binary / 256 multiclass
    max_epochs: int = 50
    patience: int = 3
    holdout_fraction: float = 0.05
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gamma: float = 0.3  # class-weight exponent; 0 disables weighting


@dataclass
class TrainReport:
    kind: str
    num_classes: int
    batch_size: int
    holdout_size: int
    train_losses: list[float] = field(default_factory=list)
    holdout_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    class_weights: list[float] | None = None
    wall_seconds: float = 0.0  # informational; excluded from determinism checks


def train_binary(
    ids: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    holdout_ids: np.ndarray | None = None,
    holdout_labels: np.ndarray | None = None,
) -> tuple[Model, TrainReport]:
    """Train the binary detector on encoded ids with 0/1 labels."""
    labels = np.asarray(labels)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise LabelOutOfRange("binary labels must be 0 or 1")
    return _train(binary_spec(), ids, labels, config, holdout_ids, holdout_labels)


def train_multiclass(
    ids: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    config: TrainConfig,
    holdout_ids: np.ndarray | None = None,
    holdout_labels: np.ndarray | None = None,
) -> tuple[Model, TrainReport]:
    """Train the family attributor; labels are ints in [0, num_classes)."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {num_classes})")
    return _train(multiclass_spec(num_classes), ids, labels, config,
                  holdout_ids, holdout_labels)


def _train(spec, ids, labels, config, holdout_ids, holdout_labels):
    ids = np.asarray(ids)
    labels = np.asarray(labels)
    if ids.shape[0] == 0:
        raise EmptyDataset("cannot train on zero samples")
    if ids.shape[0] != labels.shape[0]:
        raise ad.ShapeMismatch(f"{ids.shape[0]} samples vs {labels.shape[0]} labels")

    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = init_params(spec, rng)

    if holdout_ids is None:
        holdout_n = int(ids.shape[0] * config.holdout_fraction)
        perm = rng.permutation(ids.shape[0])
        holdout_idx, train_idx = perm[:holdout_n], perm[holdout_n:]
        holdout_ids, holdout_labels = ids[holdout_idx], labels[holdout_idx]
        ids, labels = ids[train_idx], labels[train_idx]
    else:
        holdout_ids = np.asarray(holdout_ids)
        holdout_labels = np.asarray(holdout_labels)
    if ids.shape[0] == 0:
        raise EmptyDataset("holdout split left no training samples")

    batch = config.batch_size or (128 if spec.kind == "binary" else 256)
    weights = None
    if spec.kind == "multiclass":
        counts = np.bincount(labels, minlength=spec.num_classes)
        weights = ad.class_weights(counts, config.gamma)
    report = TrainReport(
        kind=spec.kind,
        num_classes=spec.num_classes,
        batch_size=batch,
        holdout_size=int(holdout_ids.shape[0]),
        class_weights=None if weights is None else [float(x) for x in weights],
    )

    param_list = list(params.values())
    state = ad.adam_init(param_list)
    best_loss = np.inf
    best_snapshot = {k: t.data.copy() for k, t in params.items()}
    bad_epochs = 0
    n = ids.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch):
            sel = order[lo:lo + batch]
            tape = ad.Tape()
            probs = forward(tape, params, spec, ids[sel])
            if spec.kind == "binary":
                loss = ad.bce_loss(tape, probs, labels[sel].reshape(-1, 1))
            else:
                loss = ad.cce_loss(tape, probs, labels[sel], weights)
            ad.tape_backward(tape, loss)
            ad.adam_step(state, param_list, config.learning_rate,
                         config.beta1, config.beta2, config.eps)
            for p in param_list:
                p.grad = None
            total += float(loss.data) * sel.size
        report.train_losses.append(total / n)

        if holdout_ids.shape[0]:
            holdout = _dataset_loss(params, spec, holdout_ids, holdout_labels,
                                    weights, batch)
            report.holdout_losses.append(holdout)
            if holdout < best_loss:
                best_loss = holdout
                best_snapshot = {k: t.data.copy() for k, t in params.items()}
                report.best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
            report.stopped_epoch = epoch
            if bad_epochs >= config.patience:
                break
        else:
            best_snapshot = {k: t.data.copy() for k, t in params.items()}
            report.best_epoch = epoch
            report.stopped_epoch = epoch

    final = {k: ad.Tensor(v) for k, v in best_snapshot.items()}
    report.wall_seconds = time.perf_counter() - started
    return Model(spec=spec, params=final), report


def _dataset_loss(params, spec, ids, labels, weights, batch) -> float:
    scores = predict_arrays({k: t.data for k, t in params.items()}, spec, ids, batch)
    clamp = ad.LOSS_CLAMP
    if spec.kind == "binary":
        p = np.clip(scores.astype(np.float64), clamp, 1.0 - clamp)
        y = labels.astype(np.float64)
        return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())
    picked = np.clip(scores[np.arange(labels.size), labels].astype(np.float64),
                     clamp, 1.0 - clamp)
    w = np.ones(labels.size) if weights is None else np.asarray(weights)[labels]
    return float(-(w * np.log(picked)).mean())


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: Model, path: str) -> None:
    """Write the versioned container; floats keep full 32-bit precision."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.spec.kind,
        "alphabet": model.alphabet,
        "spec": _spec_to_dict(model.spec),
        "weights": [
            {
                "name": name,
                "shape": list(t.data.shape),
                "data": [float(x) for x in t.data.ravel()],
            }
            for name, t in model.params.items()
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_model(path: str) -> Model:
    """Read a container written by save_model; round-trips weights bitwise."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"{path}: not a valid model document ({exc})") from exc
    except OSError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptFile(f"{path}: missing format_version")
    if doc["format_version"] != MODEL_FORMAT_VERSION:
        raise UnsupportedVersion(
            f"{path}: format_version {doc['format_version']} unsupported"
        )
    try:
        spec = _spec_from_dict(doc["spec"], doc["kind"])
        alphabet = doc["alphabet"]
        entries = doc["weights"]
    except (KeyError, TypeError) as exc:
        raise CorruptFile(f"{path}: missing field {exc}") from exc
    if alphabet != codec.ALPHABET:
        raise CorruptFile(f"{path}: alphabet does not match this codec")
    expected = set(init_params(spec, 0).keys())
    params: dict[str, ad.Tensor] = {}
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(entry["shape"])
            data = np.asarray(entry["data"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFile(f"{path}: bad weight entry ({exc})") from exc
        if data.size != int(np.prod(shape)):
            raise CorruptFile(f"{path}: weight {name} has {data.size} values,"
                              f" shape says {np.prod(shape)}")
        params[name] = ad.Tensor(data.astype(np.float32).reshape(shape))
    if set(params.keys()) != expected:
        raise CorruptFile(f"{path}: weight names do not match the spec")
    return Model(spec=spec, params=params, alphabet=alphabet)


def _spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "kind": spec.kind,
        "num_classes": spec.num_classes,
        "vocab_size": spec.vocab_size,
        "embed_dim": spec.embed_dim,
        "input_length": spec.input_length,
        "blocks": [
            {
                "kernel": b.kernel,
                "filters": b.filters,
                "projection": b.projection,
                "relu_after": b.relu_after,
                "pool_after": b.pool_after,
            }
            for b in spec.blocks
        ],
    }


def _spec_from_dict(raw: dict, kind: str) -> ModelSpec:
    if kind not in ("binary", "multiclass"):
        raise CorruptFile(f"unknown model kind {kind!r}")
    blocks = tuple(
        BlockSpec(
            kernel=int(b["kernel"]),
            filters=int(b["filters"]),
            projection=bool(b["projection"]),
            relu_after=bool(b["relu_after"]),
            pool_after=int(b["pool_after"]),
        )
        for b in raw["blocks"]
    )
    return ModelSpec(
        kind=kind,
        num_classes=int(raw["num_classes"]),
        blocks=blocks,
        vocab_size=int(raw["vocab_size"]),
        embed_dim=int(raw["embed_dim"]),
        input_length=int(raw["input_length"]),
    )
