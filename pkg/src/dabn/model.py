"""1D-convolutional activity classifier with a domain-adaptive BN dense block.

Layer order::

    conv_layers x [conv (zero padded) + ReLU] -> max-pool -> flatten
    -> dense -> batch norm -> dropout -> ReLU -> dense classifier -> softmax

Everything is plain numpy in float64. A model is a :class:`TrainedModel`
holding a parameter dict plus a :class:`~dabn.stats.BnLayerState`; the
functions below operate on it rather than hiding state in layer objects.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import container
from .data import Dataset, make_domain_batches
from .errors import DataError, InvariantViolation
from .rng import substream
from .stats import (
    BnLayerState,
    batch_moments,
    bn_backward,
    check_momentum,
    frozen_bn_backward,
    normalize,
    update_running_train,
)

TRAIN_BATCH_STATS = "train-batch-stats"
GLOBAL_STATS = "global-stats"

CHECKPOINT_MAGIC = b"DABN1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    classes: int
    conv_layers: int = 5
    feature_maps: int = 64
    kernel: int = 5
    stride: int = 1
    pool: int = 4
    dense_width: int = 256
    dropout_rate: float = 0.5
    window_len: int = 40
    in_channels: int = 3

    def __post_init__(self):
        for name in ("classes", "conv_layers", "feature_maps", "kernel", "stride", "pool",
                     "dense_width", "window_len", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.conv_length % self.pool:
            raise ValueError(f"pool {self.pool} does not divide conv output length {self.conv_length}")

    @property
    def conv_length(self) -> int:
        length = self.window_len
        for _ in range(self.conv_layers):
            length = (length - 1) // self.stride + 1
        return length

    @property
    def flat_dim(self) -> int:
        return self.conv_length // self.pool * self.feature_maps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        return cls(**d)


@dataclass(frozen=True)
class TrainHyper:
    """Optimizer and schedule settings.

    ``decay`` is applied per epoch as ``lr / (1 + decay * epoch)``.
    """

    learning_rate: float = 1e-4
    decay: float = 1e-3
    epochs: int = 649
    batch_size: int = 177
    train_momentum: float = 0.1
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size <= 1:
            raise ValueError("batch_size must be > 1")
        if self.epochs < 0 or self.decay < 0:
            raise ValueError("epochs and decay must be non-negative")
        check_momentum(self.train_momentum)

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate / (1.0 + self.decay * epoch)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainHyper":
        return cls(**d)


@dataclass(eq=False)
class TrainedModel:
    arch: ArchConfig
    params: dict
    bn: BnLayerState
    label_map: tuple
    hyper: Optional[TrainHyper] = None

    def trainables(self) -> dict:
        """Parameter dict including the normalization scale and shift (shared arrays)."""
        return {**self.params, "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta}

    def copy(self) -> "TrainedModel":
        return dataclasses.replace(self, params={k: v.copy() for k, v in self.params.items()}, bn=self.bn.copy())

    def freeze(self) -> "TrainedModel":
        for arr in self.trainables().values():
            arr.setflags(write=False)
        self.bn.running_mean.setflags(write=False)
        self.bn.running_var.setflags(write=False)
        return self

    def weights_digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.trainables().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        """Weights plus running statistics."""
        h = hashlib.sha256(self.weights_digest().encode())
        h.update(np.ascontiguousarray(self.bn.running_mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.bn.running_var, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    @classmethod
    def for_params(cls, params: Mapping, hyper: TrainHyper) -> "AdamState":
        return cls(
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
            beta1=hyper.beta1,
            beta2=hyper.beta2,
            eps_opt=hyper.eps_opt,
        )


def init_model(arch: ArchConfig, label_map, seed: int, **bn_kwargs) -> TrainedModel:
    """Fan-in scaled uniform initialization (bound ``sqrt(1 / fan_in)``)."""
    label_map = tuple(label_map)
    if len(label_map) != arch.classes:
        raise ValueError(f"label map has {len(label_map)} entries, arch expects {arch.classes}")
    rng = substream(seed, "weights")

    def uniform(fan_in, shape):
        bound = np.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = {}
    cin = arch.in_channels
    for i in range(arch.conv_layers):
        fan_in = cin * arch.kernel
        params[f"conv{i}.weight"] = uniform(fan_in, (arch.feature_maps, cin, arch.kernel))
        params[f"conv{i}.bias"] = uniform(fan_in, (arch.feature_maps,))
        cin = arch.feature_maps
    params["dense.weight"] = uniform(arch.flat_dim, (arch.flat_dim, arch.dense_width))
    params["dense.bias"] = uniform(arch.flat_dim, (arch.dense_width,))
    params["out.weight"] = uniform(arch.dense_width, (arch.dense_width, arch.classes))
    params["out.bias"] = uniform(arch.dense_width, (arch.classes,))
    return TrainedModel(arch, params, BnLayerState.initial(arch.dense_width, **bn_kwargs), label_map)


# --- layers -----------------------------------------------------------------


def _conv_forward(h, weight, bias, stride):
    cout, cin, k = weight.shape
    left = (k - 1) // 2
    hp = np.pad(h, ((0, 0), (left, k - 1 - left), (0, 0)))
    cols = sliding_window_view(hp, k, axis=1)[:, ::stride]  # (B, T_out, cin, k)
    b, t_out = cols.shape[:2]
    cols = cols.reshape(b * t_out, cin * k)
    out = cols @ weight.reshape(cout, cin * k).T + bias
    return out.reshape(b, t_out, cout), cols


def _conv_backward(dout, cols, weight, in_len, stride):
    cout, cin, k = weight.shape
    b, t_out, _ = dout.shape
    flat = dout.reshape(b * t_out, cout)
    dweight = (flat.T @ cols).reshape(cout, cin, k)
    dbias = flat.sum(axis=0)
    dcols = (flat @ weight.reshape(cout, cin * k)).reshape(b, t_out, cin, k)
    dhp = np.zeros((b, in_len + k - 1, cin))
    span = stride * (t_out - 1) + 1
    for j in range(k):
        dhp[:, j : j + span : stride] += dcols[..., j]
    left = (k - 1) // 2
    return dhp[:, left : left + in_len], dweight, dbias


def _pool_forward(h, pool):
    b, t, c = h.shape
    r = h.reshape(b, t // pool, pool, c)
    idx = r.argmax(axis=2)[:, :, None, :]
    return np.take_along_axis(r, idx, axis=2)[:, :, 0, :], idx


def _pool_backward(dout, idx, shape, pool):
    b, t, c = shape
    dr = np.zeros((b, t // pool, pool, c))
    np.put_along_axis(dr, idx, dout[:, :, None, :], axis=2)
    return dr.reshape(shape)


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


# --- forward / backward -------------------------------------------------------


def _check_batch(model: TrainedModel, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    arch = model.arch
    if batch.ndim != 3 or batch.shape[1:] != (arch.window_len, arch.in_channels):
        raise ValueError(
            f"expected batch of shape (B, {arch.window_len}, {arch.in_channels}), got {batch.shape}"
        )
    return batch


def dense_inputs(model: TrainedModel, batch):
    """Run the convolutional block and dense layer; returns the BN layer input ``z``."""
    z, _ = _trunk_forward(model, _check_batch(model, batch))
    return z


def _trunk_forward(model, x):
    arch, p = model.arch, model.params
    layers = []
    h = x
    for i in range(arch.conv_layers):
        pre, cols = _conv_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], arch.stride)
        layers.append((cols, pre, h.shape[1]))
        h = np.maximum(pre, 0.0)
    pooled, pool_idx = _pool_forward(h, arch.pool)
    flat = pooled.reshape(pooled.shape[0], -1)
    z = flat @ p["dense.weight"] + p["dense.bias"]
    return z, {"layers": layers, "conv_out_shape": h.shape, "pool_idx": pool_idx, "flat": flat}


def _head_forward(model, zhat, mask):
    d = zhat * mask if mask is not None else zhat
    a = np.maximum(d, 0.0)
    return a @ model.params["out.weight"] + model.params["out.bias"], d, a


def forward(model: TrainedModel, batch, mode: str = GLOBAL_STATS, dropout_on: bool = False, rng=None):
    """Class scores for a batch of windows.

    ``mode`` picks the statistics the normalization layer uses: the batch's own
    moments (``"train-batch-stats"``, needs more than one window) or the model's
    running estimates (``"global-stats"``). Dropout only acts in the former.
    Returns ``(logits, cache)``; pass the cache to :func:`backward`.
    """
    x = _check_batch(model, batch)
    if mode not in (TRAIN_BATCH_STATS, GLOBAL_STATS):
        raise ValueError(f"unknown mode {mode!r}")
    z, trunk = _trunk_forward(model, x)
    if mode == TRAIN_BATCH_STATS:
        if x.shape[0] < 2:
            raise ValueError("batch statistics need more than one window")
        moments = batch_moments(z)
        zhat = normalize(model.bn, z, moments.mean, moments.var)
    else:
        moments = None
        zhat = normalize(model.bn, z, model.bn.running_mean, model.bn.running_var)
    mask = None
    rate = model.arch.dropout_rate
    if dropout_on and mode == TRAIN_BATCH_STATS and rate > 0:
        if rng is None:
            raise ValueError("dropout needs a generator")
        mask = (rng.random(zhat.shape) >= rate) / (1.0 - rate)
    logits, d, a = _head_forward(model, zhat, mask)
    cache = dict(trunk, mode=mode, z=z, moments=moments, mask=mask, d=d, a=a, logits=logits)
    return logits, cache


def backward(model: TrainedModel, cache: dict, labels) -> dict:
    """Gradients of the mean cross-entropy for every trainable parameter."""
    labels = np.asarray(labels)
    logits = cache["logits"]
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {logits.shape[0]}")
    arch, p = model.arch, model.params
    n = logits.shape[0]
    dlogits = softmax(logits)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n

    grads = {"out.weight": cache["a"].T @ dlogits, "out.bias": dlogits.sum(axis=0)}
    dd = (dlogits @ p["out.weight"].T) * (cache["d"] > 0)
    dzhat = dd * cache["mask"] if cache["mask"] is not None else dd
    if cache["mode"] == TRAIN_BATCH_STATS:
        dz, grads["bn.gamma"], grads["bn.beta"] = bn_backward(model.bn, cache["z"], cache["moments"], dzhat)
    else:
        dz, grads["bn.gamma"], grads["bn.beta"] = frozen_bn_backward(
            model.bn, cache["z"], model.bn.running_mean, model.bn.running_var, dzhat
        )
    grads["dense.weight"] = cache["flat"].T @ dz
    grads["dense.bias"] = dz.sum(axis=0)
    dflat = dz @ p["dense.weight"].T

    shape = cache["conv_out_shape"]
    dpooled = dflat.reshape(shape[0], shape[1] // arch.pool, shape[2])
    dh = _pool_backward(dpooled, cache["pool_idx"], shape, arch.pool)
    for i in reversed(range(arch.conv_layers)):
        cols, pre, in_len = cache["layers"][i]
        dpre = dh * (pre > 0)
        dh, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = _conv_backward(
            dpre, cols, p[f"conv{i}.weight"], in_len, arch.stride
        )
    return grads


def adam_step(params: dict, grads: Mapping, state: AdamState, hyper: TrainHyper, epoch: int = 0):
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    if params.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {grads[k].shape}")
    state.step_count += 1
    t = state.step_count
    lr = hyper.lr_at(epoch)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for k, g in grads.items():
        m = state.first_moment[k]
        v = state.second_moment[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps_opt)
    return params, state


# --- training ----------------------------------------------------------------


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    batches: int = 0


def fit(
    model: TrainedModel,
    windows,
    labels,
    subjects,
    groups: Mapping,
    hyper: TrainHyper,
    *,
    epochs: Optional[int] = None,
    batch_size: Optional[int] = None,
    mode: str = TRAIN_BATCH_STATS,
    tag: str = "train",
    validation=None,
    patience: int = 20,
    log: Optional[TrainLog] = None,
) -> TrainedModel:
    """Optimize ``model`` in place on single-source batches.

    ``groups`` maps each source id to the indices of its windows. In
    ``train-batch-stats`` mode every batch is normalized with its own moments
    and the running estimates follow those moments. With ``validation``
    (windows, labels) the weights of the best validation epoch are kept.
    """
    epochs = hyper.epochs if epochs is None else epochs
    q = hyper.batch_size if batch_size is None else batch_size
    trainables = model.trainables()
    adam = AdamState.for_params(trainables, hyper)
    batch_rng = substream(hyper.seed, tag, "batches")
    dropout_rng = substream(hyper.seed, tag, "dropout")
    best = (-1.0, None)
    stale = 0
    for epoch in range(epochs):
        losses = []
        for batch in make_domain_batches(groups, q, batch_rng):
            idx = batch.indices
            if np.unique(subjects[idx]).size != 1:
                raise InvariantViolation(f"batch {batch.ordinal} of source {batch.source} mixes users")
            logits, cache = forward(model, windows[idx], mode, dropout_on=True, rng=dropout_rng)
            losses.append(cross_entropy(logits, labels[idx]))
            adam_step(trainables, backward(model, cache, labels[idx]), adam, hyper, epoch)
            if mode == TRAIN_BATCH_STATS:
                updated = update_running_train(model.bn, cache["moments"], hyper.train_momentum)
                model.bn.running_mean[...] = updated.running_mean
                model.bn.running_var[...] = updated.running_var
            if log is not None:
                log.batches += 1
        if log is not None:
            log.epochs.append(epoch)
            log.losses.append(float(np.mean(losses)))
        if validation is not None:
            pred, _ = predict_batch(model, validation[0])
            acc = float(np.mean(pred == validation[1]))
            if acc > best[0]:
                best, stale = (acc, model.copy()), 0
            else:
                stale += 1
                if stale >= patience:
                    break
    if validation is not None and best[1] is not None:
        for k, v in best[1].trainables().items():
            trainables[k][...] = v
        model.bn.running_mean[...] = best[1].bn.running_mean
        model.bn.running_var[...] = best[1].bn.running_var
    return model


def source_groups(dataset: Dataset, users) -> dict:
    return {u: np.flatnonzero(dataset.subjects == u) for u in users}


def round_to_storage(model: TrainedModel) -> TrainedModel:
    """Round weights to float32 so the in-memory model equals its checkpoint."""
    for arr in model.trainables().values():
        arr[...] = arr.astype(np.float32)
    return model


def train(
    dataset: Dataset,
    arch: ArchConfig,
    hyper: TrainHyper,
    users=None,
    log: Optional[TrainLog] = None,
) -> TrainedModel:
    """Train the initial multi-source model on ``users`` (default: all subjects)."""
    users = sorted(set(np.unique(dataset.subjects).tolist()) if users is None else set(users))
    if len(dataset) == 0:
        raise DataError("empty dataset")
    if len(users) < 2:
        raise ValueError("training needs at least two source users")
    if dataset.windows.shape[1:] != (arch.window_len, arch.in_channels):
        raise ValueError("dataset windows do not match the architecture")
    groups = source_groups(dataset, users)
    smallest = min(len(ix) for ix in groups.values())
    if hyper.batch_size > smallest:
        raise ValueError(f"batch size {hyper.batch_size} exceeds smallest source ({smallest} windows)")
    model = init_model(arch, dataset.label_names, hyper.seed, train_momentum=hyper.train_momentum)
    model.hyper = hyper
    fit(model, dataset.windows, dataset.labels, dataset.subjects, groups, hyper, log=log)
    return round_to_storage(model).freeze()


def predict_batch(model: TrainedModel, windows):
    """Label indices and class probabilities using the running statistics."""
    logits, _ = forward(model, windows, GLOBAL_STATS)
    probs = softmax(logits)
    return probs.argmax(axis=1), probs


def predict(model: TrainedModel, window):
    """``(activity name, probabilities)`` for one ``(window_len, channels)`` window."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise ValueError(f"expected a single window, got shape {window.shape}")
    idx, probs = predict_batch(model, window[None])
    return model.label_map[int(idx[0])], probs[0]


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: TrainedModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "label_map": list(model.label_map),
        "hyper": model.hyper.to_dict() if model.hyper else None,
        "seed": model.hyper.seed if model.hyper else None,
        "bn": {
            "epsilon": model.bn.epsilon,
            "train_momentum": model.bn.train_momentum,
            "online_momentum": model.bn.online_momentum,
        },
    }
    tensors = {name: ("f4", arr) for name, arr in model.trainables().items()}
    tensors["bn.running_mean"] = ("f8", model.bn.running_mean)
    tensors["bn.running_var"] = ("f8", model.bn.running_var)
    container.dump(path, CHECKPOINT_MAGIC, meta, tensors)


def load_checkpoint(path) -> TrainedModel:
    meta, tensors = container.load(path, CHECKPOINT_MAGIC)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    arch = ArchConfig.from_dict(meta["arch"])
    bn = BnLayerState(
        gamma=tensors.pop("bn.gamma").astype(np.float64),
        beta=tensors.pop("bn.beta").astype(np.float64),
        running_mean=tensors.pop("bn.running_mean"),
        running_var=tensors.pop("bn.running_var"),
        **meta["bn"],
    )
    params = {k: v.astype(np.float64) for k, v in tensors.items()}
    hyper = TrainHyper.from_dict(meta["hyper"]) if meta["hyper"] else None
    return TrainedModel(arch, params, bn, tuple(meta["label_map"]), hyper).freeze()
