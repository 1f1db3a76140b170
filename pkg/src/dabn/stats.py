"""Batch-normalization statistics.

Batch moments, the exponentially weighted running estimates used while
training, the single-instance incremental update used while streaming, the
normalization transform and its gradients.

The update functions are written against the four statistic fields shared by
:class:`BnChannelState` (scalars) and :class:`BnLayerState` (one entry per
channel), so the same code serves a single neuron or a whole layer.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Union

import numpy as np

DEFAULT_EPSILON = 1e-5
DEFAULT_TRAIN_MOMENTUM = 0.1
DEFAULT_ONLINE_MOMENTUM = 0.01


def check_momentum(momentum: float) -> float:
    momentum = float(momentum)
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"momentum must lie strictly inside (0, 1), got {momentum!r}")
    return momentum


@dataclass(frozen=True)
class BatchMoments:
    """Mean and biased variance of a batch, per channel when built from a matrix."""

    mean: Union[float, np.ndarray]
    var: Union[float, np.ndarray]
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if np.any(np.asarray(self.var) < 0):
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class BnChannelState:
    gamma: float = 1.0
    beta: float = 0.0
    running_mean: float = 0.0
    running_var: float = 1.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.running_var < 0:
            raise ValueError("running_var must be non-negative")


@dataclass(eq=False)
class BnLayerState:
    """Per-channel parameters and running statistics of one normalization layer.

    Statistics are held in float64 regardless of the activation dtype.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    train_momentum: float = DEFAULT_TRAIN_MOMENTUM
    online_momentum: float = DEFAULT_ONLINE_MOMENTUM

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        shapes = {a.shape for a in (self.gamma, self.beta, self.running_mean, self.running_var)}
        if len(shapes) != 1 or self.gamma.ndim != 1 or self.gamma.size < 1:
            raise ValueError(f"channel arrays must be 1-D and equally long, got shapes {shapes}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        check_momentum(self.train_momentum)
        check_momentum(self.online_momentum)
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")

    @classmethod
    def initial(cls, width: int, **kwargs) -> "BnLayerState":
        """Neutral state: gamma 1, beta 0, running mean 0, running variance 1."""
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            **kwargs,
        )

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def channel(self, index: int) -> BnChannelState:
        return BnChannelState(
            gamma=float(self.gamma[index]),
            beta=float(self.beta[index]),
            running_mean=float(self.running_mean[index]),
            running_var=float(self.running_var[index]),
            epsilon=self.epsilon,
        )

    @property
    def channels(self) -> list[BnChannelState]:
        return [self.channel(i) for i in range(self.width)]

    def copy(self) -> "BnLayerState":
        return dataclasses.replace(
            self,
            gamma=self.gamma.copy(),
            beta=self.beta.copy(),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
        )

    def same_as(self, other: "BnLayerState") -> bool:
        """Field-by-field bitwise equality."""
        return (
            self.epsilon == other.epsilon
            and self.train_momentum == other.train_momentum
            and self.online_momentum == other.online_momentum
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("gamma", "beta", "running_mean", "running_var")
            )
        )


BnState = Union[BnChannelState, BnLayerState]


def batch_moments(values, axis: int = 0) -> BatchMoments:
    """Mean and biased (divide-by-count) variance along ``axis``.

    A 1-D input gives scalar moments, a ``(batch, channels)`` matrix gives one
    pair per channel.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or values.shape[axis] == 0:
        raise ValueError("batch_moments needs a non-empty input")
    if not np.all(np.isfinite(values)):
        raise ValueError("batch_moments needs finite input")
    count = values.shape[axis]
    mean = values.mean(axis=axis)
    var = np.square(values - np.expand_dims(mean, axis)).mean(axis=axis)
    if values.ndim == 1:
        return BatchMoments(float(mean), float(var), count)
    return BatchMoments(mean, var, count)


def update_running_train(state: BnState, moments: BatchMoments, momentum: float) -> BnState:
    """Blend batch moments into the running estimates.

    The batch variance is rescaled by ``count / (count - 1)`` before blending,
    so single-element batches are rejected.
    """
    if moments.count <= 1:
        raise ValueError("running update needs a batch of more than one element")
    a = check_momentum(momentum)
    bessel = moments.count / (moments.count - 1)
    return dataclasses.replace(
        state,
        running_mean=(1 - a) * state.running_mean + a * moments.mean,
        running_var=(1 - a) * state.running_var + a * bessel * moments.var,
    )


def update_running_online(state: BnState, z, momentum: float) -> BnState:
    """Single-instance exponential update of mean and variance.

    The variance term uses the mean from *before* this update and carries no
    bias correction.
    """
    a = check_momentum(momentum)
    z = np.asarray(z, dtype=np.float64) if isinstance(state, BnLayerState) else float(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("online update needs finite input")
    prev_mean = state.running_mean
    return dataclasses.replace(
        state,
        running_mean=(1 - a) * prev_mean + a * z,
        running_var=(1 - a) * (state.running_var + a * np.square(z - prev_mean)),
    )


def normalize(state: BnState, z, mean, var):
    """``gamma * (z - mean) / sqrt(var + eps) + beta``.

    Pass batch moments while training and running statistics otherwise.
    """
    if np.any(np.asarray(var) < 0):
        raise ValueError("variance must be non-negative")
    return state.gamma * (z - mean) / np.sqrt(var + state.epsilon) + state.beta


def bn_backward(layer: BnState, batch_inputs, moments: BatchMoments, upstream_grads):
    """Training-mode gradients of the normalization.

    The batch mean and variance are treated as functions of the inputs.
    Returns ``(input_grads, grad_gamma, grad_beta)``.
    """
    x = np.asarray(batch_inputs, dtype=np.float64)
    dy = np.asarray(upstream_grads, dtype=np.float64)
    if x.shape != dy.shape or x.ndim != 2:
        raise ValueError(f"shape mismatch: inputs {x.shape}, upstream {dy.shape}")
    if np.shape(moments.mean) != x.shape[1:] or moments.count != x.shape[0]:
        raise ValueError("moments do not match the batch")
    n = x.shape[0]
    inv_std = 1.0 / np.sqrt(moments.var + layer.epsilon)
    xhat = (x - moments.mean) * inv_std
    grad_beta = dy.sum(axis=0)
    grad_gamma = (dy * xhat).sum(axis=0)
    input_grads = (layer.gamma * inv_std / n) * (n * dy - grad_beta - xhat * grad_gamma)
    return input_grads, grad_gamma, grad_beta


def frozen_bn_backward(layer: BnState, batch_inputs, mean, var, upstream_grads):
    """Gradients when normalizing with fixed (running) statistics."""
    x = np.asarray(batch_inputs, dtype=np.float64)
    dy = np.asarray(upstream_grads, dtype=np.float64)
    if x.shape != dy.shape:
        raise ValueError(f"shape mismatch: inputs {x.shape}, upstream {dy.shape}")
    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    xhat = (x - mean) * inv_std
    return dy * layer.gamma * inv_std, (dy * xhat).sum(axis=0), dy.sum(axis=0)
