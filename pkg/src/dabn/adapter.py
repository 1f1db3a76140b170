"""Streaming personalization: update-then-classify, one window at a time.

A :class:`StreamAdapter` wraps a trained model whose weights never change and
keeps its own copy of the normalization statistics. For each arriving window
the dense-layer input is computed once, the running mean and variance absorb
it, and the same input is then normalized with the *updated* statistics and
classified. Nothing about the window is retained afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import AdapterPoisoned
from .model import TrainedModel, _head_forward, dense_inputs, softmax
from .stats import check_momentum, normalize, update_running_online


@dataclass
class StreamRecord:
    index: int
    predicted: str
    label_index: int
    probabilities: np.ndarray
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None


class StreamAdapter:
    def __init__(self, model: TrainedModel, momentum: float, adaptation_enabled: bool = True,
                 snapshots: bool = False):
        self.model = model
        self.online_momentum = check_momentum(momentum)
        self.adaptation_enabled = bool(adaptation_enabled)
        self.snapshots = snapshots
        self.reset()

    def reset(self) -> "StreamAdapter":
        """Forget the target: statistics back to the trained model's, counter to zero."""
        self.live_bn = self.model.bn.copy()
        for arr in (self.live_bn.running_mean, self.live_bn.running_var):
            arr.setflags(write=True)
        self.windows_seen = 0
        self.poisoned = False
        return self

    def adapt_and_classify(self, window) -> StreamRecord:
        if self.poisoned:
            raise AdapterPoisoned("adapter saw a non-finite activation; reset it before reuse")
        window = np.asarray(window, dtype=np.float64)
        if window.ndim != 2:
            raise ValueError(f"expected one window, got shape {window.shape}")
        z = dense_inputs(self.model, window[None])
        if not np.all(np.isfinite(z)):
            self.poisoned = True
            raise AdapterPoisoned(f"non-finite dense input at window {self.windows_seen}")
        if self.adaptation_enabled:
            self.live_bn = update_running_online(self.live_bn, z[0], self.online_momentum)
        zhat = normalize(self.live_bn, z, self.live_bn.running_mean, self.live_bn.running_var)
        logits, _, _ = _head_forward(self.model, zhat, None)
        probs = softmax(logits)[0]
        label = int(probs.argmax())
        record = StreamRecord(self.windows_seen, self.model.label_map[label], label, probs)
        if self.snapshots:
            record.running_mean = self.live_bn.running_mean.copy()
            record.running_var = self.live_bn.running_var.copy()
        self.windows_seen += 1
        return record

    def state_nbytes(self) -> int:
        """Bytes of mutable per-stream state (constant in stream length)."""
        return self.live_bn.running_mean.nbytes + self.live_bn.running_var.nbytes + 8 * 3

    def same_state(self, other: "StreamAdapter") -> bool:
        return (
            self.model is other.model
            and self.online_momentum == other.online_momentum
            and self.adaptation_enabled == other.adaptation_enabled
            and self.windows_seen == other.windows_seen
            and self.poisoned == other.poisoned
            and self.live_bn.same_as(other.live_bn)
        )


def init_adapter(model: TrainedModel, momentum: float, adaptation_enabled: bool = True) -> StreamAdapter:
    return StreamAdapter(model, momentum, adaptation_enabled)


def adapt_and_classify(adapter: StreamAdapter, window) -> StreamRecord:
    return adapter.adapt_and_classify(window)


def reset(adapter: StreamAdapter) -> StreamAdapter:
    return adapter.reset()


class StreamCsvWriter:
    """Append-only ``tau,predicted,true_label_if_known,prob_0..prob_{M-1}`` sink."""

    def __init__(self, path, num_classes: int):
        self._fh = open(path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh)
        self._w.writerow(["tau", "predicted", "true_label_if_known"] + [f"prob_{i}" for i in range(num_classes)])
        self.rows = 0

    def write(self, record: StreamRecord, true_label: Optional[str] = None) -> None:
        self._w.writerow(
            [record.index, record.predicted, "" if true_label is None else true_label]
            + [repr(float(p)) for p in record.probabilities]
        )
        self.rows += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
