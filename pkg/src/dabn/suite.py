"""Small built-in synthetic suites for checking the adaptation claims quickly.

Both use five source users and one shifted target with a compact network, so
a fold model trains in seconds on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .model import ArchConfig, TrainHyper
from .synthetic import ShiftSpec, SynthSpec, synth_generate

SOURCE_USERS = (0, 1, 2, 3, 4)
TARGET_USER = 5
ONLINE_GRID = (0.01, 0.05, 0.1, 0.2)


@dataclass
class Suite:
    dataset: Dataset
    arch: ArchConfig
    hyper: TrainHyper
    target: int = TARGET_USER
    drift_index: int = -1


def tiny_arch(classes: int = 5) -> ArchConfig:
    return ArchConfig(classes=classes, conv_layers=2, feature_maps=8, dense_width=32, dropout_rate=0.2)


def tiny_hyper(epochs: int = 40, seed: int = 0) -> TrainHyper:
    return TrainHyper(learning_rate=3e-3, decay=1e-3, epochs=epochs, batch_size=50, seed=seed)


def personalization_suite(seed: int = 0) -> Suite:
    """Random per-user channel offsets; target user is the last one."""
    spec = SynthSpec(num_users=6, classes=5, windows_per_class=60, shift=ShiftSpec(offset_std=0.15), seed=seed)
    return Suite(synth_generate(spec), tiny_arch(), tiny_hyper(40))


def drift_suite(seed: int = 0, drift_index: int = 400, jump: float = 0.3) -> Suite:
    """Target sits at the sources' average offset, then jumps by ``jump`` per channel."""
    rng = np.random.default_rng(seed)
    src = rng.normal(0, 0.15, size=(len(SOURCE_USERS), 3))
    centre = src.mean(axis=0)
    offsets = np.vstack([src, centre])
    shift = ShiftSpec(
        offsets=tuple(map(tuple, offsets)),
        drift_index=drift_index,
        drift_user=TARGET_USER,
        drift_offset=tuple(centre + jump * np.array([1.0, -1.0, 1.0])),
    )
    spec = SynthSpec(num_users=6, classes=5, windows_per_class=160, shift=shift, seed=seed)
    return Suite(synth_generate(spec), tiny_arch(), tiny_hyper(15), drift_index=drift_index)
