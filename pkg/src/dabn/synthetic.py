"""Synthetic multi-user activity data with per-user covariate shift.

Every class has one base signal generator shared by all users; every user
applies a fixed per-channel affine map ``x -> scale * x + offset`` to all of
its windows. Class conditionals are therefore shared while the marginals
differ from user to user. Optionally the transform of one user switches at a
given arrival index (a drift).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .rng import substream


@dataclass(frozen=True)
class ShiftSpec:
    """Per-user affine transforms.

    Explicit ``offsets`` / ``scales`` (one row per user) win over the random
    draws controlled by ``offset_std`` (normal) and ``scale_std`` (log-normal).
    """

    offset_std: float = 0.0
    scale_std: float = 0.0
    offsets: Optional[tuple] = None
    scales: Optional[tuple] = None
    drift_index: Optional[int] = None
    drift_user: int = -1
    drift_offset: Optional[tuple] = None
    drift_scale: Optional[tuple] = None

    def __post_init__(self):
        if self.offset_std < 0 or self.scale_std < 0:
            raise ValueError("standard deviations must be non-negative")
        for name in ("scales", "drift_scale"):
            val = getattr(self, name)
            if val is not None and np.any(np.asarray(val, dtype=float) == 0):
                raise ValueError(f"degenerate shift spec: zero entry in {name}")
        if self.drift_index is not None and self.drift_index < 0:
            raise ValueError("drift_index must be non-negative")


@dataclass(frozen=True)
class SynthSpec:
    num_users: int = 6
    classes: int = 5
    windows_per_class: int = 60
    window_len: int = 40
    channels: int = 3
    noise: float = 0.05
    class_spread: float = 0.15
    amplitude: float = 0.1
    shift: ShiftSpec = ShiftSpec()
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        shift = d.pop("shift", {}) or {}
        shift = {k: (tuple(map(tuple, v)) if k in ("offsets", "scales") and v is not None
                     else tuple(v) if isinstance(v, list) else v) for k, v in shift.items()}
        return cls(shift=ShiftSpec(**shift), **d)


def class_profiles(spec: SynthSpec):
    """Per-class channel means, amplitudes, frequencies and phase offsets."""
    rng = substream(spec.seed, "synth", "classes")
    m, c = spec.classes, spec.channels
    means = 0.5 + rng.uniform(-spec.class_spread, spec.class_spread, size=(m, c))
    amps = spec.amplitude * rng.uniform(0.3, 1.0, size=(m, c))
    freqs = rng.permutation(np.arange(1, m + 1))[:, None] + rng.uniform(0, 0.5, size=(m, c))
    phases = rng.uniform(0, 2 * np.pi, size=(m, c))
    return means, amps, freqs, phases


def user_transforms(spec: SynthSpec):
    s = spec.shift
    k, c = spec.num_users, spec.channels
    rng = substream(spec.seed, "synth", "users")
    offsets = rng.normal(0, s.offset_std, size=(k, c)) if s.offset_std else np.zeros((k, c))
    scales = np.exp(rng.normal(0, s.scale_std, size=(k, c))) if s.scale_std else np.ones((k, c))
    if s.offsets is not None:
        offsets = np.array(s.offsets, dtype=float).reshape(k, c)
    if s.scales is not None:
        scales = np.array(s.scales, dtype=float).reshape(k, c)
    return offsets, scales


def base_windows(spec: SynthSpec, labels, rng) -> np.ndarray:
    """Untransformed windows for a sequence of class labels."""
    means, amps, freqs, phases = class_profiles(spec)
    labels = np.asarray(labels)
    t = np.arange(spec.window_len)[None, :, None] / spec.window_len
    start = rng.uniform(0, 2 * np.pi, size=(len(labels), 1, 1))
    wave = np.sin(2 * np.pi * freqs[labels][:, None, :] * t + phases[labels][:, None, :] + start)
    x = means[labels][:, None, :] + amps[labels][:, None, :] * wave
    return x + rng.normal(0, spec.noise, size=x.shape)


def synth_generate(spec: SynthSpec) -> Dataset:
    """Build the dataset described by ``spec``; deterministic in ``spec.seed``.

    Users record their classes in blocks (all windows of class 0, then class
    1, ...), except a drifting user whose windows arrive in shuffled class
    order so the switch at ``drift_index`` hits every class.
    """
    if spec.num_users < 2 or spec.classes < 2:
        raise ValueError("need at least two users and two classes")
    s = spec.shift
    offsets, scales = user_transforms(spec)
    drift_user = s.drift_user % spec.num_users if s.drift_index is not None else None
    windows, labels, subjects, counts = [], [], [], []
    for u in range(spec.num_users):
        rng = substream(spec.seed, "synth", "user", u)
        lab = np.repeat(np.arange(spec.classes), spec.windows_per_class)
        if u == drift_user:
            lab = rng.permutation(lab)
        x = base_windows(spec, lab, rng)
        scale = np.broadcast_to(scales[u], (len(lab), spec.channels)).copy()
        offset = np.broadcast_to(offsets[u], (len(lab), spec.channels)).copy()
        if u == drift_user:
            after = slice(s.drift_index, None)
            if s.drift_scale is not None:
                scale[after] = s.drift_scale
            if s.drift_offset is not None:
                offset[after] = s.drift_offset
        windows.append(scale[:, None, :] * x + offset[:, None, :])
        labels.append(lab)
        subjects.append(np.full(len(lab), u))
        counts.extend(
            {"subject": f"u{u}", "activity": f"c{m}", "raw": None, "windows": spec.windows_per_class}
            for m in range(spec.classes)
        )
    return Dataset(
        np.concatenate(windows),
        np.concatenate(labels),
        np.concatenate(subjects),
        [f"c{m}" for m in range(spec.classes)],
        [f"u{u}" for u in range(spec.num_users)],
        spec.window_len,
        spec.window_len,
        ("synthetic",),
        counts,
        {"synth_spec": spec.to_dict(), "drift_user": drift_user},
    )
