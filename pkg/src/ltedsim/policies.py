"""Baseline decision policies.  Action 0 = edge detection, 1 = local tracking."""

from __future__ import annotations

import math

import numpy as np

from .scene import POLICY, substream
from .timing import DecisionState

DETECT = 0
TRACK = 1


class LocalTrackingOnly:
    """LTw/oD: track everything after the first frame."""

    name = "ltwod"

    def decide(self, state: DecisionState, frame: int) -> int:
        return DETECT if frame == 1 else TRACK


class EdgeDetectionOnly:
    """EDw/oT: offload every frame."""

    name = "edwot"

    def decide(self, state: DecisionState, frame: int) -> int:
        return DETECT


class FixedInterval:
    """LTED-IntV: detect once ``interval`` captured frames have passed since the keyframe."""

    name = "lted_intv"

    def __init__(self, interval: int = 15):
        if interval < 1:
            raise ValueError("interval must be >= 1")
        self.interval = interval

    def decide(self, state: DecisionState, frame: int) -> int:
        if frame == 1 or state.finv >= self.interval:
            return DETECT
        return TRACK


class DeviationThreshold:
    """LTED-DeV: detect when the Euclidean norm of the mean corner offset exceeds the threshold."""

    name = "lted_dev"

    def __init__(self, threshold: float = 10.0):
        if threshold < 0:
            raise ValueError("threshold must be non-negative")
        self.threshold = threshold

    def decide(self, state: DecisionState, frame: int) -> int:
        if frame == 1 or math.hypot(state.o_x, state.o_y) > self.threshold:
            return DETECT
        return TRACK


class RandomChoice:
    """LTED-Rand: track with probability ``p`` (first frame always detected)."""

    name = "lted_rand"

    def __init__(self, p: float = 0.5, rng: np.random.Generator | None = None, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        self.p = p
        self.rng = rng if rng is not None else substream(seed, POLICY)

    def decide(self, state: DecisionState, frame: int) -> int:
        if frame == 1:
            return DETECT
        return TRACK if self.rng.random() < self.p else DETECT


class ParallelTrackDetect:
    """LTED-Paral: keep one detection in flight, track arrivals meanwhile.

    The event engine special-cases devices running this policy (``parallel``):
    a frame arriving while no detection is in flight is offered here and
    always detected; frames arriving during a detection are tracked on the
    device against the last completed keyframe.
    """

    name = "lted_paral"
    parallel = True

    def decide(self, state: DecisionState, frame: int) -> int:
        return DETECT


BASELINES = ("ltwod", "edwot", "lted_intv", "lted_dev", "lted_rand", "lted_paral")


def make_baseline(name: str, *, seed: int = 0, device: int = 0, interval: int = 15,
                  threshold: float = 10.0, p: float = 0.5):
    if name == "ltwod":
        return LocalTrackingOnly()
    if name == "edwot":
        return EdgeDetectionOnly()
    if name == "lted_intv":
        return FixedInterval(interval)
    if name == "lted_dev":
        return DeviationThreshold(threshold)
    if name == "lted_rand":
        return RandomChoice(p, rng=substream(seed, device, POLICY))
    if name == "lted_paral":
        return ParallelTrackDetect()
    raise ValueError(f"unknown baseline policy {name!r}")
