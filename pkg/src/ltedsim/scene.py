"""Synthetic traffic scene, parametric detector/tracker and wireless channel.

Stands in for the real video, Faster R-CNN and optical-flow tracker.  Every
random draw comes from a stream keyed by ``(seed, episode, device, frame,
purpose)`` so the order in which decisions are taken never changes what a
frame looks like.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import DETECTED, GROUND_TRUTH, TRACKED, BoundingBox, BoxSet

# purpose codes for substreams
CONDITIONS = 1
DETECTION = 2
TRACKING = 3
POLICY = 4
EXPLORATION = 5
REPLAY = 6
INIT = 7

# relative jitter draws are clipped to this many standard deviations
JITTER_CLIP = 3.0


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=keys)))


@dataclass
class SceneConfig:
    frame_width: float = 1280.0
    frame_height: float = 720.0
    num_objects: int = 16
    num_frames: int = 300
    box_width: tuple[float, float] = (60.0, 160.0)
    box_height: tuple[float, float] = (40.0, 100.0)
    speed: tuple[float, float] = (1.5, 4.5)  # px/frame, horizontal
    vertical_ratio: float = 0.05  # |vy| <= ratio * speed
    segment_frames: int = 60  # velocity redrawn every segment; 0 keeps it constant
    jitter_std: float = 0.3
    detector_noise_std: float = 2.0
    detector_miss_prob: float = 0.02
    tracker_drift_std: float = 0.3
    respawn: bool = True
    seed: int = 0
    # explicit layout for hand-built scenes; velocities then stay constant
    initial_boxes: list[tuple[float, float, float, float]] | None = None
    velocities: list[tuple[float, float]] | None = None

    def validate(self) -> None:
        if self.num_frames < 2:
            raise ValueError("num_frames must be at least 2")
        if self.frame_width <= 0 or self.frame_height <= 0:
            raise ValueError("frame dimensions must be positive")
        if self.detector_noise_std < 0 or self.tracker_drift_std < 0 or self.jitter_std < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not 0.0 <= self.detector_miss_prob < 1.0:
            raise ValueError("detector_miss_prob must lie in [0, 1)")
        if self.initial_boxes is None and self.num_objects < 1:
            raise ValueError("num_objects must be at least 1")
        if self.initial_boxes is not None:
            if self.velocities is not None and len(self.velocities) != len(self.initial_boxes):
                raise ValueError("velocities must match initial_boxes")
        if self.segment_frames < 0:
            raise ValueError("segment_frames must be non-negative")
        lo, hi = self.speed
        if lo < 0 or hi < lo:
            raise ValueError("speed range must satisfy 0 <= lo <= hi")


@dataclass(frozen=True)
class FrameTruth:
    frame_index: int
    boxes: BoxSet  # visible (clipped) ground truth
    positions: dict[int, BoundingBox] = field(default_factory=dict)  # unclipped


@dataclass
class ChannelConfig:
    uplink_rate_mean: float = 88.5e6  # bits/s
    downlink_rate_mean: float = 88.5e6
    rate_jitter: float = 0.05  # relative std per frame
    frame_size: float = 88.5e6 * 0.07  # bits, 0.07 s at the mean rate
    result_size: float = 88.5e6 * 0.001  # bits, 1 ms downlink
    detection_delay: float = 1.38  # s
    tracking_delay: float = 0.47  # s
    delay_jitter: float = 0.02  # relative std

    def validate(self) -> None:
        for name in ("uplink_rate_mean", "downlink_rate_mean", "frame_size", "result_size",
                     "detection_delay", "tracking_delay"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("rate_jitter", "delay_jitter"):
            v = getattr(self, name)
            if not 0 <= v * JITTER_CLIP < 1:
                raise ValueError(f"{name} must satisfy 0 <= 3*{name} < 1")

    def max_edge_handling(self) -> float:
        """Largest possible upload + detection + download time under clipped jitter."""
        up = self.frame_size / (self.uplink_rate_mean * (1 - JITTER_CLIP * self.rate_jitter))
        down = self.result_size / (self.downlink_rate_mean * (1 - JITTER_CLIP * self.rate_jitter))
        return up + self.detection_delay * (1 + JITTER_CLIP * self.delay_jitter) + down

    def max_tracking_delay(self) -> float:
        return self.tracking_delay * (1 + JITTER_CLIP * self.delay_jitter)

    def light_load_interval(self) -> float:
        """Capture interval (rounded up to the millisecond) that keeps every device queue empty."""
        need = max(self.max_edge_handling(), self.max_tracking_delay())
        return math.ceil(need * 1000.0 - 1e-6) / 1000.0


@dataclass(frozen=True)
class ChannelSample:
    uplink_delay: float
    downlink_delay: float
    uplink_rate: float
    downlink_rate: float


def _jitter(rng: np.random.Generator, rel_std: float) -> float:
    z = float(rng.standard_normal())
    return 1.0 + rel_std * min(JITTER_CLIP, max(-JITTER_CLIP, z))


def sample_channel(config: ChannelConfig, rng: np.random.Generator) -> ChannelSample:
    v_up = config.uplink_rate_mean * _jitter(rng, config.rate_jitter)
    v_down = config.downlink_rate_mean * _jitter(rng, config.rate_jitter)
    return ChannelSample(config.frame_size / v_up, config.result_size / v_down, v_up, v_down)


def sample_compute_delays(config: ChannelConfig, rng: np.random.Generator) -> tuple[float, float]:
    """Detection and tracking delay of one frame."""
    d_det = config.detection_delay * _jitter(rng, config.delay_jitter)
    d_trk = config.tracking_delay * _jitter(rng, config.delay_jitter)
    return d_det, d_trk


# -- scene generation ---------------------------------------------------------

@dataclass
class _Mover:
    ident: int
    cx: float
    cy: float
    w: float
    h: float
    vx: float
    vy: float


def _random_mover(rng, cfg: SceneConfig, ident: int, entering: bool) -> _Mover:
    w = rng.uniform(*cfg.box_width)
    h = rng.uniform(*cfg.box_height)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    speed = rng.uniform(*cfg.speed)
    vy = speed * rng.uniform(-cfg.vertical_ratio, cfg.vertical_ratio)
    cy = rng.uniform(h / 2, max(h / 2, cfg.frame_height - h / 2))
    if entering:
        cx = -w / 2 if direction > 0 else cfg.frame_width + w / 2
    else:
        cx = rng.uniform(0.0, cfg.frame_width)
    return _Mover(ident, cx, cy, w, h, direction * speed, vy)


def _off_screen(m: _Mover, cfg: SceneConfig) -> bool:
    if m.vx > 0 and m.cx - m.w / 2 >= cfg.frame_width:
        return True
    if m.vx < 0 and m.cx + m.w / 2 <= 0:
        return True
    return m.cy + m.h / 2 <= 0 or m.cy - m.h / 2 >= cfg.frame_height


def generate_scene(config: SceneConfig) -> list[FrameTruth]:
    """Ground-truth boxes for frames 1..F.

    Vehicles cross the frame horizontally with piecewise-constant velocity;
    a vehicle that leaves is replaced by a new one (new identity) entering
    from the opposite side.  Position jitter is added per frame and does not
    accumulate.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    explicit = config.initial_boxes is not None

    if explicit:
        movers = []
        for i, (x0, y0, x1, y1) in enumerate(config.initial_boxes):
            vx, vy = config.velocities[i] if config.velocities else (0.0, 0.0)
            movers.append(_Mover(i, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0, vx, vy))
    else:
        movers = [_random_mover(rng, config, i, entering=False) for i in range(config.num_objects)]
    next_id = len(movers)

    frames = []
    for f in range(1, config.num_frames + 1):
        positions = {}
        visible, ids = [], []
        for m in movers:
            jx, jy = (rng.normal(0.0, config.jitter_std, 2) if config.jitter_std > 0 else (0.0, 0.0))
            cx, cy = m.cx + jx, m.cy + jy
            box = BoundingBox(cx - m.w / 2, cy - m.h / 2, cx + m.w / 2, cy + m.h / 2)
            positions[m.ident] = box
            clip = box.clipped(config.frame_width, config.frame_height)
            if clip is not None:
                visible.append(clip)
                ids.append(m.ident)
        frames.append(FrameTruth(f, BoxSet(tuple(visible), tuple(ids), GROUND_TRUTH), positions))

        for j, m in enumerate(movers):
            m.cx += m.vx
            m.cy += m.vy
            if not explicit and config.segment_frames and f % config.segment_frames == 0:
                speed = rng.uniform(*config.speed)
                m.vx = math.copysign(speed, m.vx)
                m.vy = speed * rng.uniform(-config.vertical_ratio, config.vertical_ratio)
            if config.respawn and _off_screen(m, config):
                if explicit:
                    movers[j] = _Mover(next_id, m.cx - math.copysign(config.frame_width + m.w, m.vx),
                                       m.cy, m.w, m.h, m.vx, m.vy)
                else:
                    movers[j] = _random_mover(rng, config, next_id, entering=True)
                next_id += 1
    return frames


def dump_scene(frames: list[FrameTruth], path) -> None:
    """Write one JSON record per frame (line-delimited)."""
    with open(path, "w") as fh:
        for fr in frames:
            rec = {
                "frame": fr.frame_index,
                "objects": [{"id": i, "box": list(b.as_tuple())} for b, i in zip(fr.boxes.boxes, fr.boxes.ids)],
            }
            fh.write(json.dumps(rec) + "\n")


# -- detector / tracker models -----------------------------------------------

def _noisy_box(box: BoundingBox, noise, cfg: SceneConfig) -> BoundingBox | None:
    x0, y0, x1, y1 = (box.x_min + noise[0], box.y_min + noise[1], box.x_max + noise[2], box.y_max + noise[3])
    b = BoundingBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
    return b.clipped(cfg.frame_width, cfg.frame_height)


def simulate_detection(truth: FrameTruth, rng: np.random.Generator, config: SceneConfig) -> BoxSet:
    """Each object is missed with probability p_miss, else its corners get Gaussian noise."""
    n = len(truth.boxes)
    miss = rng.random(n)
    noise = rng.standard_normal((n, 4)) * config.detector_noise_std
    boxes, ids = [], []
    for j, (box, ident) in enumerate(zip(truth.boxes.boxes, truth.boxes.ids)):
        if miss[j] < config.detector_miss_prob:
            continue
        nb = _noisy_box(box, noise[j], config)
        if nb is not None:
            boxes.append(nb)
            ids.append(ident)
    return BoxSet(tuple(boxes), tuple(ids), DETECTED)


def simulate_tracking(keyframe_boxes: BoxSet, truth_keyframe: FrameTruth, truth_now: FrameTruth,
                      frames_since_keyframe: int, rng: np.random.Generator,
                      config: SceneConfig) -> BoxSet:
    """Propagate keyframe boxes by each object's true motion plus random-walk drift.

    Objects missed at the keyframe stay missed, objects that left the scene
    are dropped, and new arrivals are never picked up.
    """
    if len(keyframe_boxes) == 0:
        raise ValueError("tracking needs a non-empty keyframe detection")
    if frames_since_keyframe < 0:
        raise ValueError("frames_since_keyframe must be non-negative")
    if frames_since_keyframe == 0:
        return BoxSet(keyframe_boxes.boxes, keyframe_boxes.ids, TRACKED)

    n = len(keyframe_boxes)
    drift = rng.standard_normal((n, 4)) * (config.tracker_drift_std * math.sqrt(frames_since_keyframe))
    boxes, ids = [], []
    for j, (box, ident) in enumerate(zip(keyframe_boxes.boxes, keyframe_boxes.ids)):
        then = truth_keyframe.positions.get(ident)
        now = truth_now.positions.get(ident)
        if then is None or now is None:
            continue
        (cx0, cy0), (cx1, cy1) = then.center, now.center
        nb = _noisy_box(box.translated(cx1 - cx0, cy1 - cy0), drift[j], config)
        if nb is not None:
            boxes.append(nb)
            ids.append(ident)
    return BoxSet(tuple(boxes), tuple(ids), TRACKED)


def pixel_deviation(truth_now: FrameTruth, truth_keyframe: FrameTruth) -> tuple[float, float]:
    """Mean absolute x/y offset of box corners between the keyframe and now.

    Only objects visible in both frames count; with none in common the
    deviation is (0, 0).
    """
    dx_sum = dy_sum = 0.0
    count = 0
    for box, ident in zip(truth_now.boxes.boxes, truth_now.boxes.ids):
        old = truth_keyframe.boxes.get(ident)
        if old is None:
            continue
        for (x1, y1), (x0, y0) in zip(box.corners(), old.corners()):
            dx_sum += abs(x1 - x0)
            dy_sum += abs(y1 - y0)
            count += 1
    if count == 0:
        return 0.0, 0.0
    return dx_sum / count, dy_sum / count
