"""Discrete-event engine for K device queues sharing one edge detector.

Each device processes its frames one at a time (local FIFO queue).  A frame
is either tracked locally or uploaded, queued in the global FIFO edge queue,
detected, and its result downloaded.  Policies are consulted when a frame
reaches the head of its device queue, i.e. at ``max(T_{k,f-1}, tau_{k,f})``.
"""

from __future__ import annotations

import csv
import heapq
import io
from dataclasses import dataclass, field
from typing import Protocol

from .geometry import BoxSet, mean_iou
from .scene import (CONDITIONS, DETECTION, TRACKING, ChannelConfig, ChannelSample, FrameTruth,
                    SceneConfig, generate_scene, pixel_deviation, sample_channel,
                    sample_compute_delays, simulate_detection, simulate_tracking, substream)

EPS = 1e-9

TIMELINE_COLUMNS = ["device", "frame", "action", "tau", "tau0", "tT", "tD", "T",
                    "w", "w0", "H", "W", "A", "R"]

# event priorities at equal times: a finishing detection frees the server
# before new arrivals are queued, and decisions see both
_DETECT_DONE, _EDGE_ARRIVE, _RESULT, _FRAME_ARRIVE, _DECIDE = range(5)


def later(a: float, b: float) -> float:
    """max(a, b) with ties within EPS resolved towards ``b``."""
    return b if a <= b + EPS else a


def _key(t: float) -> int:
    return round(t / EPS)


@dataclass(frozen=True)
class Segment:
    """Frames ``start..end`` (inclusive) captured with one (interval, alpha, beta)."""

    start: int
    end: int
    capture_interval: float
    alpha: float
    beta: float


@dataclass
class DeviceConfig:
    device_id: int
    capture_interval: float
    alpha: float
    beta: float
    num_frames: int = 300
    schedule: list[Segment] | None = None

    def segments(self) -> list[Segment]:
        if self.schedule:
            return list(self.schedule)
        return [Segment(1, self.num_frames, self.capture_interval, self.alpha, self.beta)]

    def validate(self, channel: ChannelConfig | None = None) -> None:
        if self.num_frames < 1:
            raise ValueError(f"device {self.device_id}: num_frames must be >= 1")
        expected = 1
        for seg in self.segments():
            if seg.start != expected or seg.end < seg.start:
                raise ValueError(f"device {self.device_id}: schedule segments must partition 1..F")
            expected = seg.end + 1
            if seg.alpha <= 0 or seg.beta <= 0:
                raise ValueError(f"device {self.device_id}: alpha and beta must be positive")
            if seg.capture_interval <= 0:
                raise ValueError(f"device {self.device_id}: capture interval must be positive")
            if channel is not None and seg.capture_interval + EPS < channel.tracking_delay:
                raise ValueError(
                    f"device {self.device_id}: capture interval {seg.capture_interval} is below the "
                    f"tracking delay {channel.tracking_delay}; queues would be unstable")
        if expected != self.num_frames + 1:
            raise ValueError(f"device {self.device_id}: schedule segments must partition 1..F")

    def frame_params(self) -> list[tuple[float, float, float]]:
        """(capture interval, alpha, beta) for frames 1..F, index 0 unused."""
        out = [(0.0, 0.0, 0.0)]
        for seg in self.segments():
            out.extend([(seg.capture_interval, seg.alpha, seg.beta)] * (seg.end - seg.start + 1))
        return out

    def arrival_times(self) -> list[float]:
        """tau_{k,f} for f = 1..F (index 0 unused); (f-1)*interval within a segment."""
        taus = [0.0] * (self.num_frames + 1)
        base = 0.0
        for seg in self.segments():
            for f in range(seg.start, seg.end + 1):
                taus[f] = base + (f - seg.start) * seg.capture_interval
            base = base + (seg.end - seg.start + 1) * seg.capture_interval
        return taus


@dataclass
class FrameTimeline:
    device: int
    frame: int
    action: int
    tau: float
    tau0: float | None = None
    tT: float | None = None
    tD: float | None = None
    T: float | None = None
    w: float | None = None
    w0: float | None = None
    H: float | None = None
    W: float | None = None
    A: float | None = None
    R: float | None = None
    # per-frame conditions
    d_up: float = 0.0
    d_down: float = 0.0
    d_det: float = 0.0
    d_trk: float = 0.0
    miou: float | None = None
    alpha: float = 0.0
    beta: float = 0.0
    decision_time: float | None = None
    keyframe: int | None = None

    def resolved(self) -> bool:
        return self.R is not None

    def row(self) -> list:
        return [getattr(self, c) for c in TIMELINE_COLUMNS]


@dataclass(frozen=True)
class DecisionState:
    o_x: float
    o_y: float
    finv: int
    qlen: int
    v_up: float
    v_down: float
    edge_qlen: int | None = None


@dataclass(frozen=True)
class DecisionPoint:
    device: int
    frame: int
    decision_time: float
    state: DecisionState


class Policy(Protocol):
    def decide(self, state: DecisionState, frame: int) -> int: ...


# -- delay calculus -------------------------------------------------------------

def waiting_local(prev_completion: float | None, arrival: float, f: int) -> float:
    if f < 1:
        raise ValueError("frame index starts at 1")
    if f == 1:
        return 0.0
    return later(prev_completion, arrival) - arrival


def tracking_completion(prev_completion: float, arrival: float, d_track: float, f: int) -> float:
    if f < 2:
        raise ValueError("frame 1 has no keyframe and must be detected at the edge")
    return later(prev_completion, arrival) + d_track


def edge_arrival(prev_completion: float | None, arrival: float, d_up: float, f: int) -> float:
    if f == 1:
        return d_up
    return later(prev_completion, arrival) + d_up


def detection_completion(prev_detection: float | None, tau0: float, d_det: float) -> tuple[float, float]:
    """(t^D, w^0) of the frame at the head of the edge queue.

    ``prev_detection`` is the completion time of the previous frame served
    by the edge, or None for the very first one.
    """
    if prev_detection is None:
        return tau0 + d_det, 0.0
    start = later(prev_detection, tau0)
    return start + d_det, start - tau0


def frame_metrics(tl: FrameTimeline, alpha: float, beta: float) -> tuple[float, float, float, float]:
    """Accuracy, handling delay, waiting delay and reward of a resolved frame."""
    if tl.miou is None or tl.w is None:
        raise RuntimeError(f"frame ({tl.device}, {tl.frame}) is not resolved")
    if tl.action == 0:
        if tl.w0 is None:
            raise RuntimeError(f"frame ({tl.device}, {tl.frame}) has no edge waiting time")
        handling = tl.d_up + tl.d_det + tl.d_down
        waiting = tl.w + tl.w0
    else:
        handling = tl.d_trk
        waiting = tl.w
    accuracy = tl.miou
    return accuracy, handling, waiting, accuracy - alpha * handling - beta * waiting


class EdgeQueue:
    """FIFO edge queue Q_0 with a single non-preemptive detector."""

    def __init__(self):
        self.pending: list[tuple[int, int, int, float]] = []  # heap of (tau0 key, k, f, tau0)
        self.in_service: tuple[int, int] | None = None
        self.busy_until: float | None = None  # t^D of the last frame taken into service
        self._seen: set[tuple[int, int]] = set()

    def __len__(self) -> int:
        return len(self.pending) + (self.in_service is not None)

    def enqueue(self, k: int, f: int, tau0: float) -> None:
        if (k, f) in self._seen:
            raise RuntimeError(f"frame ({k}, {f}) enqueued twice")
        self._seen.add((k, f))
        heapq.heappush(self.pending, (_key(tau0), k, f, tau0))

    def head(self) -> tuple[int, int, float] | None:
        if not self.pending:
            return None
        _, k, f, tau0 = self.pending[0]
        return k, f, tau0

    def start_next(self, k: int, f: int, d_det: float) -> tuple[float, float]:
        """Take frame (k, f) into service; it must be the FIFO head."""
        head = self.head()
        if head is None or head[:2] != (k, f):
            raise RuntimeError(f"frame ({k}, {f}) is not at the head of the edge queue")
        if self.in_service is not None:
            raise RuntimeError("detector already busy")
        _, _, _, tau0 = heapq.heappop(self.pending)
        t_det, w0 = detection_completion(self.busy_until, tau0, d_det)
        self.busy_until = t_det
        self.in_service = (k, f)
        return t_det, w0

    def finish(self) -> None:
        self.in_service = None


def enqueue_edge(queue: EdgeQueue, k: int, f: int, tau0: float) -> EdgeQueue:
    queue.enqueue(k, f, tau0)
    return queue


# -- the world -----------------------------------------------------------------

@dataclass
class _Device:
    cfg: DeviceConfig
    scene: list[FrameTruth]
    taus: list[float]
    params: list[tuple[float, float, float]]
    conditions: list[tuple[ChannelSample, float, float] | None]
    timelines: list[FrameTimeline | None]
    parallel: bool = False
    keyframe: int | None = None
    keyframe_boxes: BoxSet | None = None
    # parallel-mode bookkeeping
    detection_in_flight: bool = False
    tracker_free: float = 0.0
    held: list[int] = field(default_factory=list)
    pending_boxes: BoxSet | None = None


class EdgeWorld:
    """One episode of K devices sharing the edge, driven step by step.

    ``next_decision()`` advances the event clock to the next frame that
    needs an action and returns its :class:`DecisionPoint`; ``apply()``
    commits the action.  ``None`` from ``next_decision()`` means every frame
    has been resolved.
    """

    def __init__(self, devices: list[DeviceConfig], channel: ChannelConfig,
                 scene_config: SceneConfig, scenes: list[list[FrameTruth]] | None = None,
                 seed: int = 0, episode: int = 0, multi_device: bool | None = None,
                 parallel: set[int] | None = None):
        channel.validate()
        scene_config.validate()
        self.channel = channel
        self.scene_config = scene_config
        self.seed = seed
        self.episode = episode
        self.multi_device = len(devices) > 1 if multi_device is None else multi_device
        if scenes is None:
            shared = generate_scene(scene_config)
            scenes = [shared] * len(devices)
        ids = [d.device_id for d in devices]
        if len(set(ids)) != len(ids):
            raise ValueError("device ids must be unique")
        parallel = parallel or set()

        self.devices: dict[int, _Device] = {}
        for cfg, scene in zip(devices, scenes):
            cfg.validate(channel)
            if len(scene) < cfg.num_frames:
                raise ValueError(f"device {cfg.device_id}: scene shorter than num_frames")
            F = cfg.num_frames
            self.devices[cfg.device_id] = _Device(
                cfg=cfg, scene=scene, taus=cfg.arrival_times(), params=cfg.frame_params(),
                conditions=[None] * (F + 1), timelines=[None] * (F + 1),
                parallel=cfg.device_id in parallel)

        self.edge = EdgeQueue()
        self._events: list[tuple] = []
        self._seq = 0
        self._pending: DecisionPoint | None = None
        for k, dev in self.devices.items():
            if dev.parallel:
                for f in range(1, dev.cfg.num_frames + 1):
                    self._push(dev.taus[f], _FRAME_ARRIVE, k, f)
            else:
                self._push(0.0, _DECIDE, k, 1)

    # -- helpers

    def _push(self, t: float, kind: int, k: int, f: int) -> None:
        heapq.heappush(self._events, (_key(t), kind, k, f, t))

    def conditions(self, k: int, f: int) -> tuple[ChannelSample, float, float]:
        dev = self.devices[k]
        c = dev.conditions[f]
        if c is None:
            rng = substream(self.seed, self.episode, k, f, CONDITIONS)
            ch = sample_channel(self.channel, rng)
            d_det, d_trk = sample_compute_delays(self.channel, rng)
            c = dev.conditions[f] = (ch, d_det, d_trk)
        return c

    def _new_timeline(self, k: int, f: int, action: int) -> FrameTimeline:
        dev = self.devices[k]
        ch, d_det, d_trk = self.conditions(k, f)
        _, alpha, beta = dev.params[f]
        tl = FrameTimeline(device=k, frame=f, action=action, tau=dev.taus[f],
                           d_up=ch.uplink_delay, d_down=ch.downlink_delay,
                           d_det=d_det, d_trk=d_trk, alpha=alpha, beta=beta)
        dev.timelines[f] = tl
        return tl

    def _finalize(self, tl: FrameTimeline) -> None:
        tl.A, tl.H, tl.W, tl.R = frame_metrics(tl, tl.alpha, tl.beta)

    def _detect_accuracy(self, k: int, f: int) -> tuple[float, BoxSet]:
        dev = self.devices[k]
        truth = dev.scene[f - 1]
        boxes = simulate_detection(truth, substream(self.seed, self.episode, k, f, DETECTION),
                                   self.scene_config)
        return _score(boxes, truth), boxes

    def _track_accuracy(self, k: int, f: int, keyframe: int, key_boxes: BoxSet) -> float:
        dev = self.devices[k]
        truth = dev.scene[f - 1]
        if len(key_boxes) == 0:
            return 0.0
        boxes = simulate_tracking(key_boxes, dev.scene[keyframe - 1], truth, f - keyframe,
                                  substream(self.seed, self.episode, k, f, TRACKING),
                                  self.scene_config)
        return _score(boxes, truth)

    def observe(self, k: int, f: int, t: float) -> DecisionState:
        dev = self.devices[k]
        ch, _, _ = self.conditions(k, f)
        if dev.keyframe is None:
            o_x = o_y = 0.0
            finv = 0
        else:
            o_x, o_y = pixel_deviation(dev.scene[f - 1], dev.scene[dev.keyframe - 1])
            finv = f - dev.keyframe
        qlen = 0
        for g in range(f + 1, dev.cfg.num_frames + 1):
            if dev.taus[g] > t + EPS:
                break
            qlen += 1
        edge_qlen = len(self.edge) if self.multi_device else None
        return DecisionState(o_x, o_y, finv, qlen, ch.uplink_rate, ch.downlink_rate, edge_qlen)

    # -- stepping

    def next_decision(self) -> DecisionPoint | None:
        if self._pending is not None:
            return self._pending
        while self._events:
            _, kind, k, f, t = heapq.heappop(self._events)
            if kind == _DECIDE:
                dp = DecisionPoint(k, f, t, self.observe(k, f, t))
                if f == 1:
                    self._commit(dp, 0)
                    continue
                self._pending = dp
                return dp
            if kind == _EDGE_ARRIVE:
                self.edge.enqueue(k, f, t)
                self._serve_edge(t)
            elif kind == _DETECT_DONE:
                self._detect_done(k, f, t)
                self._serve_edge(t)
            elif kind == _RESULT:
                self._parallel_result(k, f, t)
            elif kind == _FRAME_ARRIVE:
                self._parallel_arrive(k, f, t)
        return None

    def apply(self, action: int) -> FrameTimeline:
        dp = self._pending
        if dp is None:
            raise RuntimeError("no decision pending")
        if action not in (0, 1) or isinstance(action, bool):
            raise ValueError(f"policy returned {action!r}; actions are 0 (detect) or 1 (track)")
        self._pending = None
        return self._commit(dp, int(action))

    def _commit(self, dp: DecisionPoint, action: int) -> FrameTimeline:
        k, f, t = dp.device, dp.frame, dp.decision_time
        dev = self.devices[k]
        tl = self._new_timeline(k, f, action)
        tl.decision_time = t
        prev_T = dev.timelines[f - 1].T if f > 1 else None
        tl.w = waiting_local(prev_T, tl.tau, f)
        if action == 1:
            if dev.keyframe is None:
                raise RuntimeError("tracking requested before any keyframe")
            tl.tT = tracking_completion(prev_T, tl.tau, tl.d_trk, f)
            tl.T = tl.tT
            tl.keyframe = dev.keyframe
            tl.miou = self._track_accuracy(k, f, dev.keyframe, dev.keyframe_boxes)
            self._finalize(tl)
            self._schedule_next(k, f, tl.T)
        else:
            tl.tau0 = edge_arrival(prev_T, tl.tau, tl.d_up, f)
            self._push(tl.tau0, _EDGE_ARRIVE, k, f)
        return tl

    def _schedule_next(self, k: int, f: int, completion: float) -> None:
        dev = self.devices[k]
        if f < dev.cfg.num_frames:
            self._push(later(completion, dev.taus[f + 1]), _DECIDE, k, f + 1)

    def _serve_edge(self, t: float) -> None:
        if self.edge.in_service is not None:
            return
        head = self.edge.head()
        if head is None:
            return
        k, f, _ = head
        tl = self.devices[k].timelines[f]
        tl.tD, tl.w0 = self.edge.start_next(k, f, tl.d_det)
        self._push(tl.tD, _DETECT_DONE, k, f)

    def _detect_done(self, k: int, f: int, t: float) -> None:
        self.edge.finish()
        dev = self.devices[k]
        tl = dev.timelines[f]
        tl.T = tl.tD + tl.d_down
        tl.miou, boxes = self._detect_accuracy(k, f)
        self._finalize(tl)
        if dev.parallel:
            self._push(tl.T, _RESULT, k, f)
            dev.pending_boxes = boxes
        else:
            dev.keyframe, dev.keyframe_boxes = f, boxes
            self._schedule_next(k, f, tl.T)

    # -- parallel tracking + detection (LTED-Paral)

    def _parallel_arrive(self, k: int, f: int, t: float) -> None:
        dev = self.devices[k]
        if not dev.detection_in_flight:
            tl = self._new_timeline(k, f, 0)
            tl.decision_time = t
            tl.w = 0.0
            tl.tau0 = t + tl.d_up
            dev.detection_in_flight = True
            self._push(tl.tau0, _EDGE_ARRIVE, k, f)
        elif dev.keyframe is None:
            dev.held.append(f)
        else:
            self._parallel_track(k, f, t)

    def _parallel_track(self, k: int, f: int, now: float) -> None:
        dev = self.devices[k]
        tl = self._new_timeline(k, f, 1)
        start = later(dev.tracker_free, later(now, tl.tau))
        tl.decision_time = start
        tl.w = start - tl.tau
        tl.tT = tl.T = start + tl.d_trk
        dev.tracker_free = tl.tT
        tl.keyframe = dev.keyframe
        tl.miou = self._track_accuracy(k, f, dev.keyframe, dev.keyframe_boxes)
        self._finalize(tl)

    def _parallel_result(self, k: int, f: int, t: float) -> None:
        dev = self.devices[k]
        dev.detection_in_flight = False
        dev.keyframe, dev.keyframe_boxes = f, dev.pending_boxes
        held, dev.held = dev.held, []
        for g in held:
            self._parallel_track(k, g, t)

    # -- results

    def timelines(self) -> list[FrameTimeline]:
        out = []
        for k in sorted(self.devices):
            out.extend(tl for tl in self.devices[k].timelines[1:] if tl is not None)
        return out

    def done(self) -> bool:
        return self._pending is None and not self._events


def _score(boxes: BoxSet, truth: FrameTruth) -> float:
    if len(truth.boxes) == 0:
        return 0.0
    return float(mean_iou(boxes, truth.boxes))


def run_episode(devices: list[DeviceConfig], channel: ChannelConfig, scene_config: SceneConfig,
                policies: dict[int, Policy], scenes: list[list[FrameTruth]] | None = None,
                seed: int = 0, episode: int = 0, multi_device: bool | None = None) -> list[FrameTimeline]:
    """Simulate one episode with a fixed policy per device; timelines sorted by (device, frame)."""
    parallel = {k for k, p in policies.items() if getattr(p, "parallel", False)}
    world = EdgeWorld(devices, channel, scene_config, scenes, seed=seed, episode=episode,
                      multi_device=multi_device, parallel=parallel)
    while (dp := world.next_decision()) is not None:
        world.apply(policies[dp.device].decide(dp.state, dp.frame))
    return world.timelines()


def objective(timelines: list[FrameTimeline]) -> float:
    """(1/F) * sum of rewards over all devices and frames."""
    if not timelines:
        return 0.0
    per_device: dict[int, int] = {}
    for tl in timelines:
        per_device[tl.device] = max(per_device.get(tl.device, 0), tl.frame)
    F = max(per_device.values())
    return sum(tl.R for tl in timelines) / F


def totals(timelines: list[FrameTimeline]) -> dict[str, float]:
    return {
        "A": sum(tl.A for tl in timelines),
        "H": sum(tl.H for tl in timelines),
        "W": sum(tl.W for tl in timelines),
        "R": sum(tl.R for tl in timelines),
    }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def timelines_to_csv(timelines: list[FrameTimeline], path=None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TIMELINE_COLUMNS)
    for tl in timelines:
        writer.writerow([_fmt(v) for v in tl.row()])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_timeline_csv(path) -> list[dict[str, float | int | None]]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for k, v in rec.items():
                if v == "":
                    row[k] = None
                elif k in ("device", "frame", "action"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
    return rows

