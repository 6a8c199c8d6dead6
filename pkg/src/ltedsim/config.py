"""YAML experiment configuration with line-numbered diagnostics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from .dqn import TrainerConfig
from .federated import FederationConfig
from .policies import BASELINES
from .scene import ChannelConfig, SceneConfig
from .timing import EPS, DeviceConfig, Segment

ADA = "lted_ada"
POLICY_NAMES = BASELINES + (ADA,)
LIGHT = "light"
# beta has no effect when the device queue never holds a frame
LIGHT_LOAD_BETA = 1.0


class ConfigError(Exception):
    def __init__(self, diagnostics: list[Diagnostic]):
        super().__init__("\n".join(str(d) for d in diagnostics))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Diagnostic:
    source: str
    line: int | None
    path: str
    message: str

    def __str__(self) -> str:
        where = f"{self.source}:{self.line}" if self.line else self.source
        return f"{where}: {self.path or '<root>'}: {self.message}"


@dataclass
class ExperimentConfig:
    scenario: str
    devices: list[DeviceConfig]
    scene: SceneConfig
    channel: ChannelConfig
    trainer: TrainerConfig
    federation: FederationConfig | None = None
    policies: list[str] = field(default_factory=lambda: list(BASELINES))
    output: str = "out"
    seed: int = 0
    interval: int = 15  # LTED-IntV
    threshold: float = 10.0  # LTED-DeV
    track_prob: float = 0.5  # LTED-Rand
    checkpoint: str | None = None

    @property
    def num_frames(self) -> int:
        return self.devices[0].num_frames


def _line_map(node, path: str, out: dict[str, int]) -> None:
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            _line_map(value, f"{path}.{key.value}" if path else str(key.value), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, value in enumerate(node.value):
            _line_map(value, f"{path}[{i}]", out)


class _Checker:
    def __init__(self, source: str, lines: dict[str, int]):
        self.source = source
        self.lines = lines
        self.diags: list[Diagnostic] = []

    def error(self, path: str, message: str) -> None:
        probe = path
        while probe and probe not in self.lines:
            probe = probe.rpartition(".")[0] if "." in probe else ""
        self.diags.append(Diagnostic(self.source, self.lines.get(probe), path, message))

    def mapping(self, value, path: str) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.error(path, "expected a mapping")
            return {}
        return value

    def number(self, value, path: str, integer: bool = False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.error(path, "expected an integer" if integer else "expected a number")
            return None
        if integer and not isinstance(value, int):
            self.error(path, "expected an integer")
            return None
        return value

    def section(self, cls, raw, path: str, skip=()):
        """Build a dataclass from a mapping, checking keys and scalar types against the defaults."""
        data = self.mapping(raw, path)
        defaults = cls()
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)} - set(skip)
        for key, value in data.items():
            p = f"{path}.{key}"
            if key not in names:
                self.error(p, f"unknown field (expected one of: {', '.join(sorted(names))})")
                continue
            default = getattr(defaults, key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    self.error(p, "expected true or false")
                    continue
            elif isinstance(default, tuple):
                if (not isinstance(value, list) or len(value) != len(default)
                        or any(self.number(v, f"{p}[{i}]") is None for i, v in enumerate(value))):
                    self.error(p, f"expected a list of {len(default)} numbers")
                    continue
                value = tuple(float(v) for v in value)
            elif isinstance(default, int):
                if self.number(value, p, integer=True) is None:
                    continue
            elif isinstance(default, float):
                if self.number(value, p) is None:
                    continue
                value = float(value)
            elif value is not None and default is None and key in ("initial_boxes", "velocities"):
                if not isinstance(value, list):
                    self.error(p, "expected a list")
                    continue
                value = [tuple(float(x) for x in v) for v in value]
            kwargs[key] = value
        try:
            obj = cls(**kwargs)
            if hasattr(obj, "validate"):
                obj.validate()
        except (ValueError, TypeError) as exc:
            self.error(path, str(exc))
            return None
        return obj


def _resolve_interval(chk: _Checker, value, path: str, channel: ChannelConfig):
    if value == LIGHT:
        return channel.light_load_interval(), True
    if chk.number(value, path) is None:
        return None, False
    value = float(value)
    if value <= 0:
        chk.error(path, "capture interval must be positive")
        return None, False
    if value + EPS < channel.tracking_delay:
        chk.error(path, f"capture interval {value} is below the local tracking delay "
                        f"{channel.tracking_delay}; the device queue would grow without bound")
        return None, False
    return value, False


def _triple(chk: _Checker, raw: dict, path: str, channel: ChannelConfig, segment: bool = False):
    known = {"interval", "alpha", "beta"} | ({"start", "end"} if segment else set())
    for key in raw:
        if key not in known:
            chk.error(f"{path}.{key}", "unknown field")
    if "interval" not in raw:
        chk.error(f"{path}.interval", "missing capture interval (seconds or 'light')")
        return None
    interval, light = _resolve_interval(chk, raw["interval"], f"{path}.interval", channel)
    alpha = raw.get("alpha")
    if alpha is None:
        chk.error(f"{path}.alpha", "missing alpha")
    elif chk.number(alpha, f"{path}.alpha") is not None and alpha <= 0:
        chk.error(f"{path}.alpha", "alpha must be positive")
    beta = raw.get("beta")
    if beta is None:
        if light:
            beta = LIGHT_LOAD_BETA
        else:
            chk.error(f"{path}.beta", "beta is required for heavy-load devices")
    elif chk.number(beta, f"{path}.beta") is not None and beta <= 0:
        chk.error(f"{path}.beta", "beta must be positive")
    if interval is None or not isinstance(alpha, (int, float)) or not isinstance(beta, (int, float)):
        return None
    return interval, float(alpha), float(beta)


def _device(chk: _Checker, raw, path: str, k: int, frames: int, channel: ChannelConfig):
    data = chk.mapping(raw, path)
    if "frames" in data:
        if chk.number(data["frames"], f"{path}.frames", integer=True) is None:
            return None
        frames = data["frames"]
    if "schedule" in data:
        for key in data:
            if key not in ("schedule", "frames"):
                chk.error(f"{path}.{key}", "not allowed next to a schedule")
        segs = data["schedule"]
        if not isinstance(segs, list) or not segs:
            chk.error(f"{path}.schedule", "expected a non-empty list of segments")
            return None
        segments = []
        for i, seg in enumerate(segs):
            sp = f"{path}.schedule[{i}]"
            seg = chk.mapping(seg, sp)
            bounds = [chk.number(seg.get(b), f"{sp}.{b}", integer=True) for b in ("start", "end")]
            trip = _triple(chk, seg, sp, channel, segment=True)
            if trip is None or None in bounds:
                return None
            segments.append(Segment(bounds[0], bounds[1], *trip))
        dev = DeviceConfig(k, segments[0].capture_interval, segments[0].alpha, segments[0].beta,
                           num_frames=frames, schedule=segments)
    else:
        trip = _triple(chk, {key: v for key, v in data.items() if key != "frames"}, path, channel)
        if trip is None:
            return None
        dev = DeviceConfig(k, *trip, num_frames=frames)
    try:
        dev.validate(channel)
    except ValueError as exc:
        chk.error(path, str(exc))
        return None
    return dev


TOP_LEVEL = {"scenario", "seed", "output", "frames", "devices", "scene", "channel", "trainer",
             "federation", "policies", "baselines", "checkpoint"}


def parse_config(text: str, source: str = "<config>") -> tuple[ExperimentConfig | None, list[Diagnostic]]:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        return None, [Diagnostic(source, line, "", f"YAML syntax error: {getattr(exc, 'problem', exc)}")]
    lines: dict[str, int] = {}
    if node is not None:
        _line_map(node, "", lines)
    chk = _Checker(source, lines)
    data = chk.mapping(data, "")
    for key in data:
        if key not in TOP_LEVEL:
            chk.error(key, "unknown top-level field")

    seed = data.get("seed", 0)
    if chk.number(seed, "seed", integer=True) is None:
        seed = 0
    elif seed < 0:
        chk.error("seed", "seed must be non-negative")
    frames = data.get("frames", 300)
    if chk.number(frames, "frames", integer=True) is None:
        frames = 300

    channel = chk.section(ChannelConfig, data.get("channel"), "channel") or ChannelConfig()
    scene_raw = dict(chk.mapping(data.get("scene"), "scene"))
    scene_raw.setdefault("num_frames", frames)
    scene = chk.section(SceneConfig, scene_raw, "scene")
    trainer = chk.section(TrainerConfig, data.get("trainer"), "trainer")

    devices = []
    raw_devices = data.get("devices")
    if not isinstance(raw_devices, list) or not raw_devices:
        chk.error("devices", "expected a non-empty list of devices")
    else:
        for k, raw in enumerate(raw_devices):
            dev = _device(chk, raw, f"devices[{k}]", k, frames, channel)
            if dev is not None:
                devices.append(dev)
                if scene is not None and dev.num_frames > scene.num_frames:
                    chk.error(f"devices[{k}]", f"device has {dev.num_frames} frames but the scene only "
                                               f"{scene.num_frames}")

    federation = None
    if "federation" in data:
        fed = chk.mapping(data["federation"], "federation")
        for key in fed:
            if key != "kappa3":
                chk.error(f"federation.{key}", "unknown field")
        kappa3 = fed.get("kappa3", 300)
        if kappa3 is not None and chk.number(kappa3, "federation.kappa3", integer=True) is not None:
            if kappa3 < 1:
                chk.error("federation.kappa3", "kappa3 must be at least 1 (null disables synchronisation)")
        federation = FederationConfig(devices, kappa3=kappa3, trainer=trainer or TrainerConfig(), seed=seed)

    policies = data.get("policies", list(BASELINES))
    if not isinstance(policies, list) or not all(isinstance(p, str) for p in policies):
        chk.error("policies", "expected a list of policy names")
        policies = []
    for i, name in enumerate(policies):
        if name not in POLICY_NAMES:
            chk.error(f"policies[{i}]", f"unknown policy {name!r} (known: {', '.join(POLICY_NAMES)})")

    base = chk.mapping(data.get("baselines"), "baselines")
    opts = {"interval": 15, "threshold": 10.0, "track_prob": 0.5}
    for key, value in base.items():
        if key not in opts:
            chk.error(f"baselines.{key}", "unknown field")
        elif chk.number(value, f"baselines.{key}", integer=key == "interval") is not None:
            opts[key] = value
    if opts["interval"] < 1:
        chk.error("baselines.interval", "interval must be at least 1")
    if not 0 <= opts["track_prob"] <= 1:
        chk.error("baselines.track_prob", "track_prob must lie in [0, 1]")

    for key in ("scenario", "output", "checkpoint"):
        if key in data and data[key] is not None and not isinstance(data[key], str):
            chk.error(key, "expected a string")

    if chk.diags:
        return None, chk.diags
    cfg = ExperimentConfig(
        scenario=data.get("scenario", "experiment"), devices=devices, scene=scene, channel=channel,
        trainer=trainer, federation=federation, policies=list(policies),
        output=data.get("output", "out"), seed=seed, interval=opts["interval"],
        threshold=float(opts["threshold"]), track_prob=float(opts["track_prob"]),
        checkpoint=data.get("checkpoint"))
    return cfg, []


def validate(path) -> list[Diagnostic]:
    """All diagnostics for the file at ``path``; empty when it is valid."""
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, str(path))[1]


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    cfg, diags = parse_config(text, str(path))
    if diags:
        raise ConfigError(diags)
    return cfg
