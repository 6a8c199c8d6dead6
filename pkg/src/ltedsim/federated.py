"""Federated multi-device training (FedAvg over Q-network parameters) and distributed inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dqn import (PARAM_NAMES, CurvePoint, DQNAgent, GreedyPolicy, NormalizationConfig, QNetworkParams,
                  TrainerConfig, run_training_episode, should_stop)
from .scene import ChannelConfig, SceneConfig, generate_scene
from .timing import DeviceConfig, EdgeWorld, FrameTimeline

MULTI_DEVICE_FEATURES = 7


def fedavg(params_list: list[QNetworkParams]) -> QNetworkParams:
    """Unweighted element-wise mean of the devices' parameters."""
    if not params_list:
        raise ValueError("fedavg needs at least one parameter set")
    first = params_list[0]
    for p in params_list[1:]:
        if p.activation != first.activation:
            raise ValueError("activation mismatch between parameter sets")
        for name in PARAM_NAMES:
            if getattr(p, name).shape != getattr(first, name).shape:
                raise ValueError(f"shape mismatch in {name}")
    k = len(params_list)
    mean = {}
    for name in PARAM_NAMES:
        acc = np.zeros_like(getattr(first, name), dtype=float)
        for p in params_list:
            acc = acc + getattr(p, name)
        mean[name] = acc / k
    return QNetworkParams(**mean, activation=first.activation)


@dataclass
class FederationConfig:
    devices: list[DeviceConfig]
    kappa3: int | None = 300  # decided frames per device between syncs; None disables syncing
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    seed: int = 0

    def validate(self, channel: ChannelConfig | None = None) -> None:
        if not self.devices:
            raise ValueError("at least one device is required")
        if self.kappa3 is not None and self.kappa3 < 1:
            raise ValueError("kappa3 must be >= 1")
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate device ids")
        for d in self.devices:
            d.validate(channel)
        self.trainer.validate()


@dataclass
class FederatedResult:
    global_params: QNetworkParams | None  # None when syncing is disabled
    device_params: dict[int, QNetworkParams]
    curves: dict[int, list[CurvePoint]]
    agents: dict[int, DQNAgent]
    norms: NormalizationConfig
    syncs: int = 0


class _Barrier:
    """Logical rendezvous: a device that has stored n*kappa3 transitions stops
    updating until every device has, then all parameters are averaged."""

    def __init__(self, agents: dict[int, DQNAgent], kappa3: int | None, on_sync=None):
        self.agents = agents
        self.kappa3 = kappa3
        self.on_sync = on_sync
        self.syncs = 0

    def _due(self) -> int:
        return (self.syncs + 1) * self.kappa3

    def __call__(self, k: int) -> None:
        if self.kappa3 is None:
            return
        due = self._due()
        if self.agents[k].steps >= due:
            self.agents[k].frozen = True
        while all(a.steps >= self._due() for a in self.agents.values()):
            self.sync()
            for a in self.agents.values():
                a.frozen = a.steps >= self._due()

    def sync(self) -> QNetworkParams:
        ks = sorted(self.agents)
        glob = fedavg([self.agents[k].params for k in ks])
        for k in ks:
            # target networks and Adam moments stay local
            self.agents[k].params = glob.copy()
        self.syncs += 1
        if self.on_sync:
            self.on_sync(self.syncs, self.agents)
        return glob


def train_federated(cfg: FederationConfig, channel: ChannelConfig, scene_config: SceneConfig,
                    scenes=None, norms: NormalizationConfig | None = None,
                    progress=None, on_sync=None) -> FederatedResult:
    """Train K agents in one shared edge world.

    With ``kappa3`` set, parameters are averaged at every barrier and once
    more at the end; with ``kappa3=None`` each device keeps its own network.
    ``progress(device, CurvePoint)`` is called per device per episode and
    ``on_sync(n, agents)`` right after each averaging.
    """
    cfg.validate(channel)
    tc = cfg.trainer
    frames = cfg.devices[0].num_frames
    norms = norms or NormalizationConfig.for_setup(scene_config, channel, frames)
    agents = {d.device_id: DQNAgent(MULTI_DEVICE_FEATURES, tc, seed=cfg.seed, device=d.device_id)
              for d in cfg.devices}
    if scenes is None:
        scene = generate_scene(scene_config)
        scenes = [scene] * len(cfg.devices)
    barrier = _Barrier(agents, cfg.kappa3, on_sync)
    curves: dict[int, list[CurvePoint]] = {k: [] for k in agents}

    for ep in range(1, tc.episodes + 1):
        world = EdgeWorld(cfg.devices, channel, scene_config, scenes, seed=cfg.seed,
                          episode=ep, multi_device=True)
        avg = run_training_episode(world, agents, norms, after_record=barrier)
        for k, agent in agents.items():
            curves[k].append(CurvePoint(ep, avg[k], agent.epsilon, agent.learning_rate))
            if progress:
                progress(k, curves[k][-1])
        if all(should_stop(curves[k], tc, agents[k].epsilon) for k in agents):
            break

    glob = None
    if cfg.kappa3 is not None:
        for a in agents.values():
            a.frozen = False
        glob = barrier.sync()
    return FederatedResult(glob, {k: a.params.copy() for k, a in agents.items()},
                           curves, agents, norms, barrier.syncs)


def infer_distributed(params: QNetworkParams | dict[int, QNetworkParams], devices: list[DeviceConfig],
                      channel: ChannelConfig, scene_config: SceneConfig, seed: int = 0,
                      episode: int = 0, norms: NormalizationConfig | None = None,
                      scenes=None) -> dict[int, list[FrameTimeline]]:
    """Greedy rollout of every device in one shared-edge world.

    ``params`` is either the global model or one network per device (the
    unsynchronised ablation).  Piecewise schedules come from each
    ``DeviceConfig.schedule``.
    """
    if isinstance(params, QNetworkParams):
        per_device = {d.device_id: params for d in devices}
    else:
        per_device = params
    norms = norms or NormalizationConfig.for_setup(scene_config, channel, devices[0].num_frames)
    policies = {k: GreedyPolicy(p, norms, p.n_inputs == MULTI_DEVICE_FEATURES) for k, p in per_device.items()}
    multi = any(p.n_inputs == MULTI_DEVICE_FEATURES for p in per_device.values())
    world = EdgeWorld(devices, channel, scene_config, scenes, seed=seed, episode=episode, multi_device=multi)
    while (dp := world.next_decision()) is not None:
        world.apply(policies[dp.device].decide(dp.state, dp.frame))
    out = {d.device_id: [] for d in devices}
    for tl in world.timelines():
        out[tl.device].append(tl)
    return out
