"""Two-action Q-network, Adam, replay memory and the DQN training loop (numpy only)."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .scene import EXPLORATION, INIT, REPLAY, ChannelConfig, SceneConfig, generate_scene, substream
from .timing import DecisionState, DeviceConfig, EdgeWorld, FrameTimeline, totals

PARAM_NAMES = ("W1", "b1", "W2", "b2")
CHECKPOINT_VERSION = 1


@dataclass
class QNetworkParams:
    W1: np.ndarray  # (n_in, hidden)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden, 2)
    b2: np.ndarray  # (2,)
    activation: str = "relu"

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> QNetworkParams:
        return QNetworkParams(*(getattr(self, n).copy() for n in PARAM_NAMES), activation=self.activation)

    def validate(self) -> None:
        if self.W2.shape[1] != 2 or self.b2.shape != (2,):
            raise ValueError("Q-network must have exactly two outputs")
        if self.b1.shape != (self.hidden,) or self.W2.shape[0] != self.hidden:
            raise ValueError("inconsistent layer shapes")
        if not all(np.all(np.isfinite(a)) for a in self.arrays().values()):
            raise ValueError("non-finite network parameter")


def init_params(n_inputs: int, hidden: int, rng: np.random.Generator) -> QNetworkParams:
    """Glorot-uniform weights, zero biases."""
    def glorot(fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))
    return QNetworkParams(glorot(n_inputs, hidden), np.zeros(hidden), glorot(hidden, 2), np.zeros(2))


def forward(params: QNetworkParams, s: np.ndarray) -> np.ndarray:
    """Q-values for one state (shape (2,)) or a batch (shape (B, 2))."""
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != params.n_inputs:
        raise ValueError(f"state has {s.shape[-1]} features, network expects {params.n_inputs}")
    h = np.maximum(s @ params.W1 + params.b1, 0.0)
    return h @ params.W2 + params.b2


def greedy_action(q: np.ndarray) -> int:
    # ties go to detection
    return 1 if q[1] > q[0] else 0


def epsilon_greedy(params: QNetworkParams, s: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(2))
    return greedy_action(forward(params, s))


def td_target(r: float, s_next: np.ndarray, terminal: bool, target_params: QNetworkParams,
              gamma: float) -> float:
    if terminal:
        return float(r)
    return float(r + gamma * np.max(forward(target_params, s_next)))


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    terminal: np.ndarray

    @classmethod
    def stack(cls, transitions: list[Transition]) -> Batch:
        return cls(np.array([t.s for t in transitions], dtype=float),
                   np.array([t.a for t in transitions], dtype=int),
                   np.array([t.r for t in transitions], dtype=float),
                   np.array([t.s_next for t in transitions], dtype=float),
                   np.array([t.terminal for t in transitions], dtype=bool))

    def __len__(self) -> int:
        return len(self.a)


def loss_and_gradient(params: QNetworkParams, batch: Batch | list[Transition],
                      target_params: QNetworkParams, gamma: float) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared TD error and its gradient w.r.t. the online network only."""
    if not isinstance(batch, Batch):
        batch = Batch.stack(list(batch))
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    q_next = forward(target_params, batch.s_next).max(axis=1)
    y = np.where(batch.terminal, batch.r, batch.r + gamma * q_next)

    z = batch.s @ params.W1 + params.b1
    h = np.maximum(z, 0.0)
    q = h @ params.W2 + params.b2
    rows = np.arange(n)
    diff = q[rows, batch.a] - y
    loss = float(np.mean(diff * diff))

    dq = np.zeros_like(q)
    dq[rows, batch.a] = 2.0 * diff / n
    dh = (dq @ params.W2.T) * (z > 0)
    grads = {
        "W1": batch.s.T @ dh,
        "b1": dh.sum(axis=0),
        "W2": h.T @ dq,
        "b2": dq.sum(axis=0),
    }
    return loss, grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: QNetworkParams) -> AdamState:
        arrs = params.arrays()
        return cls({k: np.zeros_like(a) for k, a in arrs.items()}, {k: np.zeros_like(a) for k, a in arrs.items()})


def adam_step(params: QNetworkParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> QNetworkParams:
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    for name in PARAM_NAMES:
        if grads[name].shape != getattr(params, name).shape:
            raise ValueError(f"gradient shape mismatch for {name}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name in PARAM_NAMES:
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p = getattr(params, name)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


class ReplayMemory:
    """Bounded transition store; once full, a random stored sample is overwritten."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.items: list[Transition] = []

    def __len__(self) -> int:
        return len(self.items)

    def push(self, t: Transition) -> None:
        if len(self.items) < self.capacity:
            self.items.append(t)
        else:
            self.items[int(self.rng.integers(len(self.items)))] = t

    def sample(self, batch_size: int) -> Batch:
        idx = self.rng.choice(len(self.items), size=batch_size, replace=False)
        return Batch.stack([self.items[i] for i in idx])


# -- state features -----------------------------------------------------------------

@dataclass
class NormalizationConfig:
    deviation_scale: float = 1280.0  # frame width
    finv_scale: float = 300.0  # F
    qlen_scale: float = 10.0
    edge_qlen_scale: float = 10.0
    uplink_scale: float = 88.5e6
    downlink_scale: float = 88.5e6

    def __post_init__(self):
        for name, scale in asdict(self).items():
            if not scale > 0:
                raise ValueError(f"normalization scale {name} must be positive")

    @classmethod
    def for_setup(cls, scene: SceneConfig, channel: ChannelConfig, num_frames: int) -> NormalizationConfig:
        return cls(deviation_scale=scene.frame_width, finv_scale=float(num_frames),
                   uplink_scale=channel.uplink_rate_mean, downlink_scale=channel.downlink_rate_mean)


def normalize_state(raw: DecisionState, norms: NormalizationConfig, multi_device: bool = False) -> np.ndarray:
    """Feature order: o_x, o_y, finv, qlen, [edge_qlen,] v_up, v_down."""
    feats = [raw.o_x / norms.deviation_scale, raw.o_y / norms.deviation_scale,
             raw.finv / norms.finv_scale, raw.qlen / norms.qlen_scale]
    if multi_device:
        feats.append((raw.edge_qlen or 0) / norms.edge_qlen_scale)
    feats += [raw.v_up / norms.uplink_scale, raw.v_down / norms.downlink_scale]
    x = np.array(feats, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state feature")
    return x


# -- training -----------------------------------------------------------------------

@dataclass
class TrainerConfig:
    gamma: float = 0.95
    batch_size: int = 64
    memory_size: int = 10000
    hidden: int = 128
    kappa1: int = 2  # frames between parameter updates
    kappa2: int = 100  # frames between target syncs
    epsilon_start: float = 1.0
    epsilon_min: float = 0.001
    epsilon_decay: float = 0.9999
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_every: int = 10000  # parameter updates
    episodes: int = 300
    early_stop: bool = True
    early_stop_window: int = 20
    early_stop_tol: float = 0.01

    def validate(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.batch_size <= self.memory_size:
            raise ValueError("batch_size must be in (0, memory_size]")
        if self.kappa1 < 1 or self.kappa2 < 1:
            raise ValueError("kappa1 and kappa2 must be >= 1")
        if not 0.0 <= self.epsilon_start <= 1.0 or not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError("invalid epsilon schedule")
        if self.lr <= 0 or self.lr_decay_every < 1 or self.hidden < 1 or self.episodes < 1:
            raise ValueError("invalid optimiser settings")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class DQNAgent:
    """Online/target networks, Adam state, replay memory and epsilon for one device."""

    def __init__(self, n_inputs: int, cfg: TrainerConfig, seed: int = 0, device: int = 0,
                 params: QNetworkParams | None = None):
        cfg.validate()
        self.cfg = cfg
        self.params = params.copy() if params is not None else init_params(
            n_inputs, cfg.hidden, substream(seed, device, INIT))
        self.params.validate()
        self.target = self.params.copy()
        self.adam = AdamState.zeros_like(self.params)
        self.memory = ReplayMemory(cfg.memory_size, substream(seed, device, REPLAY))
        self.rng = substream(seed, device, EXPLORATION)
        self.epsilon = cfg.epsilon_start
        self.steps = 0
        self.updates = 0
        self.last_loss = float("nan")
        self.frozen = False  # set while waiting at a federated barrier

    @property
    def learning_rate(self) -> float:
        return self.cfg.lr * self.cfg.lr_decay ** (self.updates // self.cfg.lr_decay_every)

    def act(self, x: np.ndarray, explore: bool = True) -> int:
        eps = self.epsilon if explore else 0.0
        a = epsilon_greedy(self.params, x, eps, self.rng)
        if explore:
            self.epsilon *= self.cfg.epsilon_decay
            if self.epsilon < self.cfg.epsilon_min:
                self.epsilon = 0.0
        return a

    def record(self, t: Transition) -> None:
        self.memory.push(t)
        self.steps += 1
        if self.steps % self.cfg.kappa1 == 0 and len(self.memory) >= self.cfg.batch_size and not self.frozen:
            self.update()
        if self.steps % self.cfg.kappa2 == 0:
            self.target = self.params.copy()

    def update(self) -> float:
        batch = self.memory.sample(self.cfg.batch_size)
        loss, grads = loss_and_gradient(self.params, batch, self.target, self.cfg.gamma)
        adam_step(self.params, grads, self.adam, self.learning_rate)
        self.updates += 1
        self.last_loss = loss
        return loss


class GreedyPolicy:
    """LTED-Ada at inference: argmax of the trained Q-network."""

    name = "lted_ada"

    def __init__(self, params: QNetworkParams, norms: NormalizationConfig, multi_device: bool = False):
        self.params = params
        self.norms = norms
        self.multi_device = multi_device

    def decide(self, state: DecisionState, frame: int) -> int:
        if frame == 1:
            return 0
        return greedy_action(forward(self.params, normalize_state(state, self.norms, self.multi_device)))


def run_training_episode(world: EdgeWorld, agents: dict[int, DQNAgent], norms: NormalizationConfig,
                         after_record=None) -> dict[int, float]:
    """Play one episode, storing a transition per decided frame.

    The transition of frame f is completed when frame f+1 is decided (its
    reward is known by then); frame F's transition is stored terminal once
    the episode ends.  ``after_record(k)`` runs after every stored
    transition (federated barriers hook in here).  Returns the mean reward
    over decided frames per device.
    """
    pending: dict[int, tuple[np.ndarray, int, int]] = {}
    rewards: dict[int, list[float]] = {k: [] for k in agents}
    while (dp := world.next_decision()) is not None:
        k = dp.device
        agent = agents[k]
        x = normalize_state(dp.state, norms, world.multi_device)
        if k in pending:
            px, pa, pf = pending.pop(k)
            r = world.devices[k].timelines[pf].R
            rewards[k].append(r)
            agent.record(Transition(px, pa, r, x, False))
            if after_record:
                after_record(k)
        a = agent.act(x)
        world.apply(a)
        pending[k] = (x, a, dp.frame)
    for k in sorted(pending):
        px, pa, pf = pending[k]
        r = world.devices[k].timelines[pf].R
        rewards[k].append(r)
        agents[k].record(Transition(px, pa, r, np.zeros_like(px), True))
        if after_record:
            after_record(k)
    return {k: (float(np.mean(v)) if v else 0.0) for k, v in rewards.items()}


@dataclass
class CurvePoint:
    episode: int
    average_total_reward: float
    epsilon: float
    eta: float


@dataclass
class TrainingResult:
    params: QNetworkParams
    agent: DQNAgent
    curve: list[CurvePoint] = field(default_factory=list)
    norms: NormalizationConfig | None = None


def should_stop(curve: list[CurvePoint], cfg: TrainerConfig, epsilon: float) -> bool:
    """Early stop once greedy and the moving average has settled."""
    win = cfg.early_stop_window
    if not cfg.early_stop or epsilon > 0.0 or len(curve) < 2 * win:
        return False
    if any(p.epsilon > 0.0 for p in curve[-win:]):
        return False
    recent = np.mean([p.average_total_reward for p in curve[-win:]])
    before = np.mean([p.average_total_reward for p in curve[-2 * win:-win]])
    return abs(recent - before) < cfg.early_stop_tol * max(abs(before), 1e-12)


def train_single_device(device: DeviceConfig, channel: ChannelConfig, scene_config: SceneConfig,
                        cfg: TrainerConfig, seed: int = 0, scene=None,
                        params: QNetworkParams | None = None,
                        norms: NormalizationConfig | None = None, progress=None) -> TrainingResult:
    """Train one device's Q-network for up to ``cfg.episodes`` episodes."""
    cfg.validate()
    norms = norms or NormalizationConfig.for_setup(scene_config, channel, device.num_frames)
    agent = DQNAgent(6, cfg, seed=seed, device=device.device_id, params=params)
    scene = scene if scene is not None else generate_scene(scene_config)
    curve = []
    for ep in range(1, cfg.episodes + 1):
        world = EdgeWorld([device], channel, scene_config, [scene],
                          seed=seed, episode=ep, multi_device=False)
        avg = run_training_episode(world, {device.device_id: agent}, norms)[device.device_id]
        curve.append(CurvePoint(ep, avg, agent.epsilon, agent.learning_rate))
        if progress:
            progress(curve[-1])
        if should_stop(curve, cfg, agent.epsilon):
            break
    return TrainingResult(agent.params, agent, curve, norms)


def infer(params: QNetworkParams, devices: list[DeviceConfig], channel: ChannelConfig,
          scene_config: SceneConfig, seed: int = 0, episode: int = 0,
          norms: NormalizationConfig | None = None, scenes=None) -> tuple[list[FrameTimeline], dict]:
    """Greedy rollout; returns timelines and totals of A, H, W, R."""
    multi = params.n_inputs == 7
    norms = norms or NormalizationConfig.for_setup(scene_config, channel, devices[0].num_frames)
    policy = GreedyPolicy(params, norms, multi)
    world = EdgeWorld(devices, channel, scene_config, scenes, seed=seed, episode=episode,
                      multi_device=multi)
    while (dp := world.next_decision()) is not None:
        world.apply(policy.decide(dp.state, dp.frame))
    timelines = world.timelines()
    return timelines, totals(timelines)


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path, params: QNetworkParams, adam: AdamState | None = None,
                    cfg: TrainerConfig | None = None, norms: NormalizationConfig | None = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "activation": params.activation,
        "params": {n: a.tolist() for n, a in params.arrays().items()},
        "trainer_digest": cfg.digest() if cfg else None,
        "norms": asdict(norms) if norms else None,
    }
    if adam is not None:
        doc["adam"] = {"t": adam.t, "m": {n: a.tolist() for n, a in adam.m.items()},
                       "v": {n: a.tolist() for n, a in adam.v.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple[QNetworkParams, AdamState | None, NormalizationConfig | None, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    p = doc["params"]
    params = QNetworkParams(*(np.array(p[n], dtype=float) for n in PARAM_NAMES),
                            activation=doc.get("activation", "relu"))
    params.validate()
    adam = None
    if "adam" in doc:
        a = doc["adam"]
        adam = AdamState({n: np.array(a["m"][n]) for n in PARAM_NAMES},
                         {n: np.array(a["v"][n]) for n in PARAM_NAMES}, t=a["t"])
    norms = NormalizationConfig(**doc["norms"]) if doc.get("norms") else None
    return params, adam, norms, doc
