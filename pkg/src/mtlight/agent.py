"""Per-intersection DQN agents acting on latent-enhanced observations.

All intersections are trained independently (disjoint parameters, separate
replay samples) but their networks are stored stacked along a leading agent
axis so one batched matmul serves every agent.

The first hidden layer is a sum of per-block affine maps: the raw
observation block is always present, the optional blocks (raw global
indicators, task-shared latent, task-specific latent) are added on top. The
raw block and the deeper layers are drawn from the agent RNG before any
optional block, so ablation variants share identical starting weights on
the common path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import neural as nn
from .neural import RMSprop, Tensor, gather_last, no_grad, relu, uniform_init

log = logging.getLogger(__name__)

EPS_FLOOR = 0.01


@dataclass
class TrainConfig:
    gamma: float = 0.95
    epsilon_start: float = 0.1
    epsilon_end: float = EPS_FLOOR
    epsilon_decay: float = 0.995
    minibatch: int = 32
    lr: float = 0.001
    hidden: int = 20
    policy_period: int = 20      # t_p, in decision steps
    multitask_period: int = 20   # t_m, in decision steps
    horizon: int = 3600
    action_interval: int = 5
    target_update: int | None = 5  # policy trainings between target refreshes; None disables
    buffer_capacity: int = 10_000
    clear_buffer: bool = True
    coef_shr: float = 10.0
    coef_spe: float = 10.0
    reward_scale: float = 0.1
    updates_per_train: int = 8
    share_parameters: bool = False  # one network for all intersections (homogeneous grids)

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.minibatch < 1:
            raise ValueError("minibatch must be >= 1")
        if self.updates_per_train < 1:
            raise ValueError("updates_per_train must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in TRAIN_PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
        return cls(**{**TRAIN_PRESETS[name], **overrides})


# "alt_lr" swaps in the larger policy learning rate; "single_step" is one
# unscaled RMSprop step per training event
TRAIN_PRESETS = {
    "default": {},
    "alt_lr": {"lr": 0.005},
    "single_step": {"reward_scale": 1.0, "updates_per_train": 1},
}


def decay_epsilon(eps: float, rate: float = 0.995, floor: float = EPS_FLOOR) -> float:
    return max(floor, rate * eps)


def epsilon_after(n: int, start: float = 0.1, rate: float = 0.995, floor: float = EPS_FLOOR) -> float:
    return max(floor, start * rate ** n)


def select_action(q_values, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over one Q vector; greedy ties go to the lowest index."""
    q = np.asarray(q_values)
    u, rand = rng.random(), int(rng.integers(q.shape[-1]))
    return rand if u < eps else int(np.argmax(q))


def select_actions(q_values: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorised epsilon-greedy for (A, K) Q-values. Draws the same random
    numbers whatever ``eps`` is, so RNG streams stay aligned across runs."""
    A, K = q_values.shape
    u = rng.random(A)
    rand = rng.integers(K, size=A)
    return np.where(u < eps, rand, np.argmax(q_values, axis=1))


def assemble_observation(raw, o_shr=None, o_spe=None, coef_shr: float = 10.0, coef_spe: float = 10.0,
                         extra=None) -> dict[str, np.ndarray]:
    """Named input blocks for the policy: raw obs, optional raw globals and
    the scaled latents. ``flat`` holds their concatenation."""
    blocks = {"raw": np.asarray(raw, dtype=np.float64)}
    if extra is not None:
        blocks["global"] = np.asarray(extra, dtype=np.float64)
    for name, vec, coef, dim in (("shr", o_shr, coef_shr, 5), ("spe", o_spe, coef_spe, 5)):
        if vec is None:
            continue
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape[-1] != dim:
            raise ValueError(f"{name} latent must have dim {dim}, got {vec.shape[-1]}")
        blocks[name] = coef * vec
    lead = blocks["raw"].shape[:-1]
    for name, arr in blocks.items():
        if arr.shape[:-1] != lead:
            raise ValueError(f"block {name} has leading shape {arr.shape[:-1]}, raw has {lead}")
    blocks["flat"] = np.concatenate([blocks[k] for k in blocks], axis=-1)
    return blocks


BLOCK_ORDER = ("raw", "global", "shr", "spe")


class QNetworks:
    """Stacked Q-networks for ``n_agents`` intersections: 2 hidden ReLU layers
    and a linear output of size K, with a block-structured first layer."""

    def __init__(self, n_agents: int, block_dims: dict[str, int], n_actions: int, hidden: int = 20,
                 seed: int = 0):
        self.n_agents, self.n_actions, self.hidden = n_agents, n_actions, hidden
        self.blocks = [b for b in BLOCK_ORDER if b in block_dims]
        if self.blocks[0] != "raw":
            raise ValueError("the raw observation block is required")
        rng = np.random.default_rng(seed)
        A = n_agents

        def w(n_in, n_out, r, name):
            return Tensor(uniform_init(r, (A, n_in, n_out), n_in), requires_grad=True, name=name)

        self.W = {"raw": w(block_dims["raw"], hidden, rng, "q.W1.raw")}
        self.b1 = Tensor(np.zeros((A, 1, hidden)), requires_grad=True, name="q.b1")
        self.W2 = w(hidden, hidden, rng, "q.W2")
        self.b2 = Tensor(np.zeros((A, 1, hidden)), requires_grad=True, name="q.b2")
        self.W3 = w(hidden, n_actions, rng, "q.W3")
        self.b3 = Tensor(np.zeros((A, 1, n_actions)), requires_grad=True, name="q.b3")
        for k, b in enumerate(self.blocks[1:], start=1):
            # separate stream per optional block keeps the shared path unchanged
            self.W[b] = w(block_dims[b], hidden, np.random.default_rng([seed, k]), f"q.W1.{b}")

    def parameters(self) -> list[Tensor]:
        return [self.W[b] for b in self.blocks] + [self.b1, self.W2, self.b2, self.W3, self.b3]

    def forward(self, inputs: dict[str, np.ndarray]) -> Tensor:
        """``inputs[block]`` shaped (A, B, dim); returns Q of shape (A, B, K)."""
        h = Tensor(inputs["raw"]) @ self.W["raw"]
        for b in self.blocks[1:]:
            h = h + Tensor(inputs[b]) @ self.W[b]
        h = relu(h + self.b1)
        h = relu(h @ self.W2 + self.b2)
        return h @ self.W3 + self.b3

    def q_values(self, inputs: dict[str, np.ndarray]) -> np.ndarray:
        """Tape-free Q for one input per agent: ``inputs[block]`` is (A, dim)."""
        mm = lambda x, W: np.matmul(x[:, None, :], W.data)[:, 0]
        h = mm(inputs["raw"], self.W["raw"])
        for b in self.blocks[1:]:
            h = h + mm(inputs[b], self.W[b])
        h = np.maximum(h + self.b1.data[:, 0], 0.0)
        h = np.maximum(mm(h, self.W2) + self.b2.data[:, 0], 0.0)
        return mm(h, self.W3) + self.b3.data[:, 0]

    def copy_from(self, other: "QNetworks") -> None:
        for mine, theirs in zip(self.parameters(), other.parameters()):
            mine.data = theirs.data.copy()

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=np.float64)


@dataclass
class Transition:
    obs: dict[str, np.ndarray]
    action: int
    reward: float
    next_obs: dict[str, np.ndarray]
    terminal: bool


class ReplayBuffer:
    """FIFO store of joint transitions; row ``t`` holds every agent's step-t data."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self.rows: list[tuple] = []

    def __len__(self) -> int:
        return len(self.rows)

    def store(self, obs: dict, actions, rewards, next_obs: dict, terminal: bool) -> None:
        rewards = np.asarray(rewards, dtype=np.float64)
        if np.any(rewards > 0):
            raise ValueError("rewards are negative queue lengths and must be <= 0")
        self.rows.append((obs, np.asarray(actions), rewards, next_obs, bool(terminal)))
        if len(self.rows) > self.capacity:
            self.rows.pop(0)

    def clear(self) -> None:
        self.rows.clear()

    def sample(self, idx: np.ndarray, blocks) -> tuple:
        """Gather per-agent samples; ``idx`` is (A, B) row indices."""
        A, B = idx.shape
        agents = np.arange(A)[:, None]

        def stack(which, b):
            arr = np.stack([r[which][b] for r in self.rows])  # (T, A, dim)
            return arr[idx, agents]                            # (A, B, dim)

        obs = {b: stack(0, b) for b in blocks}
        nxt = {b: stack(3, b) for b in blocks}
        acts = np.stack([r[1] for r in self.rows])[idx, agents]
        rew = np.stack([r[2] for r in self.rows])[idx, agents]
        term = np.array([r[4] for r in self.rows])[idx]
        return obs, acts, rew, nxt, term


class DQNAgents:
    """Independent DQN learners, one per intersection."""

    def __init__(self, n_agents: int, block_dims: dict[str, int], n_actions: int,
                 config: TrainConfig | None = None, seed: int = 0):
        self.config = cfg = config or TrainConfig()
        self.n_agents, self.n_actions = n_agents, n_actions
        stacks = 1 if cfg.share_parameters else n_agents
        self.q = QNetworks(stacks, block_dims, n_actions, cfg.hidden, seed)
        self.target = QNetworks(stacks, block_dims, n_actions, cfg.hidden, seed)
        self.target.copy_from(self.q)
        self.opt = RMSprop(self.q.parameters(), lr=cfg.lr)
        self.buffer = ReplayBuffer(cfg.buffer_capacity)
        self.epsilon = cfg.epsilon_start
        self.train_events = 0
        self.act_rng = np.random.default_rng([seed, 101])
        self.sample_rng = np.random.default_rng([seed, 202])

    @property
    def blocks(self) -> list[str]:
        return self.q.blocks

    def act(self, inputs: dict[str, np.ndarray], greedy: bool = False) -> np.ndarray:
        q = self.q_values(inputs)
        return select_actions(q, 0.0 if greedy else self.epsilon, self.act_rng)

    def q_values(self, inputs) -> np.ndarray:
        return self.q.q_values(inputs)

    def _forward(self, net: QNetworks, inputs: dict) -> Tensor:
        """Q of shape (A, B, K); a shared network sees every agent's rows as one batch."""
        if not self.config.share_parameters:
            return net.forward(inputs)
        A, B = inputs["raw"].shape[:2]
        out = net.forward({b: v.reshape(1, A * B, v.shape[-1]) for b, v in inputs.items()})
        return out.reshape(A, B, self.n_actions)

    def td_targets(self, rewards: np.ndarray, next_inputs: dict, terminal: np.ndarray) -> np.ndarray:
        with no_grad():
            q_next = self._forward(self.target if self.config.target_update else self.q, next_inputs).data
        boot = self.config.gamma * q_next.max(axis=-1) * (1.0 - terminal)
        return rewards * self.config.reward_scale + boot

    def td_train(self) -> np.ndarray | None:
        """Minibatch TD regression for every agent; returns per-agent MSE."""
        cfg = self.config
        if len(self.buffer) == 0:
            log.warning("td_train called with an empty replay buffer")
            return None
        losses = None
        for _ in range(cfg.updates_per_train):
            idx = self.sample_rng.integers(len(self.buffer), size=(self.n_agents, cfg.minibatch))
            obs, acts, rew, nxt, term = self.buffer.sample(idx, self.blocks)
            y = self.td_targets(rew, nxt, term.astype(np.float64))
            self.opt.zero_grad()
            q_sa = gather_last(self._forward(self.q, obs), acts)
            diff = q_sa - y
            per_agent = (diff * diff).sum(axis=1) * (1.0 / cfg.minibatch)
            # summing agent losses leaves each agent's gradient equal to its own MSE gradient
            nn.backward(per_agent.sum())
            self.opt.step()
            losses = per_agent.data
        self.train_events += 1
        self.epsilon = decay_epsilon(self.epsilon, cfg.epsilon_decay, cfg.epsilon_end)
        if cfg.target_update and self.train_events % cfg.target_update == 0:
            self.target.copy_from(self.q)
        if cfg.clear_buffer:
            self.buffer.clear()
        return losses

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.q.named_arrays())
        out.update({f"target.{k}": v for k, v in self.target.named_arrays().items()})
        out["epsilon"] = np.array(self.epsilon)
        return out

    def load_checkpoint_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.q.load_arrays(arrays)
        self.target.load_arrays({k[len("target."):]: v for k, v in arrays.items() if k.startswith("target.")})
        self.epsilon = float(arrays["epsilon"])
