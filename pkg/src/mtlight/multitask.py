"""Multi-task latent-state network.

One network is shared by all intersections; each intersection keeps its own
GRU hidden state. Per-agent lane counts and phase plus four global indicator
histories (entries, average travel time, queue total, vehicles on road) are
embedded, passed through a shared trunk with a GRU, and decoded by four task
branches predicting flow mean/variance, travel-time mean/variance, next
queue and vehicles on road.

The shared post-GRU feature is the task-shared latent ``o_shr``; the branch
activations, concatenated and projected to 5 dims, give the task-specific
latent ``o_spe``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import neural as nn
from .neural import Adam, GRUCell, Linear, Tensor, concat, relu
from .sim import moments

TASKS = ("flow", "travel", "queue", "on_road")
TASK_DIMS = (2, 2, 1, 1)
INDICATORS = ("incoming", "travel_time", "queue", "on_road")


@dataclass
class MultiTaskConfig:
    tau: int = 10
    embed_dim: int = 16
    shared_dim: int = 64
    gru_hidden: int = 64
    shr_dim: int = 5
    task_dim: int = 16
    spe_dim: int = 5
    lr: float = 0.01
    coef_mode: str = "latent_scale"  # or "loss_weight"
    loss_weight: float = 1.0


def compress(x) -> np.ndarray:
    """Signed log1p, applied to raw counts/seconds before they enter a network."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


class HistoryBuffer:
    """Last ``tau`` values of each global indicator, oldest first, zero-filled."""

    def __init__(self, tau: int):
        self.tau = tau
        self.data = np.zeros((len(INDICATORS), tau))

    def push(self, incoming: float, travel_time: float, queue: float, on_road: float) -> None:
        self.data[:, :-1] = self.data[:, 1:]
        self.data[:, -1] = (incoming, travel_time, queue, on_road)

    def reset(self) -> None:
        self.data[:] = 0.0

    def arrays(self) -> np.ndarray:
        return self.data.copy()


@dataclass
class TaskTargets:
    flow: tuple[float, float]
    travel: tuple[float, float]
    next_queue: float
    on_road: float
    travel_valid: bool = True

    def vector(self) -> np.ndarray:
        return np.array([*self.flow, *self.travel, self.next_queue, self.on_road], dtype=np.float64)


@dataclass
class LatentState:
    o_shr: np.ndarray
    o_spe: np.ndarray


def compute_targets(n_steps: int, entry_sum: int, entry_sumsq: int,
                    trips: tuple[int, int, int], next_queue: float, on_road: float) -> TaskTargets:
    """Supervised signal at step ``t`` from integer running sums.

    ``entry_*`` are the count and power sums of per-step entry counts since
    episode start; ``trips`` is (n, sum, sum of squares) of completed trip
    durations. Travel targets are (0, 0) and flagged invalid with no trips.
    """
    if n_steps < 1:
        raise ValueError("targets need at least one step")
    _, mu_f, var_f = moments(n_steps, entry_sum, entry_sumsq)
    n_tr, mu_tr, var_tr = moments(*trips)
    return TaskTargets((mu_f, var_f), (mu_tr, var_tr), float(next_queue), float(on_road), n_tr > 0)


class RunningNorm:
    """Per-column running mean/std (Welford) used to z-score targets."""

    def __init__(self, dim: int):
        self.n = np.zeros(dim)
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray, mask: np.ndarray | None = None) -> None:
        x = np.atleast_2d(x)
        mask = np.ones_like(x, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
        # batch merge of (count, mean, M2) per column
        nb = mask.sum(axis=0).astype(np.float64)
        safe = np.maximum(nb, 1)
        mb = np.where(mask, x, 0.0).sum(axis=0) / safe
        m2b = (np.where(mask, x - mb, 0.0) ** 2).sum(axis=0)
        n = self.n + nb
        delta = mb - self.mean
        with np.errstate(invalid="ignore", divide="ignore"):
            self.mean = np.where(nb > 0, self.mean + delta * nb / np.maximum(n, 1), self.mean)
            self.m2 = np.where(nb > 0, self.m2 + m2b + delta ** 2 * self.n * nb / np.maximum(n, 1), self.m2)
        self.n = n

    @property
    def std(self) -> np.ndarray:
        var = np.where(self.n > 1, self.m2 / np.maximum(self.n, 1), 1.0)
        return np.sqrt(np.maximum(var, 1e-8))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean


class MultiTaskNet:
    """Parameters of the multi-task network (the ``phi`` of the method)."""

    def __init__(self, n_lanes: int, n_phases: int, config: MultiTaskConfig | None = None, seed: int = 0):
        self.config = cfg = config or MultiTaskConfig()
        rng = np.random.default_rng(seed)
        E = cfg.embed_dim
        self.n_lanes, self.n_phases = n_lanes, n_phases
        obs_dim = self.obs_dim = n_lanes + n_phases
        self.embed_hist = [Linear(cfg.tau, E, rng, name=f"embed_{k}") for k in INDICATORS]
        self.embed_obs = Linear(obs_dim, E, rng, name="embed_obs")
        self.shared1 = Linear(5 * E, cfg.shared_dim, rng, name="shared1")
        self.shared2 = Linear(cfg.shared_dim, cfg.shared_dim, rng, name="shared2")
        self.gru = GRUCell(cfg.shared_dim, cfg.gru_hidden, rng, name="gru")
        self.post = Linear(cfg.gru_hidden, cfg.shr_dim, rng, name="post_gru")
        self.branches = [Linear(cfg.shr_dim, cfg.task_dim, rng, name=f"branch_{t}") for t in TASKS]
        self.heads = [Linear(cfg.task_dim, d, rng, name=f"head_{t}") for t, d in zip(TASKS, TASK_DIMS)]
        self.spe_proj = Linear(len(TASKS) * cfg.task_dim, cfg.spe_dim, rng, name="spe_proj")
        self.trunk_evaluations = 0

    def layers(self) -> list:
        return [*self.embed_hist, self.embed_obs, self.shared1, self.shared2, self.gru, self.post,
                *self.branches, *self.heads, self.spe_proj]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers() for p in layer.parameters()]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(arrays[p.name], dtype=np.float64)

    # -- forward pieces ---------------------------------------------------------
    def embed_inputs(self, obs, hist) -> Tensor:
        """``obs`` (B, m+K) raw lane counts + one-hot phase; ``hist`` (B, 4, tau)
        raw indicator histories. Returns the concatenated embeddings (B, 5E)."""
        obs = np.asarray(obs, dtype=np.float64)
        hist = np.asarray(hist, dtype=np.float64)
        if hist.ndim != 3 or hist.shape[1:] != (len(INDICATORS), self.config.tau):
            raise ValueError(f"histories must be (B, 4, {self.config.tau}), got {hist.shape}")
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation dim {obs.shape[-1]} != {self.obs_dim}")
        hs = [relu(layer(Tensor(compress(hist[:, k, :])))) for k, layer in enumerate(self.embed_hist)]
        # lane counts are compressed, the phase one-hot is left alone
        obs_in = obs.copy()
        obs_in[:, :self.n_lanes] = compress(obs[:, :self.n_lanes])
        ho = relu(self.embed_obs(Tensor(obs_in)))
        return concat(hs + [ho], axis=-1)

    def encode(self, embedded: Tensor, h_prev) -> tuple[Tensor, Tensor, Tensor]:
        """Shared trunk: (H_t, GRU state, o_shr)."""
        self.trunk_evaluations += 1
        H = relu(self.shared2(relu(self.shared1(embedded))))
        h_next = self.gru(H, nn.as_tensor(h_prev))
        o_shr = relu(self.post(h_next))
        return H, h_next, o_shr

    def task_heads(self, o_shr: Tensor) -> tuple[list[Tensor], Tensor]:
        acts = [relu(b(o_shr)) for b in self.branches]
        preds = [head(a) for head, a in zip(self.heads, acts)]
        o_spe = self.spe_proj(concat(acts, axis=-1))
        return preds, o_spe

    def forward(self, obs, hist, h_prev) -> dict:
        emb = self.embed_inputs(obs, hist)
        _, h_next, o_shr = self.encode(emb, h_prev)
        preds, o_spe = self.task_heads(o_shr)
        return {"preds": preds, "o_shr": o_shr, "o_spe": o_spe, "h_next": h_next}

    def infer(self, obs, hist, h_prev) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Tape-free forward pass for acting: (o_shr, o_spe, h_next)."""
        obs = np.asarray(obs, dtype=np.float64)
        hist = np.asarray(hist, dtype=np.float64)
        lin = lambda layer, x: x @ layer.W.data + layer.b.data
        relu_ = lambda x: np.maximum(x, 0.0)
        obs_in = obs.copy()
        obs_in[:, :self.n_lanes] = compress(obs[:, :self.n_lanes])
        emb = [relu_(lin(layer, compress(hist[:, k, :]))) for k, layer in enumerate(self.embed_hist)]
        emb.append(relu_(lin(self.embed_obs, obs_in)))
        self.trunk_evaluations += 1
        x = relu_(lin(self.shared2, relu_(lin(self.shared1, np.concatenate(emb, axis=-1)))))
        g, H = self.gru, self.gru.hidden
        gi = x @ g.W_i.data + g.b_i.data
        gh = h_prev @ g.W_h.data + g.b_h.data
        r = nn.sigmoid_np(gi[:, :H] + gh[:, :H])
        z = nn.sigmoid_np(gi[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gi[:, 2 * H:] + r * gh[:, 2 * H:])
        h_next = (1.0 - z) * n + z * h_prev
        o_shr = relu_(lin(self.post, h_next))
        acts = [relu_(lin(b, o_shr)) for b in self.branches]
        o_spe = lin(self.spe_proj, np.concatenate(acts, axis=-1))
        return o_shr, o_spe, h_next

    def loss(self, obs, hist, h_prev, targets_z: np.ndarray, travel_mask: np.ndarray):
        """Per-task MSE on z-scored targets (B, 6); travel rows masked where
        no trip had completed. Returns (total, [flow, travel, queue, on_road])."""
        out = self.forward(obs, hist, h_prev)
        cols = np.cumsum((0,) + TASK_DIMS)
        losses = []
        for k, pred in enumerate(out["preds"]):
            tgt = targets_z[:, cols[k]:cols[k + 1]]
            mask = travel_mask[:, None] if TASKS[k] == "travel" else None
            losses.append(nn.mse_loss(pred, tgt, mask))
        total = losses[0] + losses[1] + losses[2] + losses[3]
        return total, losses


@dataclass
class Sample:
    obs: np.ndarray        # (A, m+K)
    hist: np.ndarray       # (4, tau)
    h_prev: np.ndarray     # (A, H)
    partial: TaskTargets | None = None  # everything but the next-step queue
    targets: TaskTargets | None = None


class MultiTaskLearner:
    """Runs the network alongside the simulator: keeps per-agent hidden
    states, indicator histories, pending samples and the Adam state."""

    def __init__(self, n_agents: int, n_lanes: int, n_phases: int, config: MultiTaskConfig | None = None,
                 seed: int = 0):
        self.config = cfg = config or MultiTaskConfig()
        self.n_agents = n_agents
        self.net = MultiTaskNet(n_lanes, n_phases, cfg, seed)
        self.opt = Adam(self.net.parameters(), lr=cfg.lr)
        self.norm = RunningNorm(sum(TASK_DIMS))
        self.history = HistoryBuffer(cfg.tau)
        self.samples: list[Sample] = []
        self.loss_log: list[dict] = []
        self.train_events = 0
        self.reset_episode()

    def reset_episode(self) -> None:
        self.hidden = np.zeros((self.n_agents, self.config.gru_hidden))
        self.history.reset()
        self._latent: LatentState | None = None
        self._latent_tick: int | None = None
        self._steps = 0
        self._entry_sum = 0
        self._entry_sumsq = 0
        # samples awaiting next-step queue are dropped at episode end
        self.samples = [s for s in self.samples if s.targets is not None]

    def zero_latents(self) -> LatentState:
        return LatentState(np.zeros((self.n_agents, self.config.shr_dim)),
                           np.zeros((self.n_agents, self.config.spe_dim)))

    def observe(self, obs: np.ndarray, entered: int, avg_travel: float, queue_total: int, on_road: int,
                trips: tuple[int, int, int], tick: int) -> LatentState:
        """Record step-``tick`` indicators, run the forward pass for every
        agent and stash a training sample. ``queue_total`` also completes the
        previous sample's next-queue target."""
        n_inter = self.n_agents
        if self.samples and self.samples[-1].targets is None:
            s = self.samples[-1]
            t = s.partial
            s.targets = TaskTargets(t.flow, t.travel, queue_total / n_inter, t.on_road, t.travel_valid)
        self.history.push(entered, avg_travel, queue_total, on_road)
        self._steps += 1
        self._entry_sum += int(entered)
        self._entry_sumsq += int(entered) * int(entered)
        hist = np.broadcast_to(self.history.arrays(), (self.n_agents, len(INDICATORS), self.config.tau))
        h_prev = self.hidden
        o_shr, o_spe, self.hidden = self.net.infer(obs, hist, h_prev)
        self._latent = LatentState(o_shr, o_spe)
        self._latent_tick = tick
        partial = compute_targets(self._steps, self._entry_sum, self._entry_sumsq, trips, 0.0, on_road)
        self.samples.append(Sample(np.array(obs, dtype=np.float64), self.history.arrays(), h_prev.copy(), partial))
        return self._latent

    def latent_for_agent(self, agent: int, tick: int | None = None) -> LatentState:
        if self._latent is None:
            raise RuntimeError("no multitask forward pass has run this episode")
        if tick is not None and tick != self._latent_tick:
            raise RuntimeError(f"latents are for tick {self._latent_tick}, not {tick}")
        return LatentState(self._latent.o_shr[agent].copy(), self._latent.o_spe[agent].copy())

    def latents(self) -> LatentState:
        return self._latent if self._latent is not None else self.zero_latents()

    def ready_batch(self):
        done = [s for s in self.samples if s.targets is not None]
        if not done:
            return None
        A = self.n_agents
        obs = np.concatenate([s.obs for s in done])
        hist = np.concatenate([np.broadcast_to(s.hist, (A,) + s.hist.shape) for s in done])
        h_prev = np.concatenate([s.h_prev for s in done])
        tgt = np.repeat(np.stack([s.targets.vector() for s in done]), A, axis=0)
        valid = np.repeat(np.array([s.targets.travel_valid for s in done]), A)
        return obs, hist, h_prev, tgt, valid

    def train(self, step: int | None = None) -> dict | None:
        """One Adam step on the samples collected since the last call."""
        batch = self.ready_batch()
        self.samples = [s for s in self.samples if s.targets is None]
        if batch is None:
            return None
        return self.train_on(*batch, step=step)

    def train_on(self, obs, hist, h_prev, targets, travel_valid, step: int | None = None,
                 update_norm: bool = True) -> dict:
        mask = np.ones_like(targets, dtype=bool)
        mask[:, 2:4] = travel_valid[:, None]
        if update_norm:
            self.norm.update(targets, mask)
        tz = self.norm.normalize(targets)
        tz[~mask] = 0.0
        self.opt.zero_grad()
        total, losses = self.net.loss(obs, hist, h_prev, tz, travel_valid.astype(float))
        if not np.isfinite(total.data):
            raise nn.NonFiniteError("multitask loss is not finite")
        scaled = total * self.config.loss_weight if self.config.coef_mode == "loss_weight" else total
        nn.backward(scaled)
        self.opt.step()
        self.train_events += 1
        row = {"step": self.train_events if step is None else step, "total": float(total.data)}
        row.update({t: float(l.data) for t, l in zip(TASKS, losses)})
        self.loss_log.append(row)
        return row

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["step", "total", *TASKS], lineterminator="\n")
            w.writeheader()
            for row in self.loss_log:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

    def checkpoint_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.net.named_arrays())
        out["hidden"] = self.hidden
        out["norm.n"], out["norm.mean"], out["norm.m2"] = self.norm.n, self.norm.mean, self.norm.m2
        return out

    def load_checkpoint_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.net.load_arrays(arrays)
        self.hidden = arrays["hidden"].copy()
        self.norm.n, self.norm.mean, self.norm.m2 = (arrays[k].copy() for k in ("norm.n", "norm.mean", "norm.m2"))
