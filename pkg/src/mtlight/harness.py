"""Experiment orchestration: training episodes, baseline evaluation, the
ablation ladder and run statistics."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import neural as nn
from .agent import DQNAgents, TrainConfig, assemble_observation
from .baselines import CONTROLLERS, ClassicalController, ControllerConfig
from .multitask import INDICATORS, HistoryBuffer, MultiTaskConfig, MultiTaskLearner, compress
from .scenario import (FlowSchedule, LaneParams, NetworkSpec, gen_grid, gen_synthetic_peak, grid_routes,
                       load_flow, load_roadnet, uniform_flow)
from .sim import (ContractViolation, RoadNetwork, average_travel_time, build_network, new_state,
                  raw_observations, rewards, step)

LEARNED = ("mtlight", "base", "base_raw", "base_shr", "base_spe")
CLASSICAL = ("fixed_time", "sotl", "max_pressure")
ABLATION_ORDER = ("base", "base_raw", "base_shr", "base_spe", "mtlight")

# input blocks each learned variant feeds to its policy
VARIANT_BLOCKS = {
    "base": (),
    "base_raw": ("global",),
    "base_shr": ("shr",),
    "base_spe": ("spe",),
    "mtlight": ("shr", "spe"),
}


@dataclass
class ScenarioConfig:
    grid: Optional[tuple[int, int]] = (4, 4)
    flow: str = "synthetic_peak"   # "synthetic_peak", "uniform", or a flow-file path
    rate: float = 1.0              # for "uniform"
    horizon: int = 3600
    roadnet_path: Optional[str] = None
    lane_length: float = 300.0
    lane_capacity: int = 40
    route_weights: Optional[list[float]] = None


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    controller: str = "mtlight"
    train: TrainConfig = field(default_factory=TrainConfig)
    multitask: MultiTaskConfig = field(default_factory=MultiTaskConfig)
    classical: dict = field(default_factory=lambda: {"fixed_phase_duration": 30.0, "sotl_threshold": 5})
    multitask_enabled: bool = True
    episodes: int = 50
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; choose from {CONTROLLERS}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        sc = dict(doc.pop("scenario", {}))
        if sc.get("grid") is not None:
            sc["grid"] = tuple(sc["grid"])
        return cls(
            scenario=ScenarioConfig(**sc),
            train=TrainConfig(**doc.pop("train", {})),
            multitask=MultiTaskConfig(**doc.pop("multitask", {})),
            **doc,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})


def config_hash(config: ExperimentConfig) -> str:
    """sha256 of the canonical JSON form; output location is excluded."""
    doc = config.to_dict()
    doc.pop("out_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


@dataclass
class RunRecord:
    controller: str
    seed: int
    episode: int
    avg_travel_time: float
    queue_totals: list[int]
    phase_counts: np.ndarray
    agent_rewards: np.ndarray
    turning: dict
    completed: int
    spawned: int
    epsilon: float
    wall_clock: float
    config_hash: str

    @property
    def mean_queue(self) -> float:
        return float(np.mean(self.queue_totals)) if self.queue_totals else 0.0


# -- scenario assembly -------------------------------------------------------------

@dataclass
class Scenario:
    spec: NetworkSpec
    network: RoadNetwork
    flow: FlowSchedule


def build_scenario(sc: ScenarioConfig) -> Scenario:
    if sc.roadnet_path:
        spec = load_roadnet(sc.roadnet_path)
    else:
        spec = gen_grid(*sc.grid, LaneParams(sc.lane_length, sc.lane_capacity))
    network = build_network(spec)
    if sc.flow == "synthetic_peak":
        flow = gen_synthetic_peak(sc.horizon, grid_routes(spec))
    elif sc.flow == "uniform":
        routes = grid_routes(spec)
        flow = uniform_flow(sc.rate, sc.horizon, routes, sc.route_weights)
    else:
        flow = load_flow(sc.flow, spec)
    if sc.route_weights is not None and sc.flow == "synthetic_peak":
        flow.weights = list(sc.route_weights)
    return Scenario(spec, network, flow)


def _seed_ints(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def episode_flow_seed(seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([seed, episode]).generate_state(1)[0])


# -- turning / phase statistics -------------------------------------------------------

def route_turn_counts(network: RoadNetwork, routes) -> dict:
    """Turn counts over lane-index routes; the exit lane is not a turn."""
    counts = {"left": 0, "straight": 0, "right": 0}
    lanes = network.lanes
    for route in routes:
        for lane in route[:-1]:
            counts[lanes[lane].movement_class] += 1
    return counts


def turning_counts(state) -> dict:
    """Turn counts over all spawned vehicles' routes."""
    return route_turn_counts(state.network, (v.route for v in state.vehicles))


def phase_and_turning_stats(phase_counts: np.ndarray, turning: dict) -> dict:
    """Per-agent phase shares (percent) and turning shares. Left/straight
    shares exclude right turns, which are never signal-controlled."""
    pc = np.asarray(phase_counts, dtype=np.float64)
    totals = pc.sum(axis=-1, keepdims=True)
    phase_pct = np.divide(100.0 * pc, totals, out=np.zeros_like(pc), where=totals > 0)
    ls = turning["left"] + turning["straight"]
    allturns = ls + turning["right"]
    return {
        "phase_percent": phase_pct,
        "network_phase_percent": 100.0 * pc.sum(axis=0) / max(pc.sum(), 1.0),
        "left_pct": 100.0 * turning["left"] / ls if ls else 0.0,
        "straight_pct": 100.0 * turning["straight"] / ls if ls else 0.0,
        "right_share_pct": 100.0 * turning["right"] / allturns if allturns else 0.0,
        "counts": dict(turning),
    }


# -- learned controller ---------------------------------------------------------------

class LearnedController:
    """Policy agents plus (optionally) the multi-task learner for one variant."""

    def __init__(self, config: ExperimentConfig, network: RoadNetwork, seed: int):
        self.variant = config.controller
        self.cfg = config.train
        m, K = network.uniform_shape()
        self.n_agents = len(network.intersections)
        blocks = VARIANT_BLOCKS[self.variant]
        self.uses_latents = any(b in blocks for b in ("shr", "spe"))
        self.blocks = blocks
        dims = {"raw": m + K}
        if "global" in blocks:
            dims["global"] = len(INDICATORS) * config.multitask.tau
        for b in ("shr", "spe"):
            if b in blocks:
                dims[b] = config.multitask.shr_dim if b == "shr" else config.multitask.spe_dim
        agent_seed, mt_seed = _seed_ints(seed, 2)
        self.agents = DQNAgents(self.n_agents, dims, K, self.cfg, agent_seed)
        self.mt = None
        if self.uses_latents and config.multitask_enabled:
            self.mt = MultiTaskLearner(self.n_agents, m, K, config.multitask, mt_seed)
        self.history = HistoryBuffer(config.multitask.tau)
        self.zero = np.zeros((self.n_agents, config.multitask.shr_dim))
        if config.multitask.coef_mode == "loss_weight":
            self.coef_shr = self.coef_spe = 1.0
        else:
            self.coef_shr, self.coef_spe = self.cfg.coef_shr, self.cfg.coef_spe

    def reset_episode(self):
        self.history.reset()
        if self.mt is not None:
            self.mt.reset_episode()

    def inputs(self, raw: np.ndarray) -> dict[str, np.ndarray]:
        lat = self.mt.latents() if self.mt is not None else None
        o_shr = (lat.o_shr if lat is not None else self.zero) if "shr" in self.blocks else None
        o_spe = (lat.o_spe if lat is not None else self.zero) if "spe" in self.blocks else None
        extra = None
        if "global" in self.blocks:
            extra = np.broadcast_to(compress(self.history.arrays()).reshape(-1), (self.n_agents, self.history.data.size))
        return assemble_observation(raw, o_shr, o_spe, self.coef_shr, self.coef_spe, extra)

    def observe(self, state, raw_next, entered, tick):
        mean, queue_total, trips = _indicators(state)
        self.history.push(entered, mean, queue_total, state.n_active)
        if self.mt is not None:
            self.mt.observe(raw_next, entered, mean, queue_total, state.n_active, trips, tick)


def _indicators(state):
    """(mean travel time, total queue, completed-trip moment sums)."""
    n, mean, _ = state.travel_stats()
    return mean, int(state.qlen.sum()), (n, state._tt_sum, state._tt_sumsq)


def multitask_trace(scenario: Scenario, train: TrainConfig | None = None, mt_config: MultiTaskConfig | None = None,
                    seed: int = 0, controller: str = "max_pressure") -> MultiTaskLearner:
    """Run one episode under a classical controller with a multitask learner
    observing (no training). The learner's pending samples form the trace."""
    train = train or TrainConfig()
    net = scenario.network
    m, K = net.uniform_shape()
    learner = MultiTaskLearner(len(net.intersections), m, K, mt_config, seed)
    ctrl = ClassicalController(ControllerConfig(controller), net, seed)
    state = new_state(net, scenario.flow, seed=episode_flow_seed(seed, 0))
    for _ in range(train.horizon // train.action_interval):
        actions = ctrl.act(state)
        entered = 0
        for _ in range(train.action_interval):
            step(state, actions)
            entered += state.entered_last_tick
        mean, queue_total, trips = _indicators(state)
        learner.observe(raw_observations(state), entered, mean, queue_total, state.n_active, trips, state.clock)
    return learner


def run_episode(controller, scenario: Scenario, train: TrainConfig, flow_seed: int, learn: bool,
                trace: list | None = None):
    """One horizon-long episode. ``controller`` is a LearnedController or a
    ClassicalController. Returns (state, phase_counts, queue_totals,
    per-agent cumulative reward)."""
    net = scenario.network
    state = new_state(net, scenario.flow, seed=flow_seed)
    n_steps = train.horizon // train.action_interval
    _, K = net.uniform_shape()
    A = len(net.intersections)
    phase_counts = np.zeros((A, K), dtype=np.int64)
    queue_totals = []
    reward_totals = np.zeros(A)
    learned = isinstance(controller, LearnedController)
    if learned:
        controller.reset_episode()
        inputs = controller.inputs(raw_observations(state))
    for t in range(n_steps):
        if learned:
            actions = controller.agents.act(inputs, greedy=not learn)
        else:
            actions = controller.act(state)
        phase_counts[np.arange(A), actions] += 1
        entered = 0
        for _ in range(train.action_interval):
            step(state, actions)
            entered += state.entered_last_tick
        queue_totals.append(int(state.qlen.sum()))
        r = rewards(state)
        reward_totals += r
        if trace is not None:
            trace.append(np.asarray(actions).copy())
        if not learned:
            continue
        raw_next = raw_observations(state)
        controller.observe(state, raw_next, entered, state.clock)
        next_inputs = controller.inputs(raw_next)
        if learn:
            # the horizon is a time limit, not an absorbing state, so the last step still bootstraps
            controller.agents.buffer.store({b: inputs[b] for b in controller.agents.blocks}, actions, r,
                                           {b: next_inputs[b] for b in controller.agents.blocks},
                                           terminal=False)
            if (t + 1) % train.policy_period == 0:
                controller.agents.td_train()
            if controller.mt is not None and (t + 1) % train.multitask_period == 0:
                controller.mt.train()
        inputs = next_inputs
    return state, phase_counts, queue_totals, reward_totals


def fixed_time_search(scenario: Scenario, train: TrainConfig, durations, seed: int = 0):
    """Exhaustive search over per-phase fixed-time schedules with every phase
    length drawn from ``durations`` (zero skips a phase). Offsets are zero and
    every schedule sees the same arrivals. Returns [(schedule, ATT)] sorted
    best first."""
    import itertools
    _, K = scenario.network.uniform_shape()
    flow_seed = episode_flow_seed(seed, 10_000)
    out = []
    for sched in itertools.product(durations, repeat=K):
        if sum(sched) <= 0:
            continue
        ctrl = ClassicalController(ControllerConfig("fixed_time", phase_durations=sched), scenario.network,
                                   seed, random_offsets=False)
        state = run_episode(ctrl, scenario, train, flow_seed, learn=False)[0]
        out.append((tuple(sched), average_travel_time(state, state.clock)))
    out.sort(key=lambda x: (x[1], x[0]))
    return out


def _record(controller_name, seed, episode, result, eps, t0, chash):
    state, phase_counts, queue_totals, reward_totals = result
    return RunRecord(
        controller=controller_name, seed=seed, episode=episode,
        avg_travel_time=average_travel_time(state, state.clock),
        queue_totals=queue_totals, phase_counts=phase_counts, agent_rewards=reward_totals,
        turning=turning_counts(state),
        completed=len(state.completed), spawned=state.n_spawned, epsilon=eps,
        wall_clock=time.perf_counter() - t0, config_hash=chash,
    )


def train_seed(config: ExperimentConfig, seed: int, scenario: Scenario | None = None,
               return_controller: bool = False):
    """All training episodes for one seed."""
    scenario = scenario or build_scenario(config.scenario)
    chash = config_hash(config)
    if config.controller not in LEARNED:
        raise ContractViolation(f"{config.controller} is not a learning controller")
    ctrl = LearnedController(config, scenario.network, seed)
    records = []
    for ep in range(config.episodes):
        t0 = time.perf_counter()
        result = run_episode(ctrl, scenario, config.train, episode_flow_seed(seed, ep), learn=True)
        records.append(_record(config.controller, seed, ep, result, ctrl.agents.epsilon, t0, chash))
    return (records, ctrl) if return_controller else records


def run_training(config: ExperimentConfig, jobs: int = 1) -> list[RunRecord]:
    """Train ``config.controller`` for every seed; one record per (seed, episode)."""
    if jobs > 1 and len(config.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as pool:
            parts = list(pool.map(train_seed, [config] * len(config.seeds), config.seeds))
    else:
        scenario = build_scenario(config.scenario)
        parts = [train_seed(config, s, scenario) for s in config.seeds]
    return [r for part in parts for r in part]


def simulate(config: ExperimentConfig, seed: int | None = None, checkpoint: str | None = None,
             controller: LearnedController | None = None) -> RunRecord:
    """Single deterministic evaluation episode; learned controllers act greedily."""
    scenario = build_scenario(config.scenario)
    seed = config.seeds[0] if seed is None else seed
    if config.controller in CLASSICAL:
        ctrl = ClassicalController(ControllerConfig(config.controller, **config.classical), scenario.network, seed)
    else:
        if controller is None:
            if checkpoint is None:
                raise ContractViolation(f"evaluating {config.controller} needs a checkpoint")
            controller = LearnedController(config, scenario.network, seed)
            load_controller(controller, checkpoint)
        ctrl = controller
    t0 = time.perf_counter()
    result = run_episode(ctrl, scenario, config.train, episode_flow_seed(seed, 10_000), learn=False)
    eps = ctrl.agents.epsilon if isinstance(ctrl, LearnedController) else 0.0
    return _record(config.controller, seed, 0, result, eps, t0, config_hash(config))


def evaluate_controller(config: ExperimentConfig, seed: int | None = None, checkpoint: str | None = None,
                        controller: LearnedController | None = None) -> float:
    """Average travel time of one greedy/deterministic episode."""
    return simulate(config, seed, checkpoint, controller).avg_travel_time


def evaluate_classical(config: ExperimentConfig, seeds=None) -> list[float]:
    return [evaluate_controller(config, seed=s) for s in (seeds or config.seeds)]


def save_controller(ctrl: LearnedController, path) -> None:
    arrays = {f"agents.{k}": v for k, v in ctrl.agents.checkpoint_arrays().items()}
    if ctrl.mt is not None:
        arrays.update({f"multitask.{k}": v for k, v in ctrl.mt.checkpoint_arrays().items()})
    nn.save_checkpoint(path, arrays, {"variant": ctrl.variant})


def load_controller(ctrl: LearnedController, path) -> None:
    arrays, meta = nn.load_checkpoint(path)
    if meta.get("variant") != ctrl.variant:
        raise ContractViolation(f"checkpoint is for {meta.get('variant')}, not {ctrl.variant}")
    ctrl.agents.load_checkpoint_arrays({k[7:]: v for k, v in arrays.items() if k.startswith("agents.")})
    if ctrl.mt is not None:
        ctrl.mt.load_checkpoint_arrays({k[10:]: v for k, v in arrays.items() if k.startswith("multitask.")})


# -- summaries ------------------------------------------------------------------------

def summarize(records: list[RunRecord]) -> dict:
    """Mean over seeds of the final-episode and best-episode travel time."""
    by_seed: dict[int, list[RunRecord]] = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
    finals = [sorted(rs, key=lambda r: r.episode)[-1].avg_travel_time for rs in by_seed.values()]
    bests = [min(r.avg_travel_time for r in rs) for rs in by_seed.values()]
    return {"final": float(np.mean(finals)), "best": float(np.mean(bests)),
            "per_seed_final": finals, "seeds": sorted(by_seed)}


def ablation_suite(config: ExperimentConfig, variants=ABLATION_ORDER, jobs: int = 1) -> dict:
    """Train every variant on the same scenario and seed set. Returns
    ``{"rows": [(variant, summary)], "records": {variant: [...]}}``."""
    rows, all_records = [], {}
    for v in variants:
        recs = run_training(config.replace(controller=v), jobs=jobs)
        all_records[v] = recs
        rows.append((v, summarize(recs)))
    return {"rows": rows, "records": all_records}


def comparison_table(rows: list[tuple[str, dict]], key: str = "final") -> str:
    lines = [f"{'method':<12} {key + ' ATT (s)':>16}"]
    for name, summ in rows:
        lines.append(f"{name:<12} {summ[key]:>16.2f}")
    return "\n".join(lines)
