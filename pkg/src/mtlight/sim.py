"""Deterministic 1-second-tick queue-based traffic simulator.

Vehicles cross a lane at free-flow speed (ceil(length / (40 km/h)) seconds),
then join the lane's FIFO queue. A green lane releases its queue head once
the lane has been green with a non-empty queue for two consecutive ticks,
provided the next lane on the route has room. Entering an exit lane ends the
trip. Right-turn lanes are always green.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .scenario import FlowSchedule, NetworkSpec, ScenarioError, sample_arrivals, validate_network

FREE_FLOW_SPEED = 40.0 / 3.6  # m/s, 11.11...
SATURATION_HEADWAY = 2   # ticks between discharges on one lane


def moments(n: int, total: int, total_sq: int) -> tuple[int, float, float]:
    """Mean and population variance from integer power sums, each correctly
    rounded (int / int is exact-then-rounded in Python)."""
    if n == 0:
        return 0, 0.0, 0.0
    return n, total / n, (n * total_sq - total * total) / (n * n)


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    capacity: int
    movement_class: str
    upstream: Optional[int]
    downstream: Optional[int]

    @property
    def free_flow_ticks(self) -> int:
        # guard so exact multiples (300 m -> 27 s) are not bumped by rounding
        return max(1, math.ceil(self.length / FREE_FLOW_SPEED - 1e-9))


@dataclass(frozen=True)
class Phase:
    id: int
    movements: tuple[tuple[int, int], ...]

    @property
    def lanes(self) -> tuple[int, ...]:
        return tuple(sorted({a for a, _ in self.movements}))


@dataclass
class Intersection:
    id: str
    incoming_lanes: list[int]
    phases: list[Phase]
    current_phase: int = 0  # phase at episode start; live phases sit in SimState

    @property
    def n_phases(self) -> int:
        return len(self.phases)


class RoadNetwork:
    """Static topology with lane-indexed numpy arrays for fast stepping."""

    def __init__(self, lanes: list[Lane], intersections: list[Intersection],
                 adjacency: dict[tuple[int, int], list[int]], grid=None):
        self.lanes = lanes
        self.intersections = intersections
        self.adjacency = adjacency  # (intersection, in lane) -> out lanes
        self.grid = grid
        self.lane_index = {l.id: n for n, l in enumerate(lanes)}
        self.capacity = np.array([l.capacity for l in lanes], dtype=np.int64)
        self.free_flow = np.array([l.free_flow_ticks for l in lanes], dtype=np.int64)
        self.is_exit = np.array([l.downstream is None for l in lanes])
        always = np.zeros(len(lanes), dtype=bool)
        for (i, lin) in adjacency:
            if lanes[lin].movement_class == "right":
                always[lin] = True
        self.always_green = always
        self.phase_lanes = [[np.array(p.lanes, dtype=np.int64) for p in it.phases] for it in intersections]
        self.incoming = [np.array(it.incoming_lanes, dtype=np.int64) for it in intersections]

    @property
    def n_lanes(self) -> int:
        return len(self.lanes)

    def uniform_shape(self) -> tuple[int, int]:
        """(m, K) shared by every intersection; raises if they differ."""
        shapes = {(len(it.incoming_lanes), it.n_phases) for it in self.intersections}
        if len(shapes) != 1:
            raise ContractViolation(f"intersections differ in (m, K): {sorted(shapes)}")
        return shapes.pop()

    def lane(self, ref) -> int:
        if isinstance(ref, (int, np.integer)):
            if not 0 <= ref < len(self.lanes):
                raise KeyError(f"unknown lane index {ref}")
            return int(ref)
        try:
            return self.lane_index[ref]
        except KeyError:
            raise KeyError(f"unknown lane {ref!r}") from None


def build_network(spec: NetworkSpec) -> RoadNetwork:
    """Turn a validated spec into a :class:`RoadNetwork`.

    Raises :class:`ScenarioError` naming the offending lane on dangling
    references.
    """
    validate_network(spec)
    inter_index = {it.id: n for n, it in enumerate(spec.intersections)}
    lanes = [
        Lane(l.id, float(l.length), int(l.capacity), l.movement,
             inter_index.get(l.upstream) if l.upstream else None,
             inter_index.get(l.downstream) if l.downstream else None)
        for l in spec.lanes
    ]
    lidx = {l.id: n for n, l in enumerate(lanes)}
    adjacency: dict[tuple[int, int], list[int]] = {}
    for iid, lin, lout in spec.links:
        adjacency.setdefault((inter_index[iid], lidx[lin]), []).append(lidx[lout])
    inters = []
    for it in spec.intersections:
        phases = [Phase(k, tuple((lidx[a], lidx[b]) for a, b in p)) for k, p in enumerate(it.phases)]
        inters.append(Intersection(it.id, [lidx[l] for l in it.incoming], phases))
    return RoadNetwork(lanes, inters, adjacency, spec.grid)


@dataclass
class Vehicle:
    id: int
    route: tuple[int, ...]
    enter_time: int
    exit_time: Optional[int] = None
    position: int = 0  # index into route
    entered: bool = False


@dataclass
class GlobalStats:
    incoming_count: int
    avg_travel_time: float
    queue_total: int
    on_road: int


class SimState:
    """Mutable simulation state. ``step`` advances it in place."""

    def __init__(self, network: RoadNetwork, flow: FlowSchedule | None = None, seed: int | None = None):
        self.network = network
        self.clock = 0
        n = network.n_lanes
        self.queues: list[deque] = [deque() for _ in range(n)]
        self.qlen = np.zeros(n, dtype=np.int64)
        self.occupancy = np.zeros(n, dtype=np.int64)  # queue + in transit
        self.green_run = np.zeros(n, dtype=np.int64)
        self.green = network.always_green.copy()
        self.transit_due: dict[int, list[tuple[int, int]]] = {}
        self.vehicles: list[Vehicle] = []
        self.pending: dict[int, deque] = {}
        self.n_pending = 0
        self.n_active = 0
        self.completed: list[tuple[int, int]] = []
        self.completed_by_lane: dict[int, list[int]] = {}
        self.cumulative_entered = 0
        self.entered_last_tick = 0
        self.completed_last_tick = 0
        self._tt_sum = 0  # python ints keep the moments exact
        self._tt_sumsq = 0
        self.flow = flow
        self._route_idx: list[tuple[int, ...]] = []
        if flow is not None:
            self._route_idx = [tuple(network.lane(l) for l in r) for r in flow.routes]
            for r, route in zip(flow.routes, self._route_idx):
                if not network.is_exit[route[-1]]:
                    raise ScenarioError(f"route must end on an exit lane, got {r[-1]!r}", "routes")
        self.rng = np.random.default_rng(flow.seed if seed is None and flow is not None else (seed or 0))
        self._phases = np.array([it.current_phase for it in network.intersections], dtype=np.int64)
        self._refresh_green()

    # -- views ----------------------------------------------------------------
    @property
    def n_spawned(self) -> int:
        return len(self.vehicles)

    @property
    def active_vehicles(self) -> dict[int, Vehicle]:
        return {v.id: v for v in self.vehicles if v.entered and v.exit_time is None}

    @property
    def pending_entries(self) -> dict[int, list[int]]:
        return {lane: list(q) for lane, q in self.pending.items() if q}

    def queue(self, lane) -> list[int]:
        return list(self.queues[self.network.lane(lane)])

    def in_transit(self, lane) -> int:
        i = self.network.lane(lane)
        return int(self.occupancy[i] - self.qlen[i])

    @property
    def phases(self) -> np.ndarray:
        return self._phases.copy()

    def travel_stats(self) -> tuple[int, float, float]:
        """(count, mean, population variance) of completed trip durations."""
        return moments(len(self.completed), self._tt_sum, self._tt_sumsq)

    # -- internals ---------------------------------------------------------------
    def _refresh_green(self) -> None:
        g = self.network.always_green.copy()
        for i, k in enumerate(self._phases):
            g[self.network.phase_lanes[i][k]] = True
        self.green = g

    def set_phases(self, actions: Sequence[int]) -> None:
        net = self.network
        acts = np.asarray(actions, dtype=np.int64).reshape(-1)
        if acts.size != len(net.intersections):
            raise ContractViolation(f"expected {len(net.intersections)} actions, got {acts.size}")
        for i, (a, it) in enumerate(zip(acts, net.intersections)):
            if not 0 <= a < it.n_phases:
                raise ContractViolation(f"action {a} out of range [0, {it.n_phases}) for {it.id}")
        if not np.array_equal(acts, self._phases):
            self._phases = acts.copy()
            self._refresh_green()

    def spawn(self, route: tuple[int, ...]) -> int:
        vid = len(self.vehicles)
        self.vehicles.append(Vehicle(vid, route, self.clock))
        self.pending.setdefault(route[0], deque()).append(vid)
        self.n_pending += 1
        return vid

    def _admit(self) -> int:
        net, t = self.network, self.clock
        entered = 0
        for lane, buf in self.pending.items():
            cap = net.capacity[lane]
            while buf and self.occupancy[lane] < cap:
                vid = buf.popleft()
                v = self.vehicles[vid]
                v.entered = True
                self.occupancy[lane] += 1
                self.transit_due.setdefault(t + int(net.free_flow[lane]), []).append((vid, lane))
                entered += 1
        self.n_pending -= entered
        self.n_active += entered
        self.cumulative_entered += entered
        return entered

    def _complete(self, v: Vehicle, lane: int) -> None:
        v.exit_time = self.clock + 1
        self.n_active -= 1
        self.completed.append((v.enter_time, v.exit_time))
        self.completed_by_lane.setdefault(lane, []).append(v.exit_time)
        d = v.exit_time - v.enter_time
        self._tt_sum += d
        self._tt_sumsq += d * d

    def _discharge(self) -> int:
        net = self.network
        served = self.green & (self.qlen > 0)
        self.green_run = np.where(served, np.minimum(self.green_run + 1, SATURATION_HEADWAY), 0)
        done = 0
        for lane in np.flatnonzero(self.green_run >= SATURATION_HEADWAY):
            vid = self.queues[lane][0]
            v = self.vehicles[vid]
            nxt = v.route[v.position + 1]
            if net.is_exit[nxt]:
                self._complete(v, lane)
                done += 1
            elif self.occupancy[nxt] < net.capacity[nxt]:
                v.position += 1
                self.occupancy[nxt] += 1
                self.transit_due.setdefault(self.clock + 1 + int(net.free_flow[nxt]), []).append((vid, nxt))
            else:
                continue  # blocked downstream; keep the saturated headway
            self.queues[lane].popleft()
            self.qlen[lane] -= 1
            self.occupancy[lane] -= 1
            self.green_run[lane] = 0
        return done

    def _arrive_at_queues(self) -> None:
        for vid, lane in self.transit_due.pop(self.clock, ()):
            self.queues[lane].append(vid)
            self.qlen[lane] += 1

    def tick(self) -> None:
        """Advance one second: arrivals and admission, lane-end arrivals,
        discharge, then the clock."""
        if self.flow is not None and self.flow.routes and self.clock < self.flow.horizon:
            for ridx, _ in sample_arrivals(self.flow, self.clock, self.rng):
                self.spawn(self._route_idx[ridx])
        self.entered_last_tick = self._admit()
        self._arrive_at_queues()
        self.completed_last_tick = self._discharge()
        self.clock += 1


def new_state(network: RoadNetwork, flow: FlowSchedule | None = None, seed: int | None = None) -> SimState:
    return SimState(network, flow, seed)


def step(state: SimState, actions: Sequence[int], flow: FlowSchedule | None = None) -> SimState:
    """Apply ``actions`` (one phase index per intersection) and advance one tick.

    The state is advanced in place and returned. ``flow`` may be given to
    (re)bind the arrival program.
    """
    if flow is not None and flow is not state.flow:
        state.flow = flow
        state._route_idx = [tuple(state.network.lane(l) for l in r) for r in flow.routes]
    state.set_phases(actions)
    state.tick()
    return state


def queue_length(state: SimState, lane) -> int:
    return int(state.qlen[state.network.lane(lane)])


def _intersection(state: SimState, intersection) -> int:
    inters = state.network.intersections
    if isinstance(intersection, (int, np.integer)):
        if not 0 <= intersection < len(inters):
            raise KeyError(f"unknown intersection {intersection}")
        return int(intersection)
    for n, it in enumerate(inters):
        if it.id == intersection:
            return n
    raise KeyError(f"unknown intersection {intersection!r}")


def reward(state: SimState, intersection) -> float:
    """Negative total queue on the intersection's incoming lanes."""
    i = _intersection(state, intersection)
    return 0.0 - float(state.qlen[state.network.incoming[i]].sum())  # no negative zero


def rewards(state: SimState) -> np.ndarray:
    return np.array([0.0 - float(state.qlen[inc].sum()) for inc in state.network.incoming])


def raw_observation(state: SimState, intersection) -> np.ndarray:
    """Per-incoming-lane vehicle counts followed by the one-hot current phase."""
    i = _intersection(state, intersection)
    it = state.network.intersections[i]
    onehot = np.zeros(it.n_phases)
    onehot[state._phases[i]] = 1.0
    return np.concatenate([state.occupancy[state.network.incoming[i]].astype(np.float64), onehot])


def raw_observations(state: SimState) -> np.ndarray:
    """Stacked observations, shape (n_intersections, m + K); needs uniform (m, K)."""
    m, K = state.network.uniform_shape()
    counts = state.occupancy[np.stack(state.network.incoming)].astype(np.float64)
    onehot = np.zeros((len(state._phases), K))
    onehot[np.arange(len(state._phases)), state._phases] = 1.0
    return np.concatenate([counts, onehot], axis=1)


def global_stats(state: SimState) -> GlobalStats:
    """Indicators for the current tick. Travel time is the cumulative mean
    since episode start (0 before any trip completes)."""
    _, mean, _ = state.travel_stats()
    return GlobalStats(
        incoming_count=state.entered_last_tick,
        avg_travel_time=mean,
        queue_total=int(state.qlen.sum()),
        on_road=state.n_active,
    )


def average_travel_time(state: SimState, horizon: int | None = None) -> float:
    """Mean trip duration; trips unfinished at ``horizon`` (default: the
    clock) count as ``horizon - enter_time``."""
    if not state.vehicles:
        raise ContractViolation("empty scenario: no vehicles were spawned")
    horizon = state.clock if horizon is None else horizon
    total = state._tt_sum
    for v in state.vehicles:
        if v.exit_time is None:
            total += horizon - v.enter_time
    return total / len(state.vehicles)


def check_conservation(state: SimState) -> bool:
    return state.n_spawned == state.n_pending + state.n_active + len(state.completed)
