"""Classical signal controllers: FixedTime, SOTL and MaxPressure."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .sim import SimState, _intersection

CONTROLLERS = ("fixed_time", "sotl", "max_pressure", "mtlight", "base", "base_raw", "base_shr", "base_spe")


@dataclass
class ControllerConfig:
    kind: str = "max_pressure"
    fixed_phase_duration: float = 30.0
    sotl_threshold: int = 5
    phase_durations: Optional[tuple] = None  # per-phase seconds; overrides fixed_phase_duration

    def __post_init__(self):
        if self.kind not in ("fixed_time", "sotl", "max_pressure"):
            raise ValueError(f"unknown classical controller {self.kind!r}")
        if self.fixed_phase_duration <= 0:
            raise ValueError("fixed_phase_duration must be > 0")
        if self.sotl_threshold < 1:
            raise ValueError("sotl_threshold must be >= 1")
        if self.phase_durations is not None:
            d = np.asarray(self.phase_durations, dtype=np.float64)
            if d.ndim != 1 or np.any(d < 0) or d.sum() <= 0:
                raise ValueError("phase_durations must be non-negative with a positive sum")
            self.phase_durations = tuple(float(x) for x in d)

    def cycle(self, K: int) -> float:
        if self.phase_durations is not None:
            if len(self.phase_durations) != K:
                raise ValueError(f"phase_durations has {len(self.phase_durations)} entries for {K} phases")
            return sum(self.phase_durations)
        return K * self.fixed_phase_duration


def fixed_time_decide(intersection, clock: float, config: ControllerConfig, offset: float = 0.0) -> int:
    """Cycle through the phases, ``duration`` seconds each, shifted by ``offset``.

    ``intersection`` is an :class:`~mtlight.sim.Intersection` or a phase count.
    """
    K = intersection if isinstance(intersection, (int, np.integer)) else intersection.n_phases
    if config.phase_durations is None:
        return int((clock + offset) // config.fixed_phase_duration) % K
    t = (clock + offset) % config.cycle(K)
    # zero-length phases are skipped: the first phase whose end lies past t
    ends = np.cumsum(config.phase_durations)
    return int(np.searchsorted(ends, t, side="right"))


def sotl_decide(state: SimState, intersection, config: ControllerConfig) -> int:
    """Advance to the next phase when the queue it would serve exceeds the threshold."""
    i = _intersection(state, intersection)
    K = state.network.intersections[i].n_phases
    cur = int(state._phases[i])
    nxt = (cur + 1) % K
    waiting = int(state.qlen[state.network.phase_lanes[i][nxt]].sum())
    return nxt if waiting > config.sotl_threshold else cur


def pressure(state: SimState, intersection, phase: int) -> float:
    i = _intersection(state, intersection)
    net = state.network
    ph = net.intersections[i].phases[phase]
    dens = state.occupancy / net.capacity
    return float(sum(dens[a] - dens[b] for a, b in ph.movements))


def phase_pressures(state: SimState, intersection) -> np.ndarray:
    i = _intersection(state, intersection)
    return np.array([pressure(state, i, k) for k in range(state.network.intersections[i].n_phases)])


def max_pressure_decide(state: SimState, intersection) -> int:
    # np.argmax returns the first maximum, i.e. the lowest phase index on ties
    return int(np.argmax(phase_pressures(state, intersection)))


class PressureTable:
    """Vectorised pressures for every (intersection, phase) of a network with
    uniform phase count, as a sparse movement incidence matrix."""

    def __init__(self, network):
        self.n = len(network.intersections)
        self.K = max(it.n_phases for it in network.intersections)
        rows, ins, outs = [], [], []
        for i, it in enumerate(network.intersections):
            for k, ph in enumerate(it.phases):
                for a, b in ph.movements:
                    rows.append(i * self.K + k)
                    ins.append(a)
                    outs.append(b)
        self.rows = np.array(rows, dtype=np.int64)
        self.ins = np.array(ins, dtype=np.int64)
        self.outs = np.array(outs, dtype=np.int64)
        self.capacity = network.capacity
        valid = np.full((self.n, self.K), -np.inf)
        for i, it in enumerate(network.intersections):
            valid[i, :it.n_phases] = 0.0
        self.valid = valid

    def pressures(self, state: SimState) -> np.ndarray:
        dens = state.occupancy / self.capacity
        contrib = dens[self.ins] - dens[self.outs]
        out = np.bincount(self.rows, weights=contrib, minlength=self.n * self.K).reshape(self.n, self.K)
        return out + self.valid

    def decide(self, state: SimState) -> np.ndarray:
        return np.argmax(self.pressures(state), axis=1)


class ClassicalController:
    """Per-decision joint action for all intersections."""

    def __init__(self, config: ControllerConfig, network, seed: int = 0, random_offsets: bool = True):
        self.config = config
        self.network = network
        rng = np.random.default_rng(seed)
        # random offsets for FixedTime, one per intersection
        cycle = [config.cycle(it.n_phases) for it in network.intersections]
        self.offsets = None
        if config.kind == "fixed_time":
            self.offsets = np.array([rng.uniform(0, c) for c in cycle]) if random_offsets else np.zeros(len(cycle))
        self.table = PressureTable(network) if config.kind == "max_pressure" else None

    def act(self, state: SimState) -> np.ndarray:
        kind = self.config.kind
        if kind == "max_pressure":
            return self.table.decide(state)
        if kind == "fixed_time":
            return np.array([fixed_time_decide(it, state.clock, self.config, off)
                             for it, off in zip(self.network.intersections, self.offsets)])
        return np.array([sotl_decide(state, i, self.config) for i in range(len(self.network.intersections))])
