"""A tour of the queue simulator and the classical controllers.

Run with ``python3 demos/01_simulator_tour.py``; takes a few seconds.
"""
import numpy as np

from mtlight.baselines import ClassicalController, ControllerConfig
from mtlight.harness import ExperimentConfig, ScenarioConfig, evaluate_controller
from mtlight.scenario import gen_grid, grid_routes
from mtlight.sim import average_travel_time, build_network, new_state, raw_observation, reward, step

# One intersection, one right-turning car. Right turns never wait for green,
# so the trip is 27 s of free flow on the 300 m entry lane plus 2 s to clear
# the stop line.
spec = gen_grid(1, 1)
net = build_network(spec)
state = new_state(net)
route = next(r for r in grid_routes(spec) if r[0] == "in_0_0_N_R")
state.spawn(tuple(net.lane(l) for l in route))
for _ in range(40):
    step(state, [0])
print("single car completed:", state.completed, "-> travel time", average_travel_time(state), "s")

# What an agent sees: per-lane counts then the one-hot phase; its reward is
# minus the queued vehicles on its incoming lanes.
state = new_state(net, flow=None)
state.occupancy[net.lane("in_0_0_N_S")] = 7
print("observation:", raw_observation(state, 0))
print("reward with an empty queue:", reward(state, 0))

# Classical controllers on a 2x2 grid with uniform demand.
for kind in ("fixed_time", "sotl", "max_pressure"):
    cfg = ExperimentConfig(scenario=ScenarioConfig(grid=(2, 2), flow="uniform", rate=1.0, horizon=1800),
                           controller=kind, seeds=[0, 1, 2])
    cfg.train.horizon = 1800
    atts = [evaluate_controller(cfg, seed=s) for s in cfg.seeds]
    print(f"{kind:>13}: mean ATT {np.mean(atts):7.2f} s over seeds {cfg.seeds}")
