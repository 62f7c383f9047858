"""Single intersection with 90% of demand on the north-south axis.

The DQN learns to favour the busy axis; the reference is the best per-phase
fixed-time schedule from an exhaustive search. Takes a couple of minutes.
"""
from mtlight.agent import TrainConfig
from mtlight.harness import (ExperimentConfig, ScenarioConfig, build_scenario, evaluate_controller,
                             fixed_time_search, phase_and_turning_stats, simulate, train_seed)
from mtlight.scenario import axis_route_weights, gen_grid, grid_routes

H = 900
weights = axis_route_weights(grid_routes(gen_grid(1, 1)), 0.9, "NS")
sc = ScenarioConfig(grid=(1, 1), flow="uniform", rate=1.0, horizon=H, route_weights=weights)
cfg = ExperimentConfig(scenario=sc, controller="base", train=TrainConfig(horizon=H), episodes=120, seeds=[0])

records, ctrl = train_seed(cfg, 0, return_controller=True)
print("training ATT every 20 episodes:", [round(r.avg_travel_time, 1) for r in records[::20]])
rec = simulate(cfg, controller=ctrl)
stats = phase_and_turning_stats(rec.phase_counts, rec.turning)
print(f"greedy DQN ATT {rec.avg_travel_time:.2f} s, phase usage % (NS-S, NS-L, EW-S, EW-L):",
      [round(float(p), 1) for p in stats["phase_percent"][0]])

ranked = fixed_time_search(build_scenario(sc), cfg.train, (5, 10, 15, 20, 30))
for sched, att in ranked[:3]:
    print(f"fixed-time {sched}: {att:.2f} s")
print(f"DQN / best fixed-time = {rec.avg_travel_time / ranked[0][1]:.3f}")
