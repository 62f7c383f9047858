"""Train Base and MTLight on a small grid, export metrics and plot the curves.

A short run (2x2 grid, uniform demand, 20 half-hour episodes, 2 seeds) so it
finishes in about two minutes.
Artefacts land in ``demo_output/`` under the current directory.
"""
from pathlib import Path

from mtlight.export import export_run
from mtlight.harness import ExperimentConfig, ScenarioConfig, ablation_suite, comparison_table, config_hash

out = Path("demo_output/ablation")
sc = ScenarioConfig(grid=(2, 2), flow="uniform", rate=1.0, horizon=1800)
cfg = ExperimentConfig(scenario=sc, episodes=20, seeds=[0, 1])
cfg.train.horizon = 1800
result = ablation_suite(cfg, variants=("base", "base_shr", "mtlight"))

# final = mean over seeds of the last training episode; best = mean of each seed's best episode
print(comparison_table(result["rows"]))
print(comparison_table(result["rows"], key="best"))

records = [r for recs in result["records"].values() for r in recs]
files = export_run(records, out, cfg.to_dict(), config_hash(cfg), cfg.seeds)
print("wrote", ", ".join(sorted(p.name for p in files.values())), "to", out)
