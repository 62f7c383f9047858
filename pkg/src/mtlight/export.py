"""CSV, SVG and manifest output for run records.

CSV schemas (one header row, ``\\n`` line endings, floats via ``repr``):

episodes.csv  controller, seed, episode, avg_travel_time, mean_queue, completed, spawned, epsilon, config_hash
agents.csv    controller, seed, episode, agent, cumulative_reward, epsilon
phases.csv    controller, seed, episode, agent, phase, count
turning.csv   controller, seed, episode, left, straight, right
queues.csv    controller, seed, episode, step, queue_total

Wall-clock times are kept out of the CSVs (they go to timing.json) so the
metric files are byte-identical across reruns of the same config and seed.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import __version__

EPISODE_COLUMNS = ["controller", "seed", "episode", "avg_travel_time", "mean_queue", "completed", "spawned",
                   "epsilon", "config_hash"]
AGENT_COLUMNS = ["controller", "seed", "episode", "agent", "cumulative_reward", "epsilon"]
PHASE_COLUMNS = ["controller", "seed", "episode", "agent", "phase", "count"]
TURNING_COLUMNS = ["controller", "seed", "episode", "left", "straight", "right"]
QUEUE_COLUMNS = ["controller", "seed", "episode", "step", "queue_total"]


class ExportError(OSError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _write_csv(path: Path, columns: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _ensure_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ExportError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise ExportError(f"output directory {out} is not writable")
    return out


def _ordered(records):
    return sorted(records, key=lambda r: (r.controller, r.seed, r.episode))


def write_csvs(records, out_dir) -> dict[str, Path]:
    if not records:
        raise ValueError("nothing to export: no run records")
    out = _ensure_dir(out_dir)
    recs = _ordered(records)
    paths = {name: out / f"{name}.csv" for name in ("episodes", "agents", "phases", "turning", "queues")}
    _write_csv(paths["episodes"], EPISODE_COLUMNS, (
        (r.controller, r.seed, r.episode, r.avg_travel_time, r.mean_queue, r.completed, r.spawned, r.epsilon,
         r.config_hash) for r in recs))
    _write_csv(paths["agents"], AGENT_COLUMNS, (
        (r.controller, r.seed, r.episode, a, float(v), r.epsilon)
        for r in recs for a, v in enumerate(r.agent_rewards)))
    _write_csv(paths["phases"], PHASE_COLUMNS, (
        (r.controller, r.seed, r.episode, a, k, int(c))
        for r in recs for a, row in enumerate(r.phase_counts) for k, c in enumerate(row)))
    _write_csv(paths["turning"], TURNING_COLUMNS, (
        (r.controller, r.seed, r.episode, r.turning["left"], r.turning["straight"], r.turning["right"])
        for r in recs))
    _write_csv(paths["queues"], QUEUE_COLUMNS, (
        (r.controller, r.seed, r.episode, t, q) for r in recs for t, q in enumerate(r.queue_totals)))
    return paths


def read_episodes(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["seed"], row["episode"] = int(row["seed"]), int(row["episode"])
        for k in ("avg_travel_time", "mean_queue", "epsilon"):
            row[k] = float(row[k])
    return rows


def convergence_series(rows) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per controller: (episodes, mean travel time over seeds)."""
    by = {}
    for row in rows:
        by.setdefault(row["controller"], {}).setdefault(row["episode"], []).append(row["avg_travel_time"])
    out = {}
    for ctrl, eps in sorted(by.items()):
        xs = np.array(sorted(eps))
        out[ctrl] = (xs, np.array([np.mean(eps[x]) for x in xs]))
    return out


def plot_convergence(series: dict, path, title: str = "Average travel time") -> tuple[float, float]:
    """SVG line chart of travel time vs episode; returns the y-axis limits."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "mtlight", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, (x, y) in series.items():
            ax.plot(x, y, marker="o" if len(x) < 2 else None, label=name)
        lo = min(float(np.min(y)) for _, y in series.values())
        hi = max(float(np.max(y)) for _, y in series.values())
        pad = 0.05 * (hi - lo) if hi > lo else max(1.0, 0.05 * abs(hi))
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_xlabel("episode")
        ax.set_ylabel("average travel time (s)")
        ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        ylim = ax.get_ylim()
        plt.close(fig)
    return ylim


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, config: dict, config_hash: str, seeds, files: dict[str, Path], extra=None) -> Path:
    """Run manifest: config, seeds and a content hash over the output files."""
    hashes = {name: file_sha256(p) for name, p in sorted(files.items())}
    content = hashlib.sha256("".join(f"{n}:{h}\n" for n, h in hashes.items()).encode()).hexdigest()
    doc = {"format_version": 1, "package_version": __version__, "config": config, "config_hash": config_hash,
           "seeds": list(seeds), "files": hashes, "content_hash": content}
    if extra:
        doc.update(extra)
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def export_run(records, out_dir, config: dict, config_hash: str, seeds) -> dict[str, Path]:
    """All artefacts for a run: CSVs, convergence SVG, timing and manifest."""
    files = write_csvs(records, out_dir)
    out = Path(out_dir)
    svg = out / "convergence.svg"
    plot_convergence(convergence_series(read_episodes(files["episodes"])), svg)
    files["convergence_svg"] = svg
    timing = {f"{r.controller}/{r.seed}/{r.episode}": r.wall_clock for r in _ordered(records)}
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    files["manifest"] = write_manifest(out, config, config_hash, seeds, files)
    return files
