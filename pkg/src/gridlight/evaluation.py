"""Rollout evaluation and reporting.

Trained policies and rule-based controllers are scored with the same two
numbers: average travel time (ATT, seconds per vehicle, trips still in the
network counted to the episode end) and queue length (QL, the time-average of
the total queue over control steps).  Because the shared reward is the
negated total queue, QL is exactly the negated mean per-step reward — reports
can be cross-checked against logged rewards without re-simulating.

Also here: moving-window learning curves, the wall-time scaling benchmark
over growing grids, and the plot/CSV emitters the command line uses.  Plots
carry their title and series labels in the PNG metadata so artifacts can be
checked without pixel comparisons.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, replace

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .config import grid_size_spec
from .controllers import Controller, ControllerSpec, make_controller
from .errors import ConfigError, FingerprintError
from .simnet import (AdjacencyGraph, NetworkSpec, average_travel_time,
                     build_adjacency, build_grid, observe_all, run_episode,
                     step)
from .trainers import AgentNetConfig, PolicyCheckpoint, forward_policy
from . import trainers


class PolicyController:
    """Adapter running a trained checkpoint under the controller protocol.

    Keeps the growing observation history an agent's recurrent policy
    conditions on, and always executes the argmax action, so rollouts are
    deterministic given (checkpoint, seed).
    """

    def __init__(self, checkpoint: PolicyCheckpoint):
        self.checkpoint = checkpoint
        self._history: list[np.ndarray] = []

    @property
    def label(self) -> str:
        name = self.checkpoint.algo
        return f"offlight-{name}" if self.checkpoint.trainer_config.offlight \
            else name

    def reset(self, network: NetworkSpec) -> None:
        if network.fingerprint() != self.checkpoint.fingerprint:
            raise FingerprintError(
                f"checkpoint was trained on network "
                f"{self.checkpoint.fingerprint}, asked to control "
                f"{network.fingerprint()}")
        self._history = []

    def act(self, state, obs) -> tuple[dict[int, int], dict[int, float]]:
        n = state.num_agents
        self._history.append(
            np.stack([obs[a].features for a in range(n)]).astype(np.float32))
        dist = forward_policy(self.checkpoint, np.stack(self._history))
        actions = {a: int(dist[a].argmax()) for a in range(n)}
        return actions, {a: 1.0 for a in range(n)}


def _as_controller(policy) -> Controller | PolicyController:
    if isinstance(policy, PolicyCheckpoint):
        return PolicyController(policy)
    if isinstance(policy, ControllerSpec):
        return make_controller(policy)
    if hasattr(policy, "reset") and hasattr(policy, "act"):
        return policy
    raise ConfigError(f"cannot evaluate {type(policy).__name__}; expected a "
                      "policy checkpoint, controller, or controller spec")


@dataclass(frozen=True)
class EvalReport:
    """Rollout metrics for one policy on one scenario.

    ``att_mean`` is None when no vehicle ever entered (zero demand); the
    ``*_std`` fields are populated only when at least two seeds were run.
    """

    scenario: str
    demand: str
    algorithm: str
    seeds: tuple[int, ...]
    episodes: int              # per seed
    vehicles: int              # total entered across all rollouts
    att_mean: float | None
    att_std: float | None
    ql_mean: float
    ql_std: float | None
    att_by_seed: tuple[float | None, ...]
    ql_by_seed: tuple[float, ...]

    def __post_init__(self):
        if self.att_mean is not None and self.att_mean < 0:
            raise ConfigError("negative average travel time")
        if self.ql_mean < 0:
            raise ConfigError("negative queue length")


def evaluate(policy, spec: NetworkSpec, episodes: int = 10,
             seeds: tuple[int, ...] = (0, 1, 2), scenario: str = "custom",
             demand: str = "custom") -> EvalReport:
    """Greedy rollouts of ``policy`` on ``spec``; metrics averaged per seed.

    Each (seed, episode) pair gets its own arrival stream; ATT and QL are
    first averaged within a seed, the report's mean/std summarize across
    seeds.
    """
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    if not seeds:
        raise ConfigError("at least one evaluation seed is required")
    controller = _as_controller(policy)
    att_by_seed: list[float | None] = []
    ql_by_seed: list[float] = []
    vehicles = 0
    for seed in seeds:
        atts, qls = [], []
        for e in range(episodes):
            state, trace = run_episode(spec, controller,
                                       seed=seed * 100_000 + e)
            entered = state.vehicles_entered
            vehicles += entered
            if entered:
                atts.append(average_travel_time(state))
            qls.append(-float(np.mean([rec["reward"] for rec in trace])))
        att_by_seed.append(float(np.mean(atts)) if atts else None)
        ql_by_seed.append(float(np.mean(qls)))
    measured = [a for a in att_by_seed if a is not None]
    att_mean = float(np.mean(measured)) if measured else None
    many = len(seeds) >= 2
    att_std = float(np.std(measured)) if measured and many else None
    return EvalReport(
        scenario=scenario, demand=demand, algorithm=controller.label,
        seeds=tuple(seeds), episodes=episodes, vehicles=vehicles,
        att_mean=att_mean, att_std=att_std,
        ql_mean=float(np.mean(ql_by_seed)),
        ql_std=float(np.std(ql_by_seed)) if many else None,
        att_by_seed=tuple(att_by_seed), ql_by_seed=tuple(ql_by_seed))


# -- learning curves -------------------------------------------------------------


def learning_curve(metric_log: list[dict], window: int = 10,
                   metric: str = "loss") -> tuple[np.ndarray, np.ndarray]:
    """Moving-window mean of one metric over training steps.

    The window trails: point *i* averages the last ``window`` values up to
    and including *i*, so ``window=1`` passes the series through unchanged.
    """
    if not metric_log:
        raise ConfigError("empty metric log")
    if window < 1:
        raise ConfigError("window must be positive")
    rows = [row for row in metric_log if metric in row]
    if not rows:
        raise ConfigError(f"metric {metric!r} never logged")
    steps = np.array([row["step"] for row in rows])
    raw = np.array([float(row[metric]) for row in rows])
    smooth = np.array([raw[max(0, i - window + 1):i + 1].mean()
                       for i in range(len(raw))])
    return steps, smooth


# -- scaling benchmark -----------------------------------------------------------


@dataclass(frozen=True)
class ScalingReport:
    """Per-step wall time across grid sizes, with a linear fit in (N+E)."""

    rows: tuple[dict, ...]          # size, agents, edges, seconds_per_step
    slope: float | None             # seconds per (N+E) unit; None for 1 row
    intercept: float | None
    r_squared: float | None


def scaling_benchmark(sizes: list[str], control_steps: int = 30,
                      seed: int = 0, repeats: int = 3,
                      agent_config: AgentNetConfig = AgentNetConfig()
                      ) -> ScalingReport:
    """Wall time of (simulator step + policy forward) per control step.

    Each grid gets a freshly initialized recurrent policy — timing does not
    care about training.  The first rollout per size is an untimed warmup
    (allocator and kernel caches dominate cold starts); the reported number
    is the fastest of ``repeats`` timed rollouts of ``control_steps``
    decisions each.
    """
    if not sizes:
        raise ConfigError("no grid sizes to benchmark")
    if control_steps < 1 or repeats < 1:
        raise ConfigError("control_steps and repeats must be positive")
    rows = []
    for size in sizes:
        base = grid_size_spec(size, seed=seed)
        spec = replace(base, episode_length_s=control_steps *
                       base.action_interval_s)
        graph = build_adjacency(spec)
        ck = _untrained_policy(spec, graph, agent_config, seed)

        def rollout():
            controller = PolicyController(ck)
            controller.reset(spec)
            state, _ = build_grid(spec)
            obs = observe_all(state)
            t0 = time.perf_counter()
            while not state.done:
                actions, _ = controller.act(state, obs)
                state, _, obs, _ = step(state, actions)
            return time.perf_counter() - t0

        rollout()                                    # warmup, untimed
        elapsed = min(rollout() for _ in range(repeats))
        rows.append({"size": size, "agents": spec.num_agents,
                     "edges": graph.num_edges,
                     "seconds_per_step": elapsed / spec.control_steps})
    slope = intercept = r2 = None
    if len(rows) >= 2:
        x = np.array([r["agents"] + r["edges"] for r in rows], dtype=float)
        y = np.array([r["seconds_per_step"] for r in rows])
        slope, intercept = np.polyfit(x, y, 1)
        fitted = slope * x + intercept
        ss_res = float(((y - fitted) ** 2).sum())
        ss_tot = float(((y - y.mean()) ** 2).sum())
        slope, intercept = float(slope), float(intercept)
        r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingReport(rows=tuple(rows), slope=slope, intercept=intercept,
                         r_squared=r2)


def _untrained_policy(spec: NetworkSpec, graph: AdjacencyGraph,
                      agent_config: AgentNetConfig,
                      seed: int) -> PolicyCheckpoint:
    import torch

    torch.manual_seed(seed)
    modules = trainers._build_modules("bc", agent_config, spec.obs_dim,
                                      spec.num_phases, graph.matrix)
    cfg = trainers.TrainerConfig(algo="bc", seed=seed)
    return PolicyCheckpoint(algo="bc", trainer_config=cfg,
                            agent_config=agent_config,
                            fingerprint=spec.fingerprint(),
                            obs_dim=spec.obs_dim,
                            num_phases=spec.num_phases, modules=modules)


# -- plots and CSV ---------------------------------------------------------------


def plot_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                png_path, csv_path=None, title: str = "learning curves",
                xlabel: str = "training step",
                ylabel: str = "loss") -> None:
    """Overlay labeled series in one legended figure, optionally with a CSV.

    The PNG's text metadata records the title and the series labels.
    """
    if not curves:
        raise ConfigError("nothing to plot")
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, (x, y) in curves.items():
        ax.plot(x, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, metadata={"Title": title,
                                    "Description": ", ".join(curves)})
    plt.close(fig)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["series", xlabel.replace(" ", "_"),
                             ylabel.replace(" ", "_")])
            for label, (x, y) in curves.items():
                for xi, yi in zip(x, y):
                    writer.writerow([label, xi, repr(float(yi))])


def plot_att_bars(reports: list[EvalReport], png_path, csv_path=None,
                  title: str = "average travel time") -> None:
    """Bar chart of ATT by algorithm, with std whiskers where available."""
    if not reports:
        raise ConfigError("nothing to plot")
    labels = [r.algorithm for r in reports]
    means = [r.att_mean if r.att_mean is not None else 0.0 for r in reports]
    errs = [r.att_std if r.att_std is not None else 0.0 for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(range(len(labels)), means, yerr=errs, capsize=4,
           color="steelblue")
    ax.set_xticks(range(len(labels)), labels, rotation=20, ha="right")
    ax.set_ylabel("ATT (s)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, metadata={"Title": title,
                                    "Description": ", ".join(labels)})
    plt.close(fig)
    if csv_path is not None:
        write_reports_csv(reports, csv_path)


_REPORTS_FORMAT = "gridlight-eval"
_REPORTS_VERSION = 1


def save_reports(reports: list[EvalReport], path) -> None:
    """Full-fidelity JSON of evaluation reports (per-seed values included)."""
    blob = {"format": _REPORTS_FORMAT, "version": _REPORTS_VERSION,
            "reports": [asdict(r) for r in reports]}
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=1)


def load_reports(path) -> list[EvalReport]:
    with open(path) as fh:
        blob = json.load(fh)
    if not isinstance(blob, dict) or blob.get("format") != _REPORTS_FORMAT:
        raise ConfigError(f"{path} is not an evaluation report file")
    if blob.get("version") != _REPORTS_VERSION:
        raise ConfigError(f"report version {blob.get('version')!r} unsupported")
    reports = []
    for rec in blob["reports"]:
        rec = dict(rec)
        rec["seeds"] = tuple(rec["seeds"])
        rec["att_by_seed"] = tuple(rec["att_by_seed"])
        rec["ql_by_seed"] = tuple(rec["ql_by_seed"])
        reports.append(EvalReport(**rec))
    return reports


def write_reports_csv(reports: list[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "demand", "algorithm", "seeds",
                         "episodes", "vehicles", "att_mean", "att_std",
                         "ql_mean", "ql_std"])
        for r in reports:
            writer.writerow([r.scenario, r.demand, r.algorithm,
                             " ".join(map(str, r.seeds)), r.episodes,
                             r.vehicles, r.att_mean, r.att_std, r.ql_mean,
                             r.ql_std])


def write_scaling_csv(report: ScalingReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["size", "agents", "edges", "seconds_per_step"])
        for row in report.rows:
            writer.writerow([row["size"], row["agents"], row["edges"],
                             repr(row["seconds_per_step"])])
        if report.slope is not None:
            writer.writerow([])
            writer.writerow(["slope", repr(report.slope)])
            writer.writerow(["intercept", repr(report.intercept)])
            writer.writerow(["r_squared", repr(report.r_squared)])
