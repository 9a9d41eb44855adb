"""The ``gridlight`` umbrella command.

One subcommand per pipeline stage (gen-data, train-bpm, annotate, weigh,
train, eval, plot), plus ``bench`` for the scaling measurement and
``pipeline`` to run everything from a single YAML config.  Global flags
``--seed``, ``--config``, ``--out-dir`` and ``--force`` act as defaults that
individual subcommands can override.

Exit codes: 0 on success, 2 for configuration problems (bad flags, malformed
YAML, missing input paths), 3 when a stage fails mid-flight (corrupt
artifacts, diverging training, simulation errors).
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import behavior_model
from . import datastore
from .behavior_model import GmmVgaeConfig
from .config import network_spec
from .controllers import CONTROLLER_KINDS, ControllerSpec
from .errors import ConfigError, GridlightError
from .evaluation import (evaluate, learning_curve, load_reports,
                         plot_att_bars, plot_curves, save_reports,
                         scaling_benchmark, write_reports_csv,
                         write_scaling_csv)
from .pipeline import (_read_metrics_csv, _write_metrics_csv,
                       load_pipeline_config, run_pipeline)
from .simnet import build_adjacency
from .trainers import (AgentNetConfig, TrainerConfig, initial_checkpoint,
                       load_checkpoint, offlight_train, policy_action_probs,
                       save_checkpoint, train)
from .weighting import WeightConfig, compute_weight_records, save_weights


def _exit_codes(fn):
    """Map library exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(2)
        except FileNotFoundError as e:
            click.echo(f"config error: {e}", err=True)
            sys.exit(2)
        except GridlightError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(3)

    return wrapper


def _load_yaml(path) -> dict:
    import yaml

    if path is None:
        return {}
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed YAML in {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a mapping")
    return raw


def _build_config(cls, raw: dict, label: str, **overrides):
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(f"bad {label} config: {e}") from e


def _network_for(dataset) -> "object":
    """Rebuild the network a dataset was recorded on from its metadata."""
    meta = dataset.episodes[0].metadata
    return network_spec(meta["scenario"], meta["demand"])


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"seeds must be integers, got {text!r}")
    if not seeds:
        raise ConfigError("at least one seed is required")
    return seeds


def _out_path(ctx, out, default_name: str) -> Path:
    if out is not None:
        path = Path(out)
    else:
        path = Path(ctx.obj["out_dir"] or ".") / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


@click.group()
@click.option("--seed", type=int, default=None,
              help="Default seed for subcommands that take one.")
@click.option("--config", type=click.Path(), default=None,
              help="Default config file for subcommands that read one.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Default directory for output artifacts.")
@click.option("--force", is_flag=True,
              help="Recompute pipeline stages even when artifacts exist.")
@click.pass_context
def main(ctx, seed, config, out_dir, force):
    """Desk-scale offline RL experiments for traffic signal control."""
    ctx.obj = {"seed": seed, "config": config, "out_dir": out_dir,
               "force": force}
    logging.basicConfig(format="%(message)s")
    logging.getLogger("gridlight").setLevel(logging.INFO)


@main.command("gen-data")
@click.option("--scenario", default="toy-2x2", show_default=True)
@click.option("--demand", default="medium", show_default=True)
@click.option("--controller", "controllers", multiple=True,
              type=click.Choice(CONTROLLER_KINDS),
              help="Repeatable; several controllers are mixed equally.")
@click.option("--episodes", type=int, default=10, show_default=True,
              help="Episodes recorded per controller.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def gen_data(ctx, scenario, demand, controllers, episodes, seed, out):
    """Roll out rule-based controllers and save the trajectory dataset."""
    if not controllers:
        controllers = ("random",)
    seed = seed if seed is not None else (ctx.obj["seed"] or 0)
    net = network_spec(scenario, demand, seed=seed)
    parts = []
    for i, kind in enumerate(controllers):
        ds = datastore.generate_dataset(
            net, ControllerSpec(kind=kind), episodes=episodes,
            base_seed=seed + i * 100_000, scenario=scenario, demand=demand)
        parts.append((ds, 1.0 / len(controllers)))
    mixed = (parts[0][0] if len(parts) == 1
             else datastore.mix_datasets(parts, seed=seed))
    path = _out_path(ctx, out, "dataset.jsonl")
    datastore.save(mixed, path)
    click.echo(f"wrote {len(mixed)} episodes to {path}")


@main.command("train-bpm")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def train_bpm(ctx, dataset, config_path, seed, out):
    """Fit the graph-recurrent behaviour-policy model on a dataset."""
    config_path = config_path or ctx.obj["config"]
    seed = seed if seed is not None else ctx.obj["seed"]
    cfg = _build_config(GmmVgaeConfig, _load_yaml(config_path),
                        "behaviour-model", seed=seed)
    ds = datastore.load(dataset)
    graph = build_adjacency(_network_for(ds))
    model = behavior_model.fit(ds, graph, cfg)
    path = _out_path(ctx, out, "bpm.pt")
    behavior_model.save_model(model, path)
    final = model.training_log[-1]["loss"]
    click.echo(f"trained {cfg.epochs} epochs (final loss {final:.3f}); "
               f"wrote {path}")


@main.command("annotate")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--out", type=click.Path(), default=None)
@click.option("--dump-latents", type=click.Path(), default=None,
              help="Also write per-episode latent means, mixture "
                   "responsibilities, and controller labels as CSV.")
@click.pass_context
@_exit_codes
def annotate(ctx, dataset, model_path, out, dump_latents):
    """Stamp estimated behaviour-policy probabilities onto a dataset."""
    ds = datastore.load(dataset)
    model = behavior_model.load_model(model_path)
    ds = behavior_model.annotate(ds, model)
    path = _out_path(ctx, out, "annotated.jsonl")
    datastore.save(ds, path)
    click.echo(f"annotated {len(ds)} episodes; wrote {path}")
    if dump_latents is not None:
        _write_latents(ds, model, Path(dump_latents))
        click.echo(f"wrote latents to {dump_latents}")


def _write_latents(ds, model, path: Path) -> None:
    rows = []
    for i, ep in enumerate(ds.episodes):
        mean_z = behavior_model.encode(model, ep).mu.mean(axis=0)
        gamma = behavior_model.responsibilities(model, ep)
        rows.append((i, ep.metadata.get("controller", ""), mean_z, gamma))
    d_z, k = len(rows[0][2]), len(rows[0][3])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "label"]
                        + [f"z_{j}" for j in range(d_z)]
                        + [f"gamma_{j}" for j in range(k)])
        for i, label, mean_z, gamma in rows:
            writer.writerow([i, label] + [repr(float(v)) for v in mean_z]
                            + [repr(float(v)) for v in gamma])


@main.command("weigh")
@click.option("--dataset", required=True, type=click.Path(),
              help="Annotated dataset.")
@click.option("--policy-checkpoint", type=click.Path(), default=None,
              help="Target policy; defaults to the untrained initial "
                   "policy of a fresh training run.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def weigh(ctx, dataset, policy_checkpoint, config_path, seed, out):
    """Compute importance and return-prioritized weights as a sidecar file."""
    config_path = config_path or ctx.obj["config"]
    raw = _load_yaml(config_path)
    wcfg = _build_config(WeightConfig, raw.pop("weights", raw), "weight")
    ds = datastore.load(dataset)
    if policy_checkpoint is not None:
        ck = load_checkpoint(policy_checkpoint)
    else:
        seed = seed if seed is not None else (ctx.obj["seed"] or 0)
        graph = build_adjacency(_network_for(ds))
        ck = initial_checkpoint(ds, graph,
                                TrainerConfig(algo="cql", seed=seed))
    target = policy_action_probs(ck, ds)
    records = compute_weight_records(ds, target, wcfg)
    path = _out_path(ctx, out, "weights.json")
    save_weights(records, ds.fingerprint, wcfg, path)
    w = np.concatenate([r.w_tilde for r in records])
    click.echo(f"weighted {len(records)} episodes "
               f"(mean {w.mean():.3f}, max {w.max():.3f}); wrote {path}")


@main.command("train")
@click.option("--algo", type=click.Choice(["bc", "cql", "td3bc"]),
              default=None)
@click.option("--offlight", is_flag=True,
              help="Train the weighted variant instead of the plain one.")
@click.option("--dataset", required=True, type=click.Path())
@click.option("--bpm-checkpoint", type=click.Path(), default=None,
              help="Behaviour model used to annotate an unannotated dataset.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def train_cmd(ctx, algo, offlight, dataset, bpm_checkpoint, config_path,
              steps, seed, out):
    """Train an offline policy; writes a checkpoint plus a metrics CSV."""
    config_path = config_path or ctx.obj["config"]
    raw = _load_yaml(config_path)
    agent_raw = raw.pop("agent", {})
    if not isinstance(agent_raw, dict):
        raise ConfigError("'agent' section must be a mapping")
    agent_cfg = _build_config(AgentNetConfig, agent_raw, "agent network")
    seed = seed if seed is not None else ctx.obj["seed"]
    cfg = _build_config(TrainerConfig, raw, "trainer", algo=algo,
                        train_steps=steps, seed=seed,
                        offlight=offlight or None)
    ds = datastore.load(dataset)
    graph = build_adjacency(_network_for(ds))
    if cfg.offlight and cfg.algo in ("cql", "td3bc"):
        bpm = (behavior_model.load_model(bpm_checkpoint)
               if bpm_checkpoint is not None else None)
        ck = offlight_train(ds, bpm, graph, cfg, agent_cfg)
    else:
        ck = train(ds, graph, cfg, agent_cfg)
    path = _out_path(ctx, out, f"{ck.algo}.pt")
    save_checkpoint(ck, path)
    metrics_path = path.with_suffix(".csv")
    _write_metrics_csv(ck.metrics_log, metrics_path)
    label = f"offlight-{ck.algo}" if cfg.offlight else ck.algo
    click.echo(f"trained {label} for {cfg.train_steps} steps "
               f"(final loss {ck.metrics_log[-1]['loss']:.4f}); "
               f"wrote {path} and {metrics_path}")


@main.command("eval")
@click.option("--checkpoint", "checkpoints", multiple=True,
              type=click.Path(), help="Repeatable; one report per policy.")
@click.option("--controller", "controllers", multiple=True,
              type=click.Choice(CONTROLLER_KINDS),
              help="Repeatable; rule-based baselines to evaluate.")
@click.option("--scenario", default="toy-2x2", show_default=True)
@click.option("--demand", default="medium", show_default=True)
@click.option("--episodes", type=int, default=10, show_default=True)
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--out", type=click.Path(), default=None,
              help="Report JSON path; a CSV lands next to it.")
@click.pass_context
@_exit_codes
def eval_cmd(ctx, checkpoints, controllers, scenario, demand, episodes,
             seeds, out):
    """Roll out policies and baselines, reporting travel time and queues."""
    if not checkpoints and not controllers:
        raise ConfigError("give at least one --checkpoint or --controller")
    seed_tuple = _parse_seeds(seeds)
    net = network_spec(scenario, demand)
    policies = [load_checkpoint(p) for p in checkpoints]
    policies += [ControllerSpec(kind=k) for k in controllers]
    reports = [evaluate(p, net, episodes=episodes, seeds=seed_tuple,
                        scenario=scenario, demand=demand) for p in policies]
    path = _out_path(ctx, out, "eval.json")
    save_reports(reports, path)
    write_reports_csv(reports, path.with_suffix(".csv"))
    for r in reports:
        att = "n/a" if r.att_mean is None else f"{r.att_mean:8.2f}"
        click.echo(f"  {r.algorithm:>16}  ATT {att}  QL {r.ql_mean:8.2f}")
    click.echo(f"wrote {path} and {path.with_suffix('.csv')}")


@main.command("plot")
@click.option("--metrics", "metrics_paths", multiple=True,
              type=click.Path(), help="Training metrics CSVs; repeatable, "
                                      "legend label = file stem.")
@click.option("--reports", "reports_path", type=click.Path(), default=None,
              help="Evaluation report JSON for the travel-time bars.")
@click.option("--window", type=int, default=10, show_default=True)
@click.option("--out-dir", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def plot(ctx, metrics_paths, reports_path, window, out_dir):
    """Render learning curves and travel-time bar charts with CSV twins."""
    if not metrics_paths and reports_path is None:
        raise ConfigError("give --metrics files and/or --reports")
    out = Path(out_dir or ctx.obj["out_dir"] or ".")
    out.mkdir(parents=True, exist_ok=True)
    if metrics_paths:
        curves = {Path(p).stem: learning_curve(_read_metrics_csv(Path(p)),
                                               window=window)
                  for p in metrics_paths}
        plot_curves(curves, out / "learning_curves.png",
                    out / "learning_curves.csv", title="training loss")
        click.echo(f"wrote {out / 'learning_curves.png'}")
    if reports_path is not None:
        reports = load_reports(reports_path)
        plot_att_bars(reports, out / "att.png", out / "att.csv")
        click.echo(f"wrote {out / 'att.png'}")


@main.command("bench")
@click.option("--sizes", default="2x2,3x3,4x4", show_default=True,
              help="Comma-separated grid sizes.")
@click.option("--control-steps", type=int, default=30, show_default=True)
@click.option("--repeats", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.pass_context
@_exit_codes
def bench(ctx, sizes, control_steps, repeats, seed, out):
    """Measure per-step wall time across grid sizes and fit it vs N+E."""
    size_list = [s.strip() for s in sizes.split(",") if s.strip()]
    seed = seed if seed is not None else (ctx.obj["seed"] or 0)
    report = scaling_benchmark(size_list, control_steps=control_steps,
                               seed=seed, repeats=repeats)
    for row in report.rows:
        click.echo(f"  {row['size']:>6}  {row['agents']:4d} agents  "
                   f"{row['seconds_per_step'] * 1e3:8.2f} ms/step")
    if report.r_squared is not None:
        click.echo(f"  linear fit vs (N+E): R^2 = {report.r_squared:.4f}")
    path = _out_path(ctx, out, "scaling.csv")
    write_scaling_csv(report, path)
    click.echo(f"wrote {path}")


@main.command("pipeline")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Pipeline YAML; falls back to the global --config.")
@click.option("--out-dir", type=click.Path(), default=None)
@click.option("--force", is_flag=True, default=None)
@click.pass_context
@_exit_codes
def pipeline_cmd(ctx, config_path, out_dir, force):
    """Run every stage from one config file, resuming where possible."""
    config_path = config_path or ctx.obj["config"]
    if config_path is None:
        raise ConfigError("a pipeline config file is required (--config)")
    out = out_dir or ctx.obj["out_dir"]
    if out is None:
        raise ConfigError("an output directory is required (--out-dir)")
    cfg = load_pipeline_config(config_path)
    if ctx.obj["seed"] is not None:
        cfg = dataclasses.replace(cfg, data_seed=ctx.obj["seed"])
    force = ctx.obj["force"] if force is None else force
    manifest = run_pipeline(cfg, out, force=force)
    click.echo(f"pipeline complete: {len(manifest['stages'])} stages "
               f"in {out} (config hash {manifest['config_hash']})")


if __name__ == "__main__":
    main()
