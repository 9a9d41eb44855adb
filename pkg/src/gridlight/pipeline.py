"""The end-to-end experiment pipeline behind one config file.

Seven stages run in order — gen-data, train-bpm, annotate, weigh, train,
evaluate, plot — each persisting its artifacts under the output directory and
recording them in ``manifest.json`` together with the config hash and seeds.
A rerun skips every stage whose artifacts already exist for the same config
hash, so interrupted runs resume where they stopped and a finished directory
is never touched again (pass ``force=True`` to recompute).  Any failure
raises :class:`~gridlight.errors.StageError` naming the stage, so the
operator knows which artifact to inspect or delete.

The train stage always produces two checkpoints from the same data: the
plain algorithm and its weighted variant, which is what the evaluate and
plot stages compare.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import behavior_model
from . import datastore
from .behavior_model import GmmVgaeConfig
from .config import network_spec
from .controllers import CONTROLLER_KINDS, ControllerSpec
from .errors import ConfigError, GridlightError, StageError
from .evaluation import (evaluate, learning_curve, load_reports,
                         plot_att_bars, plot_curves, save_reports,
                         write_reports_csv)
from .simnet import build_adjacency
from .trainers import (AgentNetConfig, TrainerConfig, initial_checkpoint,
                       load_checkpoint, offlight_train, policy_action_probs,
                       save_checkpoint, train)
from .weighting import compute_weight_records, save_weights

logger = logging.getLogger(__name__)

STAGES = ("gen-data", "train-bpm", "annotate", "weigh", "train", "evaluate",
          "plot")
_MANIFEST_FORMAT = "gridlight-manifest"
_MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one experiment needs, nested configs included."""

    scenario: str = "toy-2x2"
    demand: str = "medium"
    controllers: tuple[str, ...] = ("greedy", "random")
    fractions: tuple[float, ...] = (0.5, 0.5)
    episodes: int = 30                    # recorded per controller, pre-mix
    data_seed: int = 0
    bpm: GmmVgaeConfig = GmmVgaeConfig(hidden=64, components=3, epochs=60)
    trainer: TrainerConfig = TrainerConfig(algo="cql", train_steps=400,
                                           reward_scale=0.01)
    agent: AgentNetConfig = AgentNetConfig(rnn_hidden=64, fc_hidden=64)
    eval_episodes: int = 3
    eval_seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.controllers:
            raise ConfigError("at least one behaviour controller is required")
        unknown = [k for k in self.controllers if k not in CONTROLLER_KINDS]
        if unknown:
            raise ConfigError(f"unknown controller kinds {unknown}")
        if len(self.fractions) != len(self.controllers):
            raise ConfigError("one mixing fraction per controller")
        if self.episodes < 1 or self.eval_episodes < 1:
            raise ConfigError("episode counts must be positive")
        if not self.eval_seeds:
            raise ConfigError("at least one evaluation seed is required")


def pipeline_config_from_mapping(raw: dict) -> PipelineConfig:
    """Build a config from a parsed mapping, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError("pipeline config must be a mapping")
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown pipeline config keys: {', '.join(unknown)}")
    kwargs = dict(raw)
    for key, cls in (("bpm", GmmVgaeConfig), ("trainer", TrainerConfig),
                     ("agent", AgentNetConfig)):
        if key in kwargs:
            if not isinstance(kwargs[key], dict):
                raise ConfigError(f"{key!r} must be a mapping")
            try:
                kwargs[key] = cls(**kwargs[key])
            except TypeError as e:
                raise ConfigError(f"bad {key!r} section: {e}") from e
    for key in ("controllers", "fractions", "eval_seeds"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return PipelineConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def load_pipeline_config(path) -> PipelineConfig:
    import yaml

    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return pipeline_config_from_mapping(raw)


def config_hash(config: PipelineConfig) -> str:
    """Stable digest over every config field; any change changes the hash."""
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True,
                      default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# -- artifact layout -------------------------------------------------------------


def _paths(out: Path) -> dict[str, Path]:
    return {
        "dataset": out / "data" / "dataset.jsonl",
        "annotated": out / "data" / "annotated.jsonl",
        "bpm": out / "models" / "bpm.pt",
        "policy_init": out / "models" / "policy_init.pt",
        "weights": out / "weights" / "weights.json",
        "plain": out / "models" / "plain.pt",
        "offlight": out / "models" / "offlight.pt",
        "plain_metrics": out / "metrics" / "plain.csv",
        "offlight_metrics": out / "metrics" / "offlight.csv",
        "eval_json": out / "reports" / "eval.json",
        "eval_csv": out / "reports" / "eval.csv",
        "curves_png": out / "plots" / "learning_curves.png",
        "curves_csv": out / "plots" / "learning_curves.csv",
        "att_png": out / "plots" / "att.png",
    }


def _network(config: PipelineConfig):
    return network_spec(config.scenario, config.demand, seed=config.data_seed)


def _write_metrics_csv(metrics_log: list[dict], path: Path) -> None:
    fieldnames: list[str] = []
    for row in metrics_log:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, restval="")
        writer.writeheader()
        writer.writerows(metrics_log)


def _read_metrics_csv(path: Path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for key, val in rec.items():
                if val == "" or val is None:
                    continue
                row[key] = int(val) if key == "step" else float(val)
            rows.append(row)
    return rows


# -- stages ----------------------------------------------------------------------


def _stage_gen_data(config: PipelineConfig, paths: dict) -> dict:
    net = _network(config)
    parts = []
    for i, (kind, frac) in enumerate(zip(config.controllers,
                                         config.fractions)):
        ds = datastore.generate_dataset(
            net, ControllerSpec(kind=kind), episodes=config.episodes,
            base_seed=config.data_seed + i * 100_000,
            scenario=config.scenario, demand=config.demand)
        parts.append((ds, frac))
    mixed = datastore.mix_datasets(parts, seed=config.data_seed)
    datastore.save(mixed, paths["dataset"])
    counts = {kind: sum(1 for ep in mixed.episodes
                        if ep.metadata["controller"] == kind)
              for kind in config.controllers}
    return {"episodes": len(mixed), "controllers": counts}


def _stage_train_bpm(config: PipelineConfig, paths: dict) -> dict:
    ds = datastore.load(paths["dataset"])
    graph = build_adjacency(_network(config))
    model = behavior_model.fit(ds, graph, config.bpm)
    behavior_model.save_model(model, paths["bpm"])
    return {"final_loss": model.training_log[-1]["loss"]}


def _stage_annotate(config: PipelineConfig, paths: dict) -> dict:
    ds = datastore.load(paths["dataset"])
    model = behavior_model.load_model(paths["bpm"])
    ds = behavior_model.annotate(ds, model)
    datastore.save(ds, paths["annotated"])
    probs = np.concatenate([tr.model_prob for ep in ds.episodes
                            for tr in ep.transitions])
    return {"median_behavior_prob": float(np.median(probs))}


def _stage_weigh(config: PipelineConfig, paths: dict) -> dict:
    ds = datastore.load(paths["annotated"])
    graph = build_adjacency(_network(config))
    init = initial_checkpoint(ds, graph, config.trainer, config.agent)
    save_checkpoint(init, paths["policy_init"])
    target = policy_action_probs(init, ds)
    records = compute_weight_records(ds, target,
                                     config.trainer.weight_config)
    save_weights(records, ds.fingerprint, config.trainer.weight_config,
                 paths["weights"])
    w_tilde = np.concatenate([r.w_tilde for r in records])
    return {"w_tilde_mean": float(w_tilde.mean()),
            "w_tilde_max": float(w_tilde.max())}


def _stage_train(config: PipelineConfig, paths: dict) -> dict:
    ds = datastore.load(paths["annotated"])
    graph = build_adjacency(_network(config))
    plain_cfg = dataclasses.replace(config.trainer, offlight=False,
                                    weight_sidecar=None)
    plain = train(ds, graph, plain_cfg, config.agent)
    save_checkpoint(plain, paths["plain"])
    _write_metrics_csv(plain.metrics_log, paths["plain_metrics"])

    if config.trainer.algo == "bc":
        weighted_cfg = dataclasses.replace(
            config.trainer, offlight=True,
            weight_sidecar=str(paths["weights"]))
        weighted = train(ds, graph, weighted_cfg, config.agent)
    else:
        weighted_cfg = dataclasses.replace(config.trainer, offlight=True)
        weighted = offlight_train(ds, None, graph, weighted_cfg, config.agent)
    save_checkpoint(weighted, paths["offlight"])
    _write_metrics_csv(weighted.metrics_log, paths["offlight_metrics"])
    return {"plain_final_loss": plain.metrics_log[-1]["loss"],
            "offlight_final_loss": weighted.metrics_log[-1]["loss"]}


def _stage_evaluate(config: PipelineConfig, paths: dict) -> dict:
    net = _network(config)
    reports = []
    for key in ("plain", "offlight"):
        ck = load_checkpoint(paths[key])
        reports.append(evaluate(ck, net, episodes=config.eval_episodes,
                                seeds=config.eval_seeds,
                                scenario=config.scenario,
                                demand=config.demand))
    for kind in config.controllers:
        reports.append(evaluate(ControllerSpec(kind=kind), net,
                                episodes=config.eval_episodes,
                                seeds=config.eval_seeds,
                                scenario=config.scenario,
                                demand=config.demand))
    save_reports(reports, paths["eval_json"])
    write_reports_csv(reports, paths["eval_csv"])
    return {"att": {r.algorithm: r.att_mean for r in reports}}


def _stage_plot(config: PipelineConfig, paths: dict) -> dict:
    curves = {}
    for key in ("plain", "offlight"):
        log = _read_metrics_csv(paths[f"{key}_metrics"])
        curves[key] = learning_curve(log, window=10)
    plot_curves(curves, paths["curves_png"], paths["curves_csv"],
                title=f"{config.trainer.algo} on {config.scenario} "
                      f"({config.demand} demand)")
    reports = load_reports(paths["eval_json"])
    plot_att_bars(reports, paths["att_png"],
                  title=f"ATT on {config.scenario} ({config.demand} demand)")
    return {"figures": 2}


_STAGE_FUNCTIONS = {
    "gen-data": (_stage_gen_data, ("dataset",)),
    "train-bpm": (_stage_train_bpm, ("bpm",)),
    "annotate": (_stage_annotate, ("annotated",)),
    "weigh": (_stage_weigh, ("policy_init", "weights")),
    "train": (_stage_train, ("plain", "offlight", "plain_metrics",
                             "offlight_metrics")),
    "evaluate": (_stage_evaluate, ("eval_json", "eval_csv")),
    "plot": (_stage_plot, ("curves_png", "curves_csv", "att_png")),
}


# -- manifest and the driver -----------------------------------------------------


def _read_manifest(path: Path) -> dict | None:
    if not path.exists():
        return None
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except (OSError, ValueError):
        logger.warning("unreadable manifest at %s; starting fresh", path)
        return None
    if not isinstance(blob, dict) or blob.get("format") != _MANIFEST_FORMAT \
            or blob.get("version") != _MANIFEST_VERSION:
        logger.warning("foreign manifest at %s; starting fresh", path)
        return None
    return blob


def _write_manifest(manifest: dict, path: Path) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1)
    tmp.replace(path)


def _stage_complete(manifest: dict, stage: str, paths: dict) -> bool:
    entry = manifest["stages"].get(stage)
    if entry is None:
        return False
    _, outputs = _STAGE_FUNCTIONS[stage]
    return all(paths[name].exists() for name in outputs)


def run_pipeline(config: PipelineConfig, out_dir,
                 force: bool = False) -> dict:
    """Run (or resume) every stage; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    digest = config_hash(config)
    manifest = None if force else _read_manifest(manifest_path)
    if manifest is not None and manifest.get("config_hash") != digest:
        logger.info("config changed; recomputing every stage")
        manifest = None
    if manifest is None:
        manifest = {"format": _MANIFEST_FORMAT, "version": _MANIFEST_VERSION,
                    "config_hash": digest,
                    "seeds": {"data": config.data_seed,
                              "bpm": config.bpm.seed,
                              "trainer": config.trainer.seed,
                              "eval": list(config.eval_seeds)},
                    "config": dataclasses.asdict(config),
                    "stages": {}}
        # normalize tuples to lists so the returned dict matches what a
        # rerun reads back from disk
        manifest = json.loads(json.dumps(manifest))
    paths = _paths(out)
    for stage in STAGES:
        if _stage_complete(manifest, stage, paths):
            logger.info("stage %s: artifacts present, skipping", stage)
            continue
        fn, outputs = _STAGE_FUNCTIONS[stage]
        for name in outputs:
            paths[name].parent.mkdir(parents=True, exist_ok=True)
        logger.info("stage %s: running", stage)
        try:
            info = fn(config, paths)
        except StageError:
            raise
        except Exception as e:
            raise StageError(stage, f"{type(e).__name__}: {e}") from e
        manifest["stages"][stage] = {
            "outputs": [str(paths[name].relative_to(out))
                        for name in outputs],
            "info": info,
        }
        _write_manifest(manifest, manifest_path)
    return manifest
