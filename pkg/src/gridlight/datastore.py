"""Episode recording, persistence, and dataset mixing.

A trajectory is stored exactly as the trainers consume it: per-step stacked
per-agent observations and actions, the shared reward, and two probability
tracks per agent — ``behavior_prob`` (the exact probability the generating
controller assigned to the logged action) and ``model_prob`` (the estimate a
learned behaviour model writes back later).  Keeping both lets tests compare
the estimate against the truth, which real logged data never offers.

Files are newline-delimited JSON: one self-describing header record, then one
record per episode, floats at full round-trip precision.  ``load`` verifies
structure eagerly and reports the byte offset of the first bad record.

Mixing follows the usual expert/random recipe: given parts with fractions
summing to one, the mixed size is the smallest part's size M, each part
contributes ``round(f * M)`` episodes sampled without replacement (any
rounding residual goes to the largest fraction), and episodes are copied
whole — never resampled internally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .controllers import Controller, ControllerSpec, make_controller
from .errors import (ConfigError, DatasetFormatError, DatasetVersionError,
                     FingerprintError)
from .simnet import NetworkSpec, run_episode

SCHEMA_VERSION = 1
_HEADER_FORMAT = "gridlight-dataset"


@dataclass
class Transition:
    """One control step for all agents.

    ``obs``/``next_obs`` are (N, F) float arrays, ``actions`` an (N,) int
    array, and the probability tracks (N,) float arrays or None when absent.
    """

    t: int
    obs: np.ndarray
    actions: np.ndarray
    reward: float
    next_obs: np.ndarray
    behavior_prob: np.ndarray | None = None
    model_prob: np.ndarray | None = None
    model_dist: np.ndarray | None = None   # (N, P) full decoded distribution
    done: bool = False

    def __eq__(self, other) -> bool:
        if not isinstance(other, Transition):
            return NotImplemented
        return (self.t == other.t and self.reward == other.reward
                and self.done == other.done
                and np.array_equal(self.obs, other.obs)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.next_obs, other.next_obs)
                and _opt_equal(self.behavior_prob, other.behavior_prob)
                and _opt_equal(self.model_prob, other.model_prob)
                and _opt_equal(self.model_dist, other.model_dist))


def _opt_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass
class Episode:
    """An ordered run of transitions plus its return and origin metadata."""

    transitions: list[Transition]
    g_return: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        recomputed = math.fsum(tr.reward for tr in self.transitions)
        if recomputed != self.g_return:
            raise ConfigError(f"episode return {self.g_return!r} does not match "
                              f"its transitions (sum {recomputed!r})")

    def __len__(self) -> int:
        return len(self.transitions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.g_return == other.g_return
                and self.metadata == other.metadata
                and self.transitions == other.transitions)

    @property
    def num_agents(self) -> int:
        return self.transitions[0].obs.shape[0]


@dataclass
class Dataset:
    """A bag of episodes sharing one network fingerprint."""

    episodes: list[Episode]
    fingerprint: str
    num_phases: int

    def __post_init__(self):
        if not self.episodes:
            raise ConfigError("a dataset needs at least one episode")
        arity = {ep.num_agents for ep in self.episodes}
        if len(arity) != 1:
            raise ConfigError(f"episodes disagree on agent count: {sorted(arity)}")

    def __len__(self) -> int:
        return len(self.episodes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.fingerprint == other.fingerprint
                and self.num_phases == other.num_phases
                and self.episodes == other.episodes)

    @property
    def num_agents(self) -> int:
        return self.episodes[0].num_agents

    @property
    def obs_dim(self) -> int:
        return self.episodes[0].transitions[0].obs.shape[1]

    @property
    def g_min(self) -> float:
        return min(ep.g_return for ep in self.episodes)

    @property
    def g_max(self) -> float:
        return max(ep.g_return for ep in self.episodes)

    def returns(self) -> np.ndarray:
        return np.array([ep.g_return for ep in self.episodes], dtype=np.float64)


def record_episode(network: NetworkSpec, controller: Controller | ControllerSpec,
                   seed: int | None = None, scenario: str = "custom",
                   demand: str = "custom") -> Episode:
    """Roll one episode and package it with controller-true action probabilities."""
    if isinstance(controller, ControllerSpec):
        controller = make_controller(controller)
    state, trace = run_episode(network, controller, seed=seed)
    n = network.num_agents
    transitions = []
    for t, rec in enumerate(trace):
        transitions.append(Transition(
            t=t,
            obs=np.stack([rec["obs"][a] for a in range(n)]),
            actions=np.array([rec["actions"][a] for a in range(n)], dtype=np.int64),
            reward=float(rec["reward"]),
            next_obs=np.stack([rec["next_obs"][a] for a in range(n)]),
            behavior_prob=np.array([rec["action_probs"][a] for a in range(n)],
                                   dtype=np.float64),
            done=bool(rec["done"]),
        ))
    g = math.fsum(tr.reward for tr in transitions)
    meta = {
        "controller": controller.label,
        "scenario": scenario,
        "demand": demand,
        "seed": network.seed if seed is None else seed,
    }
    return Episode(transitions=transitions, g_return=g, metadata=meta)


def generate_dataset(network: NetworkSpec, controller_spec: ControllerSpec,
                     episodes: int, base_seed: int = 0, scenario: str = "custom",
                     demand: str = "custom") -> Dataset:
    """Record ``episodes`` independent episodes, one seed per episode."""
    if episodes < 1:
        raise ConfigError("episodes must be positive")
    eps = []
    for i in range(episodes):
        seed = base_seed + i
        ctrl = make_controller(
            ControllerSpec(kind=controller_spec.kind,
                           green_steps=controller_spec.green_steps,
                           theta_q=controller_spec.theta_q,
                           g_min=controller_spec.g_min, seed=seed))
        eps.append(record_episode(network, ctrl, seed=seed,
                                  scenario=scenario, demand=demand))
    return Dataset(episodes=eps, fingerprint=network.fingerprint(),
                   num_phases=network.num_phases)


def mix_datasets(parts: list[tuple[Dataset, float]], seed: int = 0) -> Dataset:
    """Blend datasets by fraction; see the module docstring for the recipe."""
    if not parts:
        raise ConfigError("nothing to mix")
    fracs = [f for _, f in parts]
    if any(f < 0 for f in fracs):
        raise ConfigError("fractions must be non-negative")
    if abs(math.fsum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {math.fsum(fracs)!r}")
    fps = {ds.fingerprint for ds, _ in parts}
    if len(fps) != 1:
        raise FingerprintError(f"datasets built on different networks: {sorted(fps)}")

    m = min(len(ds) for ds, _ in parts)
    counts = [round(f * m) for f in fracs]
    residual = m - sum(counts)
    if residual:
        counts[int(np.argmax(fracs))] += residual
    if any(c > len(ds) for c, (ds, _) in zip(counts, parts)):
        raise ConfigError("rounding residual pushed a part beyond its size")

    rng = np.random.default_rng(seed)
    mixed: list[Episode] = []
    for (ds, _), count in zip(parts, counts):
        idx = sorted(rng.choice(len(ds), size=count, replace=False).tolist())
        mixed.extend(ds.episodes[i] for i in idx)
    first = parts[0][0]
    return Dataset(episodes=mixed, fingerprint=first.fingerprint,
                   num_phases=first.num_phases)


# -- persistence --------------------------------------------------------------


def _transition_record(tr: Transition) -> dict:
    rec = {
        "t": tr.t,
        "obs": tr.obs.tolist(),
        "actions": tr.actions.tolist(),
        "reward": tr.reward,
        "next_obs": tr.next_obs.tolist(),
        "behavior_prob": None if tr.behavior_prob is None
        else tr.behavior_prob.tolist(),
        "model_prob": None if tr.model_prob is None else tr.model_prob.tolist(),
        "model_dist": None if tr.model_dist is None else tr.model_dist.tolist(),
        "done": tr.done,
    }
    return rec


def _transition_from(rec: dict) -> Transition:
    return Transition(
        t=int(rec["t"]),
        obs=np.array(rec["obs"], dtype=np.float64),
        actions=np.array(rec["actions"], dtype=np.int64),
        reward=float(rec["reward"]),
        next_obs=np.array(rec["next_obs"], dtype=np.float64),
        behavior_prob=None if rec["behavior_prob"] is None
        else np.array(rec["behavior_prob"], dtype=np.float64),
        model_prob=None if rec["model_prob"] is None
        else np.array(rec["model_prob"], dtype=np.float64),
        model_dist=None if rec.get("model_dist") is None
        else np.array(rec["model_dist"], dtype=np.float64),
        done=bool(rec["done"]),
    )


def save(dataset: Dataset, path: str | Path) -> None:
    """Write one header line plus one line per episode (newline-delimited JSON)."""
    path = Path(path)
    header = {
        "format": _HEADER_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "fingerprint": dataset.fingerprint,
        "num_agents": dataset.num_agents,
        "obs_dim": dataset.obs_dim,
        "num_phases": dataset.num_phases,
        "episodes": len(dataset),
        "g_min": dataset.g_min,
        "g_max": dataset.g_max,
    }
    with path.open("w") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for ep in dataset.episodes:
            rec = {
                "g_return": ep.g_return,
                "metadata": ep.metadata,
                "transitions": [_transition_record(tr) for tr in ep.transitions],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load(path: str | Path) -> Dataset:
    """Read a dataset file, failing loudly (with a byte offset) on corruption."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such dataset file: {path}")
    with path.open("rb") as fh:
        offset = fh.tell()
        line = fh.readline()
        if not line:
            raise DatasetFormatError("empty dataset file", byte_offset=0)
        header = _parse_line(line, offset, "header")
        if header.get("format") != _HEADER_FORMAT:
            raise DatasetFormatError(
                f"not a dataset file (format={header.get('format')!r})",
                byte_offset=offset)
        version = header.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DatasetVersionError(
                f"dataset schema version {version!r} unsupported "
                f"(this build reads version {SCHEMA_VERSION})")
        expected = int(header["episodes"])
        episodes = []
        for i in range(expected):
            offset = fh.tell()
            line = fh.readline()
            if not line:
                raise DatasetFormatError(
                    f"file ends after {i} of {expected} episodes",
                    byte_offset=offset)
            rec = _parse_line(line, offset, f"episode {i}")
            try:
                episodes.append(Episode(
                    transitions=[_transition_from(t) for t in rec["transitions"]],
                    g_return=float(rec["g_return"]),
                    metadata=rec["metadata"],
                ))
            except (KeyError, TypeError, ValueError, ConfigError) as e:
                raise DatasetFormatError(
                    f"episode {i} is malformed: {e}", byte_offset=offset) from e
    ds = Dataset(episodes=episodes, fingerprint=header["fingerprint"],
                 num_phases=int(header["num_phases"]))
    if ds.num_agents != int(header["num_agents"]):
        raise DatasetFormatError("header agent count does not match episodes")
    return ds


def _parse_line(line: bytes, offset: int, what: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetFormatError(
            f"{what} record is truncated or corrupt at byte {offset}: {e}",
            byte_offset=offset) from e
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"{what} record is not an object",
                                 byte_offset=offset)
    return rec
