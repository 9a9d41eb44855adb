"""Importance-sampling and return-based sample weights, plus the exact
enumeration oracle used to test them.

Three layers:

* Scalar reference weight functions.  ``is_weight_mean`` averages per-agent
  probability ratios (the cheap, bounded form used for training);
  ``is_weight_product`` multiplies them (the exact, unbiased form).  Both
  accumulate in exact rational arithmetic and round once at the end, so tests
  may assert bitwise answers.  ``rbps_weight`` scores episodes by normalized
  return plus a floor, and ``combine_normalize_clip`` does the per-minibatch
  combine → normalize → clamp dance the trainers rely on.

* A sampler, ``sample_episodes``, drawing episode indices i.i.d. from the
  return-based distribution.

* The oracle: ``MicroMDP`` describes a multi-agent MDP small enough to
  enumerate every trajectory, and ``oracle_expectation_check`` computes
  E_{π_θ}[f], both importance-sampled estimates under the behaviour policy,
  and their exact estimator variances — no sampling anywhere, so statements
  like "the product form is unbiased" become equality checks.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DatasetFormatError, DatasetVersionError,
                     DegenerateWeightError, FingerprintError,
                     SupportViolationError)

RESCALE_MODES = ("mean-one", "sum-to-one")
IS_FORMS = ("mean", "product")


@dataclass(frozen=True)
class WeightConfig:
    p_base: float = 0.1          # RBPS floor so zero-advantage episodes keep mass
    clip_max: float = 10.0       # post-normalization clamp
    is_form: str = "mean"
    rescale_mode: str = "mean-one"
    eps_prob: float = 1e-3       # floor applied to estimated behaviour probs

    def __post_init__(self):
        if self.p_base <= 0:
            raise ConfigError("p_base must be positive")
        if self.clip_max < 1:
            raise ConfigError("clip_max below 1 would clamp uniform batches")
        if self.is_form not in IS_FORMS:
            raise ConfigError(f"is_form must be one of {IS_FORMS}")
        if self.rescale_mode not in RESCALE_MODES:
            raise ConfigError(f"rescale_mode must be one of {RESCALE_MODES}")
        if not 0 < self.eps_prob < 1:
            raise ConfigError("eps_prob must lie in (0, 1)")


def _ratios(target_probs, behavior_probs) -> list[float]:
    t = [float(x) for x in target_probs]
    b = [float(x) for x in behavior_probs]
    if len(t) != len(b):
        raise ConfigError(f"agent arity mismatch: {len(t)} vs {len(b)}")
    if not t:
        raise ConfigError("empty probability vectors")
    for x in b:
        if x <= 0.0:
            raise SupportViolationError(
                "behaviour probability is not positive; floor estimated "
                "probabilities before weighting")
    return [x / y for x, y in zip(t, b)]


def is_weight_mean(target_probs, behavior_probs) -> float:
    """Arithmetic mean of per-agent probability ratios.

    Bounded above by the largest single ratio, which is what makes it usable
    as a training weight at any agent count.
    """
    ratios = _ratios(target_probs, behavior_probs)
    return float(sum((Fraction(r) for r in ratios), Fraction(0)) / len(ratios))


def is_weight_product(target_probs, behavior_probs) -> float:
    """Product of per-agent ratios — the exact joint-policy weight.

    Grows like r^N when every ratio is r, hence unusable for wide networks
    but exactly unbiased; the enumeration oracle leans on this form.
    """
    ratios = _ratios(target_probs, behavior_probs)
    return float(math.prod((Fraction(r) for r in ratios), start=Fraction(1)))


def is_weights_array(target_probs: np.ndarray, behavior_probs: np.ndarray,
                     form: str = "mean") -> np.ndarray:
    """Vectorized ratios over the last (agent) axis for bulk annotation.

    Float arithmetic (not the exact scalar path); shapes broadcast, agents on
    the final axis.
    """
    t = np.asarray(target_probs, dtype=np.float64)
    b = np.asarray(behavior_probs, dtype=np.float64)
    if t.shape != b.shape:
        raise ConfigError(f"shape mismatch: {t.shape} vs {b.shape}")
    if np.any(b <= 0.0):
        raise SupportViolationError(
            "behaviour probability is not positive; floor estimated "
            "probabilities before weighting")
    ratios = t / b
    if form == "mean":
        return ratios.mean(axis=-1)
    if form == "product":
        return ratios.prod(axis=-1)
    raise ConfigError(f"is_form must be one of {IS_FORMS}")


def rbps_weight(g_k: float, g_min: float, g_max: float,
                config: WeightConfig = WeightConfig()) -> float:
    """Raw (pre-normalization) return-based priority of one episode."""
    if not g_min <= g_k <= g_max:
        raise ValueError(f"G_k={g_k!r} outside [{g_min!r}, {g_max!r}]")
    if g_max == g_min:
        return config.p_base  # no spread: every episode gets the floor
    return (g_k - g_min) / (g_max - g_min) + config.p_base


def rbps_distribution(returns, config: WeightConfig = WeightConfig()) -> np.ndarray:
    """Per-episode sampling distribution: raw priorities normalized to sum 1.

    A dataset with no return spread yields exactly 1/M per episode.
    """
    g = np.asarray(returns, dtype=np.float64)
    if g.size == 0:
        raise ConfigError("no episodes to weight")
    g_min, g_max = float(g.min()), float(g.max())
    if g_max == g_min:
        return np.full(g.size, 1.0 / g.size)
    raw = np.array([rbps_weight(x, g_min, g_max, config) for x in g])
    return raw / math.fsum(raw)


def combine_normalize_clip(w_is, w_rbps,
                           config: WeightConfig = WeightConfig()) -> np.ndarray:
    """Per-transition training weights for one minibatch.

    Elementwise product, then rescale (default: batch mean one, so the loss
    scale is batch-size invariant; ``sum-to-one`` for the literal distribution
    form), then clamp at ``clip_max``.  An all-zero batch has no usable
    signal and raises; callers fall back to uniform weights.
    """
    w = np.asarray(w_is, dtype=np.float64) * np.asarray(w_rbps, dtype=np.float64)
    if w.size == 0:
        raise ConfigError("empty weight batch")
    if not np.all(np.isfinite(w)):
        raise ConfigError("non-finite sample weights")
    if np.any(w < 0):
        raise ConfigError("negative sample weights")
    if not w.any():
        raise DegenerateWeightError("every weight in the batch is zero")
    if np.all(w == w.flat[0]):
        # constant batch: emit the exact limit values, no float residue
        out = np.full(w.shape, 1.0 if config.rescale_mode == "mean-one"
                      else 1.0 / w.size)
    elif config.rescale_mode == "mean-one":
        out = w / (math.fsum(w.ravel()) / w.size)
    else:
        out = w / math.fsum(w.ravel())
    return np.minimum(out, config.clip_max)


def sample_episodes(dataset, distribution, batch_size: int, seed=0) -> np.ndarray:
    """Draw episode indices i.i.d. from ``distribution``.

    ``dataset`` may be the dataset itself or just its episode count; ``seed``
    may be an integer or an already-running Generator (one sampler per
    training run owns its stream).
    """
    m = dataset if isinstance(dataset, int) else len(dataset)
    p = np.asarray(distribution, dtype=np.float64)
    if p.shape != (m,):
        raise ConfigError(f"distribution shape {p.shape} does not match {m} episodes")
    if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-9:
        raise ConfigError("episode weights are not a probability distribution")
    rng = seed if isinstance(seed, np.random.Generator) \
        else np.random.default_rng(seed)
    return rng.choice(m, size=batch_size, replace=True, p=p)


# -- weight records and the sidecar file ----------------------------------------

_SIDECAR_FORMAT = "gridlight-weights"
_SIDECAR_VERSION = 1


@dataclass
class WeightRecord:
    """All weight material for one episode.

    ``w_is`` holds the per-transition importance ratios against the policy
    the record was computed for, ``w_rbps`` the episode's raw return-priority
    score.  ``w_combined`` is their product and ``w_tilde`` its normalized,
    clamped value treating the whole dataset as one batch — a diagnostic;
    trainers renormalize per minibatch from the raw components.
    """

    episode: int
    w_rbps: float
    w_is: np.ndarray
    w_combined: np.ndarray
    w_tilde: np.ndarray

    def __post_init__(self):
        for arr in (self.w_is, self.w_combined, self.w_tilde):
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise ConfigError("weights must be finite and non-negative")


def compute_weight_records(dataset, target_probs,
                           config: WeightConfig = WeightConfig()
                           ) -> list[WeightRecord]:
    """Weight material for every episode of an annotated dataset.

    ``target_probs`` is (episodes, steps, agents): the probability the target
    policy assigns to each logged action.  Behaviour probabilities come from
    the dataset's annotations.
    """
    m = len(dataset)
    t_len = len(dataset.episodes[0].transitions)
    target = np.asarray(target_probs, dtype=np.float64)
    if target.shape != (m, t_len, dataset.num_agents):
        raise ConfigError(f"target probabilities shaped {target.shape}, "
                          f"expected {(m, t_len, dataset.num_agents)}")
    behavior = np.empty_like(target)
    for k, ep in enumerate(dataset.episodes):
        for t, tr in enumerate(ep.transitions):
            if tr.model_prob is None:
                raise ConfigError("dataset lacks behaviour-policy annotations; "
                                  "annotate it before weighting")
            behavior[k, t] = tr.model_prob
    w_is = is_weights_array(target, behavior, form=config.is_form)
    returns = dataset.returns()
    rbps = np.array([rbps_weight(g, returns.min(), returns.max(), config)
                     for g in returns])
    combined = w_is * rbps[:, None]
    tilde = combine_normalize_clip(
        w_is.ravel(), np.broadcast_to(rbps[:, None], (m, t_len)).ravel(),
        config).reshape(m, t_len)
    return [WeightRecord(episode=k, w_rbps=float(rbps[k]), w_is=w_is[k],
                         w_combined=combined[k], w_tilde=tilde[k])
            for k in range(m)]


def save_weights(records: list[WeightRecord], fingerprint: str,
                 config: WeightConfig, path) -> None:
    """Write a weight sidecar file (JSON, keyed by episode id and step)."""
    blob = {
        "format": _SIDECAR_FORMAT,
        "schema_version": _SIDECAR_VERSION,
        "fingerprint": fingerprint,
        "episodes": len(records),
        "config": {"p_base": config.p_base, "clip_max": config.clip_max,
                   "is_form": config.is_form,
                   "rescale_mode": config.rescale_mode,
                   "eps_prob": config.eps_prob},
        "records": [{"episode": r.episode, "w_rbps": r.w_rbps,
                     "w_is": r.w_is.tolist(),
                     "w_combined": r.w_combined.tolist(),
                     "w_tilde": r.w_tilde.tolist()} for r in records],
    }
    Path(path).write_text(json.dumps(blob))


def load_weights(path, expected_fingerprint: str | None = None
                 ) -> list[WeightRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such weights file: {path}")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"weights file is corrupt: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != _SIDECAR_FORMAT:
        raise DatasetFormatError(f"{path} is not a weights sidecar file")
    if blob.get("schema_version") != _SIDECAR_VERSION:
        raise DatasetVersionError(
            f"weights schema version {blob.get('schema_version')!r} "
            f"unsupported (this build reads {_SIDECAR_VERSION})")
    if (expected_fingerprint is not None
            and blob.get("fingerprint") != expected_fingerprint):
        raise FingerprintError(
            f"weights were computed for fingerprint {blob.get('fingerprint')}, "
            f"dataset has {expected_fingerprint}")
    return [WeightRecord(episode=int(r["episode"]),
                         w_rbps=float(r["w_rbps"]),
                         w_is=np.array(r["w_is"], dtype=np.float64),
                         w_combined=np.array(r["w_combined"], dtype=np.float64),
                         w_tilde=np.array(r["w_tilde"], dtype=np.float64))
            for r in blob["records"]]


# -- enumeration oracle --------------------------------------------------------


@dataclass(frozen=True)
class MicroMDP:
    """A multi-agent MDP small enough to enumerate every trajectory.

    ``init`` is (S,), ``transition`` is (S, A^N, S); joint actions index with
    agent 0 as the least-significant base-A digit.
    """

    init: np.ndarray
    transition: np.ndarray
    num_agents: int
    num_actions: int
    horizon: int

    def __post_init__(self):
        s = self.init.shape[0]
        j = self.num_actions ** self.num_agents
        if self.transition.shape != (s, j, s):
            raise ConfigError(f"transition shape {self.transition.shape} "
                              f"!= {(s, j, s)}")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")
        for name, dist in (("init", self.init.reshape(1, -1)),
                           ("transition", self.transition.reshape(-1, s))):
            if np.any(dist < 0) or np.any(np.abs(dist.sum(axis=1) - 1.0) > 1e-12):
                raise ConfigError(f"{name} rows must be probability distributions")

    @property
    def num_states(self) -> int:
        return self.init.shape[0]

    def joint_index(self, actions) -> int:
        j = 0
        for n, a in enumerate(actions):
            j += a * self.num_actions ** n
        return j


def _check_policy(mdp: MicroMDP, policy: np.ndarray, name: str) -> None:
    want = (mdp.num_agents, mdp.num_states, mdp.num_actions)
    if policy.shape != want:
        raise ConfigError(f"{name} shape {policy.shape} != {want}")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=2) - 1.0) > 1e-12):
        raise ConfigError(f"{name} rows must be probability distributions")


def enumerate_trajectories(mdp: MicroMDP):
    """Yield every (states, joint_actions) pair with positive dynamics mass.

    ``states`` has length horizon+1; ``joint_actions`` is a tuple of per-step
    agent tuples.
    """
    action_space = list(itertools.product(range(mdp.num_actions),
                                          repeat=mdp.num_agents))

    def extend(states, actions):
        t = len(actions)
        if t == mdp.horizon:
            yield tuple(states), tuple(actions)
            return
        s = states[-1]
        for acts in action_space:
            j = mdp.joint_index(acts)
            row = mdp.transition[s, j]
            for s2 in range(mdp.num_states):
                if row[s2] > 0.0:
                    yield from extend(states + [s2], actions + [acts])

    for s0 in range(mdp.num_states):
        if mdp.init[s0] > 0.0:
            yield from extend([s0], [])


def trajectory_probability(mdp: MicroMDP, policy: np.ndarray,
                           states, actions) -> float:
    """P(τ) under ``policy``: init × per-agent action probs × dynamics."""
    p = float(mdp.init[states[0]])
    for t, acts in enumerate(actions):
        for n, a in enumerate(acts):
            p *= float(policy[n, states[t], a])
        p *= float(mdp.transition[states[t], mdp.joint_index(acts), states[t + 1]])
    return p


@dataclass(frozen=True)
class OracleReport:
    """Exact enumeration results for one (mdp, π_θ, π_b, f) instance."""

    exact_target: float          # E_{π_θ}[f]
    is_estimate_product: float   # E_{π_b}[w_product · f]
    is_estimate_mean: float      # E_{π_b}[w_mean-form · f]
    var_product: float           # Var_{π_b}[w_product · f]
    var_mean: float              # Var_{π_b}[w_mean-form · f]

    @property
    def mean_form_bias(self) -> float:
        return self.is_estimate_mean - self.exact_target


def oracle_expectation_check(mdp: MicroMDP, pi_theta: np.ndarray,
                             pi_b: np.ndarray, f,
                             pi_b_hat: np.ndarray | None = None) -> OracleReport:
    """Exact target vs importance-sampled estimates, by full enumeration.

    ``pi_b`` generates the data; weights divide by ``pi_b_hat`` (defaults to
    ``pi_b``, i.e. a perfectly estimated behaviour policy).  ``f`` maps
    ``(states, joint_actions)`` to a real.  Raises when π_θ escapes the
    support of π_b, or π_b the support of π̂_b — the assumption every
    unbiasedness statement rests on.
    """
    _check_policy(mdp, pi_theta, "pi_theta")
    _check_policy(mdp, pi_b, "pi_b")
    if pi_b_hat is None:
        pi_b_hat = pi_b
    else:
        _check_policy(mdp, pi_b_hat, "pi_b_hat")

    if np.any((pi_theta > 0) & (pi_b == 0)):
        raise SupportViolationError(
            "target policy puts mass outside the behaviour policy's support")
    if np.any((pi_b > 0) & (pi_b_hat == 0)):
        raise SupportViolationError(
            "estimated behaviour policy misses part of the true support")

    target_terms = []
    est_p, sq_p = [], []
    est_m, sq_m = [], []
    for states, actions in enumerate_trajectories(mdp):
        value = float(f(states, actions))
        p_theta = trajectory_probability(mdp, pi_theta, states, actions)
        p_b = trajectory_probability(mdp, pi_b, states, actions)
        target_terms.append(p_theta * value)
        if p_b == 0.0:
            continue
        w_prod = 1.0
        w_mean = 1.0
        for t, acts in enumerate(actions):
            step_ratios = [
                float(pi_theta[n, states[t], a]) / float(pi_b_hat[n, states[t], a])
                for n, a in enumerate(acts)
            ]
            w_prod *= math.prod(step_ratios)
            w_mean *= math.fsum(step_ratios) / len(step_ratios)
        est_p.append(p_b * w_prod * value)
        sq_p.append(p_b * (w_prod * value) ** 2)
        est_m.append(p_b * w_mean * value)
        sq_m.append(p_b * (w_mean * value) ** 2)

    e_p, e_m = math.fsum(est_p), math.fsum(est_m)
    return OracleReport(
        exact_target=math.fsum(target_terms),
        is_estimate_product=e_p,
        is_estimate_mean=e_m,
        var_product=math.fsum(sq_p) - e_p ** 2,
        var_mean=math.fsum(sq_m) - e_m ** 2,
    )


def random_micro_mdp(rng: np.random.Generator, num_states: int = 2,
                     num_agents: int = 2, num_actions: int = 2,
                     horizon: int = 3) -> MicroMDP:
    """A fully-supported random instance (every probability strictly positive)."""
    j = num_actions ** num_agents
    init = rng.dirichlet(np.ones(num_states) * 2.0)
    transition = rng.dirichlet(np.ones(num_states) * 2.0, size=(num_states, j))
    return MicroMDP(init=init, transition=transition, num_agents=num_agents,
                    num_actions=num_actions, horizon=horizon)


def random_policy(rng: np.random.Generator, mdp: MicroMDP) -> np.ndarray:
    """A strictly-positive random policy table (N, S, A)."""
    return rng.dirichlet(np.ones(mdp.num_actions) * 2.0,
                         size=(mdp.num_agents, mdp.num_states))


def random_reward_f(rng: np.random.Generator, mdp: MicroMDP):
    """A random trajectory functional: discounted per-step state-action rewards."""
    table = rng.normal(size=(mdp.num_states, mdp.num_actions ** mdp.num_agents))
    terminal = rng.normal(size=mdp.num_states)

    def f(states, actions):
        total = 0.0
        for t, acts in enumerate(actions):
            total += table[states[t], mdp.joint_index(acts)]
        return total + terminal[states[-1]]

    return f
