"""Offline policy trainers: behaviour cloning, discrete conservative
Q-learning, and a discrete TD3+BC, each in a plain and an importance-weighted
variant.

All three algorithms share one recurrent agent network (parameters shared
across agents): per-step observation embedding, one graph-attention layer over
the intersection adjacency, a GRU along time per agent, and a linear head that
reads out phase logits (actors) or phase values (critics).  Centralized
training uses an additive value mixer Q_tot = Σ_i Q^i whose per-agent scale φ
is kept as a named component but frozen at one, so execution stays fully
decentralized and the parameter count is independent of the number of
intersections.

The weighted variants scale every per-transition loss term by w̃, the
combined, batch-normalized and clamped product of importance and
return-priority weights.  Behaviour cloning reads precomputed importance
ratios from a weight sidecar file; the value-based variants recompute them
each batch from the *current* policy against the annotated behaviour
probabilities, since the ratios change with every update and must never be
cached.  Batches are whole episodes, sampled by return priority in the
weighted variants and uniformly otherwise — through the same sampler, so a
degenerate (equal-return) dataset makes both variants draw identical batches
from identical RNG streams.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import behavior_model
from .datastore import Dataset
from .errors import (CheckpointError, ConfigError, DegenerateWeightError,
                     DivergenceError, FingerprintError)
from .nets import GATStack, episodes_to_tensors
from .simnet import AdjacencyGraph
from .weighting import (WeightConfig, combine_normalize_clip,
                        is_weights_array, load_weights, rbps_distribution,
                        rbps_weight, sample_episodes)

logger = logging.getLogger(__name__)

ALGORITHMS = ("bc", "cql", "td3bc")
_CHECKPOINT_FORMAT = "gridlight-policy"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AgentNetConfig:
    rnn_hidden: int = 128
    fc_hidden: int = 128
    gat_layers: int = 1
    attention_heads: int = 4
    gamma: float = 0.99

    def __post_init__(self):
        if min(self.rnn_hidden, self.fc_hidden, self.gat_layers,
               self.attention_heads) < 1:
            raise ConfigError("network sizes must be positive")
        if self.fc_hidden % self.attention_heads:
            raise ConfigError("fc_hidden must be divisible by attention_heads")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class TrainerConfig:
    algo: str
    offlight: bool = False
    alpha_cql: float = 1.0
    target_update_interval: int = 200
    alpha_td3bc: float = 1.0
    tau: float = 0.005
    lr: float = 1e-3
    batch_size: int = 8
    train_steps: int = 500
    seed: int = 0
    reward_scale: float = 1.0
    weight_sidecar: str | None = None
    weight_config: WeightConfig = WeightConfig()

    def __post_init__(self):
        if self.algo not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algo!r}; "
                              f"choose one of {', '.join(ALGORITHMS)}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if self.alpha_cql < 0 or self.alpha_td3bc < 0:
            raise ConfigError("loss coefficients must be non-negative")
        if self.lr <= 0 or self.batch_size < 1 or self.train_steps < 1:
            raise ConfigError("lr, batch_size and train_steps must be positive")
        if self.target_update_interval < 1:
            raise ConfigError("target_update_interval must be positive")
        if self.reward_scale <= 0:
            raise ConfigError("reward_scale must be positive")


class AgentNet(nn.Module):
    """Shared per-agent recurrent network with one graph-attention hop.

    Maps observations ``(B, T, N, F)`` to per-agent phase scores
    ``(B, T, N, P)``; the GRU runs along time separately per agent, after the
    attention layer has mixed in neighbour information for each step.
    """

    def __init__(self, config: AgentNetConfig, obs_dim: int, num_phases: int,
                 adjacency: np.ndarray):
        super().__init__()
        self.register_buffer("adj", torch.as_tensor(adjacency,
                                                    dtype=torch.float32))
        self.embed = nn.Linear(obs_dim, config.fc_hidden)
        self.gat = GATStack(config.fc_hidden, config.fc_hidden,
                            config.gat_layers, config.attention_heads, "relu")
        self.gru = nn.GRU(config.fc_hidden, config.rnn_hidden, batch_first=True)
        self.head = nn.Linear(config.rnn_hidden, num_phases)
        self.act = nn.ReLU()

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        b, t, n, _ = obs.shape
        x = self.act(self.embed(obs))
        x = self.gat(x, self.adj)
        x = x.permute(0, 2, 1, 3).reshape(b * n, t, x.shape[-1])
        x, _ = self.gru(x)
        x = x.reshape(b, n, t, x.shape[-1]).permute(0, 2, 1, 3)
        return self.head(x)


class Mixer(nn.Module):
    """Additive value decomposition Q_tot = Σ_i φ·Q^i with φ frozen at one."""

    def __init__(self):
        super().__init__()
        self.register_buffer("phi", torch.ones(()))

    def forward(self, per_agent: torch.Tensor) -> torch.Tensor:
        return (self.phi * per_agent).sum(dim=-1)


@dataclass
class PolicyCheckpoint:
    """A trained policy plus everything needed to keep training or evaluate."""

    algo: str
    trainer_config: TrainerConfig
    agent_config: AgentNetConfig
    fingerprint: str
    obs_dim: int
    num_phases: int
    modules: dict
    step: int = 0
    metrics_log: list = field(default_factory=list)

    @property
    def policy_module(self) -> AgentNet:
        return self.modules["actor"] if "actor" in self.modules \
            else self.modules["qnet"]


def _build_modules(algo: str, agent_config: AgentNetConfig, obs_dim: int,
                   num_phases: int, adjacency: np.ndarray) -> dict:
    def net():
        return AgentNet(agent_config, obs_dim, num_phases, adjacency)

    if algo == "bc":
        return {"actor": net()}
    if algo == "cql":
        qnet = net()
        return {"qnet": qnet, "target_qnet": copy.deepcopy(qnet),
                "mixer": Mixer()}
    actor, q1, q2 = net(), net(), net()
    return {"actor": actor, "q1": q1, "q2": q2,
            "target_actor": copy.deepcopy(actor),
            "target_q1": copy.deepcopy(q1), "target_q2": copy.deepcopy(q2),
            "mixer": Mixer()}


def hard_update(target: nn.Module, source: nn.Module) -> None:
    target.load_state_dict(source.state_dict())


def polyak_update(target: nn.Module, source: nn.Module, tau: float) -> None:
    """θ_target ← (1 − τ)·θ_target + τ·θ, elementwise."""
    with torch.no_grad():
        for pt, p in zip(target.parameters(), source.parameters()):
            pt.copy_(pt * (1.0 - tau) + p * tau)


def forward_policy(checkpoint: PolicyCheckpoint, obs_history: np.ndarray,
                   graph: AdjacencyGraph | None = None) -> np.ndarray:
    """Per-agent action distribution π_θ(·|h_t) from an observation history.

    ``obs_history`` is (T, N, F) (or (N, F) for a single step); the returned
    array is (N, P), one categorical per agent conditioned on that agent's
    full history.  For the value-based learner the distribution is the
    softmax over Q-values; greedy execution takes its argmax.
    """
    obs = np.asarray(obs_history, dtype=np.float32)
    if obs.ndim == 2:
        obs = obs[None]
    if obs.ndim != 3:
        raise ConfigError(f"expected (T, N, F) observation history, "
                          f"got shape {obs.shape}")
    net = checkpoint.policy_module
    if graph is not None and not np.array_equal(graph.matrix,
                                                net.adj.numpy().astype(float)):
        raise FingerprintError("adjacency does not match the trained policy")
    if obs.shape[1] != net.adj.shape[0] or obs.shape[2] != checkpoint.obs_dim:
        raise FingerprintError(
            f"history shape {obs.shape} does not match the trained policy "
            f"({net.adj.shape[0]} agents, obs width {checkpoint.obs_dim})")
    with torch.no_grad():
        logits = net(torch.as_tensor(obs).unsqueeze(0))[0, -1]
    return torch.softmax(logits, dim=-1).double().numpy()


def policy_action_probs(checkpoint: PolicyCheckpoint,
                        dataset: Dataset) -> np.ndarray:
    """π_θ of every logged action under teacher-forced histories, as (M, T, N).

    This is the target-probability array the weight sidecar is built from.
    """
    if checkpoint.fingerprint != dataset.fingerprint:
        raise FingerprintError(
            f"checkpoint fingerprint {checkpoint.fingerprint} does not match "
            f"dataset {dataset.fingerprint}")
    tensors = episodes_to_tensors(dataset.episodes, dataset.num_phases)
    with torch.no_grad():
        probs = torch.softmax(checkpoint.policy_module(tensors.obs), dim=-1)
        taken = probs.gather(-1, tensors.actions.unsqueeze(-1)).squeeze(-1)
    return taken.double().numpy()


# -- loss functions ------------------------------------------------------------
#
# Each returns (scalar loss, diagnostics dict).  Per-transition terms are
# averaged over agents first, multiplied by the (B, T) weight, then averaged
# over the batch, so a weight of exactly one reproduces the unweighted loss
# bit for bit.


def bc_loss(logits: torch.Tensor, actions: torch.Tensor,
            weights: torch.Tensor) -> tuple[torch.Tensor, dict]:
    """Weighted cross-entropy of actor logits against taken actions."""
    b, t, n, p = logits.shape
    ce = F.cross_entropy(logits.reshape(-1, p), actions.reshape(-1),
                         reduction="none").reshape(b, t, n).mean(dim=-1)
    loss = (weights * ce).mean()
    return loss, {"ce": float(ce.detach().mean())}


def cql_loss(q: torch.Tensor, target_next_q: torch.Tensor,
             actions: torch.Tensor, rewards: torch.Tensor,
             dones: torch.Tensor, gamma: float, alpha: float,
             weights: torch.Tensor, mixer: Mixer) -> tuple[torch.Tensor, dict]:
    """Mixed Bellman error plus the discrete conservative regularizer.

    ``q`` is the online net's (B, T, N, P); ``target_next_q`` the target
    net's values at the successor steps (already shifted, detached).  Targets
    use decentralized per-agent greedy maxima, consistent with the additive
    mixer.
    """
    q_taken = q.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
    q_tot = mixer(q_taken)
    with torch.no_grad():
        next_tot = mixer(target_next_q.max(dim=-1).values)
        y = rewards + gamma * (1.0 - dones) * next_tot
    bellman = (q_tot - y) ** 2
    reg = (torch.logsumexp(q, dim=-1) - q_taken).mean(dim=-1)
    loss = (weights * (bellman + alpha * reg)).mean()
    return loss, {"bellman": float(bellman.detach().mean()),
                  "cql_reg": float((alpha * reg).detach().mean())}


def td3bc_critic_loss(q1: torch.Tensor, q2: torch.Tensor,
                      target_next_pi: torch.Tensor,
                      target_next_q1: torch.Tensor,
                      target_next_q2: torch.Tensor,
                      actions: torch.Tensor, rewards: torch.Tensor,
                      dones: torch.Tensor, gamma: float,
                      weights: torch.Tensor, mixer: Mixer
                      ) -> tuple[torch.Tensor, dict]:
    """Twin Bellman errors against the clipped expected target value."""
    with torch.no_grad():
        min_q = torch.minimum(target_next_q1, target_next_q2)
        expected = (target_next_pi * min_q).sum(dim=-1)
        y = rewards + gamma * (1.0 - dones) * mixer(expected)
    idx = actions.unsqueeze(-1)
    tot1 = mixer(q1.gather(-1, idx).squeeze(-1))
    tot2 = mixer(q2.gather(-1, idx).squeeze(-1))
    err = (tot1 - y) ** 2 + (tot2 - y) ** 2
    loss = (weights * err).mean()
    return loss, {"critic": float(err.detach().mean())}


def td3bc_actor_loss(logits: torch.Tensor, q1_values: torch.Tensor,
                     actions: torch.Tensor, alpha: float,
                     weights: torch.Tensor) -> tuple[torch.Tensor, dict]:
    """Expected-Q policy objective plus the cross-entropy cloning term."""
    b, t, n, p = logits.shape
    pi = torch.softmax(logits, dim=-1)
    value = (pi * q1_values.detach()).sum(dim=-1)
    ce = F.cross_entropy(logits.reshape(-1, p), actions.reshape(-1),
                         reduction="none").reshape(b, t, n)
    per_step = (-value + alpha * ce).mean(dim=-1)
    loss = (weights * per_step).mean()
    return loss, {"actor": float(per_step.detach().mean()),
                  "bc_term": float(ce.detach().mean())}


# -- training loops ------------------------------------------------------------


class _Run:
    """Shared plumbing: tensors, sampling, weights, logging."""

    def __init__(self, dataset: Dataset, graph: AdjacencyGraph,
                 config: TrainerConfig):
        if graph.num_nodes != dataset.num_agents:
            raise ConfigError(f"graph has {graph.num_nodes} nodes, dataset "
                              f"has {dataset.num_agents} agents")
        self.config = config
        self.wcfg = config.weight_config
        tensors = episodes_to_tensors(dataset.episodes, dataset.num_phases)
        self.obs = tensors.obs
        self.actions = tensors.actions
        self.rewards = tensors.rewards * config.reward_scale
        self.dones = tensors.dones
        # one recurrent pass over obs plus the final successor observation
        # yields both the online values (steps 0..T-1) and the successor
        # values (steps 1..T), because the recurrence is causal
        self.obs_ext = torch.cat([tensors.obs, tensors.next_obs[:, -1:]], dim=1)
        self.model_prob = (None if tensors.model_prob is None
                           else tensors.model_prob.double().numpy())
        self.rng = np.random.default_rng(config.seed)
        m = len(dataset)
        returns = dataset.returns()
        if config.offlight and config.algo != "bc":
            if self.model_prob is None:
                raise ConfigError("dataset lacks behaviour-policy annotations; "
                                  "annotate it before weighted training")
            self.distribution = rbps_distribution(returns, self.wcfg)
        else:
            self.distribution = np.full(m, 1.0 / m)
        self.rbps_raw = np.array([rbps_weight(g, returns.min(), returns.max(),
                                              self.wcfg) for g in returns])
        self.num_episodes = m
        self.metrics: list[dict] = []

    def sample(self) -> np.ndarray:
        return sample_episodes(self.num_episodes, self.distribution,
                               self.config.batch_size, self.rng)

    def ones(self, idx) -> tuple[torch.Tensor, dict]:
        w = torch.ones(len(idx), self.obs.shape[1])
        return w, {"w_mean": 1.0, "w_max": 1.0, "clamp_rate": 0.0}

    def combined_weights(self, idx, w_is: np.ndarray) -> tuple[torch.Tensor, dict]:
        """Per-transition w̃ for a batch: combine, normalize, clamp."""
        b, t = w_is.shape
        w_rbps = np.broadcast_to(self.rbps_raw[idx][:, None], (b, t))
        try:
            w = combine_normalize_clip(w_is.ravel(), w_rbps.ravel(), self.wcfg)
        except DegenerateWeightError:
            logger.warning("all combined weights are zero in this batch; "
                           "falling back to uniform weights")
            return self.ones(idx)
        w = w.reshape(b, t)
        stats = {"w_mean": float(w.mean()), "w_max": float(w.max()),
                 "clamp_rate": float((w >= self.wcfg.clip_max).mean())}
        return torch.as_tensor(w, dtype=torch.float32), stats

    def live_is_weights(self, idx, policy_net: AgentNet
                        ) -> tuple[torch.Tensor, dict]:
        """Importance ratios of the current policy against annotated π̂_b,
        recomputed fresh each batch (never cached across updates)."""
        with torch.no_grad():
            logits = policy_net(self.obs[idx])
            probs = torch.softmax(logits, dim=-1)
            taken = probs.gather(-1, self.actions[idx].unsqueeze(-1))
        target = taken.squeeze(-1).double().numpy()
        w_is = is_weights_array(target, self.model_prob[idx],
                                form=self.wcfg.is_form)
        return self.combined_weights(idx, w_is)

    def log(self, step: int, stats: dict) -> None:
        self.metrics.append({"step": step, **stats})


def _finite_or_raise(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at step {step}")


def _sidecar_weights(dataset: Dataset, config: TrainerConfig) -> np.ndarray:
    """Per-transition importance ratios from the weight sidecar, as (M, T)."""
    if config.weight_sidecar is None:
        raise ConfigError("weighted behaviour cloning needs a weight sidecar "
                          "(set weight_sidecar)")
    records = load_weights(config.weight_sidecar, expected_fingerprint=
                           dataset.fingerprint)
    if len(records) != len(dataset):
        raise ConfigError(f"sidecar covers {len(records)} episodes, dataset "
                          f"has {len(dataset)}")
    t = len(dataset.episodes[0].transitions)
    w = np.stack([r.w_is for r in records])
    if w.shape != (len(dataset), t):
        raise ConfigError(f"sidecar transition count {w.shape} does not match "
                          f"dataset ({len(dataset)}, {t})")
    return w


def bc_train(dataset: Dataset, graph: AdjacencyGraph, config: TrainerConfig,
             agent_config: AgentNetConfig = AgentNetConfig()
             ) -> PolicyCheckpoint:
    """Behaviour cloning: (weighted) cross-entropy on logged actions."""
    if config.algo != "bc":
        raise ConfigError(f"bc_train got algo={config.algo!r}")
    sidecar = _sidecar_weights(dataset, config) if config.offlight else None
    torch.manual_seed(config.seed)
    run = _Run(dataset, graph, config)
    modules = _build_modules("bc", agent_config, dataset.obs_dim,
                             dataset.num_phases, graph.matrix)
    actor = modules["actor"]
    opt = torch.optim.Adam(actor.parameters(), lr=config.lr)
    for step in range(config.train_steps):
        idx = run.sample()
        weights, wstats = (run.combined_weights(idx, sidecar[idx])
                           if config.offlight else run.ones(idx))
        logits = actor(run.obs[idx])
        loss, diag = bc_loss(logits, run.actions[idx], weights)
        _finite_or_raise(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        run.log(step, {"loss": float(loss.detach()), **diag, **wstats})
    return PolicyCheckpoint(algo="bc", trainer_config=config,
                            agent_config=agent_config,
                            fingerprint=dataset.fingerprint,
                            obs_dim=dataset.obs_dim,
                            num_phases=dataset.num_phases, modules=modules,
                            step=config.train_steps, metrics_log=run.metrics)


def cql_train(dataset: Dataset, graph: AdjacencyGraph, config: TrainerConfig,
              agent_config: AgentNetConfig = AgentNetConfig()
              ) -> PolicyCheckpoint:
    """Discrete conservative Q-learning with an additive mixer.

    In the weighted variant, episodes are drawn by return priority and both
    the Bellman and the conservative term are scaled by live-recomputed w̃.
    """
    if config.algo != "cql":
        raise ConfigError(f"cql_train got algo={config.algo!r}")
    torch.manual_seed(config.seed)
    run = _Run(dataset, graph, config)
    modules = _build_modules("cql", agent_config, dataset.obs_dim,
                             dataset.num_phases, graph.matrix)
    qnet, target, mixer = modules["qnet"], modules["target_qnet"], modules["mixer"]
    opt = torch.optim.Adam(qnet.parameters(), lr=config.lr)
    for step in range(config.train_steps):
        idx = run.sample()
        weights, wstats = (run.live_is_weights(idx, qnet)
                           if config.offlight else run.ones(idx))
        q = qnet(run.obs_ext[idx])[:, :-1]
        with torch.no_grad():
            next_q = target(run.obs_ext[idx])[:, 1:]
        loss, diag = cql_loss(q, next_q, run.actions[idx], run.rewards[idx],
                              run.dones[idx], agent_config.gamma,
                              config.alpha_cql, weights, mixer)
        _finite_or_raise(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % config.target_update_interval == 0:
            hard_update(target, qnet)
        run.log(step, {"loss": float(loss.detach()), **diag, **wstats})
    return PolicyCheckpoint(algo="cql", trainer_config=config,
                            agent_config=agent_config,
                            fingerprint=dataset.fingerprint,
                            obs_dim=dataset.obs_dim,
                            num_phases=dataset.num_phases, modules=modules,
                            step=config.train_steps, metrics_log=run.metrics)


def td3bc_train(dataset: Dataset, graph: AdjacencyGraph,
                config: TrainerConfig,
                agent_config: AgentNetConfig = AgentNetConfig()
                ) -> PolicyCheckpoint:
    """Discrete TD3+BC: twin critics, expected-Q actor objective with a
    cross-entropy cloning term, delayed actor and Polyak target updates."""
    if config.algo != "td3bc":
        raise ConfigError(f"td3bc_train got algo={config.algo!r}")
    torch.manual_seed(config.seed)
    run = _Run(dataset, graph, config)
    modules = _build_modules("td3bc", agent_config, dataset.obs_dim,
                             dataset.num_phases, graph.matrix)
    actor, q1, q2 = modules["actor"], modules["q1"], modules["q2"]
    t_actor, t_q1, t_q2 = (modules["target_actor"], modules["target_q1"],
                           modules["target_q2"])
    mixer = modules["mixer"]
    actor_opt = torch.optim.Adam(actor.parameters(), lr=config.lr)
    critic_opt = torch.optim.Adam(list(q1.parameters()) + list(q2.parameters()),
                                  lr=config.lr)
    for step in range(config.train_steps):
        idx = run.sample()
        weights, wstats = (run.live_is_weights(idx, actor)
                           if config.offlight else run.ones(idx))
        with torch.no_grad():
            ext = run.obs_ext[idx]
            next_pi = torch.softmax(t_actor(ext)[:, 1:], dim=-1)
            next_q1 = t_q1(ext)[:, 1:]
            next_q2 = t_q2(ext)[:, 1:]
        closs, cdiag = td3bc_critic_loss(
            q1(run.obs[idx]), q2(run.obs[idx]), next_pi, next_q1, next_q2,
            run.actions[idx], run.rewards[idx], run.dones[idx],
            agent_config.gamma, weights, mixer)
        _finite_or_raise(closs, step)
        critic_opt.zero_grad()
        closs.backward()
        critic_opt.step()
        stats = {"loss": float(closs.detach()), **cdiag, **wstats}
        if (step + 1) % 2 == 0:      # delayed actor and target updates
            with torch.no_grad():
                q1_vals = q1(run.obs[idx])
            aloss, adiag = td3bc_actor_loss(actor(run.obs[idx]), q1_vals,
                                            run.actions[idx],
                                            config.alpha_td3bc, weights)
            _finite_or_raise(aloss, step)
            actor_opt.zero_grad()
            aloss.backward()
            actor_opt.step()
            polyak_update(t_actor, actor, config.tau)
            polyak_update(t_q1, q1, config.tau)
            polyak_update(t_q2, q2, config.tau)
            stats.update(adiag)
        run.log(step, stats)
    return PolicyCheckpoint(algo="td3bc", trainer_config=config,
                            agent_config=agent_config,
                            fingerprint=dataset.fingerprint,
                            obs_dim=dataset.obs_dim,
                            num_phases=dataset.num_phases, modules=modules,
                            step=config.train_steps, metrics_log=run.metrics)


def initial_checkpoint(dataset: Dataset, graph: AdjacencyGraph,
                       config: TrainerConfig,
                       agent_config: AgentNetConfig = AgentNetConfig()
                       ) -> PolicyCheckpoint:
    """The step-0 policy a training run with this config would start from.

    Seeding and module construction mirror the trainers exactly, so weights
    computed against this checkpoint describe the first update of the run.
    """
    if graph.num_nodes != dataset.num_agents:
        raise ConfigError(f"graph has {graph.num_nodes} nodes, dataset "
                          f"has {dataset.num_agents} agents")
    torch.manual_seed(config.seed)
    modules = _build_modules(config.algo, agent_config, dataset.obs_dim,
                             dataset.num_phases, graph.matrix)
    return PolicyCheckpoint(algo=config.algo, trainer_config=config,
                            agent_config=agent_config,
                            fingerprint=dataset.fingerprint,
                            obs_dim=dataset.obs_dim,
                            num_phases=dataset.num_phases, modules=modules,
                            step=0, metrics_log=[])


_TRAINERS = {"bc": bc_train, "cql": cql_train, "td3bc": td3bc_train}


def train(dataset: Dataset, graph: AdjacencyGraph, config: TrainerConfig,
          agent_config: AgentNetConfig = AgentNetConfig()) -> PolicyCheckpoint:
    """Dispatch to the trainer selected by ``config.algo``."""
    return _TRAINERS[config.algo](dataset, graph, config, agent_config)


def offlight_train(dataset: Dataset, bpm, graph: AdjacencyGraph,
                   config: TrainerConfig,
                   agent_config: AgentNetConfig = AgentNetConfig()
                   ) -> PolicyCheckpoint:
    """The full weighted pipeline around a value-based learner.

    Annotates the dataset with the behaviour model if that has not happened
    yet, then trains the base algorithm with return-prioritized sampling and
    per-batch importance weights.
    """
    if config.algo not in ("cql", "td3bc"):
        raise ConfigError("weighted training wraps a value-based learner; "
                          "use algo 'cql' or 'td3bc'")
    annotated = all(tr.model_prob is not None
                    for ep in dataset.episodes for tr in ep.transitions)
    if not annotated:
        if bpm is None:
            raise ConfigError("dataset is not annotated and no behaviour "
                              "model was given")
        behavior_model.annotate(dataset, bpm)
    if bpm is not None and bpm.fingerprint != dataset.fingerprint:
        raise FingerprintError(
            f"behaviour model fingerprint {bpm.fingerprint} does not match "
            f"dataset {dataset.fingerprint}")
    config = replace(config, offlight=True)
    return _TRAINERS[config.algo](dataset, graph, config, agent_config)


# -- persistence ---------------------------------------------------------------


def save_checkpoint(checkpoint: PolicyCheckpoint, path) -> None:
    blob = {
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "algo": checkpoint.algo,
        "trainer_config": asdict(checkpoint.trainer_config),
        "agent_config": asdict(checkpoint.agent_config),
        "fingerprint": checkpoint.fingerprint,
        "obs_dim": checkpoint.obs_dim,
        "num_phases": checkpoint.num_phases,
        "adjacency": checkpoint.policy_module.adj.numpy(),
        "step": checkpoint.step,
        "metrics_log": checkpoint.metrics_log,
        "state_dicts": {name: m.state_dict()
                        for name, m in checkpoint.modules.items()},
    }
    torch.save(blob, path)


def load_checkpoint(path) -> PolicyCheckpoint:
    try:
        blob = torch.load(path, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a policy checkpoint")
    if blob.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')!r} "
                              f"unsupported (this build reads "
                              f"{_CHECKPOINT_VERSION})")
    tc = dict(blob["trainer_config"])
    tc["weight_config"] = WeightConfig(**tc["weight_config"])
    trainer_config = TrainerConfig(**tc)
    agent_config = AgentNetConfig(**blob["agent_config"])
    modules = _build_modules(blob["algo"], agent_config, blob["obs_dim"],
                             blob["num_phases"], blob["adjacency"])
    for name, state in blob["state_dicts"].items():
        modules[name].load_state_dict(state)
    return PolicyCheckpoint(algo=blob["algo"], trainer_config=trainer_config,
                            agent_config=agent_config,
                            fingerprint=blob["fingerprint"],
                            obs_dim=blob["obs_dim"],
                            num_phases=blob["num_phases"], modules=modules,
                            step=blob["step"],
                            metrics_log=blob["metrics_log"])
