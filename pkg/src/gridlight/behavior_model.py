"""Variational behaviour-policy model: who was driving the signals?

The model reads logged episodes and estimates, per agent and step, the
probability the logging controller assigned to the taken action.  It is a
sequence VAE with a Gaussian-mixture prior: per step, agent observations and
previous actions are embedded, mixed over the intersection graph by a stack
of attention layers, mean-pooled into one network-wide vector, and run
through an LSTM; the recurrent state parameterizes a diagonal Gaussian
posterior over a latent z_t.  The decoder maps (observations, z_t) back to
per-agent action distributions.  Mixture components specialize to behaviour
families, so trajectory responsibilities double as an unsupervised controller
clustering, and the decoded action probabilities are the π̂_b that importance
weighting divides by.

Everything downstream needs inference to be repeatable, so all deterministic
queries (annotation, responsibilities) evaluate at the posterior mean rather
than a sample.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.mixture import GaussianMixture
from torch import nn

from .datastore import Dataset, Episode
from .errors import (CheckpointError, ConfigError, DivergenceError,
                     FingerprintError)
from .nets import GATStack, episodes_to_tensors
from .simnet import AdjacencyGraph

_ACT_EMBED_DIM = 16
_CHECKPOINT_FORMAT = "gridlight-bpm"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GmmVgaeConfig:
    latent_dim: int = 8
    components: int = 5          # one latent mode per expected policy family
    gat_layers_enc: int = 3
    gat_layers_dec: int = 3
    attention_heads: int = 4
    hidden: int = 128
    kl_weight: float = 1e-4
    lr: float = 3e-3
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be at least 1")
        if self.components < 1:
            raise ConfigError("components must be at least 1")
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")
        if self.hidden % self.attention_heads:
            raise ConfigError("hidden must be divisible by attention_heads")
        if min(self.gat_layers_enc, self.gat_layers_dec) < 1:
            raise ConfigError("need at least one attention layer each way")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")


@dataclass
class LatentPosterior:
    """Per-step posterior for one episode: means, log-variances, and a sample."""

    mu: np.ndarray       # (T, d_z)
    logvar: np.ndarray   # (T, d_z)
    z: np.ndarray        # (T, d_z), mu + sigma * eps with seeded eps


class GmmPrior(nn.Module):
    """Learnable mixture p(z) = Σ_k π_k N(z | μ_k, diag σ²_k).

    Simplex and positivity constraints hold by parameterization: weights live
    as logits under softmax, variances as log-variances under exp.
    """

    def __init__(self, components: int, latent_dim: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(components))
        self.means = nn.Parameter(torch.randn(components, latent_dim) * 0.5)
        self.log_vars = nn.Parameter(torch.zeros(components, latent_dim))

    @property
    def weights(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=0)

    def component_log_probs(self, z: torch.Tensor) -> torch.Tensor:
        """log π_k + log N(z | μ_k, Σ_k), shape (..., K)."""
        zz = z.unsqueeze(-2)                      # (..., 1, d)
        var = self.log_vars.exp()
        log_norm = -0.5 * (math.log(2 * math.pi) + self.log_vars)
        log_pdf = (log_norm - 0.5 * (zz - self.means) ** 2 / var).sum(-1)
        return torch.log_softmax(self.logits, dim=0) + log_pdf

    def log_prob(self, z: torch.Tensor) -> torch.Tensor:
        return torch.logsumexp(self.component_log_probs(z), dim=-1)

    def responsibilities(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.component_log_probs(z), dim=-1)


class GmmVgae(nn.Module):
    """Encoder, decoder and prior bundled with the network structure they fit."""

    def __init__(self, config: GmmVgaeConfig, obs_dim: int, num_phases: int,
                 fingerprint: str, adjacency: np.ndarray):
        super().__init__()
        self.config = config
        self.obs_dim = obs_dim
        self.num_phases = num_phases
        self.fingerprint = fingerprint
        self.register_buffer("adj", torch.as_tensor(adjacency, dtype=torch.float32))

        h = config.hidden
        # encoder: (obs, prev action) per agent -> graph mix -> pooled LSTM
        self.act_embed = nn.Embedding(num_phases + 1, _ACT_EMBED_DIM)  # +1: start
        self.enc_embed = nn.Linear(obs_dim + _ACT_EMBED_DIM, h)
        self.enc_gat = GATStack(h, h, config.gat_layers_enc,
                                config.attention_heads, "leaky_relu")
        self.lstm = nn.LSTM(h, h, batch_first=True)
        self.mu_head = nn.Linear(h, config.latent_dim)
        self.logvar_head = nn.Linear(h, config.latent_dim)
        # decoder: (obs, z) per agent -> graph mix -> per-agent phase logits
        self.dec_embed = nn.Linear(obs_dim + config.latent_dim, h)
        self.dec_gat = GATStack(h, h, config.gat_layers_dec,
                                config.attention_heads, "leaky_relu")
        self.dec_out = nn.Linear(h, num_phases)
        self.prior = GmmPrior(config.components, config.latent_dim)
        self.act = nn.LeakyReLU(0.2)
        self.training_log: list[dict] = []

    # -- batched internals (B, T, ...) ----------------------------------------

    def encode_batch(self, obs: torch.Tensor, prev_actions: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, N, F) observations + (B, T, N) previous actions ->
        per-step posterior (mu, logvar), each (B, T, d_z)."""
        if obs.shape[-1] != self.obs_dim:
            raise ConfigError(f"observation width {obs.shape[-1]} != model's "
                              f"{self.obs_dim}")
        x = torch.cat([obs, self.act_embed(prev_actions)], dim=-1)
        x = self.act(self.enc_embed(x))
        x = self.enc_gat(x, self.adj)
        pooled = x.mean(dim=-2)                       # over agents
        seq, _ = self.lstm(pooled)
        return self.mu_head(seq), self.logvar_head(seq)

    def decode_batch(self, obs: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """(B, T, N, F) observations + (B, T, d_z) latents -> per-agent action
        log-probabilities (B, T, N, P)."""
        n = obs.shape[-2]
        zz = z.unsqueeze(-2).expand(*z.shape[:-1], n, z.shape[-1])
        x = torch.cat([obs, zz], dim=-1)
        x = self.act(self.dec_embed(x))
        x = self.dec_gat(x, self.adj)
        logits = self.dec_out(x)
        if not torch.isfinite(logits).all():
            raise DivergenceError("decoder produced non-finite logits")
        return torch.log_softmax(logits, dim=-1)


def elbo_loss(model: GmmVgae, obs: torch.Tensor, actions: torch.Tensor,
              prev_actions: torch.Tensor,
              generator: torch.Generator | None = None
              ) -> tuple[torch.Tensor, dict]:
    """Reconstruction cross-entropy plus β-weighted Monte-Carlo KL.

    The reconstruction term sums over agents and steps and averages over the
    batch; the KL estimate log q(z_t) − log p(z_t) uses the single
    reparameterized sample and averages over steps and batch.  Passing a
    seeded ``generator`` makes the loss a deterministic function of the
    parameters (finite-difference tests rely on this).
    """
    if obs.numel() == 0:
        raise ConfigError("empty batch")
    mu, logvar = model.encode_batch(obs, prev_actions)
    std = torch.exp(0.5 * logvar)
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + std * eps
    log_probs = model.decode_batch(obs, z)
    taken = log_probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)  # (B,T,N)
    recon = -taken.sum(dim=(1, 2)).mean()
    log_q = (-0.5 * (math.log(2 * math.pi) + logvar + eps ** 2)).sum(-1)
    kl_est = (log_q - model.prior.log_prob(z)).mean()
    loss = recon + model.config.kl_weight * kl_est
    return loss, {"recon": float(recon.detach()), "kl": float(kl_est.detach())}


def fit(dataset: Dataset, graph: AdjacencyGraph,
        config: GmmVgaeConfig = GmmVgaeConfig()) -> GmmVgae:
    """Train encoder, decoder and prior jointly; deterministic given the seed.

    The per-epoch loss trace lands in ``model.training_log``.  A non-finite
    loss aborts with the offending epoch in the message.

    The KL weight is small enough that the mixture parameters barely move
    during joint training, so after the gradient phase the prior is refit to
    the aggregated posterior (all per-step means) by expectation-maximization.
    The encoder and decoder are untouched; only where the mixture sits in
    latent space changes, which is what responsibilities read.
    """
    if len(dataset) < 1:
        raise ConfigError("empty dataset")
    if graph.num_nodes != dataset.num_agents:
        raise ConfigError(f"graph has {graph.num_nodes} nodes, dataset has "
                          f"{dataset.num_agents} agents")
    torch.manual_seed(config.seed)
    model = GmmVgae(config, dataset.obs_dim, dataset.num_phases,
                    dataset.fingerprint, graph.matrix)
    obs, actions, prev_actions = episodes_to_tensors(
        dataset.episodes, dataset.num_phases)[:3]
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    m = len(dataset)
    for epoch in range(config.epochs):
        order = torch.randperm(m, generator=gen)
        epoch_stats = []
        for lo in range(0, m, config.batch_size):
            idx = order[lo: lo + config.batch_size]
            try:
                loss, diag = elbo_loss(model, obs[idx], actions[idx],
                                       prev_actions[idx], generator=gen)
            except DivergenceError as e:
                raise DivergenceError(f"{e} (epoch {epoch})") from None
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_stats.append((float(loss.detach()), diag["recon"], diag["kl"]))
        arr = np.array(epoch_stats)
        model.training_log.append({"epoch": epoch,
                                   "loss": float(arr[:, 0].mean()),
                                   "recon": float(arr[:, 1].mean()),
                                   "kl": float(arr[:, 2].mean())})
    with torch.no_grad():
        chunks = [model.encode_batch(obs[lo: lo + config.batch_size],
                                     prev_actions[lo: lo + config.batch_size])[0]
                  for lo in range(0, m, config.batch_size)]
        mu_all = torch.cat(chunks).reshape(-1, config.latent_dim).numpy()
    _refit_prior(model, mu_all, config.seed)
    model.eval()
    return model


def _refit_prior(model: GmmVgae, mu_points: np.ndarray, seed: int) -> None:
    """Expectation-maximization pass of the diagonal mixture over the pooled
    per-step posterior means; writes the result back into the prior."""
    k = model.config.components
    if len(mu_points) < k or np.ptp(mu_points) == 0:
        return
    gmm = GaussianMixture(n_components=k, covariance_type="diag",
                          reg_covar=1e-6, max_iter=200, n_init=1,
                          random_state=seed).fit(mu_points)
    with torch.no_grad():
        model.prior.logits.copy_(torch.as_tensor(
            np.log(gmm.weights_), dtype=torch.float32))
        model.prior.means.copy_(torch.as_tensor(
            gmm.means_, dtype=torch.float32))
        model.prior.log_vars.copy_(torch.as_tensor(
            np.log(gmm.covariances_), dtype=torch.float32))


def _episode_tensors(model: GmmVgae, episode: Episode):
    obs, actions, prev_actions = episodes_to_tensors([episode],
                                                     model.num_phases)[:3]
    if obs.shape[-1] != model.obs_dim or obs.shape[-2] != model.adj.shape[0]:
        raise FingerprintError("episode shape does not match the model's network")
    return obs, actions, prev_actions


def encode(model: GmmVgae, episode: Episode,
           graph: AdjacencyGraph | None = None, seed: int = 0) -> LatentPosterior:
    """Per-step latent posterior for one episode (sample seeded, hence repeatable)."""
    _check_graph(model, graph)
    obs, _, prev_actions = _episode_tensors(model, episode)
    with torch.no_grad():
        mu, logvar = model.encode_batch(obs, prev_actions)
    gen = torch.Generator().manual_seed(seed)
    eps = torch.randn(mu.shape, generator=gen)
    z = mu + torch.exp(0.5 * logvar) * eps
    return LatentPosterior(mu=mu[0].numpy(), logvar=logvar[0].numpy(),
                           z=z[0].numpy())


def decode(model: GmmVgae, obs_t: np.ndarray, z_t: np.ndarray,
           graph: AdjacencyGraph | None = None) -> np.ndarray:
    """Per-agent phase distribution (N, P) for one step's observations."""
    _check_graph(model, graph)
    obs = torch.as_tensor(obs_t, dtype=torch.float32).reshape(1, 1, *obs_t.shape)
    z = torch.as_tensor(z_t, dtype=torch.float32).reshape(1, 1, -1)
    with torch.no_grad():
        log_probs = model.decode_batch(obs, z)
    return torch.exp(log_probs)[0, 0].numpy()


def responsibilities(model: GmmVgae, episode: Episode,
                     graph: AdjacencyGraph | None = None) -> np.ndarray:
    """Mixture responsibilities γ for one episode: mean over steps of
    p(k | μ_t), a point on the K-simplex."""
    _check_graph(model, graph)
    obs, _, prev_actions = _episode_tensors(model, episode)
    with torch.no_grad():
        mu, _ = model.encode_batch(obs, prev_actions)
        gamma = model.prior.responsibilities(mu).mean(dim=(0, 1))
    return gamma.numpy()


def annotate(dataset: Dataset, model: GmmVgae,
             graph: AdjacencyGraph | None = None,
             eps_prob: float = 1e-3) -> Dataset:
    """Fill per-transition π̂_b in place (and return the dataset).

    Stores the decoded probability of each taken action, floored at
    ``eps_prob`` so downstream probability ratios stay bounded, plus the full
    decoded distribution for diagnostics.  Deterministic: evaluated at the
    posterior mean.
    """
    _check_graph(model, graph)
    if dataset.fingerprint != model.fingerprint:
        raise FingerprintError(
            f"dataset fingerprint {dataset.fingerprint} does not match the "
            f"model's {model.fingerprint}")
    obs, actions, prev_actions = episodes_to_tensors(dataset.episodes,
                                                     dataset.num_phases)[:3]
    with torch.no_grad():
        mu, _ = model.encode_batch(obs, prev_actions)
        log_probs = model.decode_batch(obs, mu)
        probs = torch.exp(log_probs)
        taken = probs.gather(-1, actions.unsqueeze(-1)).squeeze(-1)
        taken = torch.clamp(taken, min=eps_prob)
    for i, ep in enumerate(dataset.episodes):
        for t, tr in enumerate(ep.transitions):
            tr.model_prob = taken[i, t].numpy().astype(np.float64)
            tr.model_dist = probs[i, t].numpy().astype(np.float64)
    return dataset


def _check_graph(model: GmmVgae, graph: AdjacencyGraph | None) -> None:
    if graph is not None and not np.array_equal(
            graph.matrix, model.adj.numpy().astype(np.float64)):
        raise FingerprintError("adjacency does not match the one the model "
                               "was fitted on")


def save_model(model: GmmVgae, path) -> None:
    """Self-describing checkpoint: config, shapes, fingerprint, weights, log."""
    torch.save({
        "format": _CHECKPOINT_FORMAT,
        "version": _CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "obs_dim": model.obs_dim,
        "num_phases": model.num_phases,
        "fingerprint": model.fingerprint,
        "adjacency": model.adj.numpy(),
        "state_dict": model.state_dict(),
        "training_log": model.training_log,
    }, path)


def load_model(path) -> GmmVgae:
    try:
        blob = torch.load(path, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    if not isinstance(blob, dict) or blob.get("format") != _CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a behaviour-model checkpoint")
    if blob.get("version") != _CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')!r} "
                              f"unsupported (this build reads "
                              f"{_CHECKPOINT_VERSION})")
    model = GmmVgae(GmmVgaeConfig(**blob["config"]), blob["obs_dim"],
                    blob["num_phases"], blob["fingerprint"], blob["adjacency"])
    model.load_state_dict(blob["state_dict"])
    model.training_log = blob["training_log"]
    model.eval()
    return model
