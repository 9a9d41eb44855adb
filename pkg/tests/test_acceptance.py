"""The twelve headline checks this laboratory promises, one test each.

Run ``pytest tests/test_acceptance.py -v`` for one pass/fail line per check
(add ``-s`` to also see the measured numbers).  The first six nail the weight
arithmetic against exact oracles, seven and eight validate the simulator and
the behaviour model, and the rest are the learning results: trainer sanity,
the directional claim that importance-weighted training beats its plain
counterpart on mixed-quality data, the expert-fraction ablation, and the
linear per-step scaling of rollout cost in network size.

Checks with stated runtime budgets enforce them; the heavy ones (10 and 11)
retrain from scratch and dominate the suite's wall time.
"""

import time

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from gridlight import behavior_model as bm
from gridlight import trainers
from gridlight.config import network_spec
from gridlight.controllers import ControllerSpec, make_controller
from gridlight.datastore import Dataset, generate_dataset, mix_datasets
from gridlight.nets import episodes_to_tensors
from gridlight.evaluation import evaluate, scaling_benchmark
from gridlight.simnet import (NetworkSpec, build_adjacency, build_grid,
                              observe_all, pressure, step)
from gridlight.trainers import (AgentNet, AgentNetConfig, Mixer,
                                TrainerConfig, bc_loss, bc_train, cql_loss,
                                cql_train, offlight_train, td3bc_actor_loss,
                                td3bc_critic_loss)
from gridlight.weighting import (MicroMDP, WeightConfig,
                                 combine_normalize_clip, is_weight_mean,
                                 is_weight_product, is_weights_array,
                                 oracle_expectation_check, random_micro_mdp,
                                 random_policy, random_reward_f,
                                 rbps_distribution, rbps_weight)

NET = network_spec("toy-2x2", "medium", seed=0)
SHORT = network_spec("toy-2x2", "medium", seed=0, episode_length_s=60)
GRAPH = build_adjacency(NET)
AGENT64 = AgentNetConfig(rnn_hidden=64, fc_hidden=64)
BPM_CFG = bm.GmmVgaeConfig(hidden=64, components=3, epochs=60, seed=0)
EVAL_SEEDS = (0, 1, 2)


def report(number: int, detail: str) -> None:
    print(f"\ncriterion {number:02d}: PASS — {detail}")


def match_rate(checkpoint, dataset) -> float:
    obs, actions = episodes_to_tensors(dataset.episodes,
                                       dataset.num_phases)[:2]
    with torch.no_grad():
        pred = checkpoint.policy_module(obs).argmax(-1)
    return float((pred == actions).double().mean())


@pytest.fixture(scope="module")
def data_pool():
    """The mixed-quality corpus behind checks 9-11: expert and uniform-random
    rollouts on the same network."""
    greedy = generate_dataset(NET, ControllerSpec(kind="greedy"), episodes=30,
                              base_seed=0)
    random = generate_dataset(NET, ControllerSpec(kind="random"), episodes=30,
                              base_seed=100)
    return greedy, random


@pytest.fixture(scope="module")
def mixed_annotated(data_pool):
    greedy, random = data_pool
    mixed = mix_datasets([(greedy, 0.5), (random, 0.5)], seed=7)
    model = bm.fit(mixed, GRAPH, BPM_CFG)
    bm.annotate(mixed, model)
    return mixed, model


def test_criterion_01_identical_policies_give_unit_weights():
    t0 = time.perf_counter()
    p = [0.3, 0.25, 0.1, 0.7]
    assert is_weight_mean(p, p) == 1.0
    assert is_weight_product(p, p) == 1.0
    probs = np.random.default_rng(0).uniform(0.05, 1.0, size=(6, 12, 4))
    for form in ("mean", "product"):
        w = is_weights_array(probs, probs, form=form)
        assert np.max(np.abs(w - 1.0)) <= 1e-9
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    report(1, f"both weight forms exactly 1.0 on 72 batched and 1 scalar "
              f"identity checks in {elapsed:.2f}s")


def test_criterion_02_product_weights_unbiased_by_exact_enumeration():
    t0 = time.perf_counter()
    deviations = []
    for seed in (3, 4, 5, 6):
        rng = np.random.default_rng(seed)
        mdp = random_micro_mdp(rng)
        assert mdp.num_agents == 2 and mdp.num_actions == 2
        assert mdp.horizon == 3
        rep = oracle_expectation_check(mdp, random_policy(rng, mdp),
                                       random_policy(rng, mdp),
                                       random_reward_f(rng, mdp))
        deviations.append(abs(rep.is_estimate_product - rep.exact_target))
    assert max(deviations) <= 1e-10
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0
    report(2, f"4 enumerated two-agent MDPs, max |E_b[w·f] − E_t[f]| = "
              f"{max(deviations):.2e} in {elapsed:.1f}s")


def test_criterion_03_mean_form_constant_while_product_form_explodes():
    for n in range(1, 9):
        target, behavior = [0.6] * n, [0.5] * n
        assert is_weight_mean(target, behavior) == 1.2
        assert is_weight_product(target, behavior) == 1.2 ** n
    report(3, "per-agent ratio 1.2 over 1..8 agents: mean weight pinned at "
              "1.2, product weight exactly 1.2^N")


def test_criterion_04_variance_falls_as_the_behavior_estimate_improves():
    mdp = MicroMDP(init=np.array([1.0]),
                   transition=np.ones((1, 2, 1)),
                   num_agents=1, num_actions=2, horizon=1)
    pi_theta = np.array([[[0.9, 0.1]]])
    pi_b = np.array([[[0.5, 0.5]]])
    bad = np.array([[[0.2, 0.8]]])
    variances = []
    for lam in np.linspace(0.0, 1.0, 5):
        hat = (1 - lam) * bad + lam * pi_b
        rep = oracle_expectation_check(mdp, pi_theta, pi_b,
                                       lambda s, a: 1.0 + a[0][0],
                                       pi_b_hat=hat)
        variances.append(rep.var_product)
    assert all(variances[i + 1] <= variances[i] + 1e-12
               for i in range(4))
    report(4, "exact estimator variance non-increasing over 5 interpolation "
              f"points: {', '.join(f'{v:.4f}' for v in variances)}")


def test_criterion_05_return_priority_formula_and_degenerate_uniform():
    cfg = WeightConfig(p_base=0.1)
    assert rbps_weight(0.0, 0.0, 10.0, cfg) == 0.1
    assert rbps_weight(5.0, 0.0, 10.0, cfg) == 0.6
    assert rbps_weight(10.0, 0.0, 10.0, cfg) == 1.1
    flat = rbps_distribution(np.full(6, 3.3), cfg)
    assert np.array_equal(flat, np.full(6, 1 / 6))
    report(5, "returns {0,5,10} → raw priorities {0.1, 0.6, 1.1}; "
              "equal-return dataset samples uniformly")


def test_criterion_06_weight_plumbing_and_bitwise_trainer_equivalence():
    # clamping and normalization invariants over random batches
    cfg = WeightConfig()
    rng = np.random.default_rng(0)
    unclamped_means = []
    for _ in range(200):
        size = rng.integers(2, 64)
        w_is = rng.uniform(0.0, 40.0, size=size)
        w_rbps = rng.uniform(0.05, 1.1)
        w = combine_normalize_clip(w_is, w_rbps, cfg)
        assert w.max() <= cfg.clip_max
        if w.max() < cfg.clip_max:
            unclamped_means.append(w.mean())
    assert unclamped_means, "sweep never produced an unclamped batch"
    assert max(abs(m - 1.0) for m in unclamped_means) <= 1e-9

    # unit weights reproduce the plain learner bit for bit: zero demand with
    # a one-decision horizon makes every batch constant, so normalization
    # emits exact ones at every step of the weighted run
    quiet = network_spec("toy-2x2", "medium", seed=0, demand_rate=0.0,
                         episode_length_s=5)
    ds = generate_dataset(quiet, ControllerSpec(kind="fixed_time"),
                          episodes=6, base_seed=0)
    assert all(ep.transitions == ds.episodes[0].transitions
               for ep in ds.episodes)
    cfg = TrainerConfig(algo="cql", train_steps=25, batch_size=4)
    small = AgentNetConfig(rnn_hidden=16, fc_hidden=16, attention_heads=2)
    plain = cql_train(ds, GRAPH, cfg, small)

    torch.manual_seed(cfg.seed)
    modules = trainers._build_modules("cql", small, ds.obs_dim,
                                      ds.num_phases, GRAPH.matrix)
    tensors = episodes_to_tensors(ds.episodes, ds.num_phases)
    with torch.no_grad():
        probs = torch.softmax(modules["qnet"](tensors.obs), -1)
        taken = probs.gather(-1, tensors.actions.unsqueeze(-1)).squeeze(-1)
    for i, ep in enumerate(ds.episodes):
        for t, tr in enumerate(ep.transitions):
            tr.model_prob = taken[i, t].double().numpy().copy()
            tr.model_dist = probs[i, t].double().numpy().copy()
    weighted = offlight_train(ds, None, GRAPH, cfg, small)

    for name in plain.modules:
        for pa, pb in zip(plain.modules[name].parameters(),
                          weighted.modules[name].parameters()):
            assert torch.equal(pa, pb)
    assert all(row["w_mean"] == 1.0 and row["clamp_rate"] == 0.0
               for row in weighted.metrics_log)
    report(6, "max weight ≤ 10.0 over 200 random batches, unclamped means "
              "= 1 within 1e-9; 25 weighted updates bit-identical to plain")


def test_criterion_07_simulator_identities_and_pressure_oracle():
    # conservation and the queue-reward identity over 10^4 random steps
    spec = NetworkSpec(grid_rows=2, grid_cols=2, demand_rate=800.0, seed=3,
                       episode_length_s=50_000)
    state, _ = build_grid(spec)
    rng = np.random.default_rng(0)
    steps = 0
    while not state.done:
        _, reward, _, _ = step(state, rng.integers(0, 4, size=4).tolist())
        assert reward == -float(sum(len(q) for q in state.queues.values()))
        assert state.vehicles_entered == \
            state.vehicles_in_network + state.vehicles_exited
        steps += 1
    assert steps == 10_000

    # the pressure controller takes the argmax phase on every decision
    busy = NetworkSpec(grid_rows=2, grid_cols=2, demand_rate=900.0, seed=7,
                       episode_length_s=1500, lane_capacity=8)
    state, _ = build_grid(busy)
    ctrl = make_controller(ControllerSpec(kind="max_pressure"))
    ctrl.reset(busy)
    drive = np.random.default_rng(1)
    decisions = 0
    while not state.done:
        obs = observe_all(state)
        for agent in range(4):
            action, _ = ctrl.act_agent(state, agent, obs[agent], 0)
            scores = [pressure(state, agent, p) for p in range(4)]
            assert scores[action] == max(scores)
            decisions += 1
        step(state, drive.integers(0, 4, size=4).tolist())
    assert decisions >= 1000
    report(7, f"conservation and reward identities exact over {steps} steps; "
              f"pressure argmax matched on {decisions}/{decisions} decisions")


def test_criterion_08_behavior_model_gradients_clustering_reconstruction():
    t0 = time.perf_counter()
    # analytic ELBO gradients against central differences
    grad_cfg = bm.GmmVgaeConfig(hidden=8, latent_dim=3, components=2,
                                attention_heads=2, epochs=1, seed=0)
    torch.manual_seed(0)
    model = bm.GmmVgae(grad_cfg, NET.obs_dim, NET.num_phases,
                       NET.fingerprint(), GRAPH.matrix).double()
    grad_ds = generate_dataset(SHORT, ControllerSpec(kind="random"),
                               episodes=2, base_seed=0)
    obs, actions, prev = episodes_to_tensors(grad_ds.episodes,
                                             NET.num_phases)[:3]
    obs = obs.double()

    def loss_value():
        gen = torch.Generator().manual_seed(123)
        with torch.no_grad():
            return float(bm.elbo_loss(model, obs, actions, prev,
                                      generator=gen)[0])

    gen = torch.Generator().manual_seed(123)
    loss, _ = bm.elbo_loss(model, obs, actions, prev, generator=gen)
    loss.backward()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(3, flat.numel()),
                            replace=False):
            orig = float(flat[i])
            h = 1e-5 * max(1.0, abs(orig))
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(p.grad.view(-1)[i])
            rel = abs(fd - an) / max(abs(an), abs(fd), 1e-6)
            assert rel < 1e-3, f"{name}[{i}]: analytic {an}, central {fd}"
            worst = max(worst, rel)

    # mixture responsibilities recover which controller drove each episode
    parts, labels = [], []
    for kind, base in [("random", 0), ("fixed_time", 1000), ("greedy", 2000)]:
        part = generate_dataset(NET, ControllerSpec(kind=kind), episodes=20,
                                base_seed=base)
        parts.append(part)
        labels += [kind] * 20
    ds60 = Dataset(episodes=[ep for p in parts for ep in p.episodes],
                   fingerprint=NET.fingerprint(), num_phases=NET.num_phases)
    assert len(ds60) >= 60
    cluster_model = bm.fit(ds60, GRAPH, BPM_CFG)
    pred = np.stack([bm.responsibilities(cluster_model, ep)
                     for ep in ds60.episodes]).argmax(axis=1)
    ari = adjusted_rand_score(labels, pred)
    assert ari >= 0.6

    # held-out reconstruction of a deterministic cycling controller
    cycling = ControllerSpec(kind="fixed_time", green_steps=1)
    train_ds = generate_dataset(NET, cycling, episodes=20, base_seed=0)
    recon_model = bm.fit(train_ds, GRAPH, BPM_CFG)
    held = generate_dataset(NET, cycling, episodes=5, base_seed=500)
    bm.annotate(held, recon_model)
    hits = np.mean([(tr.model_dist.argmax(axis=1) == tr.actions).mean()
                    for ep in held.episodes for tr in ep.transitions])
    median_prob = np.median(np.concatenate(
        [tr.model_prob for ep in held.episodes for tr in ep.transitions]))
    assert hits >= 0.90
    assert median_prob >= 0.8
    elapsed = time.perf_counter() - t0
    assert elapsed < 600.0
    report(8, f"worst gradient error {worst:.1e}; clustering ARI {ari:.2f} "
              f"on 60 mixed episodes; held-out accuracy {hits:.3f} with "
              f"median probability {median_prob:.2f} in {elapsed:.0f}s")


def test_criterion_09_offline_rl_sanity(data_pool):
    # behaviour cloning matches the greedy expert on held-out rollouts
    greedy, _ = data_pool
    held = generate_dataset(NET, ControllerSpec(kind="greedy"), episodes=10,
                            base_seed=500)
    ck = bc_train(greedy, GRAPH,
                  TrainerConfig(algo="bc", lr=1e-3, batch_size=8,
                                train_steps=300, seed=0), AGENT64)
    rate = match_rate(ck, held)
    assert rate >= 0.90

    # a one-decision episode with discounting off is a bandit: the fitted
    # value of the logged action must converge to its reward
    bandit_spec = NetworkSpec(grid_rows=1, grid_cols=1, episode_length_s=5,
                              demand_rate=1800.0, seed=0)
    bandit = generate_dataset(bandit_spec, ControllerSpec(kind="random"),
                              episodes=1, base_seed=0)
    tr = bandit.episodes[0].transitions[0]
    ck = cql_train(bandit, build_adjacency(bandit_spec),
                   TrainerConfig(algo="cql", alpha_cql=0.0, lr=1e-3,
                                 batch_size=4, train_steps=1500, seed=0),
                   AgentNetConfig(rnn_hidden=32, fc_hidden=32, gamma=0.0))
    with torch.no_grad():
        q = ck.modules["qnet"](torch.as_tensor(
            tr.obs, dtype=torch.float32)[None, None])[0, 0, 0]
    bandit_err = abs(float(q[tr.actions[0]]) - tr.reward)
    assert bandit_err < 1e-3

    # every trainer loss against central differences
    torch.manual_seed(0)
    adj = np.array([[1.0, 1.0], [1.0, 1.0]])
    net_cfg = AgentNetConfig(rnn_hidden=8, fc_hidden=8, attention_heads=2)
    g = torch.Generator().manual_seed(11)
    obs = torch.randn(2, 3, 2, 5, generator=g, dtype=torch.float64)
    obs_next = torch.randn(2, 3, 2, 5, generator=g, dtype=torch.float64)
    actions = torch.randint(0, 4, (2, 3, 2), generator=g)
    rewards = torch.randn(2, 3, generator=g, dtype=torch.float64)
    dones = torch.zeros(2, 3, dtype=torch.float64)
    dones[:, -1] = 1.0
    weights = torch.rand(2, 3, generator=g, dtype=torch.float64) + 0.5

    def fresh():
        return AgentNet(net_cfg, 5, 4, adj).double()

    mixer = Mixer()
    net = fresh()
    target = fresh()(obs_next).detach()
    q1, q2 = fresh(), fresh()
    with torch.no_grad():
        pi = torch.softmax(fresh()(obs_next), -1)
        tq1, tq2 = fresh()(obs_next), fresh()(obs_next)
    actor = fresh()
    with torch.no_grad():
        q_actor = fresh()(obs)
    losses = {
        "bc": ([net], lambda: bc_loss(net(obs), actions, weights)[0]),
        "cql": ([net], lambda: cql_loss(net(obs), target, actions, rewards,
                                        dones, 0.9, 0.7, weights, mixer)[0]),
        "critic": ([q1, q2],
                   lambda: td3bc_critic_loss(q1(obs), q2(obs), pi, tq1, tq2,
                                             actions, rewards, dones, 0.9,
                                             weights, mixer)[0]),
        "actor": ([actor], lambda: td3bc_actor_loss(actor(obs), q_actor,
                                                    actions, 1.3,
                                                    weights)[0]),
    }
    rng = np.random.default_rng(0)
    for label, (nets, loss_fn) in losses.items():
        for n in nets:
            n.zero_grad()
        loss_fn().backward()
        for j, n in enumerate(nets):
            for name, p in n.named_parameters():
                flat = p.data.view(-1)
                for i in rng.choice(flat.numel(),
                                    size=min(3, flat.numel()),
                                    replace=False):
                    orig = float(flat[i])
                    h = 1e-5 * max(1.0, abs(orig))
                    flat[i] = orig + h
                    up = float(loss_fn().detach())
                    flat[i] = orig - h
                    down = float(loss_fn().detach())
                    flat[i] = orig
                    fd = (up - down) / (2 * h)
                    an = float(p.grad.view(-1)[i])
                    rel = abs(fd - an) / max(abs(an), abs(fd), 1e-6)
                    assert rel < 1e-3, f"{label} {j}.{name}[{i}]"
    report(9, f"cloning match {rate:.3f} held-out; bandit error "
              f"{bandit_err:.1e}; all four loss gradients within 1e-3")


def test_criterion_10_weighted_training_beats_plain_on_mixed_data(
        mixed_annotated):
    t0 = time.perf_counter()
    mixed, _ = mixed_annotated
    means = {}
    per_seed = {}
    for algo, lr in (("cql", 1e-3), ("td3bc", 5e-4)):
        for weighted in (False, True):
            atts = []
            for seed in (0, 1, 2):
                cfg = TrainerConfig(algo=algo, lr=lr, batch_size=8,
                                    train_steps=400, seed=seed,
                                    reward_scale=0.01)
                ck = (offlight_train(mixed, None, GRAPH, cfg, AGENT64)
                      if weighted
                      else trainers.train(mixed, GRAPH, cfg, AGENT64))
                rep = evaluate(ck, NET, episodes=3, seeds=EVAL_SEEDS)
                atts.append(rep.att_mean)
            key = ("offlight-" if weighted else "") + algo
            means[key] = float(np.mean(atts))
            per_seed[key] = atts
    assert means["offlight-cql"] <= means["cql"], (per_seed, means)
    assert means["offlight-td3bc"] <= means["td3bc"], (per_seed, means)

    baselines = {}
    for kind in ("random", "fixed_time", "greedy"):
        rep = evaluate(ControllerSpec(kind=kind), NET, episodes=3,
                       seeds=EVAL_SEEDS)
        baselines[kind] = rep.att_mean
    assert baselines["random"] > baselines["fixed_time"] > baselines["greedy"]
    elapsed = time.perf_counter() - t0
    assert elapsed < 1800.0
    report(10, "mean ATT over 3 seeds — "
               f"cql {means['cql']:.1f} vs weighted "
               f"{means['offlight-cql']:.1f}; td3bc {means['td3bc']:.1f} vs "
               f"weighted {means['offlight-td3bc']:.1f}; baselines random "
               f"{baselines['random']:.1f} > fixed_time "
               f"{baselines['fixed_time']:.1f} > greedy "
               f"{baselines['greedy']:.1f} in {elapsed:.0f}s")


def test_criterion_11_more_expert_data_never_hurts(data_pool):
    greedy, random = data_pool
    means, stds = [], []
    for frac in (1 / 3, 1 / 2, 2 / 3):
        sub = mix_datasets([(greedy, frac), (random, 1 - frac)], seed=7)
        model = bm.fit(sub, GRAPH, BPM_CFG)
        bm.annotate(sub, model)
        atts = []
        for seed in (0, 1, 2):
            cfg = TrainerConfig(algo="cql", lr=1e-3, batch_size=8,
                                train_steps=300, seed=seed,
                                reward_scale=0.01)
            ck = offlight_train(sub, None, GRAPH, cfg, AGENT64)
            rep = evaluate(ck, NET, episodes=3, seeds=EVAL_SEEDS)
            atts.append(rep.att_mean)
        means.append(float(np.mean(atts)))
        stds.append(float(np.std(atts)))
    inversions = [i for i in range(2) if means[i + 1] > means[i]]
    assert len(inversions) <= 1, (means, stds)
    for i in inversions:
        slack = max(stds[i], stds[i + 1])
        assert means[i + 1] - means[i] <= slack, (means, stds)
    report(11, "ATT by expert fraction 33/50/67%: "
               + " ≥ ".join(f"{m:.2f}±{s:.2f}" for m, s in zip(means, stds))
               + f" ({len(inversions)} inversion(s) allowed within 1 std)")


def test_criterion_12_per_step_cost_scales_linearly_with_network_size():
    rep = scaling_benchmark(("2x2", "3x3", "4x4", "6x6"), control_steps=30,
                            seed=0, repeats=3)
    assert rep.r_squared is not None
    assert rep.r_squared >= 0.9
    times = {row["size"]: row["seconds_per_step"] for row in rep.rows}
    report(12, f"R² = {rep.r_squared:.4f} for time vs (N+E) over "
               + ", ".join(f"{s} {times[s] * 1e3:.2f}ms" for s in times))
