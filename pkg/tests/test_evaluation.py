"""Evaluation tests: report invariants, the exact queue-length identity,
directional controller ordering, curve smoothing, the scaling fit, and the
plot/CSV artifacts (checked through PNG metadata, not pixels)."""

import csv
import dataclasses

import numpy as np
import pytest
from PIL import Image

from gridlight.config import network_spec
from gridlight.controllers import ControllerSpec, make_controller
from gridlight.datastore import generate_dataset, record_episode
from gridlight.errors import ConfigError, FingerprintError
from gridlight.evaluation import (EvalReport, PolicyController, evaluate,
                                  learning_curve, plot_att_bars, plot_curves,
                                  scaling_benchmark, write_reports_csv,
                                  write_scaling_csv)
from gridlight.simnet import build_adjacency
from gridlight.trainers import TrainerConfig, bc_train
from gridlight.trainers import AgentNetConfig

TOY = network_spec("toy-2x2", demand="medium", seed=0)
GRAPH = build_adjacency(TOY)
TINY_NET = AgentNetConfig(rnn_hidden=16, fc_hidden=16, attention_heads=2)


@pytest.fixture(scope="module")
def bc_ckpt():
    ds = generate_dataset(TOY, ControllerSpec(kind="greedy"), episodes=4,
                          base_seed=0)
    return bc_train(ds, GRAPH, TrainerConfig(algo="bc", train_steps=5,
                                             batch_size=2), TINY_NET)


class TestEvalReport:
    def test_negative_att_rejected(self):
        with pytest.raises(ConfigError):
            EvalReport(scenario="s", demand="d", algorithm="a", seeds=(0,),
                       episodes=1, vehicles=1, att_mean=-1.0, att_std=None,
                       ql_mean=0.0, ql_std=None, att_by_seed=(-1.0,),
                       ql_by_seed=(0.0,))

    def test_negative_ql_rejected(self):
        with pytest.raises(ConfigError):
            EvalReport(scenario="s", demand="d", algorithm="a", seeds=(0,),
                       episodes=1, vehicles=0, att_mean=None, att_std=None,
                       ql_mean=-2.0, ql_std=None, att_by_seed=(None,),
                       ql_by_seed=(-2.0,))


class TestEvaluate:
    def test_controller_rollout_report_shape(self):
        rep = evaluate(ControllerSpec(kind="greedy"), TOY, episodes=2,
                       seeds=(0, 1), scenario="toy-2x2", demand="medium")
        assert rep.algorithm == "greedy"
        assert rep.scenario == "toy-2x2"
        assert rep.seeds == (0, 1)
        assert rep.episodes == 2
        assert rep.vehicles > 0
        assert rep.att_mean > 0 and rep.ql_mean > 0
        assert rep.att_std is not None and rep.ql_std is not None
        assert len(rep.att_by_seed) == 2 and len(rep.ql_by_seed) == 2

    def test_single_seed_omits_std(self):
        rep = evaluate(ControllerSpec(kind="greedy"), TOY, episodes=1,
                       seeds=(0,))
        assert rep.att_std is None and rep.ql_std is None
        assert rep.att_mean is not None

    def test_deterministic_per_seed(self, bc_ckpt):
        a = evaluate(bc_ckpt, TOY, episodes=2, seeds=(0, 1))
        b = evaluate(bc_ckpt, TOY, episodes=2, seeds=(0, 1))
        assert a == b

    def test_zero_demand_reports_no_vehicles(self):
        quiet = dataclasses.replace(TOY, demand_rate=0.0)
        rep = evaluate(ControllerSpec(kind="fixed_time"), quiet, episodes=1,
                       seeds=(0,))
        assert rep.vehicles == 0
        assert rep.att_mean is None
        assert rep.ql_mean == 0.0

    def test_ql_equals_negated_mean_logged_reward(self):
        # the report must reproduce the reward identity exactly: QL is the
        # time-average of the total queue, and each step's reward is its
        # negation
        rep = evaluate(ControllerSpec(kind="sotl"), TOY, episodes=1,
                       seeds=(3,))
        ep = record_episode(TOY, make_controller(ControllerSpec(kind="sotl")),
                            seed=3 * 100_000)
        expected = -float(np.mean([tr.reward for tr in ep.transitions]))
        assert rep.ql_by_seed[0] == expected

    def test_greedy_beats_random_on_three_seeds(self):
        greedy = evaluate(ControllerSpec(kind="greedy"), TOY, episodes=3,
                          seeds=(0, 1, 2))
        random_ = evaluate(ControllerSpec(kind="random"), TOY, episodes=3,
                           seeds=(0, 1, 2))
        assert greedy.att_mean < random_.att_mean

    def test_checkpoint_rollout_uses_offlight_label(self, bc_ckpt):
        rep = evaluate(bc_ckpt, TOY, episodes=1, seeds=(0,))
        assert rep.algorithm == "bc"
        relabeled = dataclasses.replace(
            bc_ckpt, trainer_config=dataclasses.replace(
                bc_ckpt.trainer_config, offlight=True,
                weight_sidecar="unused.json"))
        rep2 = evaluate(relabeled, TOY, episodes=1, seeds=(0,))
        assert rep2.algorithm == "offlight-bc"

    def test_wrong_network_rejected(self, bc_ckpt):
        other = network_spec("toy-3x3", seed=0)
        with pytest.raises(FingerprintError):
            evaluate(bc_ckpt, other, episodes=1, seeds=(0,))

    def test_unknown_policy_type_rejected(self):
        with pytest.raises(ConfigError):
            evaluate(42, TOY)

    def test_bad_counts_rejected(self):
        with pytest.raises(ConfigError):
            evaluate(ControllerSpec(kind="greedy"), TOY, episodes=0)
        with pytest.raises(ConfigError):
            evaluate(ControllerSpec(kind="greedy"), TOY, seeds=())

    def test_policy_controller_replays_forward_policy(self, bc_ckpt):
        # the adapter's choices must be the argmax of the policy forward pass
        from gridlight.simnet import build_grid, observe_all, step
        from gridlight.trainers import forward_policy
        controller = PolicyController(bc_ckpt)
        controller.reset(TOY)
        state, _ = build_grid(TOY)
        obs = observe_all(state)
        history = []
        for _ in range(3):
            actions, probs = controller.act(state, obs)
            history.append(np.stack([obs[a].features for a in range(4)]))
            dist = forward_policy(bc_ckpt, np.stack(history))
            assert [actions[a] for a in range(4)] == \
                [int(d.argmax()) for d in dist]
            assert all(p == 1.0 for p in probs.values())
            state, _, obs, _ = step(state, actions)


class TestLearningCurve:
    def test_window_one_is_identity(self):
        log = [{"step": i, "loss": float(i * i)} for i in range(5)]
        steps, vals = learning_curve(log, window=1)
        np.testing.assert_array_equal(steps, np.arange(5))
        np.testing.assert_array_equal(vals, [0.0, 1.0, 4.0, 9.0, 16.0])

    def test_constant_series_stays_constant(self):
        log = [{"step": i, "loss": 2.5} for i in range(8)]
        _, vals = learning_curve(log, window=3)
        np.testing.assert_array_equal(vals, np.full(8, 2.5))

    def test_trailing_window_average(self):
        log = [{"step": i, "loss": v} for i, v in enumerate([4.0, 0.0, 2.0])]
        _, vals = learning_curve(log, window=2)
        np.testing.assert_allclose(vals, [4.0, 2.0, 1.0])

    def test_skips_rows_without_the_metric(self):
        log = [{"step": 0, "loss": 1.0}, {"step": 1},
               {"step": 2, "loss": 3.0}]
        steps, vals = learning_curve(log, window=1)
        np.testing.assert_array_equal(steps, [0, 2])
        np.testing.assert_array_equal(vals, [1.0, 3.0])

    def test_empty_or_missing_metric_rejected(self):
        with pytest.raises(ConfigError):
            learning_curve([], window=1)
        with pytest.raises(ConfigError):
            learning_curve([{"step": 0, "loss": 1.0}], metric="never")
        with pytest.raises(ConfigError):
            learning_curve([{"step": 0, "loss": 1.0}], window=0)


class TestScalingBenchmark:
    def test_single_grid_has_no_fit(self):
        rep = scaling_benchmark(["2x2"], control_steps=2, repeats=1,
                                agent_config=TINY_NET)
        assert len(rep.rows) == 1
        assert rep.rows[0]["agents"] == 4
        assert rep.slope is None and rep.r_squared is None

    def test_two_grids_fit_exactly(self):
        rep = scaling_benchmark(["2x2", "3x3"], control_steps=2, repeats=1,
                                agent_config=TINY_NET)
        assert rep.slope is not None
        assert rep.r_squared == pytest.approx(1.0)   # a line through 2 points

    def test_rows_report_size_agents_edges(self):
        rep = scaling_benchmark(["3x3"], control_steps=2, repeats=1,
                                agent_config=TINY_NET)
        row = rep.rows[0]
        assert row["size"] == "3x3"
        assert row["agents"] == 9
        assert row["edges"] == 12      # 2 * 3 * (3 - 1) in a 3x3 grid
        assert row["seconds_per_step"] > 0

    def test_manhattan_scale_row_present(self):
        rep = scaling_benchmark(["14x14"], control_steps=1, repeats=1,
                                agent_config=TINY_NET)
        assert rep.rows[0]["agents"] == 196

    def test_bad_arguments_rejected(self):
        with pytest.raises(ConfigError):
            scaling_benchmark([])
        with pytest.raises(ConfigError):
            scaling_benchmark(["2x2"], control_steps=0)
        with pytest.raises(ConfigError):
            scaling_benchmark(["two-by-two"])


class TestPlots:
    def curves(self):
        x = np.arange(5)
        return {"plain": (x, np.linspace(3.0, 1.0, 5)),
                "weighted": (x, np.linspace(2.5, 0.5, 5))}

    def test_curve_plot_writes_metadata_and_csv(self, tmp_path):
        png, csv_path = tmp_path / "c.png", tmp_path / "c.csv"
        plot_curves(self.curves(), png, csv_path, title="loss comparison")
        meta = Image.open(png).text
        assert meta["Title"] == "loss comparison"
        assert meta["Description"] == "plain, weighted"
        rows = list(csv.reader(open(csv_path)))
        assert rows[0] == ["series", "training_step", "loss"]
        assert len(rows) == 1 + 2 * 5
        assert {r[0] for r in rows[1:]} == {"plain", "weighted"}

    def test_curve_plot_without_csv(self, tmp_path):
        plot_curves(self.curves(), tmp_path / "c.png")
        assert (tmp_path / "c.png").stat().st_size > 0

    def test_empty_curves_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            plot_curves({}, tmp_path / "c.png")

    def make_report(self, algorithm, att):
        return EvalReport(scenario="toy-2x2", demand="medium",
                          algorithm=algorithm, seeds=(0, 1), episodes=2,
                          vehicles=100, att_mean=att, att_std=1.0,
                          ql_mean=20.0, ql_std=0.5,
                          att_by_seed=(att - 1.0, att + 1.0),
                          ql_by_seed=(19.5, 20.5))

    def test_att_bars_write_metadata_and_csv(self, tmp_path):
        reports = [self.make_report("cql", 40.0),
                   self.make_report("offlight-cql", 16.0)]
        png, csv_path = tmp_path / "att.png", tmp_path / "att.csv"
        plot_att_bars(reports, png, csv_path)
        assert Image.open(png).text["Description"] == "cql, offlight-cql"
        rows = list(csv.reader(open(csv_path)))
        assert rows[0][:3] == ["scenario", "demand", "algorithm"]
        assert [r[2] for r in rows[1:]] == ["cql", "offlight-cql"]

    def test_reports_csv_round_readable(self, tmp_path):
        path = tmp_path / "r.csv"
        write_reports_csv([self.make_report("bc", 20.0)], path)
        rows = list(csv.DictReader(open(path)))
        assert rows[0]["algorithm"] == "bc"
        assert float(rows[0]["att_mean"]) == 20.0
        assert rows[0]["seeds"] == "0 1"

    def test_scaling_csv_includes_fit(self, tmp_path):
        rep = scaling_benchmark(["2x2", "3x3"], control_steps=2, repeats=1,
                                agent_config=TINY_NET)
        path = tmp_path / "scale.csv"
        write_scaling_csv(rep, path)
        text = open(path).read()
        assert "seconds_per_step" in text
        assert "r_squared" in text
