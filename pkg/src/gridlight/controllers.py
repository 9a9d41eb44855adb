"""Rule-based signal controllers used to generate logged behaviour data.

Five families: ``random`` (uniform over phases), ``fixed_time`` (round-robin,
traffic-blind), ``greedy`` (serve the largest queue), ``max_pressure``
(maximize upstream-minus-downstream pressure), and ``sotl`` (hold a minimum
green, then yield to any red approach whose queue crosses a threshold).

Every controller reports, next to each chosen phase, the exact probability it
assigned to that choice — 1.0 for the deterministic rules, ``1/P`` for the
random one.  Those probabilities travel with the logged data and are the
ground truth that behaviour-policy estimates get compared against.

Greedy doubles as the "expert" when building mixed-quality datasets: it is
the strongest rule here, and datasets record which controller produced them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UnknownAgentError
from .simnet import DIRECTIONS, NetworkSpec, Observation, SimState, pressure

CONTROLLER_KINDS = ("random", "fixed_time", "greedy", "max_pressure", "sotl")


@dataclass(frozen=True)
class ControllerSpec:
    """Which rule to run and its knobs (unused knobs are ignored per kind)."""

    kind: str
    green_steps: int = 4      # fixed_time: decisions per phase before advancing
    theta_q: int = 4          # sotl: red-queue threshold (vehicles)
    g_min: int = 2            # sotl: minimum green duration (decisions)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ConfigError(f"unknown controller kind '{self.kind}' "
                              f"(have: {', '.join(CONTROLLER_KINDS)})")
        if self.green_steps < 1:
            raise ConfigError("green_steps must be at least 1")
        if self.theta_q < 1:
            raise ConfigError("theta_q must be positive")
        if self.g_min < 1:
            raise ConfigError("g_min must be at least 1")


class Controller:
    """One per-episode instance; holds per-intersection counters where needed."""

    def __init__(self, spec: ControllerSpec):
        self.spec = spec
        self.network: NetworkSpec | None = None
        self.rng = np.random.default_rng(spec.seed)
        self.t = 0
        self._since_switch: list[int] = []

    @property
    def label(self) -> str:
        return self.spec.kind

    def reset(self, network: NetworkSpec) -> None:
        self.network = network
        self.rng = np.random.default_rng(self.spec.seed)
        self.t = 0
        # sotl may switch right away at t=0
        self._since_switch = [self.spec.g_min] * network.num_agents

    def act_agent(self, state: SimState, agent: int, obs: Observation,
                  t: int) -> tuple[int, float]:
        """Phase choice and its exact probability for a single agent."""
        if not 0 <= agent < state.num_agents:
            raise UnknownAgentError(f"agent {agent} not in 0..{state.num_agents - 1}")
        spec = state.spec
        kind = self.spec.kind
        if kind == "random":
            return int(self.rng.integers(spec.num_phases)), 1.0 / spec.num_phases
        if kind == "fixed_time":
            return (t // self.spec.green_steps) % spec.num_phases, 1.0
        if kind == "greedy":
            scores = [
                sum(state.lane_queue(agent, d) for d in ph.in_dirs)
                for ph in spec.phase_set
            ]
            return int(np.argmax(scores)), 1.0
        if kind == "max_pressure":
            scores = [pressure(state, agent, p) for p in range(spec.num_phases)]
            return int(np.argmax(scores)), 1.0
        # sotl
        cur = state.displayed_phase(agent)
        if self._since_switch[agent] < self.spec.g_min:
            return cur, 1.0
        green = spec.phase_set[cur].in_dirs
        red_queues = {d: state.lane_queue(agent, d)
                      for d in DIRECTIONS if d not in green}
        if not red_queues or max(red_queues.values()) < self.spec.theta_q:
            return cur, 1.0
        longest = max(red_queues, key=lambda d: (red_queues[d], -_dir_rank(d)))
        for ph in spec.phase_set:
            if longest in ph.in_dirs:
                return ph.id, 1.0
        return cur, 1.0

    def act(self, state: SimState, obs: dict[int, Observation]
            ) -> tuple[dict[int, int], dict[int, float]]:
        """One decision for every agent; advances internal counters."""
        actions: dict[int, int] = {}
        probs: dict[int, float] = {}
        for agent in range(state.num_agents):
            a, p = self.act_agent(state, agent, obs[agent], self.t)
            actions[agent] = a
            probs[agent] = p
            if self.spec.kind == "sotl":
                if a != state.displayed_phase(agent):
                    self._since_switch[agent] = 1
                else:
                    self._since_switch[agent] += 1
        self.t += 1
        return actions, probs


def _dir_rank(d: str) -> int:
    return DIRECTIONS.index(d)


def make_controller(spec: ControllerSpec) -> Controller:
    """Instantiate a controller for one episode from a validated spec."""
    return Controller(spec)
