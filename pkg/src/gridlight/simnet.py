"""Store-and-forward traffic simulator on a rectangular grid of intersections.

The model is deliberately small: every intersection is a 4-way junction, each
approach holds one or more FIFO lanes with integer vehicle counts, and one
simulated second moves at most ``saturation_flow`` vehicles out of each lane
that currently has a green movement.  Vehicles enter at the boundary via
Bernoulli arrivals, hop intersection to intersection, and leave the network
when a movement points off the grid.  There is no free-flow travel time
between junctions; a vehicle discharged at the end of second ``t`` sits in the
downstream queue from second ``t + 1`` on.  Spillback is physical: a vehicle
whose target lane is full stays where it is and blocks everything behind it.

Control happens at a coarser cadence.  ``step`` advances the world by one
action interval (default 5 s), applying one phase choice per intersection.
Changing phase first burns a yellow interval during which the intersection
discharges nothing; the new phase only becomes active once the yellow has
elapsed.  Repeating the current phase costs nothing.

Coordinates are ``(row, col)`` with row 0 at the north edge, and agent ids
number intersections row-major.  Lane order inside an intersection is fixed
(approaches N, E, S, W, then lane index), which fixes the layout of
observation vectors once and for all.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ActionError, ConfigError, UnknownAgentError

# Approach directions, in the fixed order used everywhere.
DIRECTIONS = ("N", "E", "S", "W")
_DIR_INDEX = {d: i for i, d in enumerate(DIRECTIONS)}
_OPPOSITE = {"N": "S", "S": "N", "E": "W", "W": "E"}
# Offset of the neighbouring intersection that a given approach faces:
# the "N" approach receives vehicles coming from the node one row up.
_OFFSET = {"N": (-1, 0), "S": (1, 0), "E": (0, 1), "W": (0, -1)}


@dataclass(frozen=True)
class Phase:
    """One signal phase: the set of simultaneously green movements.

    A movement is an ``(in_dir, out_dir)`` pair of approach directions, e.g.
    ``("N", "S")`` lets the north approach discharge toward the south side.
    """

    id: int
    movements: tuple[tuple[str, str], ...]

    def __post_init__(self):
        for m in self.movements:
            if len(m) != 2 or m[0] not in DIRECTIONS or m[1] not in DIRECTIONS:
                raise ConfigError(f"phase {self.id}: bad movement {m!r}")
            if m[0] == m[1]:
                raise ConfigError(f"phase {self.id}: movement {m!r} is a U-turn")

    @property
    def in_dirs(self) -> tuple[str, ...]:
        """Approach directions that have at least one green movement."""
        seen = []
        for d_in, _ in self.movements:
            if d_in not in seen:
                seen.append(d_in)
        return tuple(seen)


def default_phase_set() -> tuple[Phase, ...]:
    """The standard 4-phase cycle: NS through, NS turns, EW through, EW turns."""
    return (
        Phase(0, (("N", "S"), ("S", "N"))),
        Phase(1, (("N", "E"), ("S", "W"))),
        Phase(2, (("E", "W"), ("W", "E"))),
        Phase(3, (("E", "S"), ("W", "N"))),
    )


@dataclass(frozen=True)
class NetworkSpec:
    """Static description of a grid network and its timing parameters."""

    grid_rows: int = 2
    grid_cols: int = 2
    lanes_per_approach: int = 1
    lane_capacity: int = 20
    saturation_flow: int = 1
    demand_rate: float = 450.0  # vehicles/hour per entry lane
    phase_set: tuple[Phase, ...] = field(default_factory=default_phase_set)
    yellow_duration_s: int = 5
    action_interval_s: int = 5
    episode_length_s: int = 360
    seed: int = 0

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise ConfigError("grid dimensions must be positive")
        if self.lanes_per_approach < 1:
            raise ConfigError("lanes_per_approach must be positive")
        if self.lane_capacity < 1:
            raise ConfigError("lane_capacity must be positive")
        if self.saturation_flow < 1:
            raise ConfigError("saturation_flow must be positive")
        if self.demand_rate < 0:
            raise ConfigError("demand_rate must be non-negative")
        if self.demand_rate > 3600.0:
            raise ConfigError("demand_rate above one vehicle per second per lane")
        if not self.phase_set:
            raise ConfigError("phase_set must contain at least one phase")
        if tuple(p.id for p in self.phase_set) != tuple(range(len(self.phase_set))):
            raise ConfigError("phase ids must be 0..P-1 in order")
        served = {d for p in self.phase_set for d in p.in_dirs}
        if served != set(DIRECTIONS):
            missing = sorted(set(DIRECTIONS) - served)
            raise ConfigError(f"no phase ever serves approaches {missing}")
        if self.yellow_duration_s < 0:
            raise ConfigError("yellow_duration_s must be non-negative")
        if self.action_interval_s < 1:
            raise ConfigError("action_interval_s must be positive")
        if self.yellow_duration_s > self.action_interval_s:
            raise ConfigError("yellow longer than the action interval never clears")
        if self.episode_length_s < 1 or self.episode_length_s % self.action_interval_s:
            raise ConfigError("episode_length_s must be a positive multiple of "
                              "action_interval_s")

    @property
    def num_agents(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def num_phases(self) -> int:
        return len(self.phase_set)

    @property
    def lanes_per_agent(self) -> int:
        return 4 * self.lanes_per_approach

    @property
    def control_steps(self) -> int:
        """Number of decision points per episode."""
        return self.episode_length_s // self.action_interval_s

    @property
    def obs_dim(self) -> int:
        """Per-agent observation length: 3 features per lane plus phase one-hot."""
        return 3 * self.lanes_per_agent + self.num_phases

    def fingerprint(self) -> str:
        """Hash of everything that fixes tensor shapes and lane meaning.

        Two specs with equal fingerprints produce interchangeable
        observations and actions; demand, seed and episode length may differ.
        """
        key = {
            "grid": [self.grid_rows, self.grid_cols],
            "lanes": self.lanes_per_approach,
            "phases": [[p.id, list(map(list, p.movements))] for p in self.phase_set],
        }
        blob = json.dumps(key, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class AdjacencyGraph:
    """Intersection adjacency with self-loops, in matrix and edge-list form."""

    num_nodes: int
    matrix: np.ndarray  # (N, N) float, symmetric, unit diagonal
    edges: tuple[tuple[int, int], ...]  # undirected, i < j, no self-loops

    @property
    def num_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class LaneState:
    """Sensor view of one lane: vehicle count, speed fraction, queue length.

    The queue model has no speeds, so ``s`` is the proxy
    ``1 - q / max(n, 1)``: empty lanes read 1.0 (free flow), fully-queued
    lanes read 0.0.  Every stored vehicle counts as halted, hence ``n == q``.
    """

    n: int
    s: float
    q: int


@dataclass(frozen=True)
class Observation:
    """What one agent sees: per-lane features plus its own phase one-hot.

    ``features`` is laid out as ``[n_1, s_1, q_1, ..., n_L, s_L, q_L,
    onehot(phase)]`` with lanes in the fixed N/E/S/W-then-lane-index order.
    """

    agent: int
    features: np.ndarray

    def lane_view(self, num_phases: int) -> np.ndarray:
        """Per-lane (n, s, q) rows, i.e. the features without the phase part."""
        return self.features[: len(self.features) - num_phases].reshape(-1, 3)


class SimState:
    """Mutable world state.  Create with :func:`build_grid`, advance with :func:`step`."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        rows, cols = spec.grid_rows, spec.grid_cols
        self.num_agents = spec.num_agents

        # lane ids in canonical order: agent-major, then approach, then lane index
        self.lane_ids: list[tuple[int, str, int]] = [
            (node, d, k)
            for node in range(self.num_agents)
            for d in DIRECTIONS
            for k in range(spec.lanes_per_approach)
        ]
        self.queues: dict[tuple[int, str, int], list[int]] = {
            lid: [] for lid in self.lane_ids
        }

        # neighbour lookup: node, approach direction -> node on that side (or None)
        self._neighbor: dict[tuple[int, str], int | None] = {}
        for node in range(self.num_agents):
            r, c = divmod(node, cols)
            for d in DIRECTIONS:
                dr, dc = _OFFSET[d]
                rr, cc = r + dr, c + dc
                self._neighbor[(node, d)] = (
                    rr * cols + cc if 0 <= rr < rows and 0 <= cc < cols else None
                )

        # boundary approaches feed external demand
        self.entry_lanes = [
            (node, d, k)
            for (node, d, k) in self.lane_ids
            if self._neighbor[(node, d)] is None
        ]

        self.current_phase = [0] * self.num_agents
        self.pending_phase = [0] * self.num_agents
        self.yellow_left = [0] * self.num_agents
        self.clock = 0  # seconds since episode start
        self.entry_time: dict[int, int] = {}
        self.exit_time: dict[int, int] = {}
        self._next_vid = 0
        # Independent streams so the arrival pattern for a seed is the same
        # no matter how the network is controlled (fair paired comparisons).
        self.rng_arrivals, self.rng_moves = np.random.default_rng(
            spec.seed).spawn(2)

    # -- bookkeeping ---------------------------------------------------------

    def neighbor(self, node: int, direction: str) -> int | None:
        return self._neighbor[(node, direction)]

    def lane_queue(self, node: int, direction: str) -> int:
        """Total vehicles queued on one approach (all its lanes)."""
        k = self.spec.lanes_per_approach
        return sum(len(self.queues[(node, direction, i)]) for i in range(k))

    @property
    def vehicles_entered(self) -> int:
        return len(self.entry_time)

    @property
    def vehicles_exited(self) -> int:
        return len(self.exit_time)

    @property
    def vehicles_in_network(self) -> int:
        return sum(len(q) for q in self.queues.values())

    @property
    def done(self) -> bool:
        return self.clock >= self.spec.episode_length_s

    def displayed_phase(self, agent: int) -> int:
        """The phase an observer sees: the committed target during yellow."""
        return self.pending_phase[agent] if self.yellow_left[agent] > 0 else \
            self.current_phase[agent]

    def total_queue(self) -> int:
        return self.vehicles_in_network

    def lane_state(self, node: int, direction: str, lane: int = 0) -> LaneState:
        q = len(self.queues[(node, direction, lane)])
        return LaneState(n=q, s=1.0 - q / max(q, 1), q=q)

    def inject_vehicles(self, node: int, direction: str, count: int,
                        lane: int = 0) -> None:
        """Teleport vehicles into a lane, for tests and hand-built scenarios."""
        q = self.queues[(node, direction, lane)]
        if len(q) + count > self.spec.lane_capacity:
            raise ConfigError(f"injection overflows lane {(node, direction, lane)}")
        for _ in range(count):
            vid = self._next_vid
            self._next_vid += 1
            self.entry_time[vid] = self.clock
            q.append(vid)


def build_grid(spec: NetworkSpec) -> tuple[SimState, AdjacencyGraph]:
    """Fresh world for ``spec`` — empty lanes, clock 0, phase 0 everywhere —
    plus the intersection adjacency the graph models consume."""
    return SimState(spec), build_adjacency(spec)


def build_adjacency(spec: NetworkSpec) -> AdjacencyGraph:
    """4-neighbour grid adjacency with self-loops on the diagonal."""
    n = spec.num_agents
    cols = spec.grid_cols
    mat = np.eye(n, dtype=np.float64)
    edges = []
    for node in range(n):
        r, c = divmod(node, cols)
        if c + 1 < cols:
            edges.append((node, node + 1))
        if r + 1 < spec.grid_rows:
            edges.append((node, node + cols))
    for i, j in edges:
        mat[i, j] = mat[j, i] = 1.0
    return AdjacencyGraph(num_nodes=n, matrix=mat, edges=tuple(edges))


def observe(state: SimState, agent: int) -> Observation:
    """Local observation for one agent; raises for unknown agent ids."""
    if not 0 <= agent < state.num_agents:
        raise UnknownAgentError(f"agent {agent} not in 0..{state.num_agents - 1}")
    spec = state.spec
    feats = np.zeros(spec.obs_dim, dtype=np.float64)
    i = 0
    for d in DIRECTIONS:
        for k in range(spec.lanes_per_approach):
            q = len(state.queues[(agent, d, k)])
            n = q  # every queued vehicle occupies the lane
            s = 1.0 - q / max(n, 1)
            feats[i: i + 3] = (n, s, q)
            i += 3
    feats[3 * spec.lanes_per_agent + state.displayed_phase(agent)] = 1.0
    return Observation(agent=agent, features=feats)


def observe_all(state: SimState) -> dict[int, Observation]:
    return {a: observe(state, a) for a in range(state.num_agents)}


def pressure(state: SimState, agent: int, phase: int) -> int:
    """Sum over the phase's movements of upstream minus downstream queue.

    Downstream counts as zero when the movement leaves the network.
    """
    if not 0 <= agent < state.num_agents:
        raise UnknownAgentError(f"agent {agent} not in 0..{state.num_agents - 1}")
    spec = state.spec
    if not 0 <= phase < spec.num_phases:
        raise ActionError(f"phase {phase} not in 0..{spec.num_phases - 1}")
    total = 0
    for d_in, d_out in spec.phase_set[phase].movements:
        up = state.lane_queue(agent, d_in)
        j = state.neighbor(agent, d_out)
        down = state.lane_queue(j, _OPPOSITE[d_out]) if j is not None else 0
        total += up - down
    return total


def _admit_arrivals(state: SimState) -> None:
    """One second of Bernoulli arrivals on every entry lane, in canonical order."""
    p = state.spec.demand_rate / 3600.0
    cap = state.spec.lane_capacity
    for lid in state.entry_lanes:
        if state.rng_arrivals.random() < p:
            q = state.queues[lid]
            if len(q) < cap:
                vid = state._next_vid
                state._next_vid += 1
                state.entry_time[vid] = state.clock
                q.append(vid)
            # else the arrival finds no room and is never counted as entered


def _discharge(state: SimState, buffers: dict[tuple[int, str, int], list[int]]) -> None:
    """One second of green-movement service at every non-yellow intersection.

    Vehicles move into ``buffers`` rather than directly into downstream
    queues, so nothing hops two intersections within a single second.
    """
    spec = state.spec
    cap = spec.lane_capacity
    for node in range(state.num_agents):
        if state.yellow_left[node] > 0:
            continue
        phase = spec.phase_set[state.current_phase[node]]
        for d_in in DIRECTIONS:
            moves = [m for m in phase.movements if m[0] == d_in]
            if not moves:
                continue
            for k in range(spec.lanes_per_approach):
                lane = state.queues[(node, d_in, k)]
                for _ in range(min(spec.saturation_flow, len(lane))):
                    d_out = moves[0][1] if len(moves) == 1 else \
                        moves[int(state.rng_moves.integers(len(moves)))][1]
                    target = state.neighbor(node, d_out)
                    if target is None:
                        vid = lane.pop(0)
                        state.exit_time[vid] = state.clock
                        continue
                    t_dir = _OPPOSITE[d_out]
                    open_lanes = [
                        (target, t_dir, i)
                        for i in range(spec.lanes_per_approach)
                        if len(state.queues[(target, t_dir, i)])
                        + len(buffers[(target, t_dir, i)]) < cap
                    ]
                    if not open_lanes:
                        break  # spillback: head vehicle blocks the lane
                    tgt = open_lanes[0] if len(open_lanes) == 1 else \
                        open_lanes[int(state.rng_moves.integers(len(open_lanes)))]
                    buffers[tgt].append(lane.pop(0))


def step(state: SimState, joint_action: dict[int, int] | list[int]
         ) -> tuple[SimState, float, dict[int, Observation], bool]:
    """Apply one phase choice per agent and advance one action interval.

    Returns ``(state, reward, observations, done)`` where the reward is the
    shared ``-(total queued vehicles)`` measured at the interval's end.  The
    state object is mutated and returned for convenience.
    """
    spec = state.spec
    if state.done:
        raise ActionError("episode already finished")
    actions = ([joint_action[a] for a in range(state.num_agents)]
               if isinstance(joint_action, dict) else list(joint_action))
    if len(actions) != state.num_agents:
        raise ActionError(f"expected {state.num_agents} actions, got {len(actions)}")
    for a, act in enumerate(actions):
        if not 0 <= act < spec.num_phases:
            raise ActionError(f"agent {a}: phase {act} not in "
                              f"0..{spec.num_phases - 1}")
        committed = state.pending_phase[a] if state.yellow_left[a] > 0 \
            else state.current_phase[a]
        if act != committed:
            state.pending_phase[a] = act
            state.yellow_left[a] = spec.yellow_duration_s
            if spec.yellow_duration_s == 0:
                state.current_phase[a] = act

    buffers: dict[tuple[int, str, int], list[int]] = {
        lid: [] for lid in state.lane_ids
    }
    for _ in range(spec.action_interval_s):
        _admit_arrivals(state)
        _discharge(state, buffers)
        for lid in state.lane_ids:
            if buffers[lid]:
                state.queues[lid].extend(buffers[lid])
                buffers[lid].clear()
        for a in range(state.num_agents):
            if state.yellow_left[a] > 0:
                state.yellow_left[a] -= 1
                if state.yellow_left[a] == 0:
                    state.current_phase[a] = state.pending_phase[a]
        state.clock += 1

    reward = -float(state.total_queue())
    return state, reward, observe_all(state), state.done


def run_episode(spec: NetworkSpec, controller, seed: int | None = None):
    """Roll one full episode under ``controller``; returns the episode trace.

    ``controller`` follows the controller protocol (``reset``/``act``).  The
    trace is a list of per-step dicts consumed by the datastore.
    """
    if seed is not None:
        spec = replace(spec, seed=seed)
    state, _ = build_grid(spec)
    controller.reset(spec)
    obs = observe_all(state)
    trace = []
    while not state.done:
        actions, probs = controller.act(state, obs)
        state, reward, next_obs, done = step(state, actions)
        trace.append({
            "obs": {a: o.features.copy() for a, o in obs.items()},
            "actions": dict(actions) if isinstance(actions, dict)
            else {a: int(x) for a, x in enumerate(actions)},
            "action_probs": dict(probs),
            "reward": reward,
            "next_obs": {a: o.features.copy() for a, o in next_obs.items()},
            "done": done,
        })
        obs = next_obs
    return state, trace


def average_travel_time(state: SimState) -> float:
    """Mean travel time over vehicles that entered; trips still in progress
    count up to the episode end."""
    if not state.entry_time:
        return 0.0
    end = state.spec.episode_length_s
    total = 0.0
    for vid, t_in in state.entry_time.items():
        t_out = state.exit_time.get(vid, end)
        total += t_out - t_in
    return total / len(state.entry_time)
