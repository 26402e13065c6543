"""Tabular MDPs, grid-map parsing, and policy-induced transition matrices.

Conventions used throughout the package:

* states are integer ids; grid maps number their non-wall cells row-major;
* ``R_t = r(S_t)`` (or ``r(S_t, A_t)``): a transition out of ``s`` carries the
  reward of ``s``; the reward of a terminal state is collected on arrival;
* rows of terminal states in every policy-induced transition matrix are zero.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import NamedTuple, Optional

import numpy as np

ATOL = 1e-12

# up, down, left, right as (drow, dcol)
GRID_ACTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))
ACTION_NAMES = ("up", "down", "left", "right")

WALL, EMPTY, LOW, GOAL, START = "#", ".", "L", "G", "S"
MAP_CHARS = frozenset(WALL + EMPTY + LOW + GOAL + START)

GRID_ENVIRONMENTS = (
    "grid_task",
    "four_rooms",
    "grid_room",
    "grid_maze",
    "grid_room_large",
    "grid_maze_large",
    "four_rooms_multigoal",
)
CHAIN_ENVIRONMENTS = ("riverswim", "sixarms")
VARIANTS = ("standard", "no_low_reward", "no_terminals")


class MapParseError(ValueError):
    """Malformed map text; the message names the offending line and column."""


class ConfigurationError(ValueError):
    """Unknown environment or a variant that does not apply to it."""


@dataclass(frozen=True)
class GridMap:
    """Cell layout of a parsed map file; ``cells`` keeps the raw characters."""

    width: int
    height: int
    cells: tuple[str, ...]
    reward_empty: float = -1.0
    reward_low: float = -20.0
    reward_goal: float = 0.0
    multi_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(
            (y, x)
            for y, row in enumerate(self.cells)
            for x, ch in enumerate(row)
            if ch != WALL
        ))
        object.__setattr__(self, "index", {c: i for i, c in enumerate(self.coords)})

    @property
    def n_states(self) -> int:
        return len(self.coords)

    def char_at(self, state: int) -> str:
        y, x = self.coords[state]
        return self.cells[y][x]

    def states_of(self, ch: str) -> list[int]:
        return [s for s in range(self.n_states) if self.char_at(s) == ch]

    def to_text(self) -> str:
        header = (
            f"!reward empty={_fmt(self.reward_empty)} low={_fmt(self.reward_low)} "
            f"goal={_fmt(self.reward_goal)}"
        )
        lines = [header]
        if self.multi_start:
            lines.append("!start multi")
        lines.extend(self.cells)
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:g}"


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with either state or state-action rewards.

    ``transition[s, a, s']`` is p(s'|s,a). Arrays are made read-only on
    construction so instances can be shared freely.
    """

    transition: np.ndarray
    terminal: np.ndarray
    start: np.ndarray
    reward_state: Optional[np.ndarray] = None
    reward_sa: Optional[np.ndarray] = None
    name: str = ""
    grid: Optional[GridMap] = field(default=None, repr=False)

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        if np.any(p < 0) or not np.allclose(p.sum(axis=2), 1.0, rtol=0, atol=ATOL):
            raise ValueError("transition rows must be nonnegative and sum to 1")
        if (self.reward_state is None) == (self.reward_sa is None):
            raise ValueError("exactly one of reward_state / reward_sa must be given")
        terminal = np.array(self.terminal, dtype=bool)
        start = np.array(self.start, dtype=float)
        if terminal.shape != (n_s,) or start.shape != (n_s,):
            raise ValueError("terminal and start must have one entry per state")
        if np.any(start < 0) or abs(start.sum() - 1.0) > ATOL:
            raise ValueError("start distribution must sum to 1")
        arrays = {"transition": p, "terminal": terminal, "start": start}
        if self.reward_state is not None:
            r = np.array(self.reward_state, dtype=float)
            if r.shape != (n_s,):
                raise ValueError(f"reward_state must have shape ({n_s},)")
            arrays["reward_state"] = r
        else:
            r = np.array(self.reward_sa, dtype=float)
            if r.shape != (n_s, n_a):
                raise ValueError(f"reward_sa must have shape ({n_s}, {n_a})")
            arrays["reward_sa"] = r
        for key, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        # sampling tables: cumulative rows, and reward lookups as plain floats
        cdf = np.cumsum(p, axis=2)
        cdf[:, :, -1] = 1.0
        object.__setattr__(self, "_cdf", cdf)
        object.__setattr__(self, "_rewards", r.tolist())
        object.__setattr__(self, "_terminal_list", terminal.tolist())

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def has_state_rewards(self) -> bool:
        return self.reward_state is not None

    def reward(self, s: int, a: Optional[int] = None) -> float:
        if self.reward_state is not None:
            return float(self.reward_state[s])
        if a is None:
            raise ValueError("state-action rewards need an action")
        return float(self.reward_sa[s, a])

    def sa_rewards(self) -> np.ndarray:
        """Rewards as an (S, A) table; state rewards are broadcast over actions."""
        if self.reward_sa is not None:
            return np.array(self.reward_sa)
        return np.repeat(self.reward_state[:, None], self.n_actions, axis=1)

    def all_rewards(self) -> np.ndarray:
        return np.array(self.reward_state if self.reward_state is not None else self.reward_sa)

    def check_dr_precondition(self) -> None:
        """Raise unless every non-terminal reward is strictly negative."""
        r = self.sa_rewards()
        bad = np.argwhere((r >= 0) & ~self.terminal[:, None])
        if len(bad):
            s = int(bad[0][0])
            raise ValueError(
                f"DR requires r(s) < 0 for non-terminal states; state {s} has reward "
                f"{r[s].max():g}"
            )

    def with_sa_rewards(self) -> "TabularMdp":
        """Same dynamics with rewards expressed per state-action pair."""
        if self.reward_sa is not None:
            return self
        return replace(self, reward_state=None, reward_sa=self.sa_rewards())

    def with_rewards(self, reward_state=None, reward_sa=None) -> "TabularMdp":
        return replace(self, reward_state=reward_state, reward_sa=reward_sa)

    def __eq__(self, other):
        if not isinstance(other, TabularMdp):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        return (
            same(self.transition, other.transition)
            and same(self.terminal, other.terminal)
            and same(self.start, other.start)
            and same(self.reward_state, other.reward_state)
            and same(self.reward_sa, other.reward_sa)
        )

    __hash__ = None


class TransitionSample(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    done: bool


# ---------------------------------------------------------------------------
# grid maps


def parse_map_text(text: str) -> GridMap:
    rewards = {"empty": -1.0, "low": -20.0, "goal": 0.0}
    multi_start = False
    rows: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if line.startswith("!"):
            if rows:
                raise MapParseError(f"line {lineno}, column 1: header after map rows")
            _parse_header(line, lineno, rewards)
            if line.split()[0] == "!start":
                multi_start = True
            continue
        if not line.strip():
            continue
        for col, ch in enumerate(line, start=1):
            if ch not in MAP_CHARS:
                raise MapParseError(f"line {lineno}, column {col}: unknown character {ch!r}")
        rows.append((lineno, line))
    if not rows:
        raise MapParseError("line 1, column 1: map has no rows")
    width = len(rows[0][1])
    for lineno, line in rows:
        if len(line) != width:
            raise MapParseError(
                f"line {lineno}, column {min(len(line), width) + 1}: row has length "
                f"{len(line)}, expected {width} (map must be rectangular)"
            )
    cells = tuple(line for _, line in rows)
    n_start = sum(line.count(START) for line in cells)
    if n_start == 0:
        lineno = rows[0][0]
        raise MapParseError(f"line {lineno}, column 1: map has no start cell 'S'")
    if n_start > 1 and not multi_start:
        for lineno, line in rows:
            if START in line:
                first = lineno, line.index(START) + 1
                break
        raise MapParseError(
            f"line {first[0]}, column {first[1]}: {n_start} start cells but no "
            "'!start multi' header"
        )
    return GridMap(
        width=width,
        height=len(cells),
        cells=cells,
        reward_empty=rewards["empty"],
        reward_low=rewards["low"],
        reward_goal=rewards["goal"],
        multi_start=multi_start,
    )


def _parse_header(line: str, lineno: int, rewards: dict) -> None:
    parts = line.split()
    if parts[0] == "!start":
        if parts[1:] != ["multi"]:
            raise MapParseError(f"line {lineno}, column 1: expected '!start multi'")
        return
    if parts[0] != "!reward":
        raise MapParseError(f"line {lineno}, column 1: unknown header {parts[0]!r}")
    for item in parts[1:]:
        key, sep, value = item.partition("=")
        if not sep or key not in rewards:
            col = line.index(item) + 1
            raise MapParseError(f"line {lineno}, column {col}: bad reward entry {item!r}")
        try:
            rewards[key] = float(value)
        except ValueError:
            col = line.index(item) + len(key) + 2
            raise MapParseError(f"line {lineno}, column {col}: bad number {value!r}") from None


def grid_to_mdp(grid: GridMap, name: str = "") -> TabularMdp:
    n = grid.n_states
    p = np.zeros((n, len(GRID_ACTIONS), n))
    reward = np.empty(n)
    terminal = np.zeros(n, dtype=bool)
    for s, (y, x) in enumerate(grid.coords):
        ch = grid.cells[y][x]
        reward[s] = {LOW: grid.reward_low, GOAL: grid.reward_goal}.get(ch, grid.reward_empty)
        terminal[s] = ch == GOAL
        for a, (dy, dx) in enumerate(GRID_ACTIONS):
            ny, nx = y + dy, x + dx
            inside = 0 <= ny < grid.height and 0 <= nx < grid.width
            if inside and grid.cells[ny][nx] != WALL:
                p[s, a, grid.index[(ny, nx)]] = 1.0
            else:
                p[s, a, s] = 1.0
    starts = grid.states_of(START)
    start = np.zeros(n)
    start[starts] = 1.0 / len(starts)
    return TabularMdp(
        transition=p, terminal=terminal, start=start, reward_state=reward, name=name, grid=grid
    )


def parse_grid_map(text: str, name: str = "") -> TabularMdp:
    """Parse map text (characters ``#.LGS``) into a deterministic 4-action MDP."""
    return grid_to_mdp(parse_map_text(text), name=name)


def serialize_grid_map(mdp: TabularMdp) -> str:
    if mdp.grid is None:
        raise ValueError("MDP was not built from a grid map")
    return mdp.grid.to_text()


def reachable_states(mdp: TabularMdp, policy: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean mask of states reachable from the start support (terminals absorb)."""
    p = transition_matrix(mdp, policy if policy is not None else uniform_policy(mdp))
    seen = mdp.start > 0
    frontier = seen.copy()
    while frontier.any():
        nxt = (p[frontier].sum(axis=0) > 0) & ~seen
        seen |= nxt
        frontier = nxt
    return seen


# ---------------------------------------------------------------------------
# environments


def _load_map(name: str) -> str:
    return resources.files("protorep").joinpath("maps", f"{name}.txt").read_text(encoding="utf-8")


def load_chain_params() -> dict:
    text = resources.files("protorep").joinpath("data", "chains.json").read_text(encoding="utf-8")
    return json.loads(text)


def make_environment(name: str, variant: str = "standard") -> TabularMdp:
    """Build one of the shipped environments, optionally modified by ``variant``.

    ``no_low_reward`` turns low-reward tiles into ordinary ones and
    ``no_terminals`` makes goals ordinary non-terminal cells with the empty-cell
    reward. Both apply only to grid environments and combine with ``+``
    (``"no_low_reward+no_terminals"``).
    """
    mods = set(variant.split("+"))
    if not mods <= set(VARIANTS) or ("standard" in mods and len(mods) > 1):
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if name in CHAIN_ENVIRONMENTS:
        if variant != "standard":
            raise ConfigurationError(f"variant {variant!r} does not apply to {name}")
        return _make_chain(name)
    if name not in GRID_ENVIRONMENTS:
        known = GRID_ENVIRONMENTS + CHAIN_ENVIRONMENTS
        raise ConfigurationError(f"unknown environment {name!r}; expected one of {known}")
    grid = parse_map_text(_load_map(name))
    if "no_low_reward" in mods:
        if not any(LOW in row for row in grid.cells):
            raise ConfigurationError(f"{name} has no low-reward cells")
        grid = replace(grid, cells=tuple(row.replace(LOW, EMPTY) for row in grid.cells))
    mdp = grid_to_mdp(grid, name=f"{name}" if variant == "standard" else f"{name}:{variant}")
    if "no_terminals" in mods:
        r = np.array(mdp.reward_state)
        r[mdp.terminal] = grid.reward_empty
        mdp = replace(mdp, terminal=np.zeros(mdp.n_states, dtype=bool), reward_state=r)
    return mdp


def _make_chain(name: str) -> TabularMdp:
    spec = load_chain_params()[name]
    p = np.array(spec["transition"], dtype=float)
    r = np.array(spec["reward_sa"], dtype=float)
    n_s = p.shape[0]
    start = np.zeros(n_s)
    start[spec["start"]] = 1.0
    return TabularMdp(
        transition=p,
        terminal=np.zeros(n_s, dtype=bool),
        start=start,
        reward_sa=r,
        name=name,
    )


# ---------------------------------------------------------------------------
# policies and transition matrices


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    if mdp.n_actions < 1:
        raise ValueError("MDP has no actions")
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def check_policy(policy: np.ndarray, mdp: Optional[TabularMdp] = None, default: bool = False):
    policy = np.asarray(policy, dtype=float)
    if mdp is not None and policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"policy shape {policy.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )
    if np.any(policy < 0) or not np.allclose(policy.sum(axis=1), 1.0, rtol=0, atol=ATOL):
        raise ValueError("policy rows must be nonnegative and sum to 1")
    if default and np.any(policy <= 0):
        raise ValueError("a default policy must give every action positive probability")
    return policy


def transition_matrix(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """P^pi(s, s') = sum_a pi(a|s) p(s'|s,a), with terminal rows zeroed."""
    policy = check_policy(policy, mdp)
    p = np.einsum("sa,sat->st", policy, mdp.transition)
    p[mdp.terminal] = 0.0
    return p


def sa_transition_matrix(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """P(sa, s'a') = p(s'|s,a) pi(a'|s'); pair index is ``s * n_actions + a``.

    Rows belonging to terminal states are zero.
    """
    policy = check_policy(policy, mdp)
    n_s, n_a = mdp.n_states, mdp.n_actions
    pbar = np.einsum("sat,tb->satb", mdp.transition, policy).reshape(n_s * n_a, n_s * n_a)
    pbar[np.repeat(mdp.terminal, n_a)] = 0.0
    return pbar


def sa_terminal_mask(mdp: TabularMdp) -> np.ndarray:
    return np.repeat(mdp.terminal, mdp.n_actions)


# ---------------------------------------------------------------------------
# sampling and reward transforms


def sample_step(mdp: TabularMdp, s: int, a: int, rng: np.random.Generator) -> TransitionSample:
    term = mdp._terminal_list
    if term[s]:
        raise ValueError(f"cannot step from terminal state {s}")
    s_next = int(mdp._cdf[s, a].searchsorted(rng.random(), side="right"))
    r = mdp._rewards[s] if mdp.reward_state is not None else mdp._rewards[s][a]
    return TransitionSample(s, a, r, s_next, term[s_next])


def sample_start(mdp: TabularMdp, rng: np.random.Generator) -> int:
    return int(rng.choice(mdp.n_states, p=mdp.start))


def rescale_rewards(mdp: TabularMdp, lo: float, hi: float) -> TabularMdp:
    """Affine copy of the rewards onto [lo, hi]; constant rewards all map to ``hi``."""
    if not hi > lo:
        raise ValueError("need hi > lo")
    r = mdp.all_rewards()
    r_min, r_max = r.min(), r.max()
    if r_max == r_min:
        scaled = np.full_like(r, hi)
    else:
        scaled = lo + (r - r_min) * (hi - lo) / (r_max - r_min)
    if mdp.reward_state is not None:
        return replace(mdp, reward_state=scaled)
    return replace(mdp, reward_sa=scaled)


def export_csv(mdp: TabularMdp) -> str:
    """Flat ``s,a,s_next,p,r`` listing of every positive-probability transition."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["s", "a", "s_next", "p", "r"])
    for s, a, t in zip(*np.nonzero(mdp.transition)):
        writer.writerow([s, a, t, repr(float(mdp.transition[s, a, t])), repr(mdp.reward(s, a))])
    return buf.getvalue()


def chain_mdp(rewards, terminal_last: bool = True, name: str = "") -> TabularMdp:
    """One-action deterministic chain s0 -> s1 -> ... ; the last state loops or terminates."""
    r = np.asarray(rewards, dtype=float)
    n = len(r)
    if n < 1:
        raise ValueError("a chain needs at least one state")
    p = np.zeros((n, 1, n))
    for s in range(n):
        p[s, 0, min(s + 1, n - 1)] = 1.0
    terminal = np.zeros(n, dtype=bool)
    terminal[-1] = terminal_last
    start = np.zeros(n)
    start[0] = 1.0
    return TabularMdp(p, terminal, start, reward_state=r, name=name or f"chain{n}")
