"""Tabular control agents, reward shaping and the DR count-based bonus."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .mdp import TabularMdp, TransitionSample, rescale_rewards, sample_start, sample_step
from .representations import EigenSummary, dr_sa_td_update

SHAPING_MODES = ("none", "dr_pot", "sr_pot", "sr_prior")
ALGORITHMS = ("q_learning", "sarsa")


def epsilon_greedy(q_row, epsilon: float, rng: np.random.Generator) -> int:
    """Uniform action with probability epsilon, else argmax (lowest index on ties)."""
    q_row = np.asarray(q_row)
    if q_row.size == 0:
        raise ValueError("empty action set")
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(q_row.size))
    return int(np.argmax(q_row))


def q_learning_update(
    q: np.ndarray,
    sample: TransitionSample,
    alpha: float,
    gamma: float,
    terminal_reward: float = 0.0,
    reward: Optional[float] = None,
):
    """q(s,a) += alpha [r + gamma max q(s') - q(s,a)].

    On ``done`` the bootstrap is ``terminal_reward``, the reward collected on
    arriving at the terminal state (0 leaves the target at ``r``).
    ``reward`` overrides ``sample.r`` (shaped or bonus rewards).
    """
    r = sample.r if reward is None else reward
    boot = terminal_reward if sample.done else np.max(q[sample.s_next])
    q[sample.s, sample.a] += alpha * (r + gamma * boot - q[sample.s, sample.a])
    return q


def sarsa_update(
    q: np.ndarray,
    s: int,
    a: int,
    r: float,
    s_next: int,
    a_next: int,
    done: bool,
    alpha: float,
    gamma: float,
    terminal_reward: float = 0.0,
):
    boot = terminal_reward if done else q[s_next, a_next]
    q[s, a] += alpha * (r + gamma * boot - q[s, a])
    return q


# ---------------------------------------------------------------------------
# shaping


@dataclass
class ShapingConfig:
    mode: str = "none"
    eigvec: Union[EigenSummary, np.ndarray, None] = None
    beta: float = 0.0
    gamma: float = 0.99
    goal_state: Optional[int] = None
    # when set, terminal next states contribute potential 0
    zero_terminal_potential: bool = False

    def __post_init__(self):
        if self.mode not in SHAPING_MODES:
            raise ValueError(f"unknown shaping mode {self.mode!r}")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if self.mode != "none" and self.eigvec is None:
            raise ValueError(f"shaping mode {self.mode} needs an eigenvector")
        if self.mode == "sr_prior" and self.goal_state is None:
            raise ValueError("sr_prior shaping needs goal_state")

    def potential(self, s: int) -> float:
        vec, visited = _vector_and_mask(self.eigvec)
        if not 0 <= s < len(vec) or (visited is not None and not visited[s]):
            raise KeyError(f"no eigenvector entry for state {s}")
        return float(vec[s])


def _vector_and_mask(e):
    if isinstance(e, EigenSummary):
        return e.top_eigenvector, e.visited
    return np.asarray(e, dtype=float), None


def shaping_reward(cfg: ShapingConfig, s: int, s_next: int, r: float, done: bool = False) -> float:
    """(1 - beta) r + beta r_hat."""
    if cfg.mode == "none":
        return r
    if cfg.mode in ("dr_pot", "sr_pot"):
        e_next = 0.0 if (done and cfg.zero_terminal_potential) else cfg.potential(s_next)
        r_hat = cfg.gamma * e_next - cfg.potential(s)
    else:
        r_hat = -((cfg.potential(cfg.goal_state) - cfg.potential(s_next)) ** 2)
    return (1.0 - cfg.beta) * r + cfg.beta * r_hat


def count_bonus(z_row, beta: float) -> float:
    """beta * log ||row||_2."""
    z_row = np.asarray(z_row, dtype=float)
    if not np.all(np.isfinite(z_row)):
        raise ValueError("DR row has non-finite entries")
    norm = float(np.linalg.norm(z_row))
    if norm == 0:
        raise ValueError("zero DR row; the log-norm bonus is undefined")
    return beta * math.log(norm)


# ---------------------------------------------------------------------------
# control loop


@dataclass
class AgentSpec:
    algorithm: str = "q_learning"
    alpha: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.05
    q_init: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")


@dataclass
class BonusConfig:
    """DR count bonus; ``dr_step`` is the step size of the state-action DR learner."""

    beta: float = 100.0
    dr_step: float = 0.5
    lam: float = 1.0
    reward_range: tuple = (-1.0, 0.0)


@dataclass
class RunResult:
    seed: int
    returns: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    total_reward: float = 0.0
    visit_counts: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = field(default=None, repr=False)

    def rows(self):
        for i, (ret, n) in enumerate(zip(self.returns, self.lengths)):
            yield {"seed": self.seed, "episode": i, "return": ret, "steps": n}


def _terminal_reward(mdp: TabularMdp, s: int) -> float:
    # reward collected on arrival; state-action rewards have no arrival reward
    return mdp.reward(s) if mdp.has_state_rewards else 0.0


def run_control_loop(
    mdp: TabularMdp,
    agent: AgentSpec,
    shaping: Optional[ShapingConfig] = None,
    bonus: Optional[BonusConfig] = None,
    episodes: Optional[int] = None,
    steps: Optional[int] = None,
    seed: int = 0,
    max_episode_steps: int = 500,
    q_table: Optional[np.ndarray] = None,
) -> RunResult:
    """Train a tabular agent; returns are always measured on the environment reward.

    Give ``episodes`` for episodic runs (each capped at ``max_episode_steps``)
    or ``steps`` for a single continuing run; in the continuing case the
    total reward is the reported metric.
    """
    if shaping is not None and shaping.mode != "none" and bonus is not None:
        raise ValueError("shaping and an exploration bonus cannot be combined")
    if (episodes is None) == (steps is None):
        raise ValueError("give exactly one of episodes / steps")
    rng = np.random.default_rng(seed)
    n_s, n_a = mdp.n_states, mdp.n_actions
    q = np.full((n_s, n_a), float(agent.q_init)) if q_table is None else np.array(q_table, float)
    visits = np.zeros(n_s, dtype=np.int64)
    result = RunResult(seed=seed)

    zbar = None
    if bonus is not None:
        scaled = rescale_rewards(mdp, *bonus.reward_range).sa_rewards()
        zbar = np.eye(n_s * n_a)
        sa_terminal = np.repeat(mdp.terminal, n_a)

    def train_reward(sample: TransitionSample) -> float:
        if bonus is not None:
            i = sample.s * n_a + sample.a
            b = count_bonus(zbar[i], bonus.beta)
            a_d = int(rng.integers(n_a))
            dr_sa_td_update(
                zbar, sample.s, sample.a, float(scaled[sample.s, sample.a]), sample.s_next,
                a_d, bonus.dr_step, bonus.lam, n_a, terminal=bool(sa_terminal[i]),
            )
            return sample.r + b
        if shaping is not None:
            return shaping_reward(shaping, sample.s, sample.s_next, sample.r, sample.done)
        return sample.r

    def run_segment(limit: int) -> tuple[float, int]:
        s = sample_start(mdp, rng)
        visits[s] += 1
        a = epsilon_greedy(q[s], agent.epsilon, rng)
        ret, t = 0.0, 0
        while t < limit:
            sample = sample_step(mdp, s, a, rng)
            t += 1
            ret += sample.r
            r_train = train_reward(sample)
            visits[sample.s_next] += 1
            r_term = _terminal_reward(mdp, sample.s_next) if sample.done else 0.0
            if sample.done:
                ret += r_term
            if agent.algorithm == "q_learning":
                q_learning_update(q, sample, agent.alpha, agent.gamma, r_term, reward=r_train)
                a_next = None if sample.done else epsilon_greedy(q[sample.s_next], agent.epsilon, rng)
            else:
                a_next = None if sample.done else epsilon_greedy(q[sample.s_next], agent.epsilon, rng)
                sarsa_update(
                    q, sample.s, sample.a, r_train, sample.s_next, a_next if a_next is not None else 0,
                    sample.done, agent.alpha, agent.gamma, r_term,
                )
            if sample.done:
                break
            s, a = sample.s_next, a_next
        return ret, t

    if episodes is not None:
        for _ in range(episodes):
            ret, t = run_segment(max_episode_steps)
            result.returns.append(ret)
            result.lengths.append(t)
            result.total_reward += ret
    else:
        remaining = steps
        while remaining > 0:
            ret, t = run_segment(remaining)
            remaining -= t
            result.total_reward += ret
            result.returns.append(ret)
            result.lengths.append(t)
    result.visit_counts = visits
    result.q = q
    return result


def greedy_rollout(mdp: TabularMdp, q_or_policy, max_steps: int = 500, start: Optional[int] = None) -> float:
    """Undiscounted return of the greedy policy (lowest index on ties) from ``start``.

    Accepts a Q-table or a one-hot policy; dynamics must be deterministic or
    the most likely successor is followed.
    """
    table = np.asarray(q_or_policy, dtype=float)
    s = int(np.argmax(mdp.start)) if start is None else start
    ret = 0.0
    for _ in range(max_steps):
        ret += mdp.reward(s) if mdp.has_state_rewards else 0.0
        if mdp.terminal[s]:
            return ret
        a = int(np.argmax(table[s]))
        if not mdp.has_state_rewards:
            ret += mdp.reward(s, a)
        s = int(np.argmax(mdp.transition[s, a]))
    return ret


def q_value_iteration(
    mdp: TabularMdp, gamma: float = 1.0, tol: float = 1e-10, max_iters: int = 100_000
) -> np.ndarray:
    """Optimal Q under the occupancy reward convention, by synchronous sweeps.

    Terminal states contribute their reward on arrival and end the episode.
    With ``gamma = 1`` every non-terminal state must reach a terminal state.
    """
    r = mdp.sa_rewards()
    v_term = np.where(mdp.terminal, r[:, 0] if mdp.has_state_rewards else 0.0, 0.0)
    q = np.zeros_like(r)
    for _ in range(max_iters):
        v = np.where(mdp.terminal, v_term, q.max(axis=1))
        q_new = r + gamma * np.einsum("sat,t->sa", mdp.transition, v)
        q_new[mdp.terminal] = v_term[mdp.terminal, None]
        if np.max(np.abs(q_new - q)) < tol:
            return q_new
        q = q_new
    raise ArithmeticError("value iteration did not converge")


def config_dict(obj) -> dict:
    return asdict(obj)
