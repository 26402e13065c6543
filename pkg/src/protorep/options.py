"""Representation-driven option discovery (RACE with the DR, CEO with the SR, random walk)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .agents import q_learning_update
from .mdp import TabularMdp, TransitionSample, sample_start, sample_step
from .linalg import ConvergenceError
from .representations import EigenSummary, dr_td_update, sr_td_update, top_log_eigenvector

ROD_KINDS = ("RACE", "CEO", "RW")
OPTION_STEP_CAP = 100
# fallback tolerance when RACE power iteration stalls
RACE_LOOSE_TOL = 1e-4


@dataclass
class Dataset:
    """Transitions in collection order."""

    s: list = field(default_factory=list)
    a: list = field(default_factory=list)
    r: list = field(default_factory=list)
    s_next: list = field(default_factory=list)
    done: list = field(default_factory=list)

    def append(self, t: TransitionSample):
        self.s.append(t.s)
        self.a.append(t.a)
        self.r.append(t.r)
        self.s_next.append(t.s_next)
        self.done.append(t.done)

    def extend(self, other: "Dataset"):
        for name in ("s", "a", "r", "s_next", "done"):
            getattr(self, name).extend(getattr(other, name))

    def __len__(self):
        return len(self.s)

    def __getitem__(self, i) -> TransitionSample:
        return TransitionSample(self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i])

    def visited_mask(self, n_states: int) -> np.ndarray:
        mask = np.zeros(n_states, dtype=bool)
        mask[np.asarray(self.s, dtype=int)] = True
        mask[np.asarray(self.s_next, dtype=int)] = True
        return mask


@dataclass
class EigenOption:
    q_int: np.ndarray
    known: np.ndarray
    source_iter: int = 0

    def terminates(self, s: int) -> bool:
        return (not self.known[s]) or bool(np.max(self.q_int[s]) <= 0)

    def action(self, s: int) -> int:
        return int(np.argmax(self.q_int[s]))


def learn_eigenoption(
    dataset: Dataset,
    e,
    n_states: int,
    n_actions: int,
    alpha0: float = 0.1,
    gamma0: float = 0.99,
    sweeps: int = 300,
    source_iter: int = 0,
) -> EigenOption:
    """Offline Q-learning on the intrinsic reward e(s') - e(s).

    Each sweep applies the expected Q-learning update to every distinct
    (s, a) in the data at once, with the successor distribution taken from
    the empirical counts.
    """
    if len(dataset) == 0:
        raise ValueError("cannot learn an option from an empty dataset")
    vec = e.top_eigenvector if isinstance(e, EigenSummary) else np.asarray(e, dtype=float)
    s = np.asarray(dataset.s, dtype=np.int64)
    a = np.asarray(dataset.a, dtype=np.int64)
    s2 = np.asarray(dataset.s_next, dtype=np.int64)
    done = np.asarray(dataset.done, dtype=bool)
    triples, counts = np.unique(np.stack([s * n_actions + a, s2, done]), axis=1, return_counts=True)
    keys, nxt, dn = triples[0], triples[1], triples[2].astype(bool)
    r_i = vec[nxt] - vec[keys // n_actions]
    pair_weight = np.bincount(keys, weights=counts, minlength=n_states * n_actions)
    seen = pair_weight > 0
    q = np.zeros(n_states * n_actions)
    for _ in range(sweeps):
        v = q.reshape(n_states, n_actions).max(axis=1)
        target = r_i + gamma0 * np.where(dn, 0.0, v[nxt])
        mean_t = np.bincount(keys, weights=counts * target, minlength=q.size)
        q[seen] += alpha0 * (mean_t[seen] / pair_weight[seen] - q[seen])
    known = np.zeros(n_states, dtype=bool)
    known[s] = True
    return EigenOption(q.reshape(n_states, n_actions), known, source_iter)


@dataclass
class RodConfig:
    kind: str = "RACE"
    p_option: float = 0.05
    n_learn: int = 10
    alpha: float = 0.1
    n_option: int = 8
    alpha0: float = 0.1
    gamma0: float = 0.99
    n_steps: int = 100
    n_iter: int = 50
    lam: float = 1.3
    gamma: float = 0.99
    option_sweeps: int = 300
    # RACE+Q / CEO+Q: offline sweeps with environment reward after each iteration
    offline_q_sweeps: int = 0
    offline_q_alpha: float = 0.1
    offline_q_gamma: float = 0.99
    eval_cap: int = 500

    def __post_init__(self):
        if self.kind not in ROD_KINDS:
            raise ValueError(f"unknown ROD kind {self.kind!r}")
        if not 0 <= self.p_option <= 1:
            raise ValueError("p_option must lie in [0, 1]")
        if self.n_option < 1 or self.n_steps < 1:
            raise ValueError("n_option and n_steps must be positive")


@dataclass
class RodState:
    mdp: TabularMdp
    rng: np.random.Generator
    rep: Optional[np.ndarray]
    dataset: Dataset = field(default_factory=Dataset)
    options: list = field(default_factory=list)
    occupied: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    iteration: int = 0
    option_events: int = 0
    q_ext: Optional[np.ndarray] = None
    last_eigen: Optional[EigenSummary] = None


def init_rod_state(mdp: TabularMdp, cfg: RodConfig, seed: int) -> RodState:
    n = mdp.n_states
    rep = None if cfg.kind == "RW" else np.eye(n)
    q_ext = np.zeros((n, mdp.n_actions)) if cfg.offline_q_sweeps else None
    return RodState(mdp, np.random.default_rng(seed), rep, q_ext=q_ext)


def _collect(state: RodState, cfg: RodConfig) -> Dataset:
    mdp, rng = state.mdp, state.rng
    curr = Dataset()
    s = sample_start(mdp, rng)

    def step(a: int) -> TransitionSample:
        t = sample_step(mdp, s, a, rng)
        curr.append(t)
        state.occupied.append(t.s)
        state.rewards.append(t.r)
        return t

    for _ in range(cfg.n_steps):
        use_option = bool(state.options) and rng.random() < cfg.p_option
        option = state.options[int(rng.integers(len(state.options)))] if use_option else None
        if option is not None and not option.terminates(s):
            state.option_events += 1
            for _ in range(OPTION_STEP_CAP):
                t = step(option.action(s))
                s = t.s_next
                if t.done or option.terminates(s):
                    break
        else:
            # an option that would stop at once is replaced by a primitive action
            t = step(int(rng.integers(mdp.n_actions)))
            s = t.s_next
        if t.done:
            break
    return curr


def _learn_representation(state: RodState, cfg: RodConfig, curr: Dataset):
    mdp = state.mdp
    for _ in range(cfg.n_learn):
        # backward over the iteration's data
        for i in range(len(curr) - 1, -1, -1):
            t = curr[i]
            if cfg.kind == "RACE":
                if t.done:
                    r_t = mdp.reward(t.s_next) if mdp.has_state_rewards else 0.0
                    dr_td_update(
                        state.rep, TransitionSample(t.s_next, 0, r_t, t.s_next, True),
                        cfg.alpha, cfg.lam, s_terminal=True,
                    )
                dr_td_update(state.rep, t, cfg.alpha, cfg.lam)
            else:
                sr_td_update(state.rep, t, cfg.alpha, cfg.gamma)


def rod_eigenvector(state: RodState, cfg: RodConfig) -> EigenSummary:
    """RACE: log of the DR top eigenvector; CEO: the negated SR top eigenvector.

    With identity initialisation, TD shrinks the DR rows of frequently visited
    states but grows their SR rows, so the negation gives both methods an
    eigenvector that is largest where visitation is lowest.
    """
    visited = state.dataset.visited_mask(state.mdp.n_states)
    if cfg.kind == "RACE":
        try:
            return top_log_eigenvector(state.rep, visited, kind="DR", tol=1e-9)
        except ConvergenceError as exc:
            # near-tied top eigenvalues on a noisy learned DR: the iterate has
            # settled to ~1e-6, which is plenty for e(s') - e(s)
            if exc.gap > RACE_LOOSE_TOL:
                raise ArithmeticError(f"ROD iteration {state.iteration}: {exc}") from exc
        except ArithmeticError as exc:
            raise ArithmeticError(f"ROD iteration {state.iteration}: {exc}") from exc
        try:
            return top_log_eigenvector(state.rep, visited, kind="DR", tol=RACE_LOOSE_TOL)
        except ArithmeticError as exc:
            raise ArithmeticError(f"ROD iteration {state.iteration}: {exc}") from exc
    summary = top_log_eigenvector(state.rep, visited, kind="SR")
    vec = summary.top_eigenvector
    if vec[visited].sum() > 0:
        vec = -vec
    return EigenSummary(summary.top_eigenvalue, vec, False, visited)


def rod_iteration(state: RodState, cfg: RodConfig) -> RodState:
    """One collect / learn / eigenvector / option cycle."""
    curr = _collect(state, cfg)
    if cfg.kind != "RW" and len(curr):
        _learn_representation(state, cfg, curr)
    state.dataset.extend(curr)
    if cfg.kind != "RW" and len(state.dataset):
        e = rod_eigenvector(state, cfg)
        state.last_eigen = e
        option = learn_eigenoption(
            state.dataset, e, state.mdp.n_states, state.mdp.n_actions,
            cfg.alpha0, cfg.gamma0, cfg.option_sweeps, state.iteration,
        )
        state.options.append(option)
        if len(state.options) > cfg.n_option:
            state.options.pop(0)
    if state.q_ext is not None:
        offline_q_learning(
            state.dataset, state.mdp, cfg.offline_q_alpha, cfg.offline_q_gamma,
            cfg.offline_q_sweeps, q=state.q_ext,
        )
    state.iteration += 1
    return state


def offline_q_learning(
    dataset: Dataset,
    mdp: TabularMdp,
    alpha: float,
    gamma: float,
    sweeps: int,
    q_init: float = 0.0,
    q: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Forward sweeps of Q-learning over the stored transitions with their own rewards."""
    if len(dataset) == 0:
        raise ValueError("cannot run offline Q-learning on an empty dataset")
    if q is None:
        q = np.full((mdp.n_states, mdp.n_actions), float(q_init))
    for _ in range(sweeps):
        for i in range(len(dataset)):
            t = dataset[i]
            r_term = mdp.reward(t.s_next) if (t.done and mdp.has_state_rewards) else 0.0
            q_learning_update(q, t, alpha, gamma, r_term)
    return q


@dataclass
class ExplorationMetrics:
    visit_pct: np.ndarray
    mean_reward: np.ndarray
    counts: np.ndarray


def exploration_metrics(occupied, rewards, n_reachable: int, n_states: int, boundaries=None):
    """Cumulative unique-visit percentage and mean per-step reward.

    ``occupied[t]`` is the state the agent was in at step t and ``rewards[t]``
    the reward collected there. Series are sampled at the step counts in
    ``boundaries`` (default: every step).
    """
    occupied = np.asarray(occupied, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=float)
    if occupied.size == 0:
        raise ValueError("empty visit log")
    if occupied.shape != rewards.shape:
        raise ValueError("occupied and rewards must have equal length")
    first = np.zeros(n_states, dtype=bool)
    new = np.zeros(occupied.size)
    for t, s in enumerate(occupied):
        if not first[s]:
            first[s] = True
            new[t] = 1
    unique = np.cumsum(new)
    mean = np.cumsum(rewards) / np.arange(1, rewards.size + 1)
    idx = np.arange(occupied.size) if boundaries is None else np.asarray(boundaries) - 1
    counts = np.bincount(occupied, minlength=n_states)
    return ExplorationMetrics(100.0 * unique[idx] / n_reachable, mean[idx], counts)


@dataclass
class RodResult:
    seed: int
    kind: str
    visit_pct: np.ndarray
    mean_reward: np.ndarray
    counts: np.ndarray
    option_events: int
    n_options: list
    eval_returns: list


def run_rod(mdp: TabularMdp, cfg: RodConfig, seed: int, n_reachable: Optional[int] = None) -> RodResult:
    """Run ``n_iter`` ROD iterations; metrics are reported once per iteration."""
    from .agents import greedy_rollout

    state = init_rod_state(mdp, cfg, seed)
    boundaries, n_options, evals = [], [], []
    eval_mdp = mdp
    for _ in range(cfg.n_iter):
        rod_iteration(state, cfg)
        boundaries.append(len(state.occupied))
        n_options.append(len(state.options))
        if state.q_ext is not None:
            evals.append(greedy_rollout(eval_mdp, state.q_ext, cfg.eval_cap))
    n_reach = mdp.n_states if n_reachable is None else n_reachable
    m = exploration_metrics(state.occupied, state.rewards, n_reach, mdp.n_states, boundaries)
    return RodResult(seed, cfg.kind, m.visit_pct, m.mean_reward, m.counts, state.option_events, n_options, evals)
