"""Config-driven experiment runner: seed fan-out, sweeps, summaries and manifests.

A config is a TOML file::

    experiment = "shaping"          # shaping | rod | count | transfer | repr_analysis
    seeds = 20
    master_seed = 0
    output = "runs/shaping_grid_task"

    [environment]
    name = "grid_task"
    variant = "standard"

    [method]                        # fixed method parameters
    mode = "dr_pot"
    episodes = 50

    [grid]                          # optional: candidate values per method key
    alpha = [0.1, 0.3, 1.0]
    beta = [0.25, 0.5, 0.75, 1.0]

    [sweep]                         # optional: seed counts for the two sweep phases
    n1 = 20
    n2 = 50

Every run writes ``runs/cell<c>_seed<i>/raw.csv`` with long-format rows
(cell, seed_index, seed, metric, x, value); ``summary.csv`` and
``scores.csv`` are computed from those files alone.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .agents import (
    ALGORITHMS,
    SHAPING_MODES,
    AgentSpec,
    BonusConfig,
    ShapingConfig,
    greedy_rollout,
    q_value_iteration,
    run_control_loop,
)
from .mdp import (
    ConfigurationError,
    TabularMdp,
    make_environment,
    reachable_states,
    sa_terminal_mask,
    sa_transition_matrix,
    sample_start,
    sample_step,
    transition_matrix,
    uniform_policy,
)
from .options import ROD_KINDS, RodConfig, run_rod
from .planning import (
    DefaultFeatureTable,
    SuccessorFeatureTable,
    default_features_closed,
    df_td_update_index,
    df_transfer_policy,
    sf_gpi_policy,
    sf_reward_weights,
    sf_td_update,
)
from .report import emit_heatmap, read_csv, summarize_ci, write_csv
from .representations import (
    dr_closed_form,
    save_representation,
    sr_closed_form,
    top_log_eigenvector,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

RAW_HEADER = ["cell", "seed_index", "seed", "metric", "x", "value"]
WORKERS_ENV = "PROTOREP_WORKERS"


# ---------------------------------------------------------------------------
# experiment registry


@dataclass(frozen=True)
class ExperimentKind:
    name: str
    defaults: dict
    choices: dict
    x_axis: str
    # per-run scalar metrics used for best-cell selection, compared in order
    score_metrics: tuple
    run: Callable
    prepare: Callable


def _shaping_defaults():
    return {
        "mode": "dr_pot", "alpha": 0.1, "beta": 0.5, "gamma": 0.99, "epsilon": 0.05,
        "lam": 1.3, "sr_gamma": 0.99, "episodes": 50, "max_episode_steps": 500,
        "q_init": 0.0, "final_fraction": 0.1,
    }


def _rod_defaults():
    d = {k: getattr(RodConfig(), k) for k in RodConfig.__dataclass_fields__}
    return d


def _count_defaults():
    return {
        "algorithm": "sarsa", "alpha": 0.25, "gamma": 0.95, "epsilon": 0.01, "q_init": 0.0,
        "steps": 5000, "bonus": True, "beta": 100.0, "dr_step": 0.5, "lam": 1.0,
    }


def _transfer_defaults():
    return {
        "lam": 1.3, "n_configs": 50, "reward_sd": 50.0, "source_policies": [1, 8],
        "sf_gamma": 0.99, "learn": "td", "td_steps": 100_000, "td_alpha": 0.1,
        "q_steps": 100_000, "behavior_epsilon": 0.05, "eval_cap": 500,
    }


def _repr_defaults():
    return {"lam": 1.3, "gamma": 0.99}


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    experiment: str
    env_name: str
    env_variant: str = "standard"
    method: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    seeds: int = 1
    master_seed: int = 0
    output: Optional[str] = None
    n1: Optional[int] = None
    n2: Optional[int] = None
    raw_text: str = ""
    source: Optional[str] = None

    @property
    def kind(self) -> ExperimentKind:
        return EXPERIMENTS[self.experiment]

    def cells(self) -> list[dict]:
        """Full parameter dicts, one per grid cell (row-major over sorted grid keys)."""
        keys = sorted(self.grid)
        base = {**self.kind.defaults, **self.method}
        if not keys:
            return [base]
        return [{**base, **dict(zip(keys, combo))} for combo in itertools.product(*(self.grid[k] for k in keys))]


_TOP_KEYS = {"experiment", "seeds", "master_seed", "output", "environment", "method", "grid", "sweep"}
_SWEEP_DEFAULTS = {"shaping": (20, 50), "rod": (10, 10), "count": (10, 100), "transfer": (10, 10)}


def _type_ok(value, default) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list) and all(_type_ok(v, default[0]) for v in value)
    return True


def _check_value(exp: ExperimentKind, key: str, value, path: str):
    default = exp.defaults[key]
    if not _type_ok(value, default):
        raise ConfigurationError(
            f"{path}: expected {type(default).__name__}, got {type(value).__name__} ({value!r})"
        )
    choices = exp.choices.get(key)
    if choices is not None and value not in choices:
        raise ConfigurationError(f"{path}: {value!r} is not one of {list(choices)}")


def parse_config(text: str, source: Optional[str] = None) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"invalid TOML: {exc}") from exc
    for key in data:
        if key not in _TOP_KEYS:
            raise ConfigurationError(f"unknown key {key!r}")
    if "experiment" not in data:
        raise ConfigurationError("missing key 'experiment'")
    name = data["experiment"]
    if name not in EXPERIMENTS:
        raise ConfigurationError(f"experiment: {name!r} is not one of {sorted(EXPERIMENTS)}")
    exp = EXPERIMENTS[name]

    env = data.get("environment")
    if not isinstance(env, dict) or "name" not in env:
        raise ConfigurationError("environment.name is required")
    for key in env:
        if key not in ("name", "variant"):
            raise ConfigurationError(f"unknown key 'environment.{key}'")
    for key in ("name", "variant"):
        if key in env and not isinstance(env[key], str):
            raise ConfigurationError(f"environment.{key}: expected str")

    method = data.get("method", {})
    if not isinstance(method, dict):
        raise ConfigurationError("method: expected a table")
    for key, value in method.items():
        if key not in exp.defaults:
            raise ConfigurationError(f"unknown key 'method.{key}' for experiment {name}")
        _check_value(exp, key, value, f"method.{key}")

    grid = data.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigurationError("grid: expected a table")
    for key, values in grid.items():
        if key not in exp.defaults:
            raise ConfigurationError(f"unknown key 'grid.{key}' for experiment {name}")
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"grid.{key}: expected a non-empty list")
        for i, value in enumerate(values):
            _check_value(exp, key, value, f"grid.{key}[{i}]")

    sweep = data.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigurationError("sweep: expected a table")
    for key, value in sweep.items():
        if key not in ("n1", "n2"):
            raise ConfigurationError(f"unknown key 'sweep.{key}'")
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigurationError(f"sweep.{key}: expected a positive integer")

    for key in ("seeds", "master_seed"):
        value = data.get(key, 1 if key == "seeds" else 0)
        if not isinstance(value, int) or isinstance(value, bool) or value < (1 if key == "seeds" else 0):
            raise ConfigurationError(f"{key}: expected a {'positive' if key == 'seeds' else 'non-negative'} integer")
    output = data.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigurationError("output: expected str")

    cfg = ExperimentConfig(
        experiment=name,
        env_name=env["name"],
        env_variant=env.get("variant", "standard"),
        method=dict(method),
        grid={k: list(v) for k, v in grid.items()},
        seeds=data.get("seeds", 1),
        master_seed=data.get("master_seed", 0),
        output=output,
        n1=sweep.get("n1"),
        n2=sweep.get("n2"),
        raw_text=text,
        source=source,
    )
    mdp = make_environment(cfg.env_name, cfg.env_variant)
    for params in cfg.cells():
        exp.prepare(mdp, params, check_only=True)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


# ---------------------------------------------------------------------------
# seeds and workers


def derive_seed(master: int, cell: int, index: int) -> int:
    """Run seed from (master seed, cell index, seed index)."""
    return int(np.random.SeedSequence([master, cell, index]).generate_state(1, dtype=np.uint32)[0])


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


# ---------------------------------------------------------------------------
# shaping


def _grid_required(mdp: TabularMdp, what: str):
    if mdp.grid is None or not mdp.has_state_rewards:
        raise ConfigurationError(f"{what} needs a grid environment, got {mdp.name or 'a chain'}")


@lru_cache(maxsize=32)
def _eigvec(env_name: str, variant: str, kind: str, param: float):
    mdp = make_environment(env_name, variant)
    p = transition_matrix(mdp, uniform_policy(mdp))
    if kind == "DR":
        rep = dr_closed_form(mdp.reward_state, p, param)
    else:
        rep = sr_closed_form(p, param)
    return top_log_eigenvector(rep)


def _prepare_shaping(mdp, params, check_only=False):
    _grid_required(mdp, "shaping")
    if not mdp.terminal.any():
        raise ConfigurationError("shaping needs an environment with a goal state")
    ShapingConfig(params["mode"], np.zeros(1) if params["mode"] != "none" else None,
                  params["beta"], params["gamma"], goal_state=0)
    AgentSpec("q_learning", params["alpha"], params["gamma"], params["epsilon"], params["q_init"])
    if not 0 < params["final_fraction"] <= 1:
        raise ConfigurationError("method.final_fraction must lie in (0, 1]")


def _run_shaping(mdp, params, seed, ctx):
    mode = params["mode"]
    eig = None
    if mode == "dr_pot":
        eig = _eigvec(ctx["env_name"], ctx["env_variant"], "DR", params["lam"])
    elif mode in ("sr_pot", "sr_prior"):
        eig = _eigvec(ctx["env_name"], ctx["env_variant"], "SR", params["sr_gamma"])
    goal = int(np.flatnonzero(mdp.terminal)[0])
    shaping = ShapingConfig(mode, eig, params["beta"], params["gamma"], goal_state=goal)
    agent = AgentSpec("q_learning", params["alpha"], params["gamma"], params["epsilon"], params["q_init"])
    res = run_control_loop(
        mdp, agent, shaping=shaping, episodes=params["episodes"], seed=seed,
        max_episode_steps=params["max_episode_steps"],
    )
    rows = [("return", i, r) for i, r in enumerate(res.returns)]
    rows += [("steps", i, n) for i, n in enumerate(res.lengths)]
    k = max(1, int(round(params["episodes"] * params["final_fraction"])))
    rows.append(("final_return", 0, float(np.mean(res.returns[-k:]))))
    return rows, {}


def _shaping_artifacts(cfg: ExperimentConfig, mdp, out: Path):
    """Closed-form eigenvectors used for shaping, written once per invocation."""
    needed = set()
    for params in cfg.cells():
        if params["mode"] == "dr_pot":
            needed.add(("DR", params["lam"]))
        elif params["mode"] in ("sr_pot", "sr_prior"):
            needed.add(("SR", params["sr_gamma"]))
    for kind, param in sorted(needed):
        eig = _eigvec(cfg.env_name, cfg.env_variant, kind, param)
        emit_heatmap(eig.top_eigenvector, mdp.grid, out / "representations" / f"{kind}_{param}_eigvec")


# ---------------------------------------------------------------------------
# rod


def _rod_config(params) -> RodConfig:
    return RodConfig(**{k: params[k] for k in RodConfig.__dataclass_fields__})


def _prepare_rod(mdp, params, check_only=False):
    _grid_required(mdp, "rod")
    if mdp.terminal.any():
        raise ConfigurationError("rod runs on terminal-free variants (use variant 'no_terminals')")
    try:
        _rod_config(params)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def _run_rod(mdp, params, seed, ctx):
    cfg = _rod_config(params)
    n_reach = int(reachable_states(mdp).sum())
    res = run_rod(mdp, cfg, seed, n_reachable=n_reach)
    rows = [("visit_pct", i + 1, v) for i, v in enumerate(res.visit_pct)]
    rows += [("mean_reward", i + 1, v) for i, v in enumerate(res.mean_reward)]
    rows += [("n_options", i + 1, v) for i, v in enumerate(res.n_options)]
    rows += [("eval_return", i + 1, v) for i, v in enumerate(res.eval_returns)]
    rows.append(("final_visit_pct", 0, float(res.visit_pct[-1])))
    rows.append(("final_mean_reward", 0, float(res.mean_reward[-1])))
    rows.append(("option_events", 0, res.option_events))
    return rows, {"counts": res.counts}


# ---------------------------------------------------------------------------
# count-based exploration


def _prepare_count(mdp, params, check_only=False):
    AgentSpec(params["algorithm"], params["alpha"], params["gamma"], params["epsilon"], params["q_init"])
    if params["steps"] < 1:
        raise ConfigurationError("method.steps must be positive")


def _run_count(mdp, params, seed, ctx):
    agent = AgentSpec(params["algorithm"], params["alpha"], params["gamma"], params["epsilon"], params["q_init"])
    bonus = BonusConfig(params["beta"], params["dr_step"], params["lam"]) if params["bonus"] else None
    res = run_control_loop(mdp, agent, bonus=bonus, steps=params["steps"], seed=seed)
    return [("total_return", 0, res.total_reward)], {"counts": res.visit_counts}


# ---------------------------------------------------------------------------
# transfer


def _transfer_features(mdp: TabularMdp):
    """Terminal one-hot features for DFs and (empty, low, terminals...) features for SFs."""
    t_states = np.flatnonzero(mdp.terminal)
    grid = mdp.grid
    n = mdp.n_states
    sf = np.zeros((n, 2 + len(t_states)))
    for s in range(n):
        if mdp.terminal[s]:
            sf[s, 2 + int(np.searchsorted(t_states, s))] = 1
        elif grid.char_at(s) == "L":
            sf[s, 1] = 1
        else:
            sf[s, 0] = 1
    return t_states, sf


def _prepare_transfer(mdp, params, check_only=False):
    _grid_required(mdp, "transfer")
    if not mdp.terminal.any():
        raise ConfigurationError("transfer needs terminal states")
    if not params["source_policies"] or min(params["source_policies"]) < 1:
        raise ConfigurationError("method.source_policies must list positive policy counts")
    if params["n_configs"] < 1:
        raise ConfigurationError("method.n_configs must be positive")


def _with_terminal_rewards(mdp: TabularMdp, t_states, r_t) -> TabularMdp:
    r = np.array(mdp.reward_state, dtype=float)
    r[t_states] = r_t
    return mdp.with_rewards(reward_state=r)


def _df_table_closed(mdp: TabularMdp, t_states, lam: float) -> DefaultFeatureTable:
    n_a = mdp.n_actions
    pi = uniform_policy(mdp)
    pbar = sa_transition_matrix(mdp, pi)
    term = sa_terminal_mask(mdp)
    n_idx, t_idx = np.flatnonzero(~term), np.flatnonzero(term)
    r_sa = np.repeat(mdp.reward_state, n_a)
    # Z_NN (P_NT Phi) via a dense solve of (exp(-r/lambda) I - P_NN) X = P_NT Phi
    phi = np.zeros((len(t_idx), len(t_states)))
    for row, i in enumerate(t_idx):
        phi[row, int(np.searchsorted(t_states, i // n_a))] = 1.0
    a_mat = np.diag(np.exp(-r_sa[n_idx] / lam)) - pbar[np.ix_(n_idx, n_idx)]
    zeta_n = np.linalg.solve(a_mat, pbar[np.ix_(n_idx, t_idx)] @ phi)
    zeta = np.zeros((len(term), len(t_states)))
    zeta[n_idx] = zeta_n
    zeta[t_idx] = phi
    nt = np.asarray(mdp.reward_state, dtype=float)[~mdp.terminal]
    return DefaultFeatureTable(zeta, phi, term, nt, "pair")


def _behavior_stream(mdp: TabularMdp, steps: int, rng, q=None, epsilon: float = 0.0, cap: int = 500):
    """Transitions from the uniform policy (``q`` None) or epsilon-greedy over ``q``.

    Episodes restart from the start distribution at terminals and after ``cap`` steps.
    """
    n_a = mdp.n_actions
    s = sample_start(mdp, rng)
    out = []
    t_ep = 0
    for _ in range(steps):
        if q is None or rng.random() < epsilon:
            a = int(rng.integers(n_a))
        else:
            a = int(np.argmax(q[s]))
        t = sample_step(mdp, s, a, rng)
        out.append(t)
        t_ep += 1
        if t.done or t_ep >= cap:
            s, t_ep = sample_start(mdp, rng), 0
        else:
            s = t.s_next
    return out


def _df_table_td(mdp: TabularMdp, t_states, lam, stream, alpha, rng) -> DefaultFeatureTable:
    n_a = mdp.n_actions
    term = sa_terminal_mask(mdp)
    d = len(t_states)
    zeta = np.zeros((len(term), d))
    t_idx = np.flatnonzero(term)
    phi = np.zeros((len(t_idx), d))
    for row, i in enumerate(t_idx):
        phi[row, int(np.searchsorted(t_states, i // n_a))] = 1.0
    zeta[t_idx] = phi
    nt = np.asarray(mdp.reward_state, dtype=float)[~mdp.terminal]
    table = DefaultFeatureTable(zeta, phi, term, nt, "pair")
    for t in stream:
        a_next = int(rng.integers(n_a))
        df_td_update_index(table, t.s * n_a + t.a, t.r, t.s_next * n_a + a_next, alpha, lam)
    return table


def _sf_closed(mdp: TabularMdp, policy: np.ndarray, feats: np.ndarray, gamma: float) -> np.ndarray:
    """psi(s,a) = phi(s) + gamma sum_s' p(s'|s,a) [phi(s') if terminal else psi(s', pi(s'))]."""
    n_s, n_a = mdp.n_states, mdp.n_actions
    act = np.argmax(policy, axis=1)
    p = mdp.transition.reshape(n_s * n_a, n_s)
    nt = ~mdp.terminal
    m = np.zeros((n_s * n_a, n_s * n_a))
    cols = np.arange(n_s) * n_a + act
    m[:, cols[nt]] = gamma * p[:, nt]
    const = np.repeat(feats, n_a, axis=0) + gamma * p[:, ~nt] @ feats[~nt]
    psi = np.linalg.solve(np.eye(n_s * n_a) - m, const)
    psi = psi.reshape(n_s, n_a, -1)
    psi[mdp.terminal] = feats[mdp.terminal][:, None, :]
    return psi


def _sf_td(mdp, policy, feats, gamma, stream, alpha) -> np.ndarray:
    psi = np.zeros((mdp.n_states, mdp.n_actions, feats.shape[1]))
    psi[mdp.terminal] = feats[mdp.terminal][:, None, :]
    for t in stream:
        sf_td_update(psi, policy, t, alpha, gamma, feats)
    return psi


def _greedy(q):
    out = np.zeros_like(q)
    out[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return out


def _run_transfer(mdp, params, seed, ctx):
    rng = np.random.default_rng(seed)
    lam, sd, alpha, gamma = params["lam"], params["reward_sd"], params["td_alpha"], params["sf_gamma"]
    t_states, feats = _transfer_features(mdp)
    k_max = max(params["source_policies"])
    td = params["learn"] == "td"

    if td:
        stream = _behavior_stream(mdp, params["td_steps"], rng)
        table = _df_table_td(mdp, t_states, lam, stream, alpha, rng)
    else:
        table = _df_table_closed(mdp, t_states, lam)

    # source policies: optimal for randomly drawn terminal rewards
    psis = []
    for k in range(k_max):
        src = _with_terminal_rewards(mdp, t_states, rng.normal(0.0, sd, len(t_states)))
        if td:
            agent = AgentSpec("q_learning", alpha, gamma, params["behavior_epsilon"])
            q = run_control_loop(src, agent, steps=params["q_steps"], seed=int(rng.integers(2**31))).q
            pol = _greedy(q)
            walk = _behavior_stream(src, params["td_steps"], rng, q, params["behavior_epsilon"])
            psis.append(_sf_td(mdp, pol, feats, gamma, walk, alpha))
        else:
            pol = _greedy(q_value_iteration(src, gamma=gamma))
            psis.append(_sf_closed(mdp, pol, feats, gamma))

    rows = []
    totals: dict = {}
    base_r = np.asarray(mdp.reward_state, dtype=float)
    cap = params["eval_cap"]
    for j in range(params["n_configs"]):
        r_t = rng.normal(0.0, sd, len(t_states))
        test = _with_terminal_rewards(mdp, t_states, r_t)
        results = {"oracle": greedy_rollout(test, q_value_iteration(test, gamma=1.0), cap)}
        pol = df_transfer_policy(table, r_t, lam, mdp.n_actions, nonterminal_rewards=base_r[~mdp.terminal])
        results["DF"] = greedy_rollout(test, pol, cap)
        w = sf_reward_weights(feats, test.reward_state)
        for k in params["source_policies"]:
            sft = SuccessorFeatureTable(np.stack(psis[:k]), list(range(k)))
            results[f"SF{k}"] = greedy_rollout(test, sf_gpi_policy(sft, w), cap)
        for name, value in results.items():
            rows.append((f"return_{name}", j, value))
            totals[name] = totals.get(name, 0.0) + value
    for name, value in totals.items():
        rows.append((f"cumulative_{name}", 0, value))
    return rows, {}


# ---------------------------------------------------------------------------
# representation analysis


def _prepare_repr(mdp, params, check_only=False):
    _grid_required(mdp, "repr_analysis")
    if not 0 <= params["gamma"] < 1 or params["lam"] <= 0:
        raise ConfigurationError("need gamma in [0, 1) and lam > 0")


def _run_repr(mdp, params, seed, ctx):
    rows = []
    for kind, param in (("SR", params["gamma"]), ("DR", params["lam"])):
        eig = _eigvec(ctx["env_name"], ctx["env_variant"], kind, param)
        rows += [(f"eigvec_{kind}", s, v) for s, v in enumerate(eig.top_eigenvector)]
        rows.append((f"top_eigenvalue_{kind}", 0, eig.top_eigenvalue))
    return rows, {}


def _repr_artifacts(cfg: ExperimentConfig, mdp, out: Path):
    p = transition_matrix(mdp, uniform_policy(mdp))
    for params in cfg.cells():
        tag_sr, tag_dr = f"SR_{params['gamma']}", f"DR_{params['lam']}"
        sr = sr_closed_form(p, params["gamma"])
        dr = dr_closed_form(mdp.reward_state, p, params["lam"])
        save_representation(sr, out / "representations" / tag_sr)
        save_representation(dr, out / "representations" / tag_dr, log_domain=True)
        for kind, param, tag in (("SR", params["gamma"], tag_sr), ("DR", params["lam"], tag_dr)):
            eig = _eigvec(cfg.env_name, cfg.env_variant, kind, param)
            emit_heatmap(eig.top_eigenvector, mdp.grid, out / "representations" / f"{tag}_eigvec")


EXPERIMENTS = {
    "shaping": ExperimentKind(
        "shaping", _shaping_defaults(), {"mode": SHAPING_MODES}, "episode",
        ("final_return",), _run_shaping, _prepare_shaping,
    ),
    "rod": ExperimentKind(
        "rod", _rod_defaults(), {"kind": ROD_KINDS}, "iteration",
        ("final_visit_pct", "final_mean_reward"), _run_rod, _prepare_rod,
    ),
    "count": ExperimentKind(
        "count", _count_defaults(), {"algorithm": ALGORITHMS}, "run",
        ("total_return",), _run_count, _prepare_count,
    ),
    "transfer": ExperimentKind(
        "transfer", _transfer_defaults(), {"learn": ("closed", "td")}, "configuration",
        ("cumulative_DF",), _run_transfer, _prepare_transfer,
    ),
    "repr_analysis": ExperimentKind(
        "repr_analysis", _repr_defaults(), {}, "state",
        (), _run_repr, _prepare_repr,
    ),
}
_ARTIFACTS = {"shaping": _shaping_artifacts, "repr_analysis": _repr_artifacts}


# ---------------------------------------------------------------------------
# execution


@dataclass
class RunSpec:
    cell: int
    seed_index: int
    seed: int

    @property
    def dirname(self) -> str:
        return f"cell{self.cell:03d}_seed{self.seed_index:03d}"


def _execute(cfg: ExperimentConfig, mdp, cells: list, spec: RunSpec, out: Path):
    exp = cfg.kind
    ctx = {"env_name": cfg.env_name, "env_variant": cfg.env_variant}
    rows, extras = exp.run(mdp, cells[spec.cell], spec.seed, ctx)
    run_dir = out / "runs" / spec.dirname
    write_csv(
        run_dir / "raw.csv", RAW_HEADER,
        ((spec.cell, spec.seed_index, spec.seed, m, x, v) for m, x, v in rows),
    )
    counts = extras.get("counts")
    if counts is not None:
        if mdp.grid is not None:
            emit_heatmap(np.asarray(counts, dtype=float), mdp.grid, run_dir / "counts")
        else:
            write_csv(run_dir / "counts.csv", ["state", "count"], enumerate(counts))


def run_experiment(
    cfg: ExperimentConfig,
    out,
    seed_indices: Optional[list] = None,
    cells: Optional[list] = None,
    cell_ids: Optional[list] = None,
) -> Path:
    """Run every (cell, seed) pair and write raw CSVs, summaries and a manifest.

    ``cells``/``cell_ids`` restrict execution to a subset of grid cells
    while keeping their original indices (used by the sweep's second phase).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    mdp = make_environment(cfg.env_name, cfg.env_variant)
    all_cells = cfg.cells()
    ids = list(range(len(all_cells))) if cell_ids is None else list(cell_ids)
    seed_indices = list(range(cfg.seeds)) if seed_indices is None else list(seed_indices)

    (out / "config.toml").write_text(cfg.raw_text)
    cell_params = {str(c): all_cells[c] for c in ids}
    meta = {
        "experiment": cfg.experiment,
        "environment": {"name": cfg.env_name, "variant": cfg.env_variant},
        "x_axis": cfg.kind.x_axis,
        "score_metrics": list(cfg.kind.score_metrics),
        "cells": cell_params,
    }
    (out / "cells.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    artifacts = _ARTIFACTS.get(cfg.experiment)
    if artifacts is not None:
        artifacts(cfg, mdp, out)

    specs = [RunSpec(c, i, derive_seed(cfg.master_seed, c, i)) for c in ids for i in seed_indices]
    runs_dir = out / "runs"
    if runs_dir.exists():
        shutil.rmtree(runs_dir)
    workers = worker_count()
    if workers == 1:
        for spec in specs:
            _execute(cfg, mdp, all_cells, spec, out)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for fut in [pool.submit(_execute, cfg, mdp, all_cells, spec, out) for spec in specs]:
                fut.result()
    summarize_dir(out, runs=[{"cell": s.cell, "seed_index": s.seed_index, "seed": s.seed, "dir": f"runs/{s.dirname}"}
                             for s in specs], master_seed=cfg.master_seed)
    return out


# ---------------------------------------------------------------------------
# summaries


def _load_raw(out: Path) -> list[dict]:
    rows = []
    for path in sorted((out / "runs").glob("*/raw.csv")):
        rows.extend(read_csv(path))
    if not rows:
        raise ConfigurationError(f"no raw CSVs under {out / 'runs'}")
    return rows


def summarize_dir(out, runs: Optional[list] = None, master_seed: Optional[int] = None) -> dict:
    """Recompute summary.csv and scores.csv from raw CSVs; refresh the manifest."""
    out = Path(out)
    meta = json.loads((out / "cells.json").read_text())
    rows = _load_raw(out)
    series: dict = {}
    for r in rows:
        key = (int(r["cell"]), r["metric"], float(r["x"]))
        series.setdefault(key, {})[int(r["seed_index"])] = float(r["value"])

    summary_rows = []
    for (cell, metric, x) in sorted(series):
        vals = [series[(cell, metric, x)][i] for i in sorted(series[(cell, metric, x)])]
        ci = summarize_ci(vals)
        summary_rows.append(
            (cell, metric, _fmt_x(x), ci.n, float(ci.mean[0]), float(ci.half_width[0]), ci.ci_available)
        )
    write_csv(out / "summary.csv", ["cell", "metric", "x", "n", "mean", "ci_half_width", "ci_available"],
              summary_rows)

    scores = cell_scores(summary_rows, meta["score_metrics"])
    score_rows = []
    for cell, entry in sorted(scores.items()):
        params = meta["cells"].get(str(cell), {})
        row = [cell, json.dumps(params, sort_keys=True), entry["n"]]
        for m in meta["score_metrics"]:
            row += [entry[m][0], entry[m][1]]
        score_rows.append(row)
    header = ["cell", "params", "n"]
    for m in meta["score_metrics"]:
        header += [f"{m}_mean", f"{m}_ci_half_width"]
    write_csv(out / "scores.csv", header, score_rows)

    if runs is None:
        old = out / "manifest.json"
        prev = json.loads(old.read_text()) if old.exists() else {}
        runs = prev.get("runs", [])
        master_seed = prev.get("master_seed", master_seed)
    write_manifest(out, runs, master_seed, meta)
    return scores


def _fmt_x(x: float):
    return int(x) if float(x).is_integer() else x


def cell_scores(summary_rows, score_metrics) -> dict:
    out: dict = {}
    for cell, metric, x, n, mean, half, _ in summary_rows:
        if metric in score_metrics:
            entry = out.setdefault(cell, {"n": n})
            entry[metric] = (mean, half)
    return out


def best_cell(scores: dict, score_metrics) -> int:
    """Highest mean on the first score metric; later metrics break ties; then lowest cell."""
    if not scores:
        raise ConfigurationError("no scored cells to choose from")
    return min(scores, key=lambda c: tuple(-scores[c][m][0] for m in score_metrics) + (c,))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, runs, master_seed, meta) -> Path:
    files = {
        str(p.relative_to(out)): _sha256(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "manifest.json"
    }
    manifest = {
        "experiment": meta["experiment"],
        "environment": meta["environment"],
        "x_axis": meta["x_axis"],
        "master_seed": master_seed,
        "seed_derivation": "SeedSequence([master_seed, cell, seed_index]) -> first uint32",
        "runs": runs,
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# sweep


def run_sweep(cfg: ExperimentConfig, out, n1: Optional[int] = None, n2: Optional[int] = None) -> dict:
    """Phase 1: n1 seeds per cell. Phase 2: the winner again with n2 fresh seeds."""
    exp = cfg.kind
    if not exp.score_metrics:
        raise ConfigurationError(f"experiment {cfg.experiment} has no score to sweep over")
    d1, d2 = _SWEEP_DEFAULTS[cfg.experiment]
    n1 = n1 or cfg.n1 or d1
    n2 = n2 or cfg.n2 or d2
    cells = cfg.cells()
    if not cells:
        raise ConfigurationError("empty grid")
    out = Path(out)
    run_experiment(cfg, out / "phase1", seed_indices=range(n1))
    scores1 = summarize_dir(out / "phase1")
    winner = best_cell(scores1, exp.score_metrics)
    # fresh seeds continue the index sequence past phase 1
    run_experiment(cfg, out / "phase2", seed_indices=range(n1, n1 + n2), cell_ids=[winner])
    scores2 = summarize_dir(out / "phase2")
    report = {
        "experiment": cfg.experiment,
        "n1": n1,
        "n2": n2,
        "winner": winner,
        "winner_params": cells[winner],
        "phase1": {str(c): {m: list(v[m]) for m in exp.score_metrics} for c, v in sorted(scores1.items())},
        "phase2": {m: list(scores2[winner][m]) for m in exp.score_metrics},
    }
    (out / "best.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "config.toml").write_text(cfg.raw_text)
    return report


def default_output(cfg: ExperimentConfig) -> Path:
    if cfg.output:
        return Path(cfg.output)
    stem = Path(cfg.source).stem if cfg.source else cfg.experiment
    return Path("runs") / stem


def with_seeds(cfg: ExperimentConfig, seeds: int) -> ExperimentConfig:
    return replace(cfg, seeds=seeds)
