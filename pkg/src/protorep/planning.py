"""Values, policies and transferable features computed from proto-representations."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from flint import arb, arb_mat

from .linalg import DEFAULT_BITS, HpMatrix, LogNonNegMatrix, hp_solve, logsumexp, working_precision
from .mdp import TabularMdp, TransitionSample, sa_transition_matrix, transition_matrix, uniform_policy
from .report import with_ext
from .representations import DEFAULT_LAMBDA, ProtoRep

ZMatrix = Union[ProtoRep, HpMatrix, LogNonNegMatrix, np.ndarray]


def _log_of(z: ZMatrix) -> LogNonNegMatrix:
    if isinstance(z, ProtoRep):
        return z.log_matrix()
    if isinstance(z, HpMatrix):
        return z.log_entries()
    if isinstance(z, LogNonNegMatrix):
        return z
    return LogNonNegMatrix.from_dense(z)


def _log_product(z_nn: ZMatrix, p_nt, r_t, lam: float) -> np.ndarray:
    """log(Z_NN P_NT exp(r_T / lambda)), evaluated entirely on logs."""
    logz = _log_of(z_nn).log_entries
    p_nt = np.asarray(p_nt, dtype=float)
    r_t = np.asarray(r_t, dtype=float)
    if logz.shape[1] != p_nt.shape[0] or p_nt.shape[1] != r_t.shape[0]:
        raise ValueError(
            f"shape mismatch: Z_NN {logz.shape}, P_NT {p_nt.shape}, r_T {r_t.shape}"
        )
    with np.errstate(divide="ignore"):
        logp = np.log(p_nt)
    # exit term per non-terminal state, then propagate through Z_NN
    exit_log = logsumexp(logp + (r_t / lam)[None, :], axis=1) if r_t.size else np.full(
        p_nt.shape[0], -np.inf
    )
    return logsumexp(logz + exit_log[None, :], axis=1)


def optimal_values_from_dr(z_nn: ZMatrix, p_nt, r_t, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """v*_N = lambda log(Z_NN P_NT exp(r_T / lambda)).

    States with no path to a terminal state get ``-inf``.
    """
    return lam * _log_product(z_nn, p_nt, r_t, lam)


def optimal_q_from_dr(zbar_nn: ZMatrix, pbar_nt, rbar_t, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """The same product over state-action pairs; returns q*_N."""
    return lam * _log_product(zbar_nn, pbar_nt, rbar_t, lam)


def optimal_policy(q, default_policy, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    """pi*(a|s) proportional to pi_d(a|s) exp(q(s,a) / lambda)."""
    q = np.asarray(q, dtype=float)
    pd = np.asarray(default_policy, dtype=float)
    if q.shape != pd.shape:
        raise ValueError(f"q {q.shape} and default policy {pd.shape} differ in shape")
    with np.errstate(divide="ignore"):
        logits = np.log(pd) + q / lam
    norm = logsumexp(logits, axis=1)
    bad = np.flatnonzero(np.isneginf(norm))
    if len(bad):
        raise ValueError(f"every action at state {bad[0]} has zero weight")
    return np.exp(logits - norm[:, None])


def partition(mdp: TabularMdp, policy=None):
    """(non-terminal ids, terminal ids, P) for the default policy."""
    policy = uniform_policy(mdp) if policy is None else policy
    p = transition_matrix(mdp, policy)
    return np.flatnonzero(~mdp.terminal), np.flatnonzero(mdp.terminal), p


def _sa_partition(mdp: TabularMdp, policy):
    pbar = sa_transition_matrix(mdp, policy)
    term = np.repeat(mdp.terminal, mdp.n_actions)
    return np.flatnonzero(~term), np.flatnonzero(term), pbar


def _hp_exit_solve(r_n, p_nn, b, lam: float, bits: int) -> LogNonNegMatrix:
    """log of [diag(exp(-r_N/lambda)) - P_NN]^-1 b without forming the inverse."""
    n = len(r_n)
    with working_precision(bits):
        a = arb_mat((-p_nn).tolist()) if n else arb_mat(0, 0)
        for i in range(n):
            a[i, i] = arb(float(-r_n[i] / lam)).exp() - arb(float(p_nn[i, i]))
        rhs = arb_mat(n, 1)
        for i in range(n):
            rhs[i, 0] = b[i]
    x = hp_solve(HpMatrix(a, bits), HpMatrix(rhs, bits))
    return x.log_entries()


def _hp_exit_vector(p_nt, r_t, lam: float, bits: int) -> list:
    out = []
    with working_precision(bits):
        exps = [arb(float(r / lam)).exp() for r in r_t]
        for row in p_nt:
            acc = arb(0)
            for p, e in zip(row, exps):
                if p:
                    acc += arb(float(p)) * e
            out.append(acc)
    return out


def solve_optimal_values(
    mdp: TabularMdp, lam: float = DEFAULT_LAMBDA, policy=None, bits: int = DEFAULT_BITS
) -> np.ndarray:
    """Optimal values for every state via one extended-precision linear solve.

    Equal to :func:`optimal_values_from_dr` applied to the closed-form DR but
    solves for the single right-hand side ``P_NT exp(r_T / lambda)`` instead
    of inverting the whole matrix. Terminal states get their own reward.
    """
    if not mdp.has_state_rewards:
        raise ValueError("solve_optimal_values needs state rewards; use solve_optimal_q")
    mdp.check_dr_precondition()
    n_idx, t_idx, p = partition(mdp, policy)
    r = mdp.reward_state
    b = _hp_exit_vector(p[np.ix_(n_idx, t_idx)], r[t_idx], lam, bits)
    v = np.array(r, dtype=float)
    if len(n_idx):
        logx = _hp_exit_solve(r[n_idx], p[np.ix_(n_idx, n_idx)], b, lam, bits)
        v[n_idx] = lam * logx.log_entries[:, 0]
    return v


def solve_optimal_q(
    mdp: TabularMdp, lam: float = DEFAULT_LAMBDA, policy=None, bits: int = DEFAULT_BITS
) -> np.ndarray:
    """Optimal state-action values as an (S, A) table; terminal pairs hold their reward."""
    policy = uniform_policy(mdp) if policy is None else policy
    mdp.check_dr_precondition()
    n_idx, t_idx, pbar = _sa_partition(mdp, policy)
    r = mdp.sa_rewards().reshape(-1)
    b = _hp_exit_vector(pbar[np.ix_(n_idx, t_idx)], r[t_idx], lam, bits)
    q = np.array(r, dtype=float)
    if len(n_idx):
        logx = _hp_exit_solve(r[n_idx], pbar[np.ix_(n_idx, n_idx)], b, lam, bits)
        q[n_idx] = lam * logx.log_entries[:, 0]
    return q.reshape(mdp.n_states, mdp.n_actions)


# ---------------------------------------------------------------------------
# default features


@dataclass
class DefaultFeatureTable:
    """zeta has one row per index (state or pair); rows in ``terminal`` equal phi."""

    zeta: np.ndarray
    phi: np.ndarray
    terminal: np.ndarray
    nonterminal_rewards: Optional[np.ndarray] = None
    kind: str = "state"

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def terminal_index(self) -> np.ndarray:
        return np.flatnonzero(self.terminal)


def default_features_closed(
    z_nn: ZMatrix,
    p_nt,
    phi,
    terminal: np.ndarray,
    nonterminal_rewards=None,
    kind: str = "state",
) -> DefaultFeatureTable:
    """zeta_N = Z_NN P_NT Phi; zeta_T = Phi.

    ``terminal`` is the boolean mask over all indices; ``z_nn`` and ``p_nt``
    are blocks ordered by the non-terminal and terminal indices of that mask.
    """
    phi = np.asarray(phi, dtype=float)
    p_nt = np.asarray(p_nt, dtype=float)
    terminal = np.asarray(terminal, dtype=bool)
    n_idx, t_idx = np.flatnonzero(~terminal), np.flatnonzero(terminal)
    if phi.ndim != 2 or phi.shape[0] != len(t_idx):
        raise ValueError(f"Phi needs one row per terminal index ({len(t_idx)}), got {phi.shape}")
    if p_nt.shape != (len(n_idx), len(t_idx)):
        raise ValueError(f"P_NT has shape {p_nt.shape}, expected {(len(n_idx), len(t_idx))}")
    # sum_k Z[s,k] (P_NT Phi)[k,:] per feature column, on logs so tiny entries survive
    logz = _log_of(z_nn).log_entries
    pphi = p_nt @ phi
    if np.any(pphi < 0):
        raise ValueError("default features need a nonnegative Phi")
    with np.errstate(divide="ignore"):
        logpphi = np.log(pphi)
    zeta = np.zeros((len(terminal), phi.shape[1]))
    for c in range(phi.shape[1]):
        zeta[n_idx, c] = np.exp(logsumexp(logz + logpphi[None, :, c], axis=1))
    zeta[t_idx] = phi
    nt = None if nonterminal_rewards is None else np.asarray(nonterminal_rewards, dtype=float)
    return DefaultFeatureTable(zeta, phi.copy(), terminal, nt, kind)


def df_td_update(table: DefaultFeatureTable, sample: TransitionSample, alpha: float, lam: float):
    """zeta(s) += alpha (exp(r/lambda) zeta(s') - zeta(s)) for non-terminal s."""
    s = sample.s
    if table.terminal[s]:
        return table
    z = table.zeta
    z[s] += alpha * (math.exp(sample.r / lam) * z[sample.s_next] - z[s])
    return table


def df_td_update_index(table: DefaultFeatureTable, i: int, r: float, j: int, alpha: float, lam: float):
    """Index form of :func:`df_td_update` (pairs use ``s * n_actions + a``)."""
    if table.terminal[i]:
        return table
    z = table.zeta
    z[i] += alpha * (math.exp(r / lam) * z[j] - z[i])
    return table


def one_hot_terminal_features(n_terminal: int) -> np.ndarray:
    return np.eye(n_terminal)


# ---------------------------------------------------------------------------
# successor features


@dataclass
class SuccessorFeatureTable:
    """psi[k, s, a] is the feature expectation of source policy k."""

    psi: np.ndarray
    policies: list = field(default_factory=list)

    @property
    def d(self) -> int:
        return self.psi.shape[-1]


def sf_td_update(
    psi: np.ndarray,
    policy: np.ndarray,
    sample: TransitionSample,
    alpha: float,
    gamma: float,
    state_features: np.ndarray,
    rng: Optional[np.random.Generator] = None,
):
    """psi(s,a) += alpha [phi(s) + gamma psi(s',a') - psi(s,a)], a' ~ policy(.|s').

    When ``s'`` is terminal its own features close the sum: the target is
    ``phi(s) + gamma phi(s')``.
    """
    s, a, s_next = sample.s, sample.a, sample.s_next
    if sample.done:
        target = state_features[s] + gamma * state_features[s_next]
    else:
        row = policy[s_next]
        if rng is None:
            a_next = int(np.argmax(row))
        else:
            a_next = int(rng.choice(len(row), p=row))
        target = state_features[s] + gamma * psi[s_next, a_next]
    psi[s, a] += alpha * (target - psi[s, a])
    return psi


def sf_reward_weights(state_features: np.ndarray, rewards: np.ndarray) -> np.ndarray:
    """w with Phi w = r: exact lookup for one-hot features, least squares otherwise."""
    f = np.asarray(state_features, dtype=float)
    r = np.asarray(rewards, dtype=float)
    if np.all((f == 0) | (f == 1)) and np.all(f.sum(axis=1) == 1):
        w = np.zeros(f.shape[1])
        for c in range(f.shape[1]):
            rows = np.flatnonzero(f[:, c])
            if len(rows):
                vals = r[rows]
                if np.ptp(vals) > 0:
                    raise ValueError(f"feature {c} covers states with different rewards")
                w[c] = vals[0]
        return w
    return np.linalg.lstsq(f, r, rcond=None)[0]


# ---------------------------------------------------------------------------
# transfer


def df_transfer_policy(
    table: DefaultFeatureTable,
    new_terminal_rewards,
    lam: float,
    n_actions: int,
    nonterminal_rewards=None,
) -> np.ndarray:
    """Greedy deterministic policy from pair features and new terminal rewards.

    ``table`` is over state-action pairs with one-hot terminal features, so
    ``w = exp(r_T / lambda)`` satisfies ``Phi w = exp(r_T / lambda)`` exactly.
    """
    if nonterminal_rewards is not None:
        base = table.nonterminal_rewards
        if base is None or not np.array_equal(np.asarray(nonterminal_rewards, dtype=float), base):
            raise ValueError(
                "default features only transfer across terminal reward changes; "
                "non-terminal rewards differ from the ones the table was learned with"
            )
    r_t = np.asarray(new_terminal_rewards, dtype=float)
    if r_t.shape != (table.d,):
        raise ValueError(f"need {table.d} terminal rewards, got {r_t.shape}")
    # log(zeta . w) with w = exp(r_T / lambda), computed on logs
    with np.errstate(divide="ignore"):
        logq = logsumexp(np.log(table.zeta) + (r_t / lam)[None, :], axis=1)
    q = (lam * logq).reshape(-1, n_actions)
    return greedy_policy(q)


def sf_gpi_policy(table: SuccessorFeatureTable, w: np.ndarray) -> np.ndarray:
    """pi(s) = argmax_a max_k psi_k(s,a) . w."""
    q = np.einsum("ksad,d->ksa", table.psi, np.asarray(w, dtype=float))
    return greedy_policy(q.max(axis=0))


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic one-hot policy; ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    out = np.zeros_like(q)
    out[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return out


def transfer_policy_from_features(kind: str, tables, new_terminal_rewards, **kwargs) -> np.ndarray:
    """Dispatch to :func:`df_transfer_policy` (``DF``) or :func:`sf_gpi_policy` (``SF``).

    For ``SF`` pass ``state_features`` and ``rewards`` (full per-state reward
    vector) so the weights can be fit, or ``w`` directly.
    """
    if kind == "DF":
        return df_transfer_policy(tables, new_terminal_rewards, **kwargs)
    if kind == "SF":
        w = kwargs.get("w")
        if w is None:
            w = sf_reward_weights(kwargs["state_features"], kwargs["rewards"])
        return sf_gpi_policy(tables, w)
    raise ValueError(f"unknown transfer kind {kind!r}")


# ---------------------------------------------------------------------------
# serialization


def save_feature_table(table: DefaultFeatureTable, path) -> tuple[Path, Path]:
    base = Path(path)
    csv_path, meta_path = with_ext(base, ".csv"), with_ext(base, ".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "terminal"] + [f"f{c}" for c in range(table.d)])
        for i, row in enumerate(table.zeta):
            writer.writerow([i, int(table.terminal[i])] + [repr(float(x)) for x in row])
    meta = {
        "d": table.d,
        "kind": table.kind,
        "phi": table.phi.tolist(),
        "nonterminal_rewards": None
        if table.nonterminal_rewards is None
        else table.nonterminal_rewards.tolist(),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def load_feature_table(path) -> DefaultFeatureTable:
    base = Path(path)
    meta = json.loads(with_ext(base, ".json").read_text())
    with open(with_ext(base, ".csv")) as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [row for row in reader if row]
    terminal = np.array([bool(int(r[1])) for r in rows])
    zeta = np.array([[float(x) for x in r[2:]] for r in rows]).reshape(len(rows), meta["d"])
    nt = meta["nonterminal_rewards"]
    return DefaultFeatureTable(
        zeta, np.array(meta["phi"], dtype=float).reshape(-1, meta["d"]), terminal,
        None if nt is None else np.array(nt), meta["kind"],
    )
