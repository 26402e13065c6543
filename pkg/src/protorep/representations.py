"""Successor, default and maximum-entropy representations.

Closed forms of the DR family are solved in extended precision
(:class:`~protorep.linalg.HpMatrix`); TD learners work on plain float arrays
and update one row per sample.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from flint import arb, arb_mat

from .linalg import (
    DEFAULT_BITS,
    HpMatrix,
    LogNonNegMatrix,
    SingularMatrixError,
    hp_solve,
    log_power_iteration,
    working_precision,
)
from .mdp import TabularMdp, TransitionSample
from .report import with_ext

KINDS = ("SR", "DR", "DR_SA", "MER")
DEFAULT_LAMBDA = 1.3

Matrix = Union[np.ndarray, HpMatrix]


@dataclass
class ProtoRep:
    kind: str
    matrix: Matrix
    params: dict
    policy_id: str = "uniform"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown representation kind {self.kind!r}")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def dense(self) -> np.ndarray:
        if isinstance(self.matrix, HpMatrix):
            return self.matrix.to_numpy()
        if isinstance(self.matrix, LogNonNegMatrix):
            return self.matrix.to_dense()
        return np.asarray(self.matrix)

    def log_matrix(self) -> LogNonNegMatrix:
        if isinstance(self.matrix, HpMatrix):
            return self.matrix.log_entries()
        if isinstance(self.matrix, LogNonNegMatrix):
            return self.matrix
        return LogNonNegMatrix.from_dense(self.matrix)


@dataclass
class EigenSummary:
    top_eigenvalue: float
    top_eigenvector: np.ndarray
    log_transformed: bool
    visited: np.ndarray = field(repr=False)


class PositivityError(ArithmeticError):
    def __init__(self, state: int):
        super().__init__(
            f"top eigenvector is not strictly positive at state {state}; its log is undefined"
        )
        self.state = state


def _terminal_rows(p: np.ndarray) -> np.ndarray:
    return ~np.any(p != 0, axis=1)


# ---------------------------------------------------------------------------
# successor representation


def sr_closed_form(p: np.ndarray, gamma: float, policy_id: str = "uniform") -> ProtoRep:
    """Psi = (I - gamma P)^-1."""
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    p = np.asarray(p, dtype=float)
    n = p.shape[0]
    psi = np.linalg.solve(np.eye(n) - gamma * p, np.eye(n))
    return ProtoRep("SR", psi, {"gamma": gamma}, policy_id)


def sr_td_update(psi: np.ndarray, sample: TransitionSample, alpha: float, gamma: float):
    """One TD step on row ``sample.s``; bootstraps from the stored row of ``s'``.

    Terminal rows are never written here, so initialising them to ``e_t``
    keeps them at their closed-form value.
    """
    s, s_next = sample.s, sample.s_next
    target = gamma * psi[s_next]
    target[s] += 1.0
    psi[s] += alpha * (target - psi[s])
    return psi


def sr_init(n_states: int) -> np.ndarray:
    return np.eye(n_states)


# ---------------------------------------------------------------------------
# default representation


def _check_dr_rewards(r: np.ndarray, terminal: np.ndarray, lam: float):
    if lam <= 0:
        raise ValueError("lambda must be positive")
    bad = np.flatnonzero((r >= 0) & ~terminal)
    if len(bad):
        raise ValueError(
            f"DR requires r(s) < 0 for every non-terminal state; state {bad[0]} has r={r[bad[0]]:g}"
        )


def _hp_inverse_of_diag_minus(
    diag_logs: np.ndarray, p: np.ndarray, bits: int
) -> HpMatrix:
    """[diag(exp(diag_logs)) - P]^-1 at ``bits`` precision."""
    n = p.shape[0]
    with working_precision(bits):
        a = arb_mat((-p).tolist()) if n else arb_mat(0, 0)
        for i in range(n):
            a[i, i] = arb(float(diag_logs[i])).exp() - arb(float(p[i, i]))
    return hp_solve(HpMatrix(a, bits), HpMatrix.identity(n, bits))


def dr_closed_form(
    r,
    p,
    lam: float = DEFAULT_LAMBDA,
    bits: int = DEFAULT_BITS,
    terminal: Optional[np.ndarray] = None,
    policy_id: str = "uniform",
) -> ProtoRep:
    """Z = [diag(exp(-r/lambda)) - P]^-1 in extended precision.

    ``terminal`` defaults to the all-zero rows of ``p``.
    """
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    terminal = _terminal_rows(p) if terminal is None else np.asarray(terminal, dtype=bool)
    _check_dr_rewards(r, terminal, lam)
    z = _hp_inverse_of_diag_minus(-r / lam, p, bits)
    return ProtoRep("DR", z, {"lambda": lam}, policy_id)


@dataclass
class DpResult:
    rep: ProtoRep
    iterations: int
    diffs: list
    ratios: list
    bound: float
    history: Optional[list] = None


def dr_dp_solve(
    r,
    p,
    lam: float = DEFAULT_LAMBDA,
    tol: float = 1e-12,
    max_iters: int = 100_000,
    terminal: Optional[np.ndarray] = None,
    keep_history: bool = False,
    policy_id: str = "uniform",
) -> DpResult:
    """Iterate Z <- R^-1 + R^-1 P Z from Z_0 = R^-1.

    Stops once every entry changes by less than ``tol`` relative to its new
    value (and at least ``n`` sweeps have run, so every path length up to
    ``n`` has been propagated). ``bound`` is max_s exp(r(s)/lambda) over
    non-terminal states, the contraction factor of the update in the
    infinity norm.
    """
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    terminal = _terminal_rows(p) if terminal is None else np.asarray(terminal, dtype=bool)
    _check_dr_rewards(r, terminal, lam)
    n = len(r)
    r_inv = np.exp(r / lam)
    step = r_inv[:, None] * p
    z = np.diag(r_inv)
    bound = float(r_inv[~terminal].max()) if (~terminal).any() else 0.0
    history = [z.copy()] if keep_history else None
    diffs, ratios = [], []
    for k in range(1, max_iters + 1):
        z_new = step @ z
        z_new[np.diag_indices(n)] += r_inv
        delta = np.abs(z_new - z)
        diffs.append(float(delta.max()) if n else 0.0)
        if len(diffs) > 1 and diffs[-2] > 0:
            ratios.append(diffs[-1] / diffs[-2])
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(delta == 0, 0.0, delta / np.abs(z_new))
        z = z_new
        if keep_history:
            history.append(z.copy())
        if k >= n and (not n or rel.max() < tol):
            break
    return DpResult(ProtoRep("DR", z, {"lambda": lam}, policy_id), k, diffs, ratios, bound, history)


def dr_init(n: int) -> np.ndarray:
    return np.eye(n)


def dr_td_update(
    z: np.ndarray,
    sample: TransitionSample,
    alpha: float,
    lam: float,
    s_terminal: bool = False,
):
    """Z(s, .) += alpha [Y - Z(s, .)] with Y = exp(r/lambda) (e_s + Z(s', .)).

    For a terminal ``s`` the target is ``exp(r/lambda) e_s``.
    """
    s = sample.s
    scale = math.exp(sample.r / lam)
    if s_terminal:
        target = np.zeros(z.shape[1])
    else:
        target = z[sample.s_next] * scale
    target[s] += scale
    z[s] += alpha * (target - z[s])
    return z


def dr_sa_closed_form(
    r_sa,
    p_sa,
    lam: float = DEFAULT_LAMBDA,
    bits: int = DEFAULT_BITS,
    terminal: Optional[np.ndarray] = None,
    policy_id: str = "uniform",
) -> ProtoRep:
    """State-action DR over pairs indexed ``s * n_actions + a``."""
    r_sa = np.asarray(r_sa, dtype=float).reshape(-1)
    p_sa = np.asarray(p_sa, dtype=float)
    terminal = _terminal_rows(p_sa) if terminal is None else np.asarray(terminal, dtype=bool)
    _check_dr_rewards(r_sa, terminal, lam)
    z = _hp_inverse_of_diag_minus(-r_sa / lam, p_sa, bits)
    return ProtoRep("DR_SA", z, {"lambda": lam}, policy_id)


def dr_sa_td_update(
    zbar: np.ndarray,
    s: int,
    a: int,
    r: float,
    s_next: int,
    a_next: int,
    alpha: float,
    lam: float,
    n_actions: int,
    terminal: bool = False,
):
    """TD step on row (s, a); ``terminal`` marks a terminal (s, a) pair."""
    i = s * n_actions + a
    scale = math.exp(r / lam)
    if terminal:
        target = np.zeros(zbar.shape[1])
    else:
        target = zbar[s_next * n_actions + a_next] * scale
    target[i] += scale
    zbar[i] += alpha * (target - zbar[i])
    return zbar


# ---------------------------------------------------------------------------
# maximum-entropy representation


def adjacency_matrix(mdp: TabularMdp) -> np.ndarray:
    """A(s, s') = 1 when s' is reachable from s in one step; terminal rows are zero."""
    a = (mdp.transition.sum(axis=1) > 0).astype(float)
    a[mdp.terminal] = 0.0
    return a


def mer_closed_form(r, adjacency, lam: float = DEFAULT_LAMBDA, bits: int = DEFAULT_BITS) -> ProtoRep:
    """M = [diag(exp(-r/lambda)) - A]^-1."""
    r = np.asarray(r, dtype=float)
    adjacency = np.asarray(adjacency, dtype=float)
    terminal = _terminal_rows(adjacency)
    _check_dr_rewards(r, terminal, lam)
    try:
        m = _hp_inverse_of_diag_minus(-r / lam, adjacency, bits)
    except SingularMatrixError as exc:
        raise SingularMatrixError("MER inversion failed", exc.condition) from None
    return ProtoRep("MER", m, {"lambda": lam}, "adjacency")


# ---------------------------------------------------------------------------
# trajectory enumeration


def trajectory_value_oracle(
    mdp: TabularMdp,
    policy: np.ndarray,
    s: int,
    s_target: int,
    horizon: int,
    mode: str,
    param: float,
    max_paths: int = 2_000_000,
) -> float:
    """Sum over every trajectory s -> s_target with at most ``horizon`` steps.

    ``mode`` is ``"SR"`` (weight ``gamma ** steps``, ``param`` = gamma) or
    ``"DR"`` (weight ``exp(sum of rewards on the path / lambda)``, ``param`` =
    lambda). Paths are enumerated one by one; more than ``max_paths`` partial
    paths raises ``OverflowError``.
    """
    if mode not in ("SR", "DR"):
        raise ValueError("mode must be 'SR' or 'DR'")
    if not mdp.has_state_rewards and mode == "DR":
        raise ValueError("trajectory oracle needs state rewards for the DR")
    n_a = mdp.n_actions
    succ = []
    for x in range(mdp.n_states):
        out = {}
        if not mdp.terminal[x]:
            for a in range(n_a):
                if policy[x][a] == 0:
                    continue
                for y in np.flatnonzero(mdp.transition[x, a]):
                    out[int(y)] = out.get(int(y), 0.0) + policy[x][a] * mdp.transition[x, a, y]
        succ.append(sorted(out.items()))
    rewards = mdp.reward_state
    total = 0.0
    n_paths = 0
    # (state, steps, probability, reward sum)
    stack = [(s, 0, 1.0, float(rewards[s]) if mode == "DR" else 0.0)]
    while stack:
        x, steps, prob, rsum = stack.pop()
        n_paths += 1
        if n_paths > max_paths:
            raise OverflowError(f"more than {max_paths} partial trajectories; lower the horizon")
        if x == s_target:
            total += prob * (param**steps if mode == "SR" else math.exp(rsum / param))
        if steps == horizon:
            continue
        for y, py in succ[x]:
            nxt_r = rsum + float(rewards[y]) if mode == "DR" else 0.0
            stack.append((y, steps + 1, prob * py, nxt_r))
    return total


# ---------------------------------------------------------------------------
# eigen-analysis


def top_log_eigenvector(
    rep: Union[ProtoRep, np.ndarray, HpMatrix, LogNonNegMatrix],
    visited=None,
    kind: Optional[str] = None,
    tol: float = 1e-12,
    max_iters: int = 20_000,
) -> EigenSummary:
    """Top eigenvector of the symmetrized representation restricted to ``visited``.

    DR-family inputs (``DR``, ``DR_SA``, ``MER``) are iterated in the log
    domain and the log of the eigenvector is returned; SR inputs use a dense
    symmetric eigensolver and return the raw eigenvector with its largest
    magnitude entry positive. Unvisited states get 0.
    """
    if isinstance(rep, ProtoRep):
        kind = kind or rep.kind
        source = rep.matrix
    else:
        source = rep
        kind = kind or "DR"
    n = source.shape[0]
    visited_mask = np.ones(n, dtype=bool) if visited is None else _as_mask(visited, n)
    idx = np.flatnonzero(visited_mask)
    full = np.zeros(n)
    if kind == "SR":
        dense = source.to_numpy() if isinstance(source, HpMatrix) else np.asarray(source, dtype=float)
        sub = dense[np.ix_(idx, idx)]
        vals, vecs = np.linalg.eigh((sub + sub.T) / 2)
        vec = vecs[:, -1]
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        full[idx] = vec
        return EigenSummary(float(vals[-1]), full, False, visited_mask)

    if isinstance(source, LogNonNegMatrix):
        logm = source
    elif isinstance(source, HpMatrix):
        logm = source.log_entries()
    else:
        logm = LogNonNegMatrix.from_dense(source)
    sym = logm.submatrix(idx).symmetrized()
    if sym.shape[0] and np.all(np.isneginf(sym.log_entries)):
        raise PositivityError(int(idx[0]))
    log_val, log_vec = log_power_iteration(
        sym, tol=tol, max_iters=max_iters, init=_dense_start(sym)
    )
    if np.any(np.isneginf(log_vec)):
        raise PositivityError(int(idx[np.flatnonzero(np.isneginf(log_vec))[0]]))
    full[idx] = log_vec
    return EigenSummary(log_val, full, True, visited_mask)


def _dense_start(sym: LogNonNegMatrix) -> np.ndarray:
    """Log of |top eigenvector| of the double-precision matrix, as a warm start."""
    shift = np.max(sym.log_entries) if sym.shape[0] else 0.0
    dense = np.exp(sym.log_entries - shift)
    _, vecs = np.linalg.eigh(dense)
    v = np.abs(vecs[:, -1])
    return np.log(np.maximum(v, 1e-300))


def _as_mask(visited, n: int) -> np.ndarray:
    visited = np.asarray(visited)
    if visited.dtype == bool:
        if visited.shape != (n,):
            raise ValueError("visited mask has the wrong length")
        return visited
    mask = np.zeros(n, dtype=bool)
    mask[visited.astype(int)] = True
    return mask


def sr_eigenvalue_from_dr(mu_dr: float, gamma: float, r_const: float, lam: float) -> float:
    """Map a DR eigenvalue to the matching SR eigenvalue for a constant reward."""
    if r_const >= 0:
        raise ValueError("the reward must be negative")
    r_tilde = math.exp(-r_const / lam)
    upper = 1.0 / (r_tilde - 1.0)
    if not 0 < mu_dr <= upper * (1 + 1e-12):
        raise ValueError(f"DR eigenvalue {mu_dr} outside (0, {upper}]")
    denom = gamma * (1.0 / mu_dr - r_tilde + 1.0 / gamma)
    if denom == 0:
        raise ValueError("DR eigenvalue sits on the vertical asymptote of the map")
    return 1.0 / denom


# ---------------------------------------------------------------------------
# serialization


def save_representation(rep: ProtoRep, path, log_domain: bool = False) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (dense values or their logs) and a ``<path>.json`` sidecar."""
    base = Path(path)
    csv_path, meta_path = with_ext(base, ".csv"), with_ext(base, ".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    values = rep.log_matrix().log_entries if log_domain else rep.dense()
    with open(csv_path, "w", newline="") as fh:
        fh.write(f"# log_domain={'true' if log_domain else 'false'}\n")
        writer = csv.writer(fh, lineterminator="\n")
        for row in values:
            writer.writerow([repr(float(x)) for x in row])
    meta = {
        "kind": rep.kind,
        "params": rep.params,
        "policy_id": rep.policy_id,
        "n": rep.n,
        "log_domain": log_domain,
        "bits": rep.matrix.bits if isinstance(rep.matrix, HpMatrix) else 53,
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, meta_path


def load_matrix_csv(path) -> tuple[np.ndarray, bool]:
    with open(path) as fh:
        first = fh.readline().strip()
        if not first.startswith("# log_domain="):
            raise ValueError(f"{path}: missing '# log_domain=' header")
        log_domain = first.split("=", 1)[1] == "true"
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows), log_domain


def load_representation(path) -> ProtoRep:
    base = Path(path)
    meta = json.loads(with_ext(base, ".json").read_text())
    values, log_domain = load_matrix_csv(with_ext(base, ".csv"))
    # log-domain files stay in logs so entries below double range survive
    matrix = LogNonNegMatrix(values) if log_domain else values
    return ProtoRep(meta["kind"], matrix, meta["params"], meta["policy_id"])
