"""Finite MDPs: exact Bellman machinery, behavior-chain mixing analysis, trajectory sampling.

Conventions used across the package:

* ``transitions[a, s, s2]`` is the probability of moving from ``s`` to ``s2`` under ``a``.
* Q-tables and policies are ``(n_states, n_actions)`` arrays; policies are row-stochastic.
* Flattened state-action index is ``s * n_actions + a``.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.sparse.csgraph import breadth_first_order, connected_components

from aclab.errors import AssumptionViolation, ValidationError

ROW_TOL = 1e-12
# exact solvers are dense; beyond this the LU factorization is impractical
MAX_STATE_ACTIONS = 10_000


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite discounted MDP with rewards in [0, 1]."""

    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transitions, dtype=float)
        R = np.array(self.rewards, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise ValidationError(f"transitions must have shape (A, S, S), got {P.shape}")
        n_actions, n_states, _ = P.shape
        if n_states < 1 or n_actions < 1:
            raise ValidationError("MDP needs at least one state and one action")
        if R.shape != (n_states, n_actions):
            raise ValidationError(f"rewards must have shape ({n_states}, {n_actions}), got {R.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R))):
            raise ValidationError("transitions and rewards must be finite")
        if np.any(P < 0):
            raise ValidationError("transition probabilities must be non-negative")
        row_err = np.abs(P.sum(axis=2) - 1.0)
        if np.any(row_err > ROW_TOL):
            a, s = np.unravel_index(int(np.argmax(row_err)), row_err.shape)
            raise ValidationError(f"transition row (a={a}, s={s}) sums to {P[a, s].sum()!r}, not 1")
        if np.any(R < 0) or np.any(R > 1):
            raise ValidationError("rewards must lie in [0, 1]")
        # gamma = 0 is accepted so the discount-free degenerate case stays expressible
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValidationError(f"discount must be in [0, 1), got {self.gamma}")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def with_gamma(self, gamma: float) -> "Mdp":
        return Mdp(self.transitions, self.rewards, gamma)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mdp":
        try:
            mdp = cls(np.asarray(doc["transitions"], float), np.asarray(doc["rewards"], float), doc["gamma"])
        except KeyError as exc:
            raise ValidationError(f"MDP document missing field {exc}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed MDP document: {exc}") from None
        if doc.get("n_states", mdp.n_states) != mdp.n_states or doc.get("n_actions", mdp.n_actions) != mdp.n_actions:
            raise ValidationError("n_states / n_actions disagree with the array shapes")
        return mdp

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Mdp":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read MDP file {path}: {exc}") from None
        return cls.from_dict(doc)


def two_loop(gamma: float = 0.9) -> Mdp:
    """Two states, actions (stay, switch); reward 1 exactly in state 0."""
    P = np.array([np.eye(2), [[0.0, 1.0], [1.0, 0.0]]])
    R = np.array([[1.0, 1.0], [0.0, 0.0]])
    return Mdp(P, R, gamma)


def gen_garnet(n_states: int, n_actions: int, branching: int, seed: int, gamma: float = 0.9) -> Mdp:
    """Random Garnet MDP: each (s, a) reaches ``branching`` distinct states with Dirichlet(1) weights."""
    if n_states < 1 or n_actions < 1:
        raise ValidationError("n_states and n_actions must be positive")
    if not 1 <= branching <= n_states:
        raise ValidationError(f"branching must be in [1, {n_states}], got {branching}")
    rng = np.random.default_rng(seed)
    P = np.zeros((n_actions, n_states, n_states))
    for a in range(n_actions):
        for s in range(n_states):
            support = rng.choice(n_states, size=branching, replace=False)
            P[a, s, support] = rng.dirichlet(np.ones(branching))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return Mdp(P, R, gamma)


# --- policies ---------------------------------------------------------------


def validate_policy(policy, n_states: int, n_actions: int, name: str = "policy") -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (n_states, n_actions):
        raise ValidationError(f"{name} must have shape ({n_states}, {n_actions}), got {pi.shape}")
    if not np.all(np.isfinite(pi)) or np.any(pi < 0):
        raise ValidationError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL):
        raise ValidationError(f"{name} rows must sum to 1")
    return pi


def uniform_policy(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def greedy_actions(q: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already breaks ties toward the lowest index."""
    return np.argmax(q, axis=1)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), greedy_actions(q)] = 1.0
    return pi


def _check_q(mdp: Mdp, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValidationError(f"Q-table must have shape ({mdp.n_states}, {mdp.n_actions}), got {q.shape}")
    return q


def state_transition_matrix(mdp: Mdp, policy) -> np.ndarray:
    """S x S chain induced by ``policy``: sum_a pi(a|s) P_a(s, s2)."""
    pi = validate_policy(policy, mdp.n_states, mdp.n_actions)
    return np.einsum("sa,ast->st", pi, mdp.transitions)


def pair_transition_matrix(mdp: Mdp, weights) -> np.ndarray:
    """SA x SA matrix with entry ((s,a),(s2,a2)) = P_a(s,s2) * weights(s2,a2).

    With ``weights`` a policy this is P_pi. Non-stochastic weights (behavior
    probabilities times importance factors) give the matrices of the
    generalized Bellman operators.
    """
    W = np.asarray(weights, dtype=float)
    M = np.einsum("ast,tb->satb", mdp.transitions, W)
    return M.reshape(mdp.n_pairs, mdp.n_pairs)


# --- exact solvers ----------------------------------------------------------


def exact_q(mdp: Mdp, policy) -> np.ndarray:
    """Q^pi by solving (I - gamma P_pi) q = r with dense LU (always non-singular for gamma < 1)."""
    pi = validate_policy(policy, mdp.n_states, mdp.n_actions)
    if mdp.n_pairs > MAX_STATE_ACTIONS:
        raise ValidationError(f"|S||A| = {mdp.n_pairs} exceeds the exact-solver cap {MAX_STATE_ACTIONS}")
    A = np.eye(mdp.n_pairs) - mdp.gamma * pair_transition_matrix(mdp, pi)
    q = np.linalg.solve(A, mdp.rewards.reshape(-1))
    return q.reshape(mdp.n_states, mdp.n_actions)


def bellman_optimality(mdp: Mdp, q) -> np.ndarray:
    """[H(Q)](s,a) = R(s,a) + gamma * sum_s2 P_a(s,s2) max_a2 Q(s2,a2)."""
    q = _check_q(mdp, q)
    v = q.max(axis=1)
    return mdp.rewards + mdp.gamma * np.einsum("ast,t->sa", mdp.transitions, v)


def bellman_policy(mdp: Mdp, policy, q) -> np.ndarray:
    """[H_pi(Q)](s,a) = R(s,a) + gamma * E[Q(S', A')] with S' ~ P_a(s,.), A' ~ pi(.|S')."""
    q = _check_q(mdp, q)
    pi = validate_policy(policy, mdp.n_states, mdp.n_actions)
    v = np.sum(pi * q, axis=1)
    return mdp.rewards + mdp.gamma * np.einsum("ast,t->sa", mdp.transitions, v)


def value_iteration(mdp: Mdp, tol: float = 1e-10, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Iterate H until the Bellman residual is below ``tol``; return (Q*, greedy policy)."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        q_next = bellman_optimality(mdp, q)
        done = np.max(np.abs(q_next - q)) <= tol * (1.0 - mdp.gamma) / 2.0
        q = q_next
        if done:
            break
    # residual of the returned iterate is at most gamma times the last step size
    return q, greedy_policy(q)


# --- behavior chain ---------------------------------------------------------

TV_FLOOR = 1e-13
MIXING_CAP = 1_000_000


@dataclass(frozen=True, eq=False)
class MixingInfo:
    """Stationary distribution and mixing profile of the chain induced by a behavior policy.

    ``tv[k]`` is max_s ||P^k(s, .) - mu||_TV, computed until it drops below
    ``TV_FLOOR`` (or the iteration cap is hit).
    """

    stationary: np.ndarray
    tv: np.ndarray
    t_delta: dict = field(default_factory=dict)
    geom_fit: tuple[float, float] = (1.0, 0.5)
    capped: bool = False

    def mixing_time(self, delta: float) -> int:
        """t_delta = min{k : max_s ||P^k(s,.) - mu||_TV <= delta}."""
        if delta <= 0:
            raise ValidationError("mixing precision must be positive")
        hits = np.flatnonzero(self.tv <= delta)
        if hits.size:
            return int(hits[0])
        if self.capped:
            return MIXING_CAP
        # below the floating-point floor: extrapolate the fitted envelope C sigma^k
        C, sigma = self.geom_fit
        k = math.ceil(math.log(delta / C) / math.log(sigma))
        return max(int(k), len(self.tv))

    def mixing_times(self, deltas) -> np.ndarray:
        """Vectorized ``mixing_time`` over an array of precisions."""
        deltas = np.asarray(deltas, dtype=float)
        if np.any(deltas <= 0):
            raise ValidationError("mixing precision must be positive")
        envelope = np.minimum.accumulate(self.tv)
        # first index with envelope <= delta, via search on the increasing sequence -envelope
        idx = np.searchsorted(-envelope, -deltas, side="left")
        out = idx.astype(np.int64)
        beyond = idx >= len(envelope)
        if np.any(beyond):
            out[beyond] = [self.mixing_time(float(d)) for d in deltas[beyond]]
        return out


def _structure_check(chain: np.ndarray) -> None:
    adj = chain > 0
    n_comp, labels = connected_components(adj.astype(int), directed=True, connection="strong")
    if n_comp > 1:
        outside = np.flatnonzero(labels != labels[0]).tolist()
        raise AssumptionViolation(
            f"behavior chain is reducible: states {outside} are not mutually reachable with state 0",
            states=outside,
        )
    order, _ = breadth_first_order(adj.astype(int), 0, directed=True, return_predecessors=True)
    dist = np.full(len(chain), -1)
    dist[0] = 0
    for u in order:
        for v in np.flatnonzero(adj[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
    period = 0
    for u, v in zip(*np.nonzero(adj)):
        period = math.gcd(period, int(dist[u] + 1 - dist[v]))
    if period > 1:
        raise AssumptionViolation(
            f"behavior chain is periodic with period {period}", states=range(len(chain))
        )


def _geom_fit(tv: np.ndarray) -> tuple[float, float]:
    k = np.flatnonzero(tv > TV_FLOOR)
    if k.size >= 2:
        slope, _ = np.polyfit(k, np.log(tv[k]), 1)
        sigma = float(np.clip(np.exp(slope), 1e-12, 1.0 - 1e-12))
    else:
        sigma = 1e-12
    ks = np.arange(len(tv))
    with np.errstate(over="ignore", divide="ignore"):
        ratios = np.where(tv > 0, tv / sigma**ks, 0.0)
    C = float(max(1.0, np.max(ratios)))
    return C, sigma


def stationary_distribution(mdp: Mdp, behavior, deltas: Sequence[float] = (0.1, 0.01, 0.001)) -> MixingInfo:
    """Stationary distribution, mixing times and (C, sigma) envelope of the behavior chain.

    Raises AssumptionViolation unless pi_b > 0 everywhere and the chain is
    irreducible and aperiodic (checked on the transition graph).
    """
    pi_b = validate_policy(behavior, mdp.n_states, mdp.n_actions, "behavior policy")
    if np.any(pi_b <= 0):
        bad = np.flatnonzero(np.any(pi_b <= 0, axis=1)).tolist()
        raise AssumptionViolation(f"behavior policy has zero probabilities in states {bad}", states=bad)
    chain = state_transition_matrix(mdp, pi_b)
    _structure_check(chain)
    n = mdp.n_states
    # mu^T (P - I) = 0 with sum(mu) = 1, solved as an overdetermined system
    A = np.vstack([chain.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    mu = np.linalg.lstsq(A, b, rcond=None)[0]
    mu = np.clip(mu, 0.0, None)
    mu /= mu.sum()

    tv = []
    Pk = np.eye(n)
    capped = False
    for k in range(MIXING_CAP + 1):
        d = 0.5 * np.max(np.abs(Pk - mu).sum(axis=1))
        tv.append(d)
        if d <= TV_FLOOR:
            break
        Pk = Pk @ chain
    else:
        capped = True
    tv = np.asarray(tv)
    fit = _geom_fit(tv)
    info = MixingInfo(stationary=mu, tv=tv, geom_fit=fit, capped=capped)
    for delta in deltas:
        info.t_delta[float(delta)] = info.mixing_time(float(delta))
    return info


# --- sampling ---------------------------------------------------------------


class Trajectory(NamedTuple):
    states: np.ndarray
    actions: np.ndarray


def _pick(cum: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw per row: cum has shape (R, K), u has shape (R,)."""
    idx = (cum < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum.shape[1] - 1)


def sample_trajectories(mdp: Mdp, behavior, length: int, seeds: Sequence[int], start=None,
                        stationary: np.ndarray | None = None) -> Trajectory:
    """Batch of behavior trajectories, one per seed, arrays of shape (len(seeds), length).

    Each seed owns its uniform stream, so a trajectory does not depend on
    which other seeds share the batch. ``start=None`` draws S_0 from the
    stationary distribution; an integer fixes S_0. Each step draws the pair
    (A_k, S_{k+1}) jointly from pi_b(a|S_k) P_a(S_k, s') with one uniform.
    """
    if length < 1:
        raise ValidationError("trajectory length must be at least 1")
    pi_b = validate_policy(behavior, mdp.n_states, mdp.n_actions, "behavior policy")
    seeds = list(seeds)
    R = len(seeds)
    n_states = mdp.n_states
    u0 = np.empty(R)
    u = np.empty((length, R))
    for r, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        u0[r] = rng.random()
        u[:, r] = rng.random(length)
    if start is None:
        mu = stationary if stationary is not None else stationary_distribution(mdp, pi_b, deltas=()).stationary
        s = _pick(np.broadcast_to(np.cumsum(mu), (R, n_states)), u0)
    else:
        if not 0 <= int(start) < n_states:
            raise ValidationError(f"start state {start} out of range")
        s = np.full(R, int(start))
    # joint[s, a * S + s2] = pi_b(a|s) P_a(s, s2); the walk runs in plain Python with
    # bisection on cumulative rows, which beats per-step numpy calls by a wide margin
    joint = (pi_b.T[:, :, None] * mdp.transitions).transpose(1, 0, 2).reshape(n_states, -1)
    cum_rows = np.cumsum(joint, axis=1).tolist()
    last = joint.shape[1] - 1
    states = np.empty((R, length), dtype=np.int64)
    actions = np.empty((R, length), dtype=np.int64)
    for r in range(R):
        cur = int(s[r])
        s_row = [0] * length
        a_row = [0] * length
        for k, draw in enumerate(u[:, r].tolist()):
            s_row[k] = cur
            idx = bisect_left(cum_rows[cur], draw)
            if idx > last:
                idx = last
            a_row[k], cur = divmod(idx, n_states)
        states[r] = s_row
        actions[r] = a_row
    return Trajectory(states, actions)


def sample_trajectory(mdp: Mdp, behavior, length: int, seed: int, start=None) -> Trajectory:
    """Single behavior trajectory: A_k ~ pi_b(.|S_k), S_{k+1} ~ P_{A_k}(S_k, .)."""
    traj = sample_trajectories(mdp, behavior, length, [seed], start=start)
    return Trajectory(traj.states[0], traj.actions[0])
