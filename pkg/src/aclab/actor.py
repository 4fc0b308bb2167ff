"""Policy update rules, their stepsize schedules, and exact-critic actor runs."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from aclab.errors import DegenerateSupport, ValidationError
from aclab.features import FeatureMap
from aclab.mdp import Mdp, bellman_optimality, bellman_policy, exact_q, uniform_policy, validate_policy, value_iteration

log = logging.getLogger(__name__)

RULES = ("npg", "boltzmann", "eps_greedy")
MODES = ("constant", "increasing")
EPS_READINGS = ("inverse", "literal")
CSV_HEADER = "# offpolicy-ac-lab v1"


def _finite_q(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 2:
        raise ValidationError("Q estimate must be an (S, A) table")
    if not np.all(np.isfinite(q)):
        raise ValidationError("Q estimate has non-finite entries")
    return q


def _normalize_logits(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction; -inf entries stay -inf."""
    top = np.max(logits, axis=1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def npg_update_log(log_prev, q_est, beta_t: float) -> np.ndarray:
    """Log-space multiplicative update: log pi_{t+1} = log pi_t + beta_t Q_t, renormalized."""
    q = _finite_q(q_est)
    if not beta_t >= 0 or not math.isfinite(beta_t):
        raise ValidationError("stepsize must be finite and >= 0")
    log_prev = np.asarray(log_prev, dtype=float)
    if log_prev.shape != q.shape:
        raise ValidationError("policy and Q shapes differ")
    return _normalize_logits(log_prev + beta_t * q)


def npg_update(prev, q_est, beta_t: float) -> np.ndarray:
    """pi_{t+1}(a|s) proportional to pi_t(a|s) exp(beta_t Q_t(s,a))."""
    q = _finite_q(q_est)
    prev = validate_policy(prev, *q.shape, name="previous policy")
    with np.errstate(divide="ignore"):
        log_prev = np.log(prev)
    return np.exp(npg_update_log(log_prev, q, beta_t))


def boltzmann_update(q_est, beta_t: float) -> np.ndarray:
    """pi_{t+1}(a|s) proportional to exp(beta_t Q_t(s,a)); ignores the previous policy."""
    q = _finite_q(q_est)
    if not beta_t >= 0 or not math.isfinite(beta_t):
        raise ValidationError("stepsize must be finite and >= 0")
    return np.exp(_normalize_logits(beta_t * q))


def clamp_exploration(beta_s) -> tuple[np.ndarray, int]:
    """Clip exploration masses into [0, 1]; returns the clipped vector and how many entries moved."""
    beta_s = np.asarray(beta_s, dtype=float)
    if not np.all(np.isfinite(beta_s)):
        raise ValidationError("exploration masses must be finite")
    clipped = np.clip(beta_s, 0.0, 1.0)
    return clipped, int(np.count_nonzero(clipped != beta_s))


def eps_greedy_update(q_est, beta_t_s) -> np.ndarray:
    """Mass beta/|A| on every action plus 1 - beta on the greedy one (lowest index wins ties).

    Entries of ``beta_t_s`` outside [0, 1] would produce negative mass, so
    they are clamped with a warning.
    """
    q = _finite_q(q_est)
    n_states, n_actions = q.shape
    eps = np.broadcast_to(np.asarray(beta_t_s, dtype=float), (n_states,))
    eps, moved = clamp_exploration(eps)
    if moved:
        log.warning("clamped %d exploration masses into [0, 1]", moved)
    policy = np.repeat((eps / n_actions)[:, None], n_actions, axis=1)
    policy[np.arange(n_states), np.argmax(q, axis=1)] += 1.0 - eps
    return policy


def _greedy_log_mass(log_prev: np.ndarray, q: np.ndarray) -> float:
    """min_s log pi_t(a_{t,s}|s)."""
    greedy = np.argmax(q, axis=1)
    values = log_prev[np.arange(q.shape[0]), greedy]
    if np.any(np.isneginf(values)):
        bad = np.flatnonzero(np.isneginf(values)).tolist()
        raise DegenerateSupport(f"greedy action has zero probability in states {bad}")
    return float(values.min())


def _increasing_scale(gamma: float, t: int) -> float:
    return gamma ** (2 * t - 1)


def stepsize_condition(rule: str, mode: str, beta: float, t: int, prev, q_est, gamma: float,
                       log_prev=None):
    """Smallest stepsize allowed by the constant or geometrically increasing schedule.

    Returns a scalar for ``npg``/``boltzmann`` and a per-state vector for
    ``eps_greedy``. ``log_prev`` may replace ``prev`` when the previous policy
    is only known in log space.
    """
    if rule not in RULES:
        raise ValidationError(f"unknown rule {rule!r}")
    if mode not in MODES:
        raise ValidationError(f"unknown stepsize mode {mode!r}")
    if mode == "constant" and not beta > 0:
        raise ValidationError("beta must be positive")
    if t < 0:
        raise ValidationError("iteration index must be >= 0")
    q = _finite_q(q_est)
    n_actions = q.shape[1]
    scale = gamma * beta if mode == "constant" else 1.0 / _increasing_scale(gamma, t)
    if rule == "npg":
        if log_prev is None:
            prev = validate_policy(prev, *q.shape, name="previous policy")
            with np.errstate(divide="ignore"):
                log_prev = np.log(prev)
        return scale * -_greedy_log_mass(np.asarray(log_prev, dtype=float), q)
    if rule == "boltzmann":
        return scale * math.log(n_actions)
    return 2.0 * scale * np.max(np.abs(q), axis=1)


def actor_gap_limit(mode: str, beta: float, t: int, gamma: float) -> float:
    """Upper limit on max_{s,a} [H(Q_t) - H_{pi_{t+1}}(Q_t)] under the chosen schedule."""
    return 1.0 / beta if mode == "constant" else gamma ** (2 * t)


def exploration_mass(beta_s: np.ndarray, reading: str) -> tuple[np.ndarray, int]:
    """Exploration mass for the eps-greedy rule from the scheduled stepsize.

    ``literal`` uses beta_{t,s} itself (clamped); ``inverse`` uses
    min(1, 1/beta_{t,s}), the mass under which the schedule controls the actor error.
    """
    if reading == "literal":
        return clamp_exploration(beta_s)
    if reading == "inverse":
        with np.errstate(divide="ignore"):
            eps = np.where(beta_s > 0, 1.0 / np.where(beta_s > 0, beta_s, 1.0), 1.0)
        return clamp_exploration(eps)
    raise ValidationError(f"unknown exploration reading {reading!r}")


def theorem_terms(gamma: float, mode: str, beta: float, t: np.ndarray, initial_gap: float) -> dict:
    """Exact-critic bound terms per iteration: N1, N2 = 0, N3 (or N3') and the alternative N3."""
    t = np.asarray(t, dtype=float)
    n1 = gamma**t * initial_gap
    if mode == "constant":
        n3 = np.full(t.shape, 2.0 * gamma / (beta * (1.0 - gamma) ** 2))
        n3_alt = np.full(t.shape, 2.0 * gamma * beta / (1.0 - gamma) ** 2)
    else:
        n3 = 2.0 * gamma**t / (1.0 - gamma) ** 2
        n3_alt = n3.copy()
    return {"N1": n1, "N2": np.zeros_like(n1), "N3": n3, "N3_alt": n3_alt}


@dataclass
class ActorRun:
    """Exact-critic actor trace; ``betas[t]`` is the stepsize used for pi_t -> pi_{t+1}."""

    rule: str
    mode: str
    beta: float
    gamma: float
    policies: np.ndarray
    errors: np.ndarray
    betas: list
    terms: dict
    actor_gaps: np.ndarray
    gap_limits: np.ndarray
    clamped: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.errors) - 1

    @property
    def bound(self) -> np.ndarray:
        return self.terms["N1"] + self.terms["N2"] + self.terms["N3"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["t", "beta_t", "err_inf", "N1", "N2", "N3"])
        for t, err in enumerate(self.errors):
            if t < len(self.betas):
                b = np.atleast_1d(self.betas[t])
                beta_t = ";".join(repr(float(x)) for x in b)
            else:
                beta_t = ""
            out.writerow([t, beta_t, repr(float(err)), repr(float(self.terms["N1"][t])),
                          repr(float(self.terms["N2"][t])), repr(float(self.terms["N3"][t]))])
        return buf.getvalue()

    def policies_doc(self) -> dict:
        return {"rule": self.rule, "mode": self.mode, "beta": self.beta,
                "policies": self.policies.tolist()}


def run_actor_exact(mdp: Mdp, rule: str, mode: str, beta: float, T: int, eps_reading: str = "inverse",
                    q_star=None) -> ActorRun:
    """Policy iteration with an exact critic Q_t = Q^{pi_t}, starting from the uniform policy."""
    if rule not in RULES:
        raise ValidationError(f"unknown rule {rule!r}")
    if mode not in MODES:
        raise ValidationError(f"unknown stepsize mode {mode!r}")
    if int(T) != T or T < 0:
        raise ValidationError("T must be a non-negative integer")
    if mode == "constant" and not beta > 0:
        raise ValidationError("beta must be positive")
    gamma = mdp.gamma
    if q_star is None:
        q_star, _ = value_iteration(mdp, tol=1e-12)
    log_pi = np.full((mdp.n_states, mdp.n_actions), -math.log(mdp.n_actions))
    policy = uniform_policy(mdp.n_states, mdp.n_actions)
    policies = [policy]
    errors = []
    betas, gaps, limits, clamped = [], [], [], []
    for t in range(T + 1):
        q = exact_q(mdp, policy)
        errors.append(float(np.max(np.abs(q_star - q))))
        if t == T:
            break
        beta_t = stepsize_condition(rule, mode, beta, t, None, q, gamma, log_prev=log_pi)
        moved = 0
        if rule == "npg":
            log_pi = npg_update_log(log_pi, q, beta_t)
            policy = np.exp(log_pi)
        elif rule == "boltzmann":
            log_pi = _normalize_logits(beta_t * q)
            policy = np.exp(log_pi)
        else:
            eps, moved = exploration_mass(beta_t, eps_reading)
            policy = eps_greedy_update(q, eps)
            with np.errstate(divide="ignore"):
                log_pi = np.log(policy)
        policy = policy / policy.sum(axis=1, keepdims=True)
        gaps.append(float(np.max(bellman_optimality(mdp, q) - bellman_policy(mdp, policy, q))))
        limits.append(actor_gap_limit(mode, beta, t, gamma))
        betas.append(beta_t)
        clamped.append(moved)
        policies.append(policy)
    terms = theorem_terms(gamma, mode, beta, np.arange(T + 1), errors[0])
    return ActorRun(rule, mode, float(beta), gamma, np.array(policies), np.array(errors), betas, terms,
                    np.array(gaps), np.array(limits), np.array(clamped, dtype=int),
                    meta={"eps_reading": eps_reading if rule == "eps_greedy" else None})


# --- compatible softmax parameterization -----------------------------------


@dataclass(frozen=True, eq=False)
class SoftmaxParam:
    """pi_theta(a|s) proportional to exp(phi(s,a)^T theta)."""

    theta: np.ndarray
    features: FeatureMap

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.shape != (self.features.dim,):
            raise ValidationError(f"theta must have length {self.features.dim}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def log_policy(self) -> np.ndarray:
        return _normalize_logits(self.features.q_values(self.theta))

    def policy(self) -> np.ndarray:
        return np.exp(self.log_policy())


def softmax_policy(theta, features: FeatureMap) -> np.ndarray:
    return SoftmaxParam(theta, features).policy()


def theta_update(param: SoftmaxParam, w, beta_t: float) -> SoftmaxParam:
    """theta <- theta + beta_t w, equivalent to an NPG step with Q estimate Phi w."""
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.shape != param.theta.shape:
        raise ValidationError("critic weights and theta differ in length")
    if not math.isfinite(beta_t):
        raise ValidationError("stepsize must be finite")
    return SoftmaxParam(param.theta + beta_t * w, param.features)


def logsumexp_gap_check(x, y, beta: float) -> tuple[float, float]:
    """Both sides of max x - <x, softmax-weighted y> <= log(1/y_imax) / beta."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if x.shape != y.shape or x.size == 0:
        raise ValidationError("x and y must be non-empty vectors of equal length")
    if np.any(y <= 0):
        raise ValidationError("y must have strictly positive entries")
    if abs(y.sum() - 1.0) > 1e-9:
        raise ValidationError("y must be a probability vector")
    if not beta > 0:
        raise ValidationError("beta must be positive")
    top = int(np.argmax(x))
    weights = y * np.exp(beta * (x - x[top]))
    lhs = float(x[top] - np.dot(x, weights) / weights.sum())
    rhs = float(math.log(1.0 / y[top]) / beta)
    return lhs, rhs
