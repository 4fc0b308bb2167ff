"""Matrix forms of the generalized Bellman operators and their exact fixed points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from aclab.critic.factors import IsFactorTable, stability_report
from aclab.errors import StabilityError, ValidationError
from aclab.features import FeatureMap, WeightMatrixInfo, project, spectral_info, weighted_norm
from aclab.mdp import Mdp, MixingInfo, exact_q, pair_transition_matrix, stationary_distribution


class GeneralizedBellman:
    """B_{c,rho}(Q) = T_c(H_rho(Q) - Q) + Q for a fixed MDP, behavior and factor table.

    T_c = sum_{i<n} (gamma P_{pi_c} D_c)^i and H_rho(Q) = R + gamma P_{pi_rho} D_rho Q;
    P_{pi_c} D_c has entries P_a(s,s2) pi_b(a2|s2) c(s2,a2).
    """

    def __init__(self, mdp: Mdp, factors: IsFactorTable, n: int):
        if n < 1:
            raise ValidationError("n must be >= 1")
        if factors.c.shape != (mdp.n_states, mdp.n_actions):
            raise ValidationError("factor table shape does not match the MDP")
        self.mdp = mdp
        self.factors = factors
        self.n = n
        g = mdp.gamma
        self.m_c = g * pair_transition_matrix(mdp, factors.behavior * factors.c)
        self.m_rho = g * pair_transition_matrix(mdp, factors.behavior * factors.rho)
        size = mdp.n_pairs
        T = np.eye(size)
        term = np.eye(size)
        for _ in range(n - 1):
            term = term @ self.m_c
            T = T + term
        self.t_matrix = T
        self.r = mdp.rewards.reshape(-1)

    def _flat(self, q) -> tuple[np.ndarray, tuple]:
        q = np.asarray(q, dtype=float)
        if q.size != self.r.size:
            raise ValidationError("Q-table size does not match the MDP")
        return q.reshape(-1), q.shape

    def t_c(self, q) -> np.ndarray:
        v, shape = self._flat(q)
        return (self.t_matrix @ v).reshape(shape)

    def h_rho(self, q) -> np.ndarray:
        v, shape = self._flat(q)
        return (self.r + self.m_rho @ v).reshape(shape)

    def __call__(self, q) -> np.ndarray:
        v, shape = self._flat(q)
        return (self.t_matrix @ (self.r + self.m_rho @ v - v) + v).reshape(shape)

    @property
    def linear_part(self) -> np.ndarray:
        """Matrix of Q -> B(Q) - B(0)."""
        size = self.r.size
        return np.eye(size) - self.t_matrix @ (np.eye(size) - self.m_rho)


def generalized_bellman(q, mdp: Mdp, behavior, factors: IsFactorTable, n: int) -> np.ndarray:
    _check_behavior(behavior, factors)
    return GeneralizedBellman(mdp, factors, n)(q)


def _check_behavior(behavior, factors: IsFactorTable) -> None:
    if not np.allclose(np.asarray(behavior, dtype=float), factors.behavior, atol=1e-12):
        raise ValidationError("factor table was built for a different behavior policy")


def q_fixed_point(mdp: Mdp, behavior, factors: IsFactorTable, n: int = 1) -> np.ndarray:
    """Solution of Q = B_{c,rho}(Q), computed from (I - gamma P_{pi_rho} D_rho) Q = R."""
    _check_behavior(behavior, factors)
    if mdp.gamma * factors.d_rho_max >= 1.0 or not np.all(factors.c <= factors.rho + 1e-15):
        raise StabilityError("generalized Bellman operator is not a contraction (needs c <= rho, gamma D_rho,max < 1)")
    op = GeneralizedBellman(mdp, factors, n)
    q = np.linalg.solve(np.eye(op.r.size) - op.m_rho, op.r)
    resid = np.max(np.abs(op(q) - q))
    if resid > 1e-8 * max(1.0, np.max(np.abs(q))):
        raise StabilityError(f"fixed point residual {resid:.3g} too large; T_c is singular")
    return q.reshape(mdp.n_states, mdp.n_actions)


@dataclass
class CriticModel:
    """Everything needed to evaluate the critic analytically for one (MDP, behavior, factors, Phi, n)."""

    mdp: Mdp
    factors: IsFactorTable
    features: FeatureMap
    n: int
    mixing: MixingInfo
    weights: WeightMatrixInfo

    @classmethod
    def build(cls, mdp: Mdp, behavior, factors: IsFactorTable, features: FeatureMap, n: int,
              mixing: MixingInfo | None = None) -> "CriticModel":
        _check_behavior(behavior, factors)
        if features.phi.shape[0] != mdp.n_pairs:
            raise ValidationError("feature rows do not match |S||A|")
        mixing = mixing if mixing is not None else stationary_distribution(mdp, factors.behavior)
        weights = spectral_info(features, mixing, factors.behavior)
        model = cls(mdp, factors, features, n, mixing, weights)
        model._op = GeneralizedBellman(mdp, factors, n)
        K = weights.ksa_diag
        phi = features.phi
        lhs_core = model._op.t_matrix @ (np.eye(mdp.n_pairs) - model._op.m_rho)
        model.a_matrix = phi.T @ (K[:, None] * (lhs_core @ phi))
        model.b_vector = phi.T @ (K * (model._op.t_matrix @ model._op.r))
        return model

    @property
    def operator(self) -> GeneralizedBellman:
        return self._op

    @property
    def report(self):
        return stability_report(self.factors, self.weights, self.mdp.gamma, self.n)

    def expected_update(self, w) -> np.ndarray:
        """F(w) = Phi^T K_SA T_c(H_rho(Phi w) - Phi w), the mean TD direction under stationarity."""
        return self.b_vector - self.a_matrix @ np.asarray(w, dtype=float)

    def project(self, q) -> np.ndarray:
        return project(q, self.features, self.weights)

    def projected_bellman(self, q) -> np.ndarray:
        return self.project(self._op(q))

    def q_fixed_point(self) -> np.ndarray:
        return q_fixed_point(self.mdp, self.factors.behavior, self.factors, self.n)

    def pbe_fixed_point(self, check: bool = True) -> np.ndarray:
        """Unique w with Phi w = Proj B(Phi w), by a d x d linear solve."""
        rep = self.report
        if check and not rep.contracting:
            raise StabilityError(
                f"Proj B is not guaranteed to contract: gamma_c = {rep.gamma_c:.4g} for n = {self.n}"
            )
        try:
            w = np.linalg.solve(self.a_matrix, self.b_vector)
        except np.linalg.LinAlgError:
            raise ValidationError("projected Bellman system is singular; features are rank deficient") from None
        if check:
            scale = max(1.0, float(np.max(np.abs(self.b_vector))))
            if np.max(np.abs(self.a_matrix @ w - self.b_vector)) > 1e-9 * scale:
                raise ValidationError("projected Bellman system is ill-conditioned")
        return w


def pbe_fixed_point(mdp: Mdp, behavior, factors: IsFactorTable, features: FeatureMap, n: int) -> np.ndarray:
    return CriticModel.build(mdp, behavior, factors, features, n).pbe_fixed_point()


@dataclass(frozen=True)
class BiasBound:
    approx_term: float
    sampling_bias_term: float
    specialized_bias_term: float | None

    @property
    def total(self) -> float:
        return self.approx_term + self.sampling_bias_term


def bias_bound(mdp: Mdp, behavior, factors: IsFactorTable, features: FeatureMap, n: int, target,
               model: CriticModel | None = None) -> BiasBound:
    """Right-hand side of the limit-point error bound for ||Q^pi - Phi w*||_{K_SA}.

    Returns the function-approximation term, the sampling-bias term and, for
    the two named schemes, their specialized closed forms.
    """
    model = model or CriticModel.build(mdp, behavior, factors, features, n)
    rep = model.report
    if not rep.gamma_c < 1:
        raise StabilityError(f"gamma_c = {rep.gamma_c:.4g} >= 1; bound does not apply")
    g = mdp.gamma
    pi = np.asarray(target, dtype=float)
    pi_b = factors.behavior
    q_cr = model.q_fixed_point()
    resid = q_cr - model.project(q_cr)
    approx = weighted_norm(resid, model.weights) / np.sqrt(1.0 - rep.gamma_c**2)
    l1 = np.abs(pi - pi_b * factors.rho).sum(axis=1).max()
    bias = g * l1 / ((1.0 - g) * (1.0 - g * factors.d_rho_max))

    special = None
    if factors.scheme == "lambda_averaged":
        lam = factors.params["lambda"]
        special = g * np.max((1.0 - lam) * np.abs(pi - pi_b).sum(axis=1)) / (1.0 - g) ** 2
        if abs(special - bias) > 1e-10 * max(1.0, bias):
            raise AssertionError("lambda-averaged bias term disagrees with the general form")
    elif factors.scheme == "two_sided":
        low, up = factors.params["l"], factors.params["u"]
        over = np.maximum(pi - pi_b * up[:, None], 0.0)
        under = np.minimum(pi - pi_b * low[:, None], 0.0)
        special = g * np.max((over - under).sum(axis=1)) / (1.0 - g) ** 2
        if special < bias - 1e-10 * max(1.0, bias):
            raise AssertionError("two-sided bias term is below the general form")
    return BiasBound(float(approx), float(bias), None if special is None else float(special))


def target_value(mdp: Mdp, target) -> np.ndarray:
    return exact_q(mdp, target)
