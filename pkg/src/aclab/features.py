"""Linear function approximation: feature matrices, K_SA-weighted norms and projection."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from aclab.errors import AssumptionViolation, ValidationError
from aclab.mdp import MixingInfo, validate_policy

log = logging.getLogger(__name__)

RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix Phi of shape (|S||A|, d), rows ordered s * |A| + a.

    Rows are rescaled at construction so that max_{s,a} ||phi(s,a)||_1 <= 1.
    """

    phi: np.ndarray
    n_actions: int

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[0] == 0 or phi.shape[1] == 0:
            raise ValidationError(f"feature matrix must be 2-D and non-empty, got shape {phi.shape}")
        if phi.shape[0] % self.n_actions:
            raise ValidationError("feature rows must be a multiple of n_actions")
        if not np.all(np.isfinite(phi)):
            raise ValidationError("feature matrix has non-finite entries")
        sv = np.linalg.svd(phi, compute_uv=False)
        if phi.shape[1] > phi.shape[0] or sv[-1] < RANK_RTOL * sv[0]:
            raise ValidationError("feature matrix must have linearly independent columns")
        norm = np.abs(phi).sum(axis=1).max()
        if norm > 1.0 + 1e-12:
            log.warning("rescaling features by 1/%.6g to satisfy ||Phi||_inf <= 1", norm)
            phi = phi / norm
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def dim(self) -> int:
        return self.phi.shape[1]

    @property
    def n_states(self) -> int:
        return self.phi.shape[0] // self.n_actions

    def q_values(self, w) -> np.ndarray:
        """Phi w reshaped to an (S, A) table."""
        return (self.phi @ np.asarray(w, dtype=float)).reshape(self.n_states, self.n_actions)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "rows": self.phi.tolist()}

    @classmethod
    def from_dict(cls, doc: dict, n_actions: int) -> "FeatureMap":
        try:
            rows = np.asarray(doc["rows"], dtype=float)
            dim = int(doc["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed feature document: {exc}") from None
        if rows.ndim != 2 or rows.shape[1] != dim:
            raise ValidationError(f"feature rows must have {dim} columns")
        return cls(rows, n_actions)

    @classmethod
    def load(cls, path, n_actions: int) -> "FeatureMap":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read feature file {path}: {exc}") from None
        return cls.from_dict(doc, n_actions)


def tabular_features(n_states: int, n_actions: int) -> FeatureMap:
    return FeatureMap(np.eye(n_states * n_actions), n_actions)


def random_features(n_states: int, n_actions: int, dim: int, seed: int) -> FeatureMap:
    """Gaussian features normalized to unit maximal row l1-norm."""
    if not 1 <= dim <= n_states * n_actions:
        raise ValidationError(f"feature dimension must be in [1, {n_states * n_actions}]")
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=(n_states * n_actions, dim))
    return FeatureMap(phi / np.abs(phi).sum(axis=1).max(), n_actions)


@dataclass(frozen=True, eq=False)
class WeightMatrixInfo:
    """Diagonal of K_SA = diag(mu(s) pi_b(a|s)) and the spectral quantities derived from it."""

    ksa_diag: np.ndarray
    ksa_min: float
    lambda_min: float

    def norm(self, q) -> float:
        return weighted_norm(q, self)


def spectral_info(features: FeatureMap, mixing: MixingInfo, behavior) -> WeightMatrixInfo:
    """K_SA diagonal, its minimum, and the smallest eigenvalue of Phi^T K_SA Phi."""
    mu = np.asarray(mixing.stationary, dtype=float)
    pi_b = validate_policy(behavior, len(mu), features.n_actions, "behavior policy")
    if features.n_states != len(mu):
        raise ValidationError("feature rows do not match the number of states")
    diag = (mu[:, None] * pi_b).reshape(-1)
    if np.any(diag <= 0):
        bad = sorted({int(i) // features.n_actions for i in np.flatnonzero(diag <= 0)})
        raise AssumptionViolation(f"K_SA has zero weight in states {bad}", states=bad)
    G = features.phi.T @ (diag[:, None] * features.phi)
    lam = float(np.linalg.eigvalsh(G)[0])
    return WeightMatrixInfo(ksa_diag=diag, ksa_min=float(diag.min()), lambda_min=lam)


def weighted_norm(q, w: WeightMatrixInfo) -> float:
    """sqrt(sum_{s,a} mu(s) pi_b(a|s) Q(s,a)^2)."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape != w.ksa_diag.shape:
        raise ValidationError("Q-table size does not match the weighting")
    return float(np.sqrt(np.dot(w.ksa_diag, q * q)))


def projection_weights(q, features: FeatureMap, w: WeightMatrixInfo) -> np.ndarray:
    """Coefficients v with Phi v = Proj_Q q, i.e. (Phi^T K Phi)^{-1} Phi^T K q."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != features.phi.shape[0]:
        raise ValidationError("Q-table size does not match the feature rows")
    K = w.ksa_diag
    G = features.phi.T @ (K[:, None] * features.phi)
    return np.linalg.solve(G, features.phi.T @ (K * q))


def project(q, features: FeatureMap, w: WeightMatrixInfo) -> np.ndarray:
    """K_SA-orthogonal projection of q onto span(Phi), returned in q's shape."""
    q_arr = np.asarray(q, dtype=float)
    out = features.phi @ projection_weights(q_arr, features, w)
    return out.reshape(q_arr.shape)
