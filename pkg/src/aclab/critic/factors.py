"""Generalized importance-sampling factors c(s,a), rho(s,a) and the stability calculator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from aclab.errors import AssumptionViolation, InfeasibleTruncation, ValidationError
from aclab.features import WeightMatrixInfo
from aclab.mdp import validate_policy

N_SEARCH_CAP = 10_000
BISECTION_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class IsFactorTable:
    """Factor tables plus the behavior-weighted row sums D_c, D_rho (one value per state).

    ``scheme`` is one of ``lambda_averaged``, ``two_sided``, ``vanilla``,
    ``on_policy`` or ``custom``; ``params`` holds the scheme parameters
    (``lambda`` or ``l``/``u`` vectors).
    """

    c: np.ndarray
    rho: np.ndarray
    behavior: np.ndarray
    scheme: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        rho = np.array(self.rho, dtype=float)
        pi_b = validate_policy(self.behavior, *c.shape, name="behavior policy")
        if rho.shape != c.shape:
            raise ValidationError("c and rho tables must have the same shape")
        if np.any(c < 0) or np.any(rho < 0) or not (np.all(np.isfinite(c)) and np.all(np.isfinite(rho))):
            raise ValidationError("importance factors must be finite and non-negative")
        for name, arr in (("c", c), ("rho", rho), ("behavior", pi_b)):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d_c(self) -> np.ndarray:
        return np.sum(self.behavior * self.c, axis=1)

    @property
    def d_rho(self) -> np.ndarray:
        return np.sum(self.behavior * self.rho, axis=1)

    @property
    def d_c_min(self) -> float:
        return float(self.d_c.min())

    @property
    def d_c_max(self) -> float:
        return float(self.d_c.max())

    @property
    def d_rho_min(self) -> float:
        return float(self.d_rho.min())

    @property
    def d_rho_max(self) -> float:
        return float(self.d_rho.max())

    @property
    def c_max(self) -> float:
        return float(self.c.max())

    @property
    def rho_max(self) -> float:
        return float(self.rho.max())

    @property
    def c_equals_rho(self) -> bool:
        return bool(np.array_equal(self.c, self.rho))

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "params": {k: np.asarray(v).tolist() for k, v in self.params.items()},
            "c": self.c.tolist(),
            "rho": self.rho.tolist(),
            "D_c": self.d_c.tolist(),
            "D_rho": self.d_rho.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _ratios(target, behavior) -> tuple[np.ndarray, np.ndarray]:
    pi_b = np.asarray(behavior, dtype=float)
    pi = validate_policy(target, *pi_b.shape, name="target policy")
    pi_b = validate_policy(pi_b, *pi.shape, name="behavior policy")
    if np.any(pi_b <= 0):
        bad = np.flatnonzero(np.any(pi_b <= 0, axis=1)).tolist()
        raise AssumptionViolation(f"behavior policy has zero probabilities in states {bad}", states=bad)
    return pi / pi_b, pi_b


def _per_state(value, n_states: int, name: str) -> np.ndarray:
    v = np.broadcast_to(np.asarray(value, dtype=float), (n_states,)).copy()
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} must be finite")
    return v


def make_lambda_factors(target, behavior, lam) -> IsFactorTable:
    """lambda-averaged Q-trace: c = rho = lambda(s) pi/pi_b + 1 - lambda(s)."""
    ratio, pi_b = _ratios(target, behavior)
    lam = _per_state(lam, ratio.shape[0], "lambda")
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValidationError("lambda must lie in [0, 1]")
    table = lam[:, None] * ratio + (1.0 - lam[:, None])
    return IsFactorTable(table, table, pi_b, "lambda_averaged", {"lambda": lam})


def make_vanilla_factors(target, behavior) -> IsFactorTable:
    """Plain importance ratios c = rho = pi/pi_b."""
    ratio, pi_b = _ratios(target, behavior)
    return IsFactorTable(ratio, ratio, pi_b, "vanilla", {})


def make_on_policy_factors(target, behavior) -> IsFactorTable:
    """Unit factors; only valid when the data is sampled from the target itself."""
    ratio, pi_b = _ratios(target, behavior)
    if not np.allclose(ratio, 1.0, atol=1e-12):
        raise ValidationError("on_policy scheme requires behavior == target")
    ones = np.ones_like(ratio)
    return IsFactorTable(ones, ones, pi_b, "on_policy", {})


def truncate(x, low, high) -> np.ndarray:
    """Two-sided truncation g_{low,high}(x)."""
    return np.minimum(np.maximum(x, low), high)


def solve_lower_level(ratio_row: np.ndarray, pi_b_row: np.ndarray, u: float, state: int = 0) -> float:
    """Find l in [0, 1] with sum_a pi_b(a) g_{l,u}(ratio(a)) = 1.

    The left side is continuous and non-decreasing in l, so bisection
    applies; the final value is polished by solving the linear piece that
    contains the root exactly.
    """
    def row_sum(level):
        return float(np.dot(pi_b_row, truncate(ratio_row, level, u)))

    if row_sum(0.0) > 1.0 + 1e-12 or row_sum(1.0) < 1.0 - 1e-12:
        raise InfeasibleTruncation(f"no lower truncation level normalizes state {state} for u={u}", state)
    lo, hi = 0.0, 1.0
    while hi - lo > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        if row_sum(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    level = hi
    below = ratio_row < level
    mass = pi_b_row[below].sum()
    if mass > 0:
        rest = np.dot(pi_b_row[~below], truncate(ratio_row[~below], 0.0, u))
        exact = (1.0 - rest) / mass
        if abs(exact - level) < 1e-9:
            level = float(min(max(exact, 0.0), 1.0))
    return level


def make_two_sided_factors(target, behavior, u) -> IsFactorTable:
    """Two-sided Q-trace: c = rho = g_{l(s),u(s)}(pi/pi_b) with l(s) normalizing each row."""
    ratio, pi_b = _ratios(target, behavior)
    u = _per_state(u, ratio.shape[0], "u")
    if np.any(u < 1):
        raise ValidationError("upper truncation levels must be >= 1")
    low = np.array([solve_lower_level(ratio[s], pi_b[s], u[s], s) for s in range(ratio.shape[0])])
    table = truncate(ratio, low[:, None], u[:, None])
    return IsFactorTable(table, table, pi_b, "two_sided", {"l": low, "u": u})


def lambda_for_variance_cap(target, behavior, gamma: float) -> np.ndarray:
    """Largest lambda(s) keeping gamma * rho_max <= 1 for the lambda-averaged scheme."""
    ratio, _ = _ratios(target, behavior)
    excess = ratio.max(axis=1) - 1.0
    with np.errstate(divide="ignore"):
        lam = np.where(excess > 0, (1.0 / gamma - 1.0) / excess, 1.0)
    return np.clip(lam, 0.0, 1.0)


# --- stability --------------------------------------------------------------


def geometric_sum(x: float, n: int) -> float:
    """f_n(x) = sum_{i=0}^{n-1} x^i."""
    if n <= 0:
        return 0.0
    if abs(1.0 - x) < 1e-12:
        return float(n)
    return (1.0 - x**n) / (1.0 - x)


def gamma_tilde(factors: IsFactorTable, gamma: float, n: int) -> float:
    """Sup-norm contraction factor 1 - f_n(gamma D_c,min)(1 - gamma D_rho,max)."""
    return 1.0 - geometric_sum(gamma * factors.d_c_min, n) * (1.0 - gamma * factors.d_rho_max)


def variance_parameter(factors: IsFactorTable, gamma: float, n: int) -> float:
    """Lipschitz constant L of the stochastic update."""
    if factors.c_equals_rho:
        return 1.0 + (gamma * factors.rho_max) ** n
    return (1.0 + gamma * factors.rho_max) * geometric_sum(gamma * factors.c_max, n)


@dataclass(frozen=True)
class StabilityReport:
    n: int
    gamma_tilde_n: float
    gamma_c: float
    condition3: tuple[bool, bool, bool]
    condition3_lhs: float
    limit_gamma_c: float
    n_required: int | None
    L: float
    ksa_min: float

    @property
    def feasible(self) -> bool:
        return self.n_required is not None

    @property
    def contracting(self) -> bool:
        return all(self.condition3[:2]) and self.gamma_c < 1.0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "gamma_tilde_n": self.gamma_tilde_n,
            "gamma_c": self.gamma_c,
            "condition3": {
                "c_le_rho": self.condition3[0],
                "gamma_D_rho_max_lt_1": self.condition3[1],
                "limit_lt_1": self.condition3[2],
            },
            "condition3_lhs": self.condition3_lhs,
            "limit_gamma_c": self.limit_gamma_c,
            "n_required": self.n_required if self.n_required is not None else "infeasible",
            "L": self.L,
            "ksa_min": self.ksa_min,
        }


def required_n(factors: IsFactorTable, gamma: float, ksa_min: float, cap: int = N_SEARCH_CAP) -> int | None:
    """Smallest n with gamma_tilde(n) / sqrt(K_SA,min) < 1, or None within ``cap``."""
    root = math.sqrt(ksa_min)
    for n in range(1, cap + 1):
        if gamma_tilde(factors, gamma, n) / root < 1.0:
            return n
    return None


def stability_report(factors: IsFactorTable, w: WeightMatrixInfo, gamma: float, n: int) -> StabilityReport:
    """Condition checks, contraction factors, required bootstrapping depth and L."""
    if n < 1:
        raise ValidationError("bootstrapping parameter n must be >= 1")
    root = math.sqrt(w.ksa_min)
    gt = gamma_tilde(factors, gamma, n)
    c1 = bool(np.all(factors.c <= factors.rho + 1e-15))
    c2 = gamma * factors.d_rho_max < 1.0
    denom = (1.0 - gamma * factors.d_c_min) * root
    lhs = gamma * (factors.d_rho_max - factors.d_c_min) / denom if denom > 0 else math.inf
    c3 = lhs < 1.0
    n_req = required_n(factors, gamma, w.ksa_min) if (c1 and c2 and c3) else None
    return StabilityReport(
        n=n,
        gamma_tilde_n=gt,
        gamma_c=gt / root,
        condition3=(c1, c2, c3),
        condition3_lhs=lhs,
        limit_gamma_c=lhs,
        n_required=n_req,
        L=variance_parameter(factors, gamma, n),
        ksa_min=w.ksa_min,
    )


SCHEMES = ("lambda", "two_sided", "vanilla", "on_policy")


def make_factors(scheme: str, target, behavior, lam=1.0, u=None) -> IsFactorTable:
    """Dispatch on a scheme name: ``lambda``, ``two_sided``, ``vanilla`` or ``on_policy``."""
    if scheme == "lambda":
        return make_lambda_factors(target, behavior, lam)
    if scheme == "two_sided":
        if u is None:
            raise ValidationError("two-sided scheme needs upper truncation levels u")
        return make_two_sided_factors(target, behavior, u)
    if scheme == "vanilla":
        return make_vanilla_factors(target, behavior)
    if scheme == "on_policy":
        return make_on_policy_factors(target, behavior)
    raise ValidationError(f"unknown factor scheme {scheme!r}; expected one of {SCHEMES}")
