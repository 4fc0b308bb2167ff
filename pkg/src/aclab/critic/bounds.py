"""Finite-sample bound curves for the critic and the stepsize rules that make them apply."""

from __future__ import annotations

import logging
import math

import numpy as np

from aclab.critic.factors import StabilityReport
from aclab.critic.td import CriticConfig
from aclab.errors import PreconditionError, ValidationError
from aclab.mdp import MixingInfo

log = logging.getLogger(__name__)

VARIANCE_CONSTANT = 130.0
DIMINISHING_CONSTANT = 8.0 * math.e


def stepsize_cap(report: StabilityReport, lambda_min: float) -> float:
    """(1 - gamma_c) lambda_min / (130 L^2), the budget for alpha * (t_alpha + n + 1)."""
    return (1.0 - report.gamma_c) * lambda_min / (VARIANCE_CONSTANT * report.L**2)


def _require_contraction(report: StabilityReport) -> None:
    if not report.gamma_c < 1.0:
        raise PreconditionError(f"gamma_c = {report.gamma_c:.6g} >= 1; no finite-sample bound", "gamma_c < 1")


def _constants(w0, w_star) -> tuple[float, float]:
    w0 = np.asarray(w0, dtype=float)
    w_star = np.asarray(w_star, dtype=float)
    c1 = (np.linalg.norm(w0) + np.linalg.norm(w0 - w_star) + 1.0) ** 2
    c2 = VARIANCE_CONSTANT * (np.linalg.norm(w_star) + 1.0) ** 2
    return float(c1), float(c2)


def max_constant_stepsize(report: StabilityReport, lambda_min: float, mixing: MixingInfo) -> float:
    """Largest alpha with alpha (t_alpha + n + 1) <= cap.

    Iterates alpha <- cap / (t_alpha + n + 1) from alpha = cap / (n + 1);
    the sequence is non-increasing because t_alpha grows as alpha shrinks,
    and stops once t_alpha no longer changes, where the cap holds with equality.
    """
    _require_contraction(report)
    cap = stepsize_cap(report, lambda_min)
    alpha = cap / (report.n + 1)
    for _ in range(10_000):
        t = mixing.mixing_time(alpha)
        nxt = cap / (t + report.n + 1)
        if nxt >= alpha:
            return alpha
        alpha = nxt
    return alpha


def _mixing_times(mixing: MixingInfo, alphas: np.ndarray) -> np.ndarray:
    return mixing.mixing_times(np.maximum(alphas, np.finfo(float).tiny))


def theoretical_bound_curve(config: CriticConfig, report: StabilityReport, lambda_min: float,
                            t_mix: MixingInfo, w0, w_star, K: int | None = None,
                            strict: bool = False, warn: bool = True) -> np.ndarray:
    """Bound on E||w_k - w*||^2 for k = 0..K; NaN where the bound is not stated.

    Constant stepsize: c1 (1 - (1 - gamma_c) lambda_min alpha)^(k - tau)
    + c2 alpha L^2 tau / ((1 - gamma_c) lambda_min) for k >= tau = t_alpha + n + 1.
    A violated stepsize budget logs a warning (unless ``warn`` is off) or
    raises when ``strict``.

    Diminishing stepsize alpha / (k + h): c1 (k0 + h)/(k + h)
    + c2 8e alpha^2 / ((1 - gamma_c) lambda_min alpha - 1) (t_k + n + 1)/(k + h) for k >= k0.
    """
    _require_contraction(report)
    K = config.K if K is None else K
    if report.n != config.n:
        raise ValidationError("stability report and critic config disagree on n")
    drift = (1.0 - report.gamma_c) * lambda_min
    cap = stepsize_cap(report, lambda_min)
    c1, c2 = _constants(w0, w_star)
    k = np.arange(K + 1, dtype=float)
    out = np.full(K + 1, np.nan)
    alpha = config.alpha
    n = config.n

    if config.stepsize == "constant":
        if alpha <= 0:
            raise PreconditionError("constant stepsize must be positive for the bound", "alpha > 0")
        tau = t_mix.mixing_time(alpha) + n + 1
        if alpha * tau > cap:
            msg = f"alpha (t_alpha + n + 1) = {alpha * tau:.4g} exceeds {cap:.4g}"
            if strict:
                raise PreconditionError(msg, "alpha (t_alpha + n + 1) <= (1 - gamma_c) lambda_min / (130 L^2)")
            if warn:
                log.warning("%s; bound reported but not guaranteed", msg)
        rate = 1.0 - drift * alpha
        floor = c2 * alpha * report.L**2 * tau / drift
        valid = k >= tau
        out[valid] = c1 * rate ** (k[valid] - tau) + floor
        return out

    if alpha * drift <= 1.0:
        raise PreconditionError(
            f"alpha = {alpha:.4g} must exceed 1 / ((1 - gamma_c) lambda_min) = {1.0 / drift:.4g}",
            "alpha > 1 / ((1 - gamma_c) lambda_min)",
        )
    h = config.h
    alphas = alpha / (k + h)
    tau_k = _mixing_times(t_mix, alphas) + n + 1
    eligible = np.flatnonzero(k >= tau_k)
    if eligible.size == 0:
        return out
    k0 = int(eligible[0])
    if not window_condition(alpha, h, tau_k, cap, k0, K):
        msg = f"h = {h:.6g} violates the stepsize-window budget {cap:.4g}"
        if strict:
            raise PreconditionError(msg, "sum of alpha_i over each mixing window <= (1 - gamma_c) lambda_min / (130 L^2)")
        if warn:
            log.warning("%s; bound reported but not guaranteed", msg)
    valid = k >= k0
    noise = c2 * DIMINISHING_CONSTANT * alpha**2 / (drift * alpha - 1.0)
    out[valid] = c1 * (k0 + h) / (k[valid] + h) + noise * tau_k[valid] / (k[valid] + h)
    return out


def window_condition(alpha: float, h: float, tau_k: np.ndarray, cap: float, k0: int, K: int) -> bool:
    """Whether sum_{i=k-tau_k}^{k-1} alpha/(i+h) <= cap for all k0 <= k <= K."""
    steps = alpha / (np.arange(K + 1, dtype=float) + h)
    cums = np.concatenate([[0.0], np.cumsum(steps)])
    ks = np.arange(k0, K + 1)
    lo = ks - tau_k[ks]
    if np.any(lo < 0):
        return False
    sums = cums[ks] - cums[lo]
    return bool(np.all(sums <= cap * (1 + 1e-12)))


def min_diminishing_offset(alpha: float, report: StabilityReport, lambda_min: float, mixing: MixingInfo,
                           K: int) -> float:
    """Smallest integer h satisfying the stepsize-window budget over k = k0..K."""
    _require_contraction(report)
    cap = stepsize_cap(report, lambda_min)
    n = report.n
    k = np.arange(K + 1, dtype=float)

    def ok(h):
        tau_k = _mixing_times(mixing, alpha / (k + h)) + n + 1
        eligible = np.flatnonzero(k >= tau_k)
        if eligible.size == 0:
            return True
        return window_condition(alpha, h, tau_k, cap, int(eligible[0]), K)

    hi = 1.0
    while not ok(hi):
        hi *= 2.0
        if hi > 1e15:
            raise PreconditionError("no offset h satisfies the stepsize-window budget", "window budget")
    lo = hi / 2.0 if hi > 1.0 else 0.0
    while hi - lo > 1.0:
        mid = math.floor((lo + hi) / 2.0)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return float(math.ceil(hi))
