"""Ensemble experiments: sample-complexity sweeps over the actor-critic loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from aclab.errors import ValidationError
from aclab.pipeline import PipelineConfig, run_pipeline

DEFAULT_LEVELS = (0.4, 0.2, 0.1, 0.05)


def coupled_stepsize(K: int, coupling: float) -> float:
    """Critic stepsize alpha = coupling * log(K) / K."""
    if K < 2 or not coupling > 0:
        raise ValidationError("coupled stepsize needs K >= 2 and a positive coupling")
    return coupling * math.log(K) / K


def fit_exponent(levels, required) -> float:
    """Least-squares slope of log(required) against log(1/level) over the finite entries."""
    levels = np.asarray(levels, dtype=float)
    required = np.asarray(required, dtype=float)
    keep = np.isfinite(required)
    if keep.sum() < 2:
        return math.nan
    x = np.log(1.0 / levels[keep])
    if np.ptp(x) == 0:
        return math.nan
    return float(np.polyfit(x, np.log(required[keep]), 1)[0])


@dataclass
class SampleComplexity:
    """Samples per seed needed to reach each accuracy level, and the fitted growth exponent.

    ``curves`` maps (coupling, K) to the seed-averaged ||Q* - Q^{pi_t}||_inf for
    t = 0..T_max; ``required[i]`` is inf when no grid point reaches ``levels[i]``.
    """

    levels: np.ndarray
    required: np.ndarray
    choice: list
    exponent: float
    n: int
    curves: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "levels": self.levels.tolist(),
            "required_samples": [x if math.isfinite(x) else "unreached" for x in self.required.tolist()],
            "choice": self.choice,
            "exponent": self.exponent,
            "n": self.n,
            "curves": {f"{c}:{K}": v.tolist() for (c, K), v in self.curves.items()},
        }


def sample_complexity_sweep(base: PipelineConfig, K_grid, couplings=(0.5,), T_max: int = 24,
                            levels=DEFAULT_LEVELS) -> SampleComplexity:
    """Minimal per-seed sample count t (K + n) whose mean error reaches each level.

    One run with T_max outer iterations per (coupling, K) yields the error of
    every shorter run as well: the behavior trajectory for T outer iterations
    is a prefix of the one for T_max, so the first t blocks coincide.
    """
    if T_max < 1:
        raise ValidationError("T_max must be >= 1")
    levels = np.asarray(levels, dtype=float)
    if levels.size == 0 or np.any(levels <= 0):
        raise ValidationError("accuracy levels must be positive")
    required = np.full(levels.shape, math.inf)
    choice: list = [None] * levels.size
    curves = {}
    n = None
    for coupling in couplings:
        for K in K_grid:
            cfg = replace(base, K=int(K), T=int(T_max), alpha=coupled_stepsize(int(K), float(coupling)))
            run = run_pipeline(cfg)
            n = run.meta["n"]
            mean = run.errors.mean(axis=0)
            curves[(float(coupling), int(K))] = mean
            for i, eps in enumerate(levels):
                hit = np.flatnonzero(mean[1:] <= eps)
                if hit.size:
                    t = int(hit[0]) + 1
                    cost = t * (int(K) + n)
                    if cost < required[i]:
                        required[i] = cost
                        choice[i] = {"coupling": float(coupling), "K": int(K), "T": t}
    return SampleComplexity(levels, required, choice, fit_exponent(levels, required), int(n), curves)
