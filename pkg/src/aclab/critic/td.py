"""Stochastic multi-step off-policy TD with linear function approximation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from aclab.critic.factors import IsFactorTable
from aclab.errors import ValidationError
from aclab.features import FeatureMap
from aclab.mdp import Mdp, Trajectory, validate_policy

CSV_HEADER = "# offpolicy-ac-lab v1"
CHUNK = 4096
# below this R * d^2 the blocked affine scan beats the plain step loop
BLOCK_SCAN_MAX = 4096
SCAN_BLOCK = 64


@dataclass(frozen=True)
class CriticConfig:
    """Critic hyper-parameters.

    ``stepsize`` is ``constant`` (alpha_k = alpha) or ``diminishing``
    (alpha_k = alpha / (k + h)).
    """

    n: int
    K: int
    stepsize: str = "constant"
    alpha: float = 0.0
    h: float = 0.0
    w0: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValidationError("n must be an integer >= 1")
        if int(self.K) != self.K or self.K < 0:
            raise ValidationError("K must be a non-negative integer")
        if self.stepsize not in ("constant", "diminishing"):
            raise ValidationError(f"unknown stepsize mode {self.stepsize!r}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValidationError("alpha must be finite and >= 0")
        if not np.isfinite(self.h) or self.h < 0:
            raise ValidationError("h must be finite and >= 0")
        if self.stepsize == "diminishing" and self.h == 0 and self.alpha > 0:
            raise ValidationError("diminishing stepsize needs h > 0 (alpha_0 = alpha / h)")
        if self.w0 is not None:
            object.__setattr__(self, "w0", tuple(float(x) for x in np.ravel(self.w0)))

    def alphas(self, count: int | None = None) -> np.ndarray:
        """alpha_0 ... alpha_{count-1} (defaults to K values)."""
        k = np.arange(self.K if count is None else count, dtype=float)
        if self.stepsize == "constant":
            return np.full(k.shape, float(self.alpha))
        return self.alpha / (k + self.h)

    def initial_weights(self, dim: int) -> np.ndarray:
        if self.w0 is None:
            return np.zeros(dim)
        w0 = np.asarray(self.w0, dtype=float)
        if w0.shape != (dim,):
            raise ValidationError(f"w0 must have length {dim}")
        return w0

    def with_(self, **changes) -> "CriticConfig":
        return replace(self, **changes)


def pair_indices(traj: Trajectory, n_actions: int) -> np.ndarray:
    return np.asarray(traj.states) * n_actions + np.asarray(traj.actions)


def _affine_scan(head: np.ndarray, g: np.ndarray, b: np.ndarray, w0: np.ndarray) -> np.ndarray:
    """All iterates of w_{j+1} = w_j + head[j] (b[j] + g[j] . w_j), shapes (m, R, d) in and out.

    Steps are grouped into blocks; the affine map of every block is composed
    with all blocks advancing together, block start points are then chained
    sequentially, and a final vectorized replay fills in the iterates.
    """
    m, R, d = head.shape
    B = SCAN_BLOCK
    nb = -(-m // B)
    pad = nb * B - m
    if pad:
        head = np.concatenate([head, np.zeros((pad, R, d))])
        g = np.concatenate([g, np.zeros((pad, R, d))])
        b = np.concatenate([b, np.zeros((pad, R))])
    head = head.reshape(nb, B, R, d)
    g = g.reshape(nb, B, R, d)
    b = b.reshape(nb, B, R)
    mat = np.broadcast_to(np.eye(d), (nb, R, d, d)).copy()
    off = np.zeros((nb, R, d))
    for j in range(B):
        h_j, g_j = head[:, j], g[:, j]
        mat += h_j[..., :, None] * np.einsum("brd,brde->bre", g_j, mat)[..., None, :]
        off += h_j * (b[:, j] + (g_j * off).sum(axis=2))[..., None]
    starts = np.empty((nb, R, d))
    cur = np.array(w0, dtype=float)
    for i in range(nb):
        starts[i] = cur
        cur = np.einsum("rde,re->rd", mat[i], cur) + off[i]
    out = np.empty((nb, B, R, d))
    w = starts
    for j in range(B):
        w = w + head[:, j] * (b[:, j] + (g[:, j] * w).sum(axis=2))[..., None]
        out[:, j] = w
    return out.reshape(nb * B, R, d)[:m]


def td_iterate(phi: np.ndarray, rewards: np.ndarray, c: np.ndarray, rho: np.ndarray, gamma: float, n: int,
               pairs: np.ndarray, alphas: np.ndarray, w0: np.ndarray, w_star: np.ndarray | None = None,
               keep_weights: bool = True, chunk: int = CHUNK):
    """Run the TD recursion for a batch of trajectories.

    ``pairs`` has shape (R, L) of flat state-action indices; ``c`` and ``rho``
    are (SA,) or per-trajectory (R, SA) tables; ``w0`` is (d,) or (R, d).

    The bracket sum_i gamma^i C_{k,i} Delta_i(w) is affine in w, so for each
    step it is written as b_k + g_k^T w with (b_k, g_k) computed vectorized
    over a chunk of steps; only the w-update itself runs step by step.

    Returns (weights (R, K+1, d) or None, errors (R, K+1) or None, final (R, d)).
    """
    pairs = np.atleast_2d(np.asarray(pairs, dtype=np.int64))
    R, length = pairs.shape
    K = len(alphas)
    if length < K + n:
        raise ValidationError(f"trajectory of length {length} is shorter than K + n = {K + n}")
    size, d = phi.shape
    c = np.broadcast_to(np.asarray(c, dtype=float).reshape(-1, size), (R, size))
    rho = np.broadcast_to(np.asarray(rho, dtype=float).reshape(-1, size), (R, size))
    r = np.asarray(rewards, dtype=float).reshape(-1)
    w = np.array(np.broadcast_to(np.asarray(w0, dtype=float), (R, d)))
    target = None if w_star is None else np.broadcast_to(np.asarray(w_star, dtype=float), (R, d))
    weights = np.empty((R, K + 1, d)) if keep_weights else None
    errors = np.empty((R, K + 1)) if target is not None else None
    if keep_weights:
        weights[:, 0] = w
    if errors is not None:
        errors[:, 0] = np.sum((w - target) ** 2, axis=1)
    # flat per-trajectory tables so each gather is a single np.take
    offset = (np.arange(R) * size)[None, :]
    gamma_c = gamma * c.reshape(-1)
    gamma_rho_phi = (gamma * rho[..., None] * phi[None]).reshape(R * size, d)

    for k0 in range(0, K, chunk):
        m = min(chunk, K - k0)
        # time-major windows, shape (m + n, R)
        win = np.ascontiguousarray(pairs[:, k0:k0 + m + n].T)
        owin = win + offset
        b_t = np.zeros((m, R))
        g_t = np.zeros((m, R, d))
        coef = np.ones((m, R))
        for i in range(n):
            if i > 0:
                coef *= np.take(gamma_c, owin[i:i + m])
            b_t += coef * np.take(r, win[i:i + m])
            g_t += coef[..., None] * (np.take(gamma_rho_phi, owin[i + 1:i + 1 + m], axis=0)
                                      - np.take(phi, win[i:i + m], axis=0))
        step = np.asarray(alphas[k0:k0 + m], dtype=float)
        # step map: w -> w + head[j] (b[j] + g[j] . w) with head[j] = alpha_j phi(S_j, A_j)
        head = np.take(phi, win[:m], axis=0) * step[:, None, None]
        if R * d * d <= BLOCK_SCAN_MAX:
            trace = _affine_scan(head, g_t, b_t, w)
        else:
            trace = np.empty((m, R, d))
            for j in range(m):
                w += ((g_t[j] * w).sum(axis=1) + b_t[j])[:, None] * head[j]
                trace[j] = w
        w = trace[-1].copy()
        trace = trace.transpose(1, 0, 2)
        if keep_weights:
            weights[:, k0 + 1:k0 + m + 1] = trace
        if errors is not None:
            errors[:, k0 + 1:k0 + m + 1] = np.sum((trace - target[:, None, :]) ** 2, axis=2)
    return weights, errors, w


@dataclass
class CriticRun:
    """Trace of one critic run; ``bounds`` holds NaN where the bound is not defined."""

    weights: np.ndarray
    fixed_point: np.ndarray
    errors: np.ndarray
    alphas: np.ndarray
    bounds: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.errors) != len(self.weights) or len(self.alphas) != len(self.weights) - 1:
            raise ValidationError("inconsistent critic trace lengths")

    def to_csv(self) -> str:
        return critic_csv(self.alphas, self.errors, self.bounds)


def critic_csv(alphas, errors, bounds=None) -> str:
    """CSV text with columns (k, alpha_k, w_err_sq, bound); alpha_K and undefined bounds are blank."""
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["k", "alpha_k", "w_err_sq", "bound"])
    for k, err in enumerate(errors):
        alpha = repr(float(alphas[k])) if k < len(alphas) else ""
        bound = "" if bounds is None or not np.isfinite(bounds[k]) else repr(float(bounds[k]))
        out.writerow([k, alpha, repr(float(err)), bound])
    return buf.getvalue()


def td_run(mdp: Mdp, behavior, target, factors: IsFactorTable, features: FeatureMap, config: CriticConfig,
           trajectory: Trajectory, w_star=None) -> CriticRun:
    """Algorithm-exact critic run on one trajectory; ``w_star`` defaults to the PBE solution."""
    from aclab.critic.operators import CriticModel

    validate_policy(target, mdp.n_states, mdp.n_actions, "target policy")
    pairs = pair_indices(trajectory, mdp.n_actions)
    if w_star is None:
        w_star = CriticModel.build(mdp, behavior, factors, features, config.n).pbe_fixed_point(check=False)
    alphas = config.alphas()
    weights, errors, _ = td_iterate(
        features.phi, mdp.rewards, factors.c, factors.rho, mdp.gamma, config.n,
        pairs[None, :], alphas, config.initial_weights(features.dim), w_star,
    )
    return CriticRun(weights[0], np.asarray(w_star, dtype=float), errors[0], alphas)


@dataclass
class CriticBatch:
    """Replicated critic runs: errors per seed and their mean curve."""

    errors: np.ndarray
    final_weights: np.ndarray
    alphas: np.ndarray
    fixed_point: np.ndarray
    weights: np.ndarray | None = None

    @property
    def mean_errors(self) -> np.ndarray:
        return self.errors.mean(axis=0)


def td_run_batch(mdp: Mdp, factors: IsFactorTable, features: FeatureMap, config: CriticConfig,
                 trajectories: Trajectory, w_star, keep_weights: bool = False) -> CriticBatch:
    """Independent replications, one per row of ``trajectories``."""
    pairs = pair_indices(trajectories, mdp.n_actions)
    alphas = config.alphas()
    weights, errors, final = td_iterate(
        features.phi, mdp.rewards, factors.c, factors.rho, mdp.gamma, config.n,
        pairs, alphas, config.initial_weights(features.dim), w_star, keep_weights=keep_weights,
    )
    return CriticBatch(errors, final, alphas, np.asarray(w_star, dtype=float), weights)
