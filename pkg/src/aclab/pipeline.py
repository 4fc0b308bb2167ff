"""Off-policy actor-critic loop with linear function approximation, its bound report and persistence."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from aclab.actor import (
    EPS_READINGS,
    MODES,
    RULES,
    SoftmaxParam,
    _normalize_logits,
    eps_greedy_update,
    exploration_mass,
    stepsize_condition,
    theta_update,
)
from aclab.critic.bounds import max_constant_stepsize, stepsize_cap, theoretical_bound_curve
from aclab.critic.factors import SCHEMES, make_factors
from aclab.critic.operators import CriticModel
from aclab.critic.td import CSV_HEADER, CriticConfig, critic_csv, td_iterate
from aclab.errors import PreconditionError, StabilityError, ValidationError
from aclab.mdp import exact_q, sample_trajectories, stationary_distribution, value_iteration
from aclab.specs import load_features, load_mdp, load_policy, per_state_param

OPTIONS = {"npg": "I", "boltzmann": "II", "eps_greedy": "III"}


def worker_count(jobs: int) -> int:
    """Workers for ``jobs`` independent replications, capped by ACLAB_THREADS."""
    cap = os.environ.get("ACLAB_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ValidationError(f"ACLAB_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, jobs))


@dataclass
class PipelineConfig:
    """Inputs of one experiment; sources use the compact strings understood by ``aclab.specs``."""

    mdp: str = "two_loop"
    behavior: object = "uniform"
    features: str = "tabular"
    rule: str = "npg"
    stepsize_mode: str = "increasing"
    beta: float = 1.0
    scheme: str = "lambda"
    lam: object = 1.0
    u: object = None
    n: object = "auto"
    alpha: object = "auto"
    K: int = 1000
    T: int = 10
    seeds: list = field(default_factory=lambda: [0])
    start: int | None = None
    eps_reading: str = "inverse"
    out_dir: str | None = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValidationError(f"rule must be one of {RULES}")
        if self.stepsize_mode not in MODES:
            raise ValidationError(f"stepsize_mode must be one of {MODES}")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"scheme must be one of {SCHEMES}")
        if self.eps_reading not in EPS_READINGS:
            raise ValidationError(f"eps_reading must be one of {EPS_READINGS}")
        for name in ("K", "T"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 0:
                raise ValidationError(f"{name} must be a non-negative integer")
            setattr(self, name, int(value))
        if self.T < 1:
            raise ValidationError("T must be >= 1")
        if self.n != "auto" and (int(self.n) != self.n or int(self.n) < 1):
            raise ValidationError("n must be 'auto' or an integer >= 1")
        if self.alpha != "auto" and not (float(self.alpha) >= 0 and math.isfinite(float(self.alpha))):
            raise ValidationError("alpha must be 'auto' or a finite number >= 0")
        if self.stepsize_mode == "constant" and not float(self.beta) > 0:
            raise ValidationError("beta must be positive")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ValidationError("at least one seed is required")

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for key in ("behavior", "lam", "u"):
            if isinstance(doc[key], np.ndarray):
                doc[key] = doc[key].tolist()
        return doc


@dataclass
class PipelineRun:
    """Outcome of ``run_pipeline``; per-seed arrays have the seed as leading axis.

    ``policies`` are full tables materialized only for exact error diagnostics.
    """

    config: PipelineConfig
    errors: np.ndarray
    weights: np.ndarray
    betas: list
    policies: np.ndarray
    critic_curves: np.ndarray
    critic_bounds: np.ndarray
    gamma_c: np.ndarray
    L: np.ndarray
    e_approx: np.ndarray
    e_bias: np.ndarray
    clamped: np.ndarray
    samples: int
    meta: dict

    @property
    def records(self) -> list[dict]:
        """One record per outer iteration t: critic output w_{t+1} and the error of pi_t."""
        return [
            {"t": t, "w": self.weights[:, t].tolist(), "error": self.errors[:, t].tolist(),
             "mean_error": float(self.errors[:, t].mean())}
            for t in range(self.config.T)
        ]

    @property
    def final_error(self) -> float:
        return float(self.errors[:, -1].mean())


class _Context:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.mdp = load_mdp(cfg.mdp)
        self.q_star, _ = value_iteration(self.mdp, tol=1e-12)
        self.behavior = load_policy(cfg.behavior, self.mdp, self.q_star)
        self.features = load_features(cfg.features, self.mdp)
        S = self.mdp.n_states
        self.lam = per_state_param(cfg.lam, S, "lam") if cfg.scheme == "lambda" else None
        self.u = per_state_param(cfg.u, S, "u") if cfg.u is not None else None
        self.mixing = stationary_distribution(self.mdp, self.behavior)
        uniform = np.full((S, self.mdp.n_actions), 1.0 / self.mdp.n_actions)
        first = CriticModel.build(self.mdp, self.behavior, self.factors(uniform), self.features, 1, self.mixing)
        self.weights = first.weights
        if cfg.n == "auto":
            probe = first.report
            if probe.n_required is None:
                raise StabilityError("no bootstrapping depth makes the critic contract for pi_0")
            self.n = probe.n_required
        else:
            self.n = int(cfg.n)
        report0 = CriticModel.build(self.mdp, self.behavior, self.factors(uniform), self.features, self.n,
                                    self.mixing).report
        if not report0.contracting:
            raise StabilityError(f"gamma_c = {report0.gamma_c:.4g} >= 1 for pi_0 with n = {self.n}")
        self.alpha = (max_constant_stepsize(report0, self.weights.lambda_min, self.mixing)
                      if cfg.alpha == "auto" else float(cfg.alpha))
        self.q0 = exact_q(self.mdp, uniform)

    def factors(self, target):
        cfg = self.cfg
        return make_factors(cfg.scheme, target, self.behavior, lam=self.lam, u=self.u)


def _run_group(ctx: _Context, seeds: list[int]) -> dict:
    cfg, mdp, feats = ctx.cfg, ctx.mdp, ctx.features
    R, S, A = len(seeds), mdp.n_states, mdp.n_actions
    n, K, T = ctx.n, cfg.K, cfg.T
    block = K + n
    traj = sample_trajectories(mdp, ctx.behavior, T * block, seeds, start=cfg.start,
                               stationary=ctx.mixing.stationary)
    pairs = traj.states * A + traj.actions
    phi = feats.phi
    alphas = np.full(K, ctx.alpha)
    params = [SoftmaxParam(np.zeros(feats.dim), feats) for _ in range(R)]
    log_pi = np.full((R, S, A), -math.log(A))

    errors = np.empty((R, T + 1))
    weights = np.empty((R, T, feats.dim))
    policies = np.empty((R, T + 1, S, A))
    betas = [[None] * T for _ in range(R)]
    curves = np.empty((T, K + 1))
    bounds = np.full((T, R, K + 1), np.nan)
    gamma_c = np.empty((R, T))
    L = np.empty((R, T))
    e_approx = np.empty((R, T))
    e_bias = np.empty((R, T))
    clamped = np.zeros((R, T), dtype=int)
    within_cap = np.ones((R, T), dtype=bool)

    for t in range(T):
        pol = np.exp(log_pi)
        pol /= pol.sum(axis=2, keepdims=True)
        policies[:, t] = pol
        c_tab = np.empty((R, S * A))
        rho_tab = np.empty((R, S * A))
        w_star = np.empty((R, feats.dim))
        for r in range(R):
            errors[r, t] = np.max(np.abs(ctx.q_star - exact_q(mdp, pol[r])))
            fac = ctx.factors(pol[r])
            model = CriticModel.build(mdp, ctx.behavior, fac, feats, n, ctx.mixing)
            rep = model.report
            if not rep.contracting:
                raise StabilityError(
                    f"outer iteration t={t} (seed {seeds[r]}): gamma_c = {rep.gamma_c:.4g} >= 1 with n = {n}"
                )
            gamma_c[r, t], L[r, t] = rep.gamma_c, rep.L
            w_star[r] = model.pbe_fixed_point(check=False)
            e_approx[r, t] = np.max(np.abs(model.q_fixed_point().reshape(-1) - phi @ w_star[r]))
            e_bias[r, t] = np.abs(pol[r] - ctx.behavior * fac.rho).sum(axis=1).max()
            c_tab[r], rho_tab[r] = fac.c.reshape(-1), fac.rho.reshape(-1)
            if ctx.alpha > 0:
                tau = ctx.mixing.mixing_time(ctx.alpha) + n + 1
                within_cap[r, t] = ctx.alpha * tau <= stepsize_cap(rep, ctx.weights.lambda_min)
                try:
                    bounds[t, r] = theoretical_bound_curve(
                        CriticConfig(n=n, K=K, alpha=ctx.alpha), rep, ctx.weights.lambda_min, ctx.mixing,
                        np.zeros(feats.dim), w_star[r], warn=False,
                    )
                except PreconditionError:
                    pass
        chunk = pairs[:, t * block:(t + 1) * block]
        _, errs, w = td_iterate(phi, mdp.rewards, c_tab, rho_tab, mdp.gamma, n, chunk, alphas,
                                np.zeros(feats.dim), w_star, keep_weights=False)
        curves[t] = errs.mean(axis=0)
        weights[:, t] = w
        q_est = (w @ phi.T).reshape(R, S, A)
        for r in range(R):
            beta_t = stepsize_condition(cfg.rule, cfg.stepsize_mode, float(cfg.beta), t, None, q_est[r],
                                        mdp.gamma, log_prev=log_pi[r])
            if cfg.rule == "npg":
                params[r] = theta_update(params[r], w[r], beta_t)
                log_pi[r] = params[r].log_policy()
            elif cfg.rule == "boltzmann":
                log_pi[r] = _normalize_logits(beta_t * q_est[r])
            else:
                eps, clamped[r, t] = exploration_mass(beta_t, cfg.eps_reading)
                with np.errstate(divide="ignore"):
                    log_pi[r] = np.log(eps_greedy_update(q_est[r], eps))
            betas[r][t] = beta_t.tolist() if isinstance(beta_t, np.ndarray) else float(beta_t)
    pol = np.exp(log_pi)
    pol /= pol.sum(axis=2, keepdims=True)
    policies[:, T] = pol
    for r in range(R):
        errors[r, T] = np.max(np.abs(ctx.q_star - exact_q(mdp, pol[r])))
    return {
        "errors": errors, "weights": weights, "policies": policies, "betas": betas,
        "curves": curves * R, "bounds": bounds, "gamma_c": gamma_c, "L": L,
        "e_approx": e_approx, "e_bias": e_bias, "clamped": clamped, "within_cap": within_cap,
    }


def run_pipeline(cfg: PipelineConfig) -> PipelineRun:
    """Outer loop: critic from w = 0 on block t of one behavior trajectory, then one actor step.

    The trajectory has exactly T (K + n) samples; block t holds samples
    t (K + n) ... (t + 1)(K + n) - 1. Replications (seeds) are split across
    at most ACLAB_THREADS workers; results do not depend on the split.
    """
    ctx = _Context(cfg)
    seeds = list(cfg.seeds)
    workers = worker_count(len(seeds))
    groups = [list(g) for g in np.array_split(np.array(seeds), workers) if len(g)]
    if workers == 1:
        parts = [_run_group(ctx, groups[0])]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda g: _run_group(ctx, [int(s) for s in g]), groups))

    def cat(key, axis=0):
        return np.concatenate([p[key] for p in parts], axis=axis)

    R = len(seeds)
    curves = sum(p["curves"] for p in parts) / R
    bounds = np.concatenate([p["bounds"] for p in parts], axis=1)
    defined = ~np.isnan(bounds)
    bound_curve = np.where(defined.any(axis=1), np.where(defined, bounds, -np.inf).max(axis=1), np.nan)
    meta = {
        "gamma": ctx.mdp.gamma,
        "n": ctx.n,
        "alpha": ctx.alpha,
        "lambda_min": ctx.weights.lambda_min,
        "ksa_min": ctx.weights.ksa_min,
        "t_alpha": ctx.mixing.mixing_time(ctx.alpha) if ctx.alpha > 0 else 0,
        "initial_gap": float(np.max(np.abs(ctx.q_star - ctx.q0))),
        "option": OPTIONS[cfg.rule],
        "alpha_within_cap": bool(cat("within_cap").all()),
        "policies_note": "full policy tables are diagnostic only; learning uses critic weights",
    }
    betas = [row for p in parts for row in p["betas"]]
    return PipelineRun(
        config=cfg, errors=cat("errors"), weights=cat("weights"), betas=betas, policies=cat("policies"),
        critic_curves=curves, critic_bounds=bound_curve, gamma_c=cat("gamma_c"), L=cat("L"),
        e_approx=cat("e_approx"), e_bias=cat("e_bias"), clamped=cat("clamped"),
        samples=cfg.T * (cfg.K + ctx.n), meta=meta,
    )


# --- bound report ------------------------------------------------------------


def bound_terms(gamma: float, T: int, K: int, n: int, alpha: float, t_alpha: int, lambda_min: float,
                gamma_c: float, L: float, initial_gap: float, e_approx: float, e_bias: float,
                mode: str, beta: float) -> dict:
    """Term-by-term bound on E||Q* - Q^{pi_T}||_inf for the actor-critic loop."""
    one = 1.0 - gamma
    tau = t_alpha + n + 1
    terms = {"N1": gamma**T * initial_gap,
             "N2_1": 2.0 * gamma * e_approx / one**2,
             "N2_2": 2.0 * gamma**2 * e_bias / one**4}
    if gamma_c < 1.0:
        drift = (1.0 - gamma_c) * lambda_min
        rate = max(0.0, 1.0 - drift * alpha)
        terms["N2_3"] = 6.0 * rate ** (0.5 * (K - tau)) / (one**3 * math.sqrt(1.0 - gamma_c) * math.sqrt(lambda_min))
        terms["N2_4"] = 70.0 * L * math.sqrt(alpha * tau) / (lambda_min * (1.0 - gamma_c) * one**3)
    else:
        terms["N2_3"] = terms["N2_4"] = math.inf
    if mode == "constant":
        terms["N3"] = 2.0 * gamma / (beta * one**2)
        terms["N3_alt"] = 2.0 * gamma * beta / one**2
    else:
        terms["N3"] = 2.0 * gamma**T / one**2
        terms["N3_alt"] = terms["N3"]
    terms["total"] = sum(terms[k] for k in ("N1", "N2_1", "N2_2", "N2_3", "N2_4", "N3"))
    return terms


def bound_report(run: PipelineRun) -> dict:
    """Bound terms, measured mean final error and their ratio.

    E_approx and E_bias are maxima over the policies the run actually
    evaluated, so E_approx is a lower bound of the supremum over all policies.
    """
    cfg, meta = run.config, run.meta
    terms = bound_terms(
        meta["gamma"], cfg.T, cfg.K, meta["n"], meta["alpha"], meta["t_alpha"], meta["lambda_min"],
        float(run.gamma_c.max()), float(run.L.max()), meta["initial_gap"], float(run.e_approx.max()),
        float(run.e_bias.max()), cfg.stepsize_mode, float(cfg.beta),
    )
    measured = run.final_error
    total = terms["total"]
    return {
        "terms": terms,
        "measured_final_error": measured,
        "ratio": measured / total if total > 0 else math.inf,
        "samples": run.samples,
        "E_approx": float(run.e_approx.max()),
        "E_approx_note": "maximum over encountered policies; a lower bound of the supremum",
        "E_bias": float(run.e_bias.max()),
        "gamma_c_max": float(run.gamma_c.max()),
        "L_max": float(run.L.max()),
        "alpha_within_cap": meta["alpha_within_cap"],
    }


# --- persistence ------------------------------------------------------------


def _fmt(x) -> str:
    return repr(float(x))


def actor_csv(run: PipelineRun, report: dict) -> str:
    terms = report["terms"]
    gamma = run.meta["gamma"]
    critic_total = terms["N2_1"] + terms["N2_2"] + terms["N2_3"] + terms["N2_4"]
    lines = [CSV_HEADER, "t,beta_t,err_inf,N1,N2,N3"]
    for t in range(run.config.T + 1):
        if t < run.config.T:
            vals = np.array([np.max(np.atleast_1d(b[t])) for b in run.betas])
            beta_t = _fmt(vals.mean())
        else:
            beta_t = ""
        n1 = gamma**t * run.meta["initial_gap"]
        if run.config.stepsize_mode == "constant":
            n3 = terms["N3"]
        else:
            n3 = 2.0 * gamma**t / (1.0 - gamma) ** 2
        lines.append(",".join([str(t), beta_t, _fmt(run.errors[:, t].mean()), _fmt(n1), _fmt(critic_total), _fmt(n3)]))
    return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def dump_json(doc) -> str:
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"


def report_text(run: PipelineRun, report: dict) -> str:
    cfg = run.config
    t = report["terms"]
    lines = [
        f"actor-critic run: rule={cfg.rule} (option {run.meta['option']}) mode={cfg.stepsize_mode} beta={cfg.beta}",
        f"critic: scheme={cfg.scheme} n={run.meta['n']} alpha={run.meta['alpha']:.6g} K={cfg.K} T={cfg.T}",
        f"seeds={len(cfg.seeds)} samples per seed={run.samples}",
        f"mean final error ||Q* - Q^pi_T||_inf = {report['measured_final_error']:.6g}",
        "bound terms: " + ", ".join(f"{k}={t[k]:.6g}" for k in ("N1", "N2_1", "N2_2", "N2_3", "N2_4", "N3")),
        f"bound total = {t['total']:.6g}; measured / bound = {report['ratio']:.6g}",
        f"alternative N3 = {t['N3_alt']:.6g}",
        f"E_approx = {report['E_approx']:.6g} ({report['E_approx_note']})",
        f"stepsize within the critic budget for every iterate: {report['alpha_within_cap']}",
    ]
    return "\n".join(lines) + "\n"


def save_run(run: PipelineRun, out_dir) -> dict:
    """Write actor.csv, critic_t<k>.csv, bounds.json, report.txt and run.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = bound_report(run)
    (out / "actor.csv").write_text(actor_csv(run, report))
    alphas = np.full(run.config.K, run.meta["alpha"])
    for t in range(run.config.T):
        (out / f"critic_t{t}.csv").write_text(critic_csv(alphas, run.critic_curves[t], run.critic_bounds[t]))
    (out / "bounds.json").write_text(dump_json(report))
    (out / "report.txt").write_text(report_text(run, report))
    doc = {
        "config": run.config.to_dict(),
        "meta": run.meta,
        "samples": run.samples,
        "errors": run.errors,
        "weights": run.weights,
        "betas": run.betas,
        "policies": run.policies,
        "gamma_c": run.gamma_c,
        "L": run.L,
        "e_approx": run.e_approx,
        "e_bias": run.e_bias,
        "clamped": run.clamped,
    }
    (out / "run.json").write_text(dump_json(doc))
    return report


def load_run(run_dir) -> PipelineRun:
    """Rebuild a run (without critic traces) from run.json for re-reporting."""
    path = Path(run_dir) / "run.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    cfg = PipelineConfig.from_dict(doc["config"])
    T = cfg.T
    empty = np.full((T, cfg.K + 1), np.nan)
    return PipelineRun(
        config=cfg, errors=np.array(doc["errors"]), weights=np.array(doc["weights"]), betas=doc["betas"],
        policies=np.array(doc["policies"]), critic_curves=empty, critic_bounds=empty,
        gamma_c=np.array(doc["gamma_c"]), L=np.array(doc["L"]), e_approx=np.array(doc["e_approx"]),
        e_bias=np.array(doc["e_bias"]), clamped=np.array(doc["clamped"]), samples=int(doc["samples"]),
        meta=doc["meta"],
    )
