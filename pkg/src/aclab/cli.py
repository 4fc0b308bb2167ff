"""Command-line entry point: ``aclab <group> <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object whose keys match the
long option names with dashes replaced by underscores); flags given on the
command line override the file. Outputs go to ``--out-dir`` (default: the
current directory) and one summary line is printed.

Exit codes: 0 success, 1 invalid input or usage, 2 stability or assumption failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from aclab.actor import EPS_READINGS, MODES, RULES, run_actor_exact
from aclab.critic.bounds import max_constant_stepsize, min_diminishing_offset, theoretical_bound_curve
from aclab.critic.factors import SCHEMES, make_factors
from aclab.critic.operators import CriticModel, bias_bound
from aclab.critic.td import CriticConfig, critic_csv, td_run_batch
from aclab.errors import AclabError, StabilityError, ValidationError
from aclab.mdp import (
    MAX_STATE_ACTIONS,
    exact_q,
    gen_garnet,
    sample_trajectories,
    stationary_distribution,
    value_iteration,
)
from aclab.pipeline import PipelineConfig, bound_report, dump_json, load_run, run_pipeline, save_run
from aclab.specs import load_features, load_mdp, load_policy, per_state_param

EXIT_OK, EXIT_INVALID, EXIT_STABILITY = 0, 1, 2


class UsageError(Exception):
    """Raised instead of argparse's SystemExit(2) so usage problems map to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- option handling ----------------------------------------------------------


def _merged(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults, then the --config file, then explicit flags (flags default to None)."""
    doc = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        doc.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    return doc


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _int_or_auto(text: str):
    if text == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}") from None


def _float_or_auto(text: str):
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


def _seed_list(text: str) -> list[int]:
    """``0,1,2`` or a range ``0-19``."""
    try:
        if "-" in text and "," not in text:
            lo, hi = text.split("-")
            return list(range(int(lo), int(hi) + 1))
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _json_value(text: str):
    """Scalars stay scalars; ``[..]`` is parsed as a per-state list."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        raise argparse.ArgumentTypeError(f"expected a number or JSON list, got {text!r}") from None


def _q_csv(q: np.ndarray) -> str:
    n_actions = q.shape[1]
    lines = ["state," + ",".join(f"a{a}" for a in range(n_actions))]
    lines += [f"{s}," + ",".join(repr(float(x)) for x in row) for s, row in enumerate(q)]
    return "\n".join(lines) + "\n"


def _critic_inputs(doc: dict):
    mdp = load_mdp(doc["mdp"])
    q_star, _ = value_iteration(mdp, tol=1e-12)
    behavior = load_policy(doc["behavior"], mdp, q_star)
    target = load_policy(doc["target"], mdp, q_star)
    features = load_features(doc["features"], mdp)
    S = mdp.n_states
    lam = per_state_param(doc["lam"], S, "lambda")
    u = per_state_param(doc["u"], S, "u") if doc.get("u") is not None else None
    factors = make_factors(doc["scheme"], target, behavior, lam=lam, u=u)
    mixing = stationary_distribution(mdp, behavior)
    return mdp, behavior, target, features, factors, mixing


def _resolve_n(doc, mdp, behavior, factors, features, mixing) -> int:
    if doc["n"] != "auto":
        return int(doc["n"])
    probe = CriticModel.build(mdp, behavior, factors, features, 1, mixing).report
    if probe.n_required is None:
        raise StabilityError("no bootstrapping depth n makes the critic contract (condition check failed)")
    return probe.n_required


# --- commands ---------------------------------------------------------------


def cmd_mdp_gen(args) -> str:
    doc = _merged(args, {"states": None, "actions": None, "branching": None, "seed": 0, "gamma": 0.9,
                         "output": "mdp.json"})
    for key in ("states", "actions", "branching"):
        if doc[key] is None:
            raise ValidationError(f"--{key} is required")
    if doc["states"] * doc["actions"] > MAX_STATE_ACTIONS:
        raise ValidationError(f"|S||A| is capped at {MAX_STATE_ACTIONS} for the exact solvers")
    mdp = gen_garnet(int(doc["states"]), int(doc["actions"]), int(doc["branching"]), int(doc["seed"]),
                     float(doc["gamma"]))
    path = Path(doc["output"])
    path.parent.mkdir(parents=True, exist_ok=True)
    mdp.save(path)
    return f"wrote {path} ({mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma})"


def cmd_mdp_solve(args) -> str:
    doc = _merged(args, {"mdp": None, "policy": None, "tol": 1e-10})
    if doc["mdp"] is None:
        raise ValidationError("--mdp is required")
    mdp = load_mdp(doc["mdp"])
    q_star, pi_star = value_iteration(mdp, tol=float(doc["tol"]))
    out = _out_dir(args)
    (out / "q_star.csv").write_text(_q_csv(q_star))
    (out / "pi_star.json").write_text(dump_json({"policy": pi_star}))
    msg = f"Q* written to {out / 'q_star.csv'} (max Q* = {q_star.max():.6g})"
    if doc["policy"] is not None:
        q_pi = exact_q(mdp, load_policy(doc["policy"], mdp, q_star))
        (out / "q_policy.csv").write_text(_q_csv(q_pi))
        msg += f"; Q^pi written to {out / 'q_policy.csv'} (||Q* - Q^pi||_inf = {np.max(np.abs(q_star - q_pi)):.6g})"
    return msg


CRITIC_DEFAULTS = {"mdp": None, "behavior": "uniform", "target": "greedy", "features": "tabular",
                   "scheme": "lambda", "lam": 1.0, "u": None, "n": "auto"}


def cmd_critic_check(args) -> str:
    doc = _merged(args, dict(CRITIC_DEFAULTS))
    if doc["mdp"] is None:
        raise ValidationError("--mdp is required")
    mdp, behavior, _, features, factors, mixing = _critic_inputs(doc)
    n = _resolve_n(doc, mdp, behavior, factors, features, mixing)
    model = CriticModel.build(mdp, behavior, factors, features, n, mixing)
    report = model.report
    out = _out_dir(args)
    body = report.to_dict()
    body["lambda_min"] = model.weights.lambda_min
    body["D_c_min"], body["D_rho_max"] = factors.d_c_min, factors.d_rho_max
    (out / "stability.json").write_text(dump_json(body))
    req = report.n_required if report.n_required is not None else "infeasible"
    return f"n={n} gamma_c={report.gamma_c:.6g} n_required={req} L={report.L:.6g} -> {out / 'stability.json'}"


def cmd_critic_oracle(args) -> str:
    doc = _merged(args, dict(CRITIC_DEFAULTS))
    if doc["mdp"] is None:
        raise ValidationError("--mdp is required")
    mdp, behavior, target, features, factors, mixing = _critic_inputs(doc)
    n = _resolve_n(doc, mdp, behavior, factors, features, mixing)
    model = CriticModel.build(mdp, behavior, factors, features, n, mixing)
    w_star = model.pbe_fixed_point()
    q_cr = model.q_fixed_point()
    q_pi = exact_q(mdp, target)
    bias = bias_bound(mdp, behavior, factors, features, n, target, model=model)
    from aclab.features import weighted_norm

    gap = weighted_norm(q_pi - features.q_values(w_star), model.weights)
    body = {
        "n": n,
        "stability": model.report.to_dict(),
        "factors": factors.to_dict(),
        "w_star": w_star,
        "q_fixed_point": q_cr,
        "q_target": q_pi,
        "expected_update_norm_at_w_star": float(np.linalg.norm(model.expected_update(w_star))),
        "error_ksa": gap,
        "bias_bound": {"approx_term": bias.approx_term, "sampling_bias_term": bias.sampling_bias_term,
                       "specialized_bias_term": bias.specialized_bias_term, "total": bias.total},
    }
    out = _out_dir(args)
    (out / "oracle.json").write_text(dump_json(body))
    return f"||Q^pi - Phi w*||_K = {gap:.6g} <= {bias.total:.6g} -> {out / 'oracle.json'}"


def cmd_critic_run(args) -> str:
    defaults = dict(CRITIC_DEFAULTS, K=10_000, stepsize="constant", alpha="auto", h="auto", seeds=[0],
                    start=None)
    doc = _merged(args, defaults)
    if doc["mdp"] is None:
        raise ValidationError("--mdp is required")
    mdp, behavior, _, features, factors, mixing = _critic_inputs(doc)
    n = _resolve_n(doc, mdp, behavior, factors, features, mixing)
    model = CriticModel.build(mdp, behavior, factors, features, n, mixing)
    report = model.report
    if not report.contracting:
        raise StabilityError(f"gamma_c = {report.gamma_c:.4g} >= 1 for n = {n}; pick a larger n")
    lam_min = model.weights.lambda_min
    K = int(doc["K"])
    if doc["stepsize"] == "constant":
        alpha = max_constant_stepsize(report, lam_min, mixing) if doc["alpha"] == "auto" else float(doc["alpha"])
        config = CriticConfig(n=n, K=K, alpha=alpha)
    elif doc["stepsize"] == "diminishing":
        drift = (1.0 - report.gamma_c) * lam_min
        alpha = 1.2 / drift if doc["alpha"] == "auto" else float(doc["alpha"])
        h = min_diminishing_offset(alpha, report, lam_min, mixing, K) if doc["h"] == "auto" else float(doc["h"])
        config = CriticConfig(n=n, K=K, stepsize="diminishing", alpha=alpha, h=h)
    else:
        raise ValidationError("stepsize must be 'constant' or 'diminishing'")
    w_star = model.pbe_fixed_point()
    seeds = [int(s) for s in doc["seeds"]]
    traj = sample_trajectories(mdp, behavior, K + n, seeds, start=doc["start"], stationary=mixing.stationary)
    batch = td_run_batch(mdp, factors, features, config, traj, w_star)
    w0 = config.initial_weights(features.dim)
    bound = theoretical_bound_curve(config, report, lam_min, mixing, w0, w_star)
    out = _out_dir(args)
    (out / "critic.csv").write_text(critic_csv(batch.alphas, batch.mean_errors, bound))
    summary = {"n": n, "K": K, "stepsize": config.stepsize, "alpha": config.alpha, "h": config.h,
               "seeds": seeds, "w_star": w_star, "final_mean_sq_error": float(batch.mean_errors[-1]),
               "final_bound": float(bound[-1]), "gamma_c": report.gamma_c, "L": report.L,
               "lambda_min": lam_min}
    (out / "critic.json").write_text(dump_json(summary))
    return (f"critic K={K} n={n} alpha={config.alpha:.6g}: mean ||w_K - w*||^2 = {batch.mean_errors[-1]:.6g} "
            f"(bound {bound[-1]:.6g}) -> {out / 'critic.csv'}")


def cmd_actor_run(args) -> str:
    doc = _merged(args, {"mdp": None, "rule": "npg", "mode": "increasing", "beta": 1.0, "T": 30,
                         "eps_reading": "inverse"})
    if doc["mdp"] is None:
        raise ValidationError("--mdp is required")
    mdp = load_mdp(doc["mdp"])
    run = run_actor_exact(mdp, doc["rule"], doc["mode"], float(doc["beta"]), int(doc["T"]), doc["eps_reading"])
    out = _out_dir(args)
    (out / "actor.csv").write_text(run.to_csv())
    (out / "policies.json").write_text(dump_json(run.policies_doc()))
    return (f"{run.rule}/{run.mode} T={run.T}: ||Q* - Q^pi_T||_inf = {run.errors[-1]:.6g} "
            f"(bound {run.bound[-1]:.6g}) -> {out / 'actor.csv'}")


PIPELINE_FLAGS = ("mdp", "behavior", "features", "rule", "stepsize_mode", "beta", "scheme", "lam", "u", "n",
                  "alpha", "K", "T", "seeds", "start", "eps_reading")


def cmd_pipeline_run(args) -> str:
    doc = {}
    if args.config:
        doc = _merged(args, {k: None for k in PipelineConfig.__dataclass_fields__})
        doc = {k: v for k, v in doc.items() if v is not None}
    for key in PIPELINE_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    doc.pop("out_dir", None)
    cfg = PipelineConfig.from_dict(doc)
    run = run_pipeline(cfg)
    out = _out_dir(args)
    report = save_run(run, out)
    return (f"pipeline T={cfg.T} K={cfg.K} n={run.meta['n']} seeds={len(cfg.seeds)}: mean final error "
            f"{report['measured_final_error']:.6g}, bound {report['terms']['total']:.6g} -> {out}")


def cmd_bounds_report(args) -> str:
    if not args.run:
        raise ValidationError("--run DIR is required")
    run = load_run(args.run)
    report = bound_report(run)
    out = Path(args.out_dir) if args.out_dir else Path(args.run)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bounds.json").write_text(dump_json(report))
    t = report["terms"]
    return (f"bound total {t['total']:.6g} (N1={t['N1']:.4g}, N2_3={t['N2_3']:.4g}, N2_4={t['N2_4']:.4g}, "
            f"N3={t['N3']:.4g}); measured {report['measured_final_error']:.6g} -> {out / 'bounds.json'}")


# --- parser -----------------------------------------------------------------


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON file with option values; flags override it")
    if out:
        p.add_argument("--out-dir", "-d", dest="out_dir", help="output directory (default: current)")


def _critic_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mdp", help="two_loop[:gamma], garnet:S:A:B:SEED[:gamma] or an MDP JSON file")
    p.add_argument("--behavior", help="behavior policy: uniform, greedy, or a JSON file")
    p.add_argument("--target", help="target policy: uniform, greedy, or a JSON file (default greedy)")
    p.add_argument("--features", help="tabular, random:D[:SEED] or a feature JSON file")
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--lambda", dest="lam", type=_json_value, help="lambda, scalar or per-state JSON list")
    p.add_argument("--u", type=_json_value, help="upper truncation levels for the two-sided scheme")
    p.add_argument("--n", type=_int_or_auto, help="bootstrapping depth or 'auto'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aclab", description="Off-policy actor-critic laboratory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    mdp = groups.add_parser("mdp", help="generate or solve MDPs").add_subparsers(dest="command", required=True)
    p = mdp.add_parser("gen", help="random Garnet MDP")
    _common(p, out=False)
    p.add_argument("--states", type=int)
    p.add_argument("--actions", type=int)
    p.add_argument("--branching", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("-o", "--output", help="output MDP JSON path (default mdp.json)")
    p.set_defaults(func=cmd_mdp_gen)
    p = mdp.add_parser("solve", help="Q* by value iteration, and Q^pi for --policy")
    _common(p)
    p.add_argument("--mdp")
    p.add_argument("--policy")
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_mdp_solve)

    critic = groups.add_parser("critic", help="critic analysis and runs").add_subparsers(dest="command",
                                                                                          required=True)
    p = critic.add_parser("check", help="stability report for a factor scheme")
    _common(p)
    _critic_options(p)
    p.set_defaults(func=cmd_critic_check)
    p = critic.add_parser("oracle", help="exact fixed points and the limit-point error bound")
    _common(p)
    _critic_options(p)
    p.set_defaults(func=cmd_critic_oracle)
    p = critic.add_parser("run", help="stochastic TD runs with the finite-sample bound curve")
    _common(p)
    _critic_options(p)
    p.add_argument("--K", type=int)
    p.add_argument("--stepsize", choices=("constant", "diminishing"))
    p.add_argument("--alpha", type=_float_or_auto)
    p.add_argument("--h", type=_float_or_auto)
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--start", type=int)
    p.set_defaults(func=cmd_critic_run)

    actor = groups.add_parser("actor", help="exact-critic actor runs").add_subparsers(dest="command",
                                                                                      required=True)
    p = actor.add_parser("run")
    _common(p)
    p.add_argument("--mdp")
    p.add_argument("--rule", choices=RULES)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--eps-reading", dest="eps_reading", choices=EPS_READINGS)
    p.set_defaults(func=cmd_actor_run)

    pipe = groups.add_parser("pipeline", help="off-policy actor-critic").add_subparsers(dest="command",
                                                                                        required=True)
    p = pipe.add_parser("run")
    _common(p)
    p.add_argument("--mdp")
    p.add_argument("--behavior")
    p.add_argument("--features")
    p.add_argument("--rule", choices=RULES)
    p.add_argument("--stepsize-mode", dest="stepsize_mode", choices=MODES)
    p.add_argument("--beta", type=float)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--lambda", dest="lam", type=_json_value)
    p.add_argument("--u", type=_json_value)
    p.add_argument("--n", type=_int_or_auto)
    p.add_argument("--alpha", type=_float_or_auto)
    p.add_argument("--K", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--start", type=int)
    p.add_argument("--eps-reading", dest="eps_reading", choices=EPS_READINGS)
    p.set_defaults(func=cmd_pipeline_run)

    bounds = groups.add_parser("bounds", help="bound reports").add_subparsers(dest="command", required=True)
    p = bounds.add_parser("report", help="recompute the bound table of a saved pipeline run")
    p.add_argument("--run", help="directory written by 'pipeline run'")
    p.add_argument("--out-dir", "-d", dest="out_dir", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_bounds_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        print(args.func(args))
    except StabilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STABILITY
    except (ValidationError, AclabError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TypeError, ValueError, KeyError) as exc:
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
