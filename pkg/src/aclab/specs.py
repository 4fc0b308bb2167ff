"""Parsing of compact source strings for MDPs, policies and feature maps."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from aclab.errors import ValidationError
from aclab.features import FeatureMap, random_features, tabular_features
from aclab.mdp import Mdp, gen_garnet, two_loop, uniform_policy, validate_policy


def load_mdp(spec: str) -> Mdp:
    """``two_loop[:gamma]``, ``garnet:S:A:B:SEED[:gamma]`` or a path to an MDP JSON file."""
    parts = str(spec).split(":")
    try:
        if parts[0] == "two_loop" and len(parts) <= 2:
            return two_loop(float(parts[1])) if len(parts) == 2 else two_loop()
        if parts[0] == "garnet" and len(parts) in (5, 6):
            S, A, B, seed = (int(x) for x in parts[1:5])
            gamma = float(parts[5]) if len(parts) == 6 else 0.9
            return gen_garnet(S, A, B, seed, gamma)
    except ValueError as exc:
        raise ValidationError(f"malformed MDP spec {spec!r}: {exc}") from None
    path = Path(spec)
    if not path.is_file():
        raise ValidationError(f"MDP file {spec!r} does not exist")
    return Mdp.load(path)


def load_policy(spec, mdp: Mdp, q_star=None) -> np.ndarray:
    """``uniform``, ``greedy`` (w.r.t. Q*), an inline nested list, or a JSON file holding a table."""
    if isinstance(spec, (list, tuple, np.ndarray)):
        return validate_policy(spec, mdp.n_states, mdp.n_actions)
    if spec == "uniform":
        return uniform_policy(mdp.n_states, mdp.n_actions)
    if spec == "greedy":
        from aclab.mdp import greedy_policy, value_iteration

        q = q_star if q_star is not None else value_iteration(mdp)[0]
        return greedy_policy(q)
    path = Path(str(spec))
    if not path.is_file():
        raise ValidationError(f"policy file {spec!r} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cannot parse policy file {spec}: {exc}") from None
    table = doc["policy"] if isinstance(doc, dict) and "policy" in doc else doc
    return validate_policy(table, mdp.n_states, mdp.n_actions)


def load_features(spec: str, mdp: Mdp) -> FeatureMap:
    """``tabular``, ``random:D[:SEED]`` or a path to a feature JSON file."""
    parts = str(spec).split(":")
    if parts[0] == "tabular" and len(parts) == 1:
        return tabular_features(mdp.n_states, mdp.n_actions)
    if parts[0] == "random" and len(parts) in (2, 3):
        try:
            dim = int(parts[1])
            seed = int(parts[2]) if len(parts) == 3 else 0
        except ValueError as exc:
            raise ValidationError(f"malformed feature spec {spec!r}: {exc}") from None
        return random_features(mdp.n_states, mdp.n_actions, dim, seed)
    path = Path(spec)
    if not path.is_file():
        raise ValidationError(f"feature file {spec!r} does not exist")
    feats = FeatureMap.load(path, mdp.n_actions)
    if feats.n_states != mdp.n_states:
        raise ValidationError("feature rows do not match |S||A|")
    return feats


def per_state_param(value, n_states: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n_states, float(arr))
    if arr.shape != (n_states,):
        raise ValidationError(f"{name} must be a scalar or a length-{n_states} list")
    return arr
