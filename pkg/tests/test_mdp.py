import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab.errors import AssumptionViolation, ValidationError
from aclab.mdp import (
    Mdp,
    bellman_optimality,
    bellman_policy,
    exact_q,
    gen_garnet,
    greedy_policy,
    sample_trajectories,
    sample_trajectory,
    state_transition_matrix,
    stationary_distribution,
    two_loop,
    uniform_policy,
    validate_policy,
    value_iteration,
)
from oracles import optimal_q_by_enumeration, policy_q, random_policy, stationary_by_power, tv_profile

# Q^pi of the uniform policy on TwoLoop (gamma = 0.9), from the independent elimination oracle
TWO_LOOP_UNIFORM_Q = policy_q(two_loop().transitions, two_loop().rewards, 0.9, uniform_policy(2, 2))


def single_state(reward=1.0, gamma=0.9):
    return Mdp(np.ones((1, 1, 1)), [[reward]], gamma)


class TestConstruction:
    def test_rejects_non_stochastic_rows(self):
        P = np.array([[[0.5, 0.4], [0.0, 1.0]]])
        with pytest.raises(ValidationError, match="sums to"):
            Mdp(P, np.zeros((2, 1)), 0.9)

    def test_rejects_negative_probabilities(self):
        P = np.array([[[1.5, -0.5], [0.0, 1.0]]])
        with pytest.raises(ValidationError):
            Mdp(P, np.zeros((2, 1)), 0.9)

    @pytest.mark.parametrize("reward", [-0.1, 1.5])
    def test_rejects_rewards_outside_unit_interval(self, reward):
        with pytest.raises(ValidationError):
            single_state(reward)

    @pytest.mark.parametrize("gamma", [1.0, -0.1, 1.5])
    def test_rejects_bad_discount(self, gamma):
        with pytest.raises(ValidationError):
            single_state(gamma=gamma)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValidationError):
            Mdp(np.ones((1, 2, 2)) / 2, np.zeros((3, 1)), 0.5)

    def test_arrays_are_read_only(self):
        mdp = two_loop()
        with pytest.raises(ValueError):
            mdp.transitions[0, 0, 0] = 0.3

    def test_json_round_trip(self, tmp_path):
        mdp = gen_garnet(4, 3, 2, 1)
        path = tmp_path / "m.json"
        mdp.save(path)
        back = Mdp.load(path)
        assert np.array_equal(back.transitions, mdp.transitions)
        assert np.array_equal(back.rewards, mdp.rewards)
        assert back.gamma == mdp.gamma

    def test_load_reports_missing_field(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"rewards": [[0.0]], "gamma": 0.5}))
        with pytest.raises(ValidationError, match="missing"):
            Mdp.load(path)

    def test_validate_policy(self):
        with pytest.raises(ValidationError):
            validate_policy([[0.5, 0.6]], 1, 2)
        with pytest.raises(ValidationError):
            validate_policy([[1.0, 0.0]], 2, 2)


class TestExactQ:
    def test_discount_free_case_returns_reward(self):
        mdp = gen_garnet(4, 3, 2, 3, gamma=0.0)
        pi = random_policy(np.random.default_rng(0), 4, 3)
        assert np.array_equal(exact_q(mdp, pi), mdp.rewards)

    def test_single_state_geometric_series(self):
        assert exact_q(single_state(), [[1.0]])[0, 0] == pytest.approx(10.0, abs=1e-12)

    def test_two_loop_uniform_golden(self):
        q = exact_q(two_loop(), uniform_policy(2, 2))
        assert np.allclose(q, TWO_LOOP_UNIFORM_Q, atol=1e-12)
        # by symmetry of the swap-average chain, V = 0.5 / (1 - 0.9) = 5 on average
        assert q.mean() == pytest.approx(5.0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_elimination_oracle_on_garnets(self, seed):
        mdp = gen_garnet(5, 3, 3, seed)
        pi = random_policy(np.random.default_rng(seed), 5, 3)
        assert np.allclose(exact_q(mdp, pi), policy_q(mdp.transitions, mdp.rewards, mdp.gamma, pi), atol=1e-10)

    @given(seed=st.integers(0, 10_000), gamma=st.floats(0.0, 0.99))
    @settings(max_examples=40, deadline=None)
    def test_value_range(self, seed, gamma):
        mdp = gen_garnet(4, 2, 2, seed, gamma)
        pi = random_policy(np.random.default_rng(seed), 4, 2)
        q = exact_q(mdp, pi)
        assert np.all(np.isfinite(q))
        assert q.min() >= -1e-10 and q.max() <= 1.0 / (1.0 - gamma) + 1e-9


class TestBellmanOperators:
    def test_zero_discount(self):
        mdp = gen_garnet(3, 2, 2, 0, gamma=0.0)
        q = np.random.default_rng(1).normal(size=(3, 2))
        assert np.array_equal(bellman_optimality(mdp, q), mdp.rewards)
        assert np.array_equal(bellman_policy(mdp, uniform_policy(3, 2), q), mdp.rewards)

    def test_zero_input_on_two_loop(self):
        mdp = two_loop()
        assert np.array_equal(bellman_optimality(mdp, np.zeros((2, 2))), mdp.rewards)

    def test_constant_q_under_deterministic_policy(self):
        mdp = two_loop()
        pi = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert np.allclose(bellman_policy(mdp, pi, np.ones((2, 2))), mdp.rewards + 0.9)

    def test_fixed_points(self):
        mdp = gen_garnet(6, 3, 2, 11)
        q_star, _ = value_iteration(mdp, tol=1e-12)
        assert np.max(np.abs(bellman_optimality(mdp, q_star) - q_star)) <= 1e-8
        pi = random_policy(np.random.default_rng(2), 6, 3)
        q_pi = exact_q(mdp, pi)
        assert np.max(np.abs(bellman_policy(mdp, pi, q_pi) - q_pi)) <= 1e-9

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_monotone_shift_and_contraction(self, seed):
        rng = np.random.default_rng(seed)
        mdp = gen_garnet(4, 3, 2, seed)
        pi = random_policy(rng, 4, 3)
        q1 = rng.normal(size=(4, 3))
        q2 = q1 + np.abs(rng.normal(size=(4, 3)))
        assert np.all(bellman_optimality(mdp, q1) <= bellman_optimality(mdp, q2) + 1e-12)
        assert np.all(bellman_policy(mdp, pi, q1) <= bellman_policy(mdp, pi, q2) + 1e-12)
        shift = float(rng.normal())
        assert np.allclose(bellman_policy(mdp, pi, q1 + shift), bellman_policy(mdp, pi, q1) + mdp.gamma * shift)
        q3 = rng.normal(size=(4, 3))
        lhs = np.max(np.abs(bellman_optimality(mdp, q1) - bellman_optimality(mdp, q3)))
        assert lhs <= mdp.gamma * np.max(np.abs(q1 - q3)) + 1e-12


class TestValueIteration:
    def test_single_state(self):
        q, pi = value_iteration(single_state(), tol=1e-10)
        assert q[0, 0] == pytest.approx(10.0, abs=1e-10)
        assert np.array_equal(pi, [[1.0]])

    def test_two_loop_against_enumeration(self):
        mdp = two_loop()
        q, pi = value_iteration(mdp, tol=1e-10)
        oracle = optimal_q_by_enumeration(mdp.transitions, mdp.rewards, mdp.gamma)
        assert np.allclose(q, oracle, atol=1e-9)
        assert np.allclose(exact_q(mdp, pi), q, atol=1e-9)
        # stay in the rewarding state, switch out of the other one
        assert np.array_equal(pi, [[1.0, 0.0], [0.0, 1.0]])

    @pytest.mark.parametrize("seed", range(3))
    def test_garnet_against_enumeration(self, seed):
        mdp = gen_garnet(4, 3, 2, seed)
        q, _ = value_iteration(mdp, tol=1e-11)
        assert np.allclose(q, optimal_q_by_enumeration(mdp.transitions, mdp.rewards, mdp.gamma), atol=1e-9)

    def test_dominates_random_policies(self):
        mdp = gen_garnet(5, 3, 3, 4)
        tol = 1e-10
        q, pi = value_iteration(mdp, tol=tol)
        assert np.allclose(exact_q(mdp, pi), q, atol=10 * tol)
        rng = np.random.default_rng(0)
        for _ in range(20):
            assert np.all(q >= exact_q(mdp, random_policy(rng, 5, 3)) - tol)

    def test_greedy_ties_break_to_lowest_index(self):
        assert np.array_equal(greedy_policy(np.array([[1.0, 1.0, 0.0]])), [[1.0, 0.0, 0.0]])


class TestStationaryDistribution:
    def test_two_loop_symmetry(self):
        info = stationary_distribution(two_loop(), uniform_policy(2, 2))
        assert np.allclose(info.stationary, [0.5, 0.5], atol=1e-12)
        assert info.mixing_time(0.01) == 1

    def test_reducible_chain_is_rejected(self):
        mdp = Mdp(np.eye(3)[None], np.zeros((3, 1)), 0.9)
        with pytest.raises(AssumptionViolation):
            stationary_distribution(mdp, np.ones((3, 1)))

    def test_periodic_chain_is_rejected(self):
        P = np.array([[[0.0, 1.0], [1.0, 0.0]]])
        with pytest.raises(AssumptionViolation, match="periodic"):
            stationary_distribution(Mdp(P, np.zeros((2, 1)), 0.9), np.ones((2, 1)))

    def test_zero_behavior_mass_is_rejected(self):
        with pytest.raises(AssumptionViolation) as info:
            stationary_distribution(two_loop(), [[1.0, 0.0], [0.5, 0.5]])
        assert info.value.states == [0]

    def test_garnet_against_matrix_powering(self):
        mdp = gen_garnet(5, 3, 3, 2)
        pi_b = uniform_policy(5, 3)
        info = stationary_distribution(mdp, pi_b)
        chain = state_transition_matrix(mdp, pi_b)
        mu = stationary_by_power(chain)
        assert np.allclose(info.stationary, mu, atol=1e-10)
        assert info.stationary.sum() == pytest.approx(1.0, abs=1e-10)
        tv = tv_profile(chain, mu, 60)
        oracle_t = int(np.flatnonzero(tv <= 0.01)[0])
        assert info.mixing_time(0.01) == oracle_t
        assert info.mixing_time(0.001) >= info.mixing_time(0.01)

    @given(seed=st.integers(0, 5000))
    @settings(max_examples=25, deadline=None)
    def test_mixing_time_monotone_in_delta(self, seed):
        mdp = gen_garnet(4, 2, 4, seed)
        info = stationary_distribution(mdp, uniform_policy(4, 2))
        deltas = np.geomspace(0.5, 1e-14, 30)
        times = info.mixing_times(deltas)
        assert np.all(np.diff(times) >= 0)
        assert [info.mixing_time(d) for d in deltas] == times.tolist()


class TestSampling:
    def test_deterministic_path(self):
        P = np.array([[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]], np.eye(3)])
        mdp = Mdp(P, np.zeros((3, 2)), 0.9)
        traj = sample_trajectory(mdp, [[1.0, 0.0]] * 3, 6, seed=0, start=0)
        assert traj.states.tolist() == [0, 1, 2, 1, 2, 1]
        assert traj.actions.tolist() == [0] * 6

    def test_same_seed_same_trajectory(self):
        mdp = gen_garnet(5, 3, 2, 0)
        a = sample_trajectory(mdp, uniform_policy(5, 3), 500, seed=42)
        b = sample_trajectory(mdp, uniform_policy(5, 3), 500, seed=42)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)

    def test_batch_rows_do_not_depend_on_batch(self):
        mdp = gen_garnet(5, 3, 2, 0)
        batch = sample_trajectories(mdp, uniform_policy(5, 3), 300, [3, 9])
        alone = sample_trajectory(mdp, uniform_policy(5, 3), 300, seed=9)
        assert np.array_equal(batch.states[1], alone.states)

    def test_prefix_is_stable_across_lengths(self):
        mdp = gen_garnet(5, 3, 2, 0)
        short = sample_trajectory(mdp, uniform_policy(5, 3), 200, seed=1)
        long = sample_trajectory(mdp, uniform_policy(5, 3), 1000, seed=1)
        assert np.array_equal(long.states[:200], short.states)
        assert np.array_equal(long.actions[:200], short.actions)

    def test_two_loop_frequencies(self):
        traj = sample_trajectory(two_loop(), uniform_policy(2, 2), 100_000, seed=5)
        freq = np.bincount(traj.states, minlength=2) / 100_000
        assert np.max(np.abs(freq - 0.5)) <= 0.01

    def test_empirical_transitions_match_kernel(self):
        mdp = gen_garnet(4, 2, 3, 8)
        pi_b = np.array([[0.3, 0.7], [0.5, 0.5], [0.9, 0.1], [0.2, 0.8]])
        traj = sample_trajectory(mdp, pi_b, 200_000, seed=3)
        s, a = traj.states, traj.actions
        counts = np.zeros((2, 4, 4))
        np.add.at(counts, (a[:-1], s[:-1], s[1:]), 1)
        est = counts / counts.sum(axis=2, keepdims=True)
        assert np.max(np.abs(est - mdp.transitions)) < 0.02
        act = np.zeros((4, 2))
        np.add.at(act, (s, a), 1)
        assert np.max(np.abs(act / act.sum(axis=1, keepdims=True) - pi_b)) < 0.01

    def test_start_state_bounds(self):
        with pytest.raises(ValidationError):
            sample_trajectory(two_loop(), uniform_policy(2, 2), 10, seed=0, start=5)


class TestGarnet:
    def test_single_self_loop(self):
        mdp = gen_garnet(1, 1, 1, 0)
        assert mdp.transitions.shape == (1, 1, 1) and mdp.transitions[0, 0, 0] == 1.0

    def test_seed_determinism(self):
        a, b = gen_garnet(6, 3, 2, 17), gen_garnet(6, 3, 2, 17)
        assert np.array_equal(a.transitions, b.transitions) and np.array_equal(a.rewards, b.rewards)

    def test_branching_support(self):
        mdp = gen_garnet(8, 3, 3, 5)
        assert np.all((mdp.transitions > 0).sum(axis=2) == 3)

    def test_full_branching_rows_stochastic(self):
        rng = np.random.default_rng(0)
        for seed in rng.integers(0, 2**31, size=1000):
            mdp = gen_garnet(3, 2, 3, int(seed))
            assert np.all(np.abs(mdp.transitions.sum(axis=2) - 1.0) <= 1e-12)

    def test_bad_branching(self):
        with pytest.raises(ValidationError):
            gen_garnet(3, 2, 4, 0)
