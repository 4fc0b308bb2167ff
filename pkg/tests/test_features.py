import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aclab.errors import AssumptionViolation, ValidationError
from aclab.features import (
    FeatureMap,
    WeightMatrixInfo,
    project,
    projection_weights,
    random_features,
    spectral_info,
    tabular_features,
    weighted_norm,
)
from aclab.mdp import gen_garnet, stationary_distribution, two_loop, uniform_policy
from oracles import gauss_solve, random_policy, smallest_eig_inverse_power


def two_loop_weights(behavior=None):
    pi_b = uniform_policy(2, 2) if behavior is None else np.asarray(behavior)
    mixing = stationary_distribution(two_loop(), pi_b)
    return mixing, pi_b


class TestFeatureMap:
    def test_rank_deficient_is_rejected(self):
        with pytest.raises(ValidationError, match="independent"):
            FeatureMap(np.array([[1.0, 2.0], [2.0, 4.0], [0.5, 1.0], [0.1, 0.2]]) / 10, 2)

    def test_more_columns_than_rows_rejected(self):
        with pytest.raises(ValidationError):
            FeatureMap(np.ones((2, 3)) / 3, 2)

    def test_rescales_to_unit_row_norm(self):
        fm = FeatureMap(np.array([[2.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]), 2)
        assert np.abs(fm.phi).sum(axis=1).max() == pytest.approx(1.0)

    def test_random_features_normalized(self):
        fm = random_features(5, 3, 4, seed=2)
        assert np.abs(fm.phi).sum(axis=1).max() <= 1.0 + 1e-12
        assert np.linalg.matrix_rank(fm.phi) == 4

    def test_json_round_trip(self, tmp_path):
        fm = random_features(3, 2, 3, seed=1)
        path = tmp_path / "f.json"
        import json

        path.write_text(json.dumps(fm.to_dict()))
        assert np.array_equal(FeatureMap.load(path, 2).phi, fm.phi)

    def test_q_values_layout(self):
        fm = tabular_features(2, 3)
        assert np.array_equal(fm.q_values(np.arange(6.0)), [[0, 1, 2], [3, 4, 5]])


class TestWeightedNorm:
    def test_zero_and_one(self):
        mixing, pi_b = two_loop_weights()
        w = spectral_info(tabular_features(2, 2), mixing, pi_b)
        assert weighted_norm(np.zeros((2, 2)), w) == 0.0
        assert weighted_norm(np.ones((2, 2)), w) == pytest.approx(1.0, abs=1e-12)
        assert w.ksa_diag.sum() == pytest.approx(1.0, abs=1e-10)

    def test_brute_force_sum(self):
        mixing, pi_b = two_loop_weights([[0.3, 0.7], [0.6, 0.4]])
        w = spectral_info(tabular_features(2, 2), mixing, pi_b)
        q = np.random.default_rng(0).normal(size=(2, 2))
        mu = mixing.stationary
        total = 0.0
        for s in range(2):
            for a in range(2):
                total += mu[s] * pi_b[s][a] * q[s, a] ** 2
        assert weighted_norm(q, w) == pytest.approx(np.sqrt(total), rel=1e-12)


class TestProjection:
    def test_tabular_projection_is_identity(self):
        mixing, pi_b = two_loop_weights()
        fm = tabular_features(2, 2)
        w = spectral_info(fm, mixing, pi_b)
        q = np.random.default_rng(1).normal(size=(2, 2))
        assert np.allclose(project(q, fm, w), q, atol=1e-12)

    def test_span_is_fixed(self):
        mixing, pi_b = two_loop_weights()
        fm = random_features(2, 2, 2, seed=4)
        w = spectral_info(fm, mixing, pi_b)
        q = fm.q_values(np.array([0.3, -1.2]))
        assert np.allclose(project(q, fm, w), q, atol=1e-10)

    def test_normal_equations_oracle(self):
        mixing, pi_b = two_loop_weights([[0.2, 0.8], [0.5, 0.5]])
        fm = random_features(2, 2, 2, seed=7)
        w = spectral_info(fm, mixing, pi_b)
        q = np.random.default_rng(3).normal(size=4)
        K = np.diag(w.ksa_diag)
        coef = gauss_solve(fm.phi.T @ K @ fm.phi, fm.phi.T @ K @ q)
        assert np.allclose(projection_weights(q, fm, w), coef, atol=1e-10)
        assert np.allclose(project(q, fm, w), fm.phi @ coef, atol=1e-10)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_projection_is_idempotent_and_orthogonal(self, seed):
        rng = np.random.default_rng(seed)
        mdp = gen_garnet(4, 2, 4, seed)
        pi_b = random_policy(rng, 4, 2, floor=0.05)
        mixing = stationary_distribution(mdp, pi_b)
        fm = random_features(4, 2, 3, seed)
        w = spectral_info(fm, mixing, pi_b)
        q = rng.normal(size=8)
        p = project(q, fm, w)
        assert np.allclose(project(p, fm, w), p, atol=1e-9)
        # residual is K_SA-orthogonal to every feature column
        assert np.allclose(fm.phi.T @ (w.ksa_diag * (q - p)), 0.0, atol=1e-9)


class TestSpectralInfo:
    def test_tabular_uniform(self):
        mixing, pi_b = two_loop_weights()
        w = spectral_info(tabular_features(2, 2), mixing, pi_b)
        assert w.lambda_min == pytest.approx(0.25, abs=1e-12)
        assert w.ksa_min == pytest.approx(0.25, abs=1e-12)

    def test_constant_single_feature(self):
        mixing, pi_b = two_loop_weights()
        w = spectral_info(FeatureMap(np.full((4, 1), 0.6), 2), mixing, pi_b)
        assert w.lambda_min == pytest.approx(0.36, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_inverse_power_iteration_oracle(self, seed):
        mdp = gen_garnet(6, 3, 3, seed)
        pi_b = random_policy(np.random.default_rng(seed), 6, 3, floor=0.1)
        mixing = stationary_distribution(mdp, pi_b)
        fm = random_features(6, 3, 5, seed)
        w = spectral_info(fm, mixing, pi_b)
        G = fm.phi.T @ np.diag(w.ksa_diag) @ fm.phi
        assert w.lambda_min == pytest.approx(smallest_eig_inverse_power(G), abs=1e-8)
        assert w.lambda_min > 0

    def test_zero_weight_is_an_assumption_violation(self):
        fm = tabular_features(2, 2)
        mixing, _ = two_loop_weights()
        with pytest.raises(AssumptionViolation):
            spectral_info(fm, mixing, [[1.0, 0.0], [0.5, 0.5]])

    def test_info_norm_method(self):
        info = WeightMatrixInfo(np.array([0.5, 0.5]), 0.5, 0.5)
        assert info.norm([1.0, 1.0]) == pytest.approx(1.0)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_norm_ordering_nonexpansive_and_pythagoras(seed):
    rng = np.random.default_rng(seed)
    mdp = gen_garnet(4, 3, 4, seed)
    pi_b = random_policy(rng, 4, 3, floor=0.05)
    fm = random_features(4, 3, 4, seed)
    w = spectral_info(fm, stationary_distribution(mdp, pi_b), pi_b)
    q1, q2 = rng.normal(size=(2, 12)) * 2
    sup = np.max(np.abs(q1))
    assert weighted_norm(q1, w) <= sup + 1e-12
    assert sup <= weighted_norm(q1, w) / np.sqrt(w.ksa_min) + 1e-12
    p1, p2 = project(q1, fm, w), project(q2, fm, w)
    assert weighted_norm(p1 - p2, w) <= weighted_norm(q1 - q2, w) + 1e-12
    total = weighted_norm(q1, w) ** 2
    assert total == pytest.approx(weighted_norm(p1, w) ** 2 + weighted_norm(q1 - p1, w) ** 2, abs=1e-9)
