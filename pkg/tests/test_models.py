import numpy as np
import pytest

from tubempc.models import (
    LinearStateConstraints,
    ModelError,
    eval_nonlinearity_remainder,
    make_model,
    registered_models,
    spring_mass_damper,
)

from conftest import make_scalar_linear


class TestSpringMassDamper:
    def test_equilibrium(self, smd_model):
        assert np.allclose(smd_model.f(np.zeros(2), np.zeros(2)), 0.0)

    def test_drift_value(self, smd_model):
        # direct evaluation of f2 = -k0 exp(-x1) x1 / M - h_d x2 / M
        x = np.array([0.7, 0.7])
        expected = np.array([0.7, -0.33 * np.exp(-0.7) * 0.7 - 1.1 * 0.7])
        assert np.allclose(smd_model.f(x, np.zeros(2)), expected, atol=1e-12)
        assert expected[1] == pytest.approx(-0.8847112, abs=1e-6)

    def test_jacobian_at_origin(self, smd_model):
        # finite-difference oracle
        x0 = np.zeros(2)
        A = smd_model.A(x0, np.zeros(1))
        eps = 1e-7
        fd = np.zeros((2, 2))
        for j in range(2):
            dx = np.zeros(2)
            dx[j] = eps
            fd[:, j] = (smd_model.f(x0 + dx, np.zeros(2))
                        - smd_model.f(x0 - dx, np.zeros(2))) / (2 * eps)
        assert np.allclose(A, fd, atol=1e-6)
        assert np.allclose(A, [[0.0, 1.0], [-0.33, -1.1]], atol=1e-12)

    def test_disturbance_jacobian(self, smd_model):
        B = smd_model.B(np.array([0.3, -0.2]))
        assert np.allclose(B, np.eye(2))

    def test_default_sets(self, smd_model):
        assert np.allclose(smd_model.Q_w, np.diag([1e-2, 0.25]))
        assert np.allclose(smd_model.Q_u, [[36.0]])
        assert np.allclose(smd_model.q_w, 0.0)
        assert np.allclose(smd_model.q_u, 0.0)
        lo, hi = smd_model.hessian_domain
        assert np.allclose(lo, [-1.0, -3.0])
        assert np.allclose(hi, [1.2, 3.0])
        assert smd_model.g_constant

    def test_parameter_overrides(self):
        m = spring_mass_damper(M=2.0, Q_u=np.array([[16.0]]))
        assert np.allclose(m.G(np.zeros(2)), [[0.0], [0.5]])
        assert np.allclose(m.Q_u, [[16.0]])

    def test_batched_evaluators_broadcast(self, smd_model):
        xs = np.random.default_rng(0).standard_normal((5, 3, 2))
        ws = np.zeros((5, 3, 2))
        assert smd_model.f(xs, ws).shape == (5, 3, 2)
        assert smd_model.G(xs).shape == (5, 3, 2, 1)
        assert smd_model.A(xs, np.zeros(1)).shape == (5, 3, 2, 2)
        assert smd_model.B(xs).shape == (5, 3, 2, 2)


class TestRegistry:
    def test_lookup(self):
        m = make_model("spring_mass_damper")
        assert m.name == "spring_mass_damper"
        assert "spring_mass_damper" in registered_models()

    def test_unknown_name(self):
        with pytest.raises(ModelError):
            make_model("does_not_exist")


class TestValidation:
    def test_consistency_check_catches_wrong_jacobian(self):
        m = make_scalar_linear()
        m.A = lambda q, u: np.broadcast_to(
            -2.0 * np.ones((1, 1)), np.asarray(q).shape[:-1] + (1, 1)
        )
        with pytest.raises(ModelError):
            m.validate()

    def test_constraints_reject_zero_rows(self):
        with pytest.raises(ModelError):
            LinearStateConstraints(h=np.zeros((1, 2)), eta=np.array([1.0]))

    def test_domain_contains(self, smd_model):
        assert smd_model.domain_contains(np.zeros(2), 0.01 * np.eye(2))
        assert not smd_model.domain_contains(np.array([1.15, 0.0]),
                                             0.01 * np.eye(2))


class TestNonlinearityRemainder:
    def test_zero_perturbation(self, smd_model):
        n = eval_nonlinearity_remainder(smd_model, np.array([0.3, -0.1]),
                                        np.zeros(2))
        assert np.allclose(n, 0.0, atol=1e-14)

    def test_linear_model_has_zero_remainder(self, scalar_model):
        rng = np.random.default_rng(4)
        for _ in range(50):
            q = rng.uniform(-5, 5, size=1)
            d = rng.uniform(-5, 5, size=1)
            n = eval_nonlinearity_remainder(scalar_model, q, d)
            assert np.allclose(n, 0.0, atol=1e-12)

    def test_smd_remainder_value(self, smd_model):
        # f2(0.5, 0) - f2(0, 0) - (df2/dx1)(0) * 0.5, hand-evaluated
        n = eval_nonlinearity_remainder(smd_model, np.zeros(2),
                                        np.array([0.5, 0.0]))
        expected = -0.33 * np.exp(-0.5) * 0.5 + 0.33 * 0.5
        assert n[0] == pytest.approx(0.0, abs=1e-14)
        assert n[1] == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.0649224, abs=1e-6)

    def test_quadratic_decay(self, smd_model):
        # ||n(d)|| <= C ||d||^2: the ratio must stay bounded as d shrinks
        rng = np.random.default_rng(8)
        dirs = rng.standard_normal((10, 2))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        ratios = []
        for scale in (0.5, 0.25, 0.125, 0.0625):
            for v in dirs:
                d = scale * v
                n = eval_nonlinearity_remainder(smd_model, np.zeros(2), d)
                ratios.append(np.linalg.norm(n) / scale**2)
        # Hessian bound: sup ||H2||_F / 2 on the domain is about 1.35
        assert max(ratios) <= 1.5

    def test_unsupported_model_class(self, smd_model):
        from dataclasses import replace

        bad = replace(smd_model, w_affine=False)
        with pytest.raises(ModelError):
            eval_nonlinearity_remainder(bad, np.zeros(2), np.zeros(2))
