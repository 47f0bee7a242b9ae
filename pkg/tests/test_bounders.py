import numpy as np
import pytest

from tubempc.bounders import (
    BounderError,
    FrobeniusBoundData,
    SAFETY_INFLATION,
    compute_frobenius_constants,
    omega_G,
    omega_n,
)
from tubempc.ellipsoid import sqrt_psd
from tubempc.models import ControlAffineModel, eval_nonlinearity_remainder

from conftest import make_scalar_linear


def make_quadratic_model():
    """Scalar xdot = x^2 + u + w: constant Hessian equal to 2."""

    def f(x, w):
        x = np.asarray(x, dtype=float)
        w = np.broadcast_to(np.asarray(w, dtype=float), x.shape)
        return x * x + w

    def G(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.ones((1, 1)), x.shape[:-1] + (1, 1))

    def A(q, u):
        q = np.asarray(q, dtype=float)
        return (2.0 * q)[..., None]

    def B(q):
        q = np.asarray(q, dtype=float)
        return np.broadcast_to(np.ones((1, 1)), q.shape[:-1] + (1, 1))

    return ControlAffineModel(
        n_x=1, n_u=1, n_w=1, f=f, G=G, A=A, B=B,
        q_w=np.zeros(1), Q_w=np.eye(1), q_u=np.zeros(1), Q_u=np.eye(1),
        hessian_domain=(np.array([-2.0]), np.array([2.0])),
        name="quadratic",
    ).validate()


class TestFrobeniusConstants:
    def test_linear_model_gives_zero(self, scalar_model):
        bd = compute_frobenius_constants(scalar_model, grid_density=10)
        assert np.allclose(bd.fbar, 0.0)

    def test_constant_hessian(self):
        # d2(y^2)/dy2 = 2 everywhere; grid sup is exact, then inflated by 5%
        bd = compute_frobenius_constants(make_quadratic_model(), grid_density=15)
        assert bd.fbar[0] == pytest.approx(2.0 * (1.0 + SAFETY_INFLATION), rel=1e-6)

    def test_smd_second_component(self, smd_bounds):
        # analytic maximum of |d2 f2/dx1^2| = (k0/M) e^{-x1} (2 - x1) at x1 = -1
        analytic = 0.33 * np.exp(1.0) * 3.0
        assert smd_bounds.fbar[0] == 0.0
        assert smd_bounds.fbar[1] == pytest.approx(
            analytic * (1.0 + SAFETY_INFLATION), rel=1e-12
        )

    def test_monotone_under_domain_shrink(self, smd_model):
        from dataclasses import replace

        small = replace(
            smd_model,
            hessian_domain=(np.array([-0.5, -1.0]), np.array([0.5, 1.0])),
        )
        bd_small = compute_frobenius_constants(small, grid_density=30)
        bd_big = compute_frobenius_constants(smd_model, grid_density=30)
        assert np.all(bd_small.fbar <= bd_big.fbar + 1e-12)

    def test_finite_difference_hessian_path(self, smd_model):
        from dataclasses import replace

        no_hess = replace(smd_model, hess_f=None)
        bd_fd = compute_frobenius_constants(no_hess, grid_density=12)
        bd_an = compute_frobenius_constants(smd_model, grid_density=12)
        assert np.allclose(bd_fd.fbar, bd_an.fbar, rtol=1e-5, atol=1e-7)

    def test_nonfinite_hessian_reports_grid_point(self):
        m = make_quadratic_model()
        m.hess_f = lambda y: np.full((1, 1, 1),
                                     np.nan if abs(y[0]) < 0.1 else 2.0)
        with pytest.raises(BounderError, match="grid point"):
            compute_frobenius_constants(m, grid_density=21)

    def test_cache_round_trip(self, smd_model, tmp_path):
        bd1 = compute_frobenius_constants(smd_model, grid_density=15,
                                          cache_dir=str(tmp_path))
        files = list(tmp_path.glob("bounders_*.json"))
        assert len(files) == 1
        bd2 = compute_frobenius_constants(smd_model, grid_density=15,
                                          cache_dir=str(tmp_path))
        assert np.array_equal(bd1.fbar, bd2.fbar)
        assert np.array_equal(bd1.domain[0], bd2.domain[0])

    def test_invalid_scaling_rejected(self, smd_model):
        with pytest.raises(BounderError):
            compute_frobenius_constants(smd_model, grid_density=5,
                                        S=[np.zeros((2, 2)), np.eye(2)])


class TestOmegaN:
    def test_zero_cross_section(self, smd_bounds):
        assert np.allclose(omega_n(smd_bounds, np.zeros((2, 2))), 0.0)

    def test_scalar_quadratic_exact(self):
        # fbar = 2, S = 1: Q_n = (1/4) * 4 * Q^2 = Q^2; sup |d^2| over
        # |d| <= sqrt(Q) equals Q = sqrt(Q_n), so the bound is tight
        bd = FrobeniusBoundData(
            fbar=np.array([2.0]), S=(np.eye(1),),
            domain=(np.array([-2.0]), np.array([2.0])), grid_density=0,
        )
        for Q in (0.25, 1.0, 2.0):
            Qn = omega_n(bd, np.array([[Q]]))
            assert Qn[0, 0] == pytest.approx(Q * Q, rel=1e-12)
            deltas = np.linspace(-np.sqrt(Q), np.sqrt(Q), 101)
            assert np.max(np.abs(deltas**2)) <= np.sqrt(Qn[0, 0]) + 1e-12

    def test_smd_regression_value(self, smd_bounds):
        Qx = np.diag([0.04, 0.04])
        Qn = omega_n(smd_bounds, Qx)
        expected_22 = 0.25 * smd_bounds.fbar[1] ** 2 * np.sum(Qx * Qx)
        assert Qn[0, 0] == 0.0
        assert Qn[1, 1] == pytest.approx(expected_22, rel=1e-12)
        # frozen regression: fbar2 = 1.05 * 0.33 * e * 3 and ||Qx||_F^2 = 0.0032
        analytic = 0.25 * (1.05 * 0.33 * 3.0 * np.e) ** 2 * 0.0032
        assert Qn[1, 1] == pytest.approx(analytic, rel=1e-12)
        assert Qn[1, 1] == pytest.approx(6.3874562e-3, rel=1e-6)

    def test_membership_monte_carlo(self, smd_model, smd_bounds):
        rng = np.random.default_rng(12)
        for q_x, Q_x in [
            (np.zeros(2), np.diag([0.04, 0.04])),
            (np.array([0.3, -0.5]), np.array([[0.05, 0.02], [0.02, 0.08]])),
        ]:
            Qn = omega_n(smd_bounds, Q_x)
            root = sqrt_psd(Q_x)
            v = rng.standard_normal((10_000, 2))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            v *= rng.random((10_000, 1)) ** 0.5
            deltas = v @ root.T
            n_vals = eval_nonlinearity_remainder(smd_model, q_x, deltas)
            assert np.allclose(n_vals[:, 0], 0.0, atol=1e-12)
            assert np.all(n_vals[:, 1] ** 2 <= Qn[1, 1] + 1e-15)

    def test_monotone_in_shape(self, smd_bounds):
        rng = np.random.default_rng(3)
        for _ in range(100):
            M = rng.standard_normal((2, 2))
            Q = M @ M.T
            scale = 1.0 + rng.random()
            a = omega_n(smd_bounds, Q)
            b = omega_n(smd_bounds, scale * Q)
            assert np.all(np.linalg.eigvalsh(b - a) >= -1e-12)

    def test_batched_matches_loop(self, smd_bounds):
        rng = np.random.default_rng(5)
        Qs = np.array([m @ m.T for m in rng.standard_normal((7, 2, 2))])
        batched = omega_n(smd_bounds, Qs)
        for i in range(7):
            assert np.allclose(batched[i], omega_n(smd_bounds, Qs[i]))


class TestOmegaG:
    def test_constant_G_is_zero(self, smd_model, smd_bounds):
        out = omega_G(smd_model, np.diag([1.0, 2.0]), np.array([[4.0]]))
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_zero_cross_section(self):
        m = make_quadratic_model()
        m.g_constant = False
        m.lipschitz_G = 1.0
        assert np.allclose(omega_G(m, np.zeros((1, 1)), np.array([[4.0]])), 0.0)

    def test_missing_lipschitz_constant(self):
        m = make_quadratic_model()
        m.g_constant = False
        with pytest.raises(BounderError):
            omega_G(m, np.eye(1), np.eye(1))

    def test_scalar_dominance_monte_carlo(self):
        # G(x) = x with L_G = 1, Q_x = 1, R_u = 4: bound is 2*1*2*1 = 4
        def G(x):
            x = np.asarray(x, dtype=float)
            return x[..., None]

        m = make_quadratic_model()
        m.G = G
        m.g_constant = False
        m.lipschitz_G = 1.0
        Q_x = np.array([[1.0]])
        R_u = np.array([[4.0]])
        out = omega_G(m, Q_x, R_u)
        assert out[0, 0] == pytest.approx(4.0)
        rng = np.random.default_rng(17)
        q_x = np.array([0.5])
        for _ in range(10_000):
            xi = q_x + rng.uniform(-1.0, 1.0, size=1)  # xi in E(q_x, Q_x)
            s0 = rng.uniform(-1.0, 1.0)
            lhs = out[0, 0]
            dG = float(G(xi)[0, 0] - G(q_x)[0, 0])
            rhs = 2.0 * 1.0 * s0 * 2.0 * dG  # Q^1/2 S0 R^1/2 dG + sym
            assert lhs - rhs >= -1e-9


class TestJointBounders:
    def test_disturbance_curvature_covered(self):
        # f = x + w^2: curvature lives on the disturbance axis
        def f(x, w):
            x = np.asarray(x, dtype=float)
            w = np.broadcast_to(np.asarray(w, dtype=float), x.shape)
            return x + w * w

        def G(x):
            x = np.asarray(x, dtype=float)
            return np.broadcast_to(np.ones((1, 1)), x.shape[:-1] + (1, 1))

        def A(q, u):
            q = np.asarray(q, dtype=float)
            return np.broadcast_to(np.ones((1, 1)), q.shape[:-1] + (1, 1))

        def B(q):
            q = np.asarray(q, dtype=float)
            return np.broadcast_to(np.zeros((1, 1)), q.shape[:-1] + (1, 1))

        m = ControlAffineModel(
            n_x=1, n_u=1, n_w=1, f=f, G=G, A=A, B=B,
            q_w=np.zeros(1), Q_w=np.array([[0.25]]),
            q_u=np.zeros(1), Q_u=np.eye(1),
            hessian_domain=(np.array([-1.0]), np.array([1.0])),
            name="wquad", w_affine=False,
        )
        bd = compute_frobenius_constants(m, grid_density=9, joint_xw=True)
        assert bd.joint_xw
        assert bd.fbar[0] == pytest.approx(2.0 * (1.0 + SAFETY_INFLATION),
                                           rel=1e-4)
        Qn = omega_n(bd, np.array([[0.01]]), Q_w=m.Q_w)
        # remainder n(dw) = dw^2 <= Q_w must be enclosed
        assert np.sqrt(Qn[0, 0]) >= 0.25 - 1e-9

    def test_joint_requires_Qw(self):
        bd = FrobeniusBoundData(
            fbar=np.array([1.0]), S=(np.eye(2),),
            domain=(-np.ones(2), np.ones(2)), grid_density=0, joint_xw=True,
        )
        with pytest.raises(BounderError):
            omega_n(bd, np.eye(1))
