import numpy as np
import pytest

from tubempc.bounders import compute_frobenius_constants
from tubempc.models import ControlAffineModel, LinearStateConstraints, spring_mass_damper


def make_scalar_linear(a=-1.0, Q_w=1.0, Q_u=36.0, domain=10.0):
    """Scalar test system xdot = a x + u + w (linear, so zero remainder)."""

    def f(x, w):
        x = np.asarray(x, dtype=float)
        w = np.broadcast_to(np.asarray(w, dtype=float), x.shape)
        return a * x + w

    def G(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.ones((1, 1)), x.shape[:-1] + (1, 1))

    def A(q_x, u_x):
        q_x = np.asarray(q_x, dtype=float)
        return np.broadcast_to(a * np.ones((1, 1)), q_x.shape[:-1] + (1, 1))

    def B(q_x):
        q_x = np.asarray(q_x, dtype=float)
        return np.broadcast_to(np.ones((1, 1)), q_x.shape[:-1] + (1, 1))

    return ControlAffineModel(
        n_x=1, n_u=1, n_w=1, f=f, G=G, A=A, B=B,
        q_w=np.zeros(1), Q_w=np.array([[Q_w]]),
        q_u=np.zeros(1), Q_u=np.array([[Q_u]]),
        hessian_domain=(np.array([-domain]), np.array([domain])),
        name="scalar_linear",
        hess_f=lambda x: np.zeros((1, 1, 1)),
    ).validate()


def make_zero_model():
    """Frozen dynamics: f = 0, G = 0, no disturbance."""

    def f(x, w):
        return np.zeros_like(np.asarray(x, dtype=float))

    def G(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.zeros((1, 1)), x.shape[:-1] + (1, 1))

    def A(q_x, u_x):
        q_x = np.asarray(q_x, dtype=float)
        return np.broadcast_to(np.zeros((1, 1)), q_x.shape[:-1] + (1, 1))

    def B(q_x):
        q_x = np.asarray(q_x, dtype=float)
        return np.broadcast_to(np.zeros((1, 1)), q_x.shape[:-1] + (1, 1))

    return ControlAffineModel(
        n_x=1, n_u=1, n_w=1, f=f, G=G, A=A, B=B,
        q_w=np.zeros(1), Q_w=np.zeros((1, 1)),
        q_u=np.zeros(1), Q_u=np.eye(1),
        hessian_domain=(np.array([-5.0]), np.array([5.0])),
        name="zero",
        hess_f=lambda x: np.zeros((1, 1, 1)),
    ).validate()


@pytest.fixture(scope="session")
def smd_model():
    return spring_mass_damper()

@pytest.fixture(scope="session")
def smd_bounds(smd_model):
    return compute_frobenius_constants(smd_model, grid_density=50)


@pytest.fixture(scope="session")
def scalar_model():
    return make_scalar_linear()


@pytest.fixture(scope="session")
def scalar_bounds(scalar_model):
    return compute_frobenius_constants(scalar_model, grid_density=20)


@pytest.fixture(scope="session")
def case_study_constraints():
    return LinearStateConstraints(h=np.array([[1.0, 0.0]]), eta=np.array([0.85]))


@pytest.fixture(scope="session")
def case_study_problem(smd_model, case_study_constraints):
    from tubempc.ocp import SolverOptions, TubeOCP

    return TubeOCP(
        model=smd_model,
        T=10.0,
        N=40,
        x_hat=np.array([0.7, 0.7]),
        constraints=case_study_constraints,
        D=np.eye(2),
        x_ref=np.zeros(2),
        rho_u=1.0,
        options=SolverOptions(seed=0),
    )


@pytest.fixture(scope="session")
def case_study_report(case_study_problem, smd_bounds):
    from tubempc.ocp import solve_tube_ocp

    return solve_tube_ocp(case_study_problem, smd_bounds)


@pytest.fixture(scope="session")
def openloop_prefix_tube(smd_model, smd_bounds, case_study_report):
    """Open-loop enclosure on the longest horizon it stays sound.

    Without feedback the disturbance forcing drives the cross-section into
    the quadratic regime of the remainder bounder within a few seconds, so
    the enclosure property is exercised on a clean prefix of the case-study
    horizon.
    """
    from tubempc.tube import IntegrationError, propagate_openloop
    from tubempc.ellipsoid import Ellipsoid

    u = case_study_report.tube.params.u_x
    for n_pre in (8, 6, 4):
        try:
            tube = propagate_openloop(
                smd_model, Ellipsoid(np.array([0.7, 0.7]), np.zeros((2, 2))),
                u[:n_pre], 0.25 * n_pre, n_pre, 1.0, 1.0, smd_bounds,
            )
        except IntegrationError:
            continue
        if tube.valid:
            return tube
    raise RuntimeError("no sound open-loop prefix found")


@pytest.fixture(scope="session")
def ce_results(smd_model, case_study_constraints):
    """Nominal run plus 200 disturbed scenarios of the nominal-MPC baseline."""
    from tubempc.closedloop import _ce_scenario, _run_pool, run_ce_baseline
    from tubempc.ocp import SolverOptions

    opts = SolverOptions(seed=0)
    nominal = run_ce_baseline(
        smd_model, np.array([0.7, 0.7]), np.zeros((40 * 8, 2)), 10.0, 40,
        0.25, case_study_constraints, options=opts, n_sub=8, duration=10.0,
    )
    ctx = {
        "model": smd_model, "x0": np.array([0.7, 0.7]), "T": 10.0, "N": 40,
        "sampling_period": 0.25, "constraints": case_study_constraints,
        "options": opts, "n_sub": 8, "mode": "uniform-ball",
        "duration": 10.0, "solve_n_sub": 1,
    }
    disturbed = _run_pool(_ce_scenario, [1000 + i for i in range(200)], ctx,
                          jobs=2)
    return nominal, disturbed
