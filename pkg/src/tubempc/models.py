"""Control-affine uncertain system models  xdot = f(x, w) + G(x) u.

A model bundles the drift and input-matrix evaluators with their Jacobians,
the disturbance and admissible-control ellipsoids, and the box domain over
which curvature bounds are certified. Evaluators are written to broadcast
over leading axes so batched integration works without wrappers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .ellipsoid import EllipsoidError, clip_psd


class ModelError(ValueError):
    """Inconsistent model definition or unsupported model class."""


@dataclass
class LinearStateConstraints:
    """Half-space constraints h_i . x <= eta_i, i = 1..n_h."""

    h: np.ndarray  # (n_h, n_x)
    eta: np.ndarray  # (n_h,)

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        if self.h.shape[0] != self.eta.shape[0]:
            raise ModelError("number of rows h and bounds eta disagree")
        if np.any(np.linalg.norm(self.h, axis=1) == 0.0):
            raise ModelError("constraint rows must be nonzero")

    @property
    def n_h(self):
        return self.h.shape[0]


@dataclass
class ControlAffineModel:
    """Control-affine system with ellipsoidal disturbance and control sets.

    Parameters
    ----------
    f : callable
        Drift ``f(x, w) -> (..., n_x)``; must broadcast over leading axes.
    G : callable
        Input matrix ``G(x) -> (..., n_x, n_u)``.
    A : callable
        ``A(q_x, u_x) = df/dx(q_x, q_w) + dG/dx(q_x) u_x -> (..., n_x, n_x)``.
    B : callable
        ``B(q_x) = df/dw(q_x, q_w) -> (..., n_x, n_w)``.
    hess_f : callable, optional
        Component Hessians ``hess_f(x) -> (n_x, n_x, n_x)`` (index i gives
        d2 f_i / dx2 at the nominal disturbance); finite differences are used
        when absent.
    hessian_domain : (lo, hi)
        Axis-aligned box over which curvature bounds are certified.
    g_constant : bool
        True iff G does not depend on x.
    w_affine : bool
        True iff f(x, w) = f0(x) + E w with constant E (required by the
        Taylor-remainder machinery in v1).
    lipschitz_G : float, optional
        Spectral-norm Lipschitz constant of G on the domain; only needed
        when g_constant is False.
    """

    n_x: int
    n_u: int
    n_w: int
    f: Callable
    G: Callable
    A: Callable
    B: Callable
    q_w: np.ndarray
    Q_w: np.ndarray
    q_u: np.ndarray
    Q_u: np.ndarray
    hessian_domain: tuple
    name: str = "model"
    hess_f: Optional[Callable] = None
    g_constant: bool = True
    b_constant: bool = False  # df/dw independent of the state
    w_affine: bool = True
    lipschitz_G: Optional[float] = None
    fbar: Optional[np.ndarray] = None
    S_scaling: Optional[list] = None

    def __post_init__(self):
        self.q_w = np.atleast_1d(np.asarray(self.q_w, dtype=float))
        self.q_u = np.atleast_1d(np.asarray(self.q_u, dtype=float))
        self.Q_w = clip_psd(np.atleast_2d(np.asarray(self.Q_w, dtype=float)))
        self.Q_u = clip_psd(np.atleast_2d(np.asarray(self.Q_u, dtype=float)))
        lo, hi = self.hessian_domain
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != (self.n_x,) or hi.shape != (self.n_x,) or np.any(lo >= hi):
            raise ModelError("hessian_domain must be a nonempty box over the state")
        self.hessian_domain = (lo, hi)
        if np.linalg.eigvalsh(self.Q_u)[0] <= 0.0:
            # admissible-control set needs interior for feedback synthesis
            raise ModelError("Q_u must be positive definite")

    def validate(self, n_points=10, seed=0, tol=1e-5):
        """Check A and B against central finite differences of f and G.

        Runs at ``n_points`` random states in the domain box; raises on
        relative disagreement beyond ``tol``.
        """
        rng = np.random.default_rng(seed)
        lo, hi = self.hessian_domain
        for _ in range(n_points):
            x = lo + (hi - lo) * rng.random(self.n_x)
            u = self.q_u + 0.1 * rng.standard_normal(self.n_u)
            A_fd = _fd_jac(lambda z: self.f(z, self.q_w), x) + _fd_dGu(self, x, u)
            B_fd = _fd_jac(lambda w: self.f(x, w), self.q_w)
            A_an = self.A(x, u)
            B_an = self.B(x)
            for name, an, fd in (("A", A_an, A_fd), ("B", B_an, B_fd)):
                scale = 1.0 + np.abs(fd).max()
                err = np.abs(an - fd).max() / scale
                if err > tol:
                    raise ModelError(
                        f"{name} disagrees with finite differences of f at x={x}: "
                        f"relative error {err:.2e}"
                    )
        return self

    def domain_contains(self, q, Q):
        """True iff E(q, Q) lies inside the hessian_domain box.

        Axis-aligned support values q_i +/- sqrt(Q_ii) against the box faces.
        """
        lo, hi = self.hessian_domain
        r = np.sqrt(np.clip(np.diagonal(Q, axis1=-2, axis2=-1), 0.0, None))
        return bool(np.all(q + r <= hi + 1e-12) and np.all(q - r >= lo - 1e-12))


def _fd_jac(fn, x, step=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.shape[0]):
        h = step * (1.0 + abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        cols.append((fn(xp) - fn(xm)) / (2.0 * h))
    return np.column_stack(cols)


def _fd_dGu(model, x, u, step=1e-6):
    # contribution of dG/dx . u to A; zero for state-independent G
    if model.g_constant:
        return np.zeros((model.n_x, model.n_x))
    return _fd_jac(lambda z: model.G(z) @ u, x, step=step)


def eval_nonlinearity_remainder(model, q_x, delta_x):
    """Taylor remainder n(d) = f(q+d, q_w) - f(q, q_w) - df/dx(q, q_w) d.

    Only defined for the supported model class (f affine in w with constant
    coefficient, constant G), where the remainder depends on the state
    perturbation alone.
    """
    if not (model.w_affine and model.g_constant):
        raise ModelError(
            "Taylor remainder as a function of delta_x alone requires "
            "w-affine drift with constant coefficient and constant G"
        )
    q_x = np.asarray(q_x, dtype=float)
    delta_x = np.asarray(delta_x, dtype=float)
    A0 = model.A(q_x, np.zeros(model.n_u))
    return (
        model.f(q_x + delta_x, model.q_w)
        - model.f(q_x, model.q_w)
        - delta_x @ np.asarray(A0).T
    )


# ---------------------------------------------------------------------------
# spring-mass-damper preset: cart with exponentially softening spring
# ---------------------------------------------------------------------------


def spring_mass_damper(
    M=1.0,
    k0=0.33,
    h_d=1.1,
    Q_w=None,
    Q_u=None,
    hessian_domain=None,
):
    """Two-state cart: position/velocity with stiffness k(x) = k0 exp(-x1).

    States: displacement x1 [m], velocity x2 [m/s]. One force input [N],
    disturbances on velocity [m/s] and force [N].
    """
    Q_w = np.diag([1e-2, 0.25]) if Q_w is None else np.atleast_2d(np.asarray(Q_w, float))
    Q_u = np.array([[36.0]]) if Q_u is None else np.atleast_2d(np.asarray(Q_u, float))
    if hessian_domain is None:
        hessian_domain = (np.array([-1.0, -3.0]), np.array([1.2, 3.0]))

    def f(x, w):
        x = np.asarray(x, dtype=float)
        w = np.broadcast_to(np.asarray(w, dtype=float), x.shape[:-1] + (2,))
        x1, x2 = x[..., 0], x[..., 1]
        f1 = x2 + w[..., 0]
        f2 = -k0 * np.exp(-x1) * x1 / M - h_d * x2 / M + w[..., 1] / M
        return np.stack([f1, f2], axis=-1)

    G_mat = np.array([[0.0], [1.0 / M]])

    def G(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(G_mat, x.shape[:-1] + (2, 1))

    def A(q_x, u_x):
        q_x = np.asarray(q_x, dtype=float)
        x1 = q_x[..., 0]
        a21 = -k0 / M * np.exp(-x1) * (1.0 - x1)
        z = np.zeros_like(x1)
        row0 = np.stack([z, np.ones_like(x1)], axis=-1)
        row1 = np.stack([a21, np.full_like(x1, -h_d / M)], axis=-1)
        return np.stack([row0, row1], axis=-2)

    B_mat = np.array([[1.0, 0.0], [0.0, 1.0 / M]])

    def B(q_x):
        q_x = np.asarray(q_x, dtype=float)
        return np.broadcast_to(B_mat, q_x.shape[:-1] + (2, 2))

    def hess_f(x):
        # only f2 is nonlinear: d2 f2 / dx1^2 = (k0/M) exp(-x1) (2 - x1)
        x = np.asarray(x, dtype=float)
        H = np.zeros((2, 2, 2))
        H[1, 0, 0] = k0 / M * np.exp(-x[0]) * (2.0 - x[0])
        return H

    return ControlAffineModel(
        n_x=2,
        n_u=1,
        n_w=2,
        f=f,
        G=G,
        A=A,
        B=B,
        q_w=np.zeros(2),
        Q_w=Q_w,
        q_u=np.zeros(1),
        Q_u=Q_u,
        hessian_domain=hessian_domain,
        name="spring_mass_damper",
        hess_f=hess_f,
        g_constant=True,
        b_constant=True,
        w_affine=True,
    ).validate()


_REGISTRY = {"spring_mass_damper": spring_mass_damper}


def register_model(name, factory):
    """Register a model factory for lookup by name (e.g. from config files)."""
    _REGISTRY[name] = factory


def make_model(name, **overrides):
    """Instantiate a registered model, passing numeric overrides through."""
    if name not in _REGISTRY:
        raise ModelError(
            f"unknown model {name!r}; registered: {sorted(_REGISTRY)}"
        )
    return _REGISTRY[name](**overrides)


def registered_models():
    return sorted(_REGISTRY)
