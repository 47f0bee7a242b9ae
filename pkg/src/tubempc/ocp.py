"""Direct transcription and solution of the tube optimal control problem.

Single shooting: the per-interval policy parameters are the only decision
variables, the tube is integrated inside the objective, and the path/LMI
conditions become smooth inequality constraints handled by an augmented
Lagrangian with L-BFGS-B inner solves and batched central-difference
gradients. The same machinery solves the nominal (certainty-equivalent)
problem and the time-invariant terminal-set synthesis.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .ellipsoid import Ellipsoid, contains, pinv_psd, sqrt_psd
from .models import LinearStateConstraints
from .tube import (
    GAMMA_MIN,
    MULT_MAX,
    MULT_MIN,
    InfeasiblePolicyError,
    IntegrationError,
    PolicyParams,
    TubeTrajectory,
    integrate_policy_batch,
    integrate_tube,
    phi_g,
    _spectral_clamp,
)


class SolverError(RuntimeError):
    """Unrecoverable failure inside the transcription solver."""


# ---------------------------------------------------------------------------
# augmented Lagrangian engine (inequality constraints g(x) <= 0)
# ---------------------------------------------------------------------------


@dataclass
class SolverOptions:
    seed: int = 0
    tol_feas: float = 1e-6
    max_outer: int = 8
    inner_maxiter: int = 40
    warmup_maxiter: int = 25
    rho0: float = 100.0
    rho_growth: float = 8.0
    mu_max: float = 1e10
    fd_step: float = 1e-6
    fd_scheme: str = "central"  # "forward" halves the gradient batch
    maxls: int = 12  # line-search trials per L-BFGS-B iteration
    n_sub: int = 4  # substeps per interval inside the transcription
    n_sub_final: int = 8  # substeps for the returned tube (finer polish)
    conv_tol: float = 5e-6  # substep-halving defect allowed during the solve
    first_interval_no_shaping: bool = True
    verbose: bool = False

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass
class ALResult:
    x: np.ndarray
    objective: float
    cons: np.ndarray
    max_violation: float
    iterations: int
    converged: bool
    n_outer: int


def _fd_points(x, free_idx, step_rel, scheme="central"):
    """Perturbation stack for finite differences on the free coordinates:
    pairs x +/- h e_i (central) or x, x + h e_i rows (forward)."""
    d = free_idx.shape[0]
    steps = step_rel * (1.0 + np.abs(x[free_idx]))
    if scheme == "forward":
        X = np.tile(x, (d + 1, 1))
        X[np.arange(1, d + 1), free_idx] += steps
        return X, steps
    X = np.tile(x, (2 * d, 1))
    rows = np.arange(d)
    X[2 * rows, free_idx] += steps
    X[2 * rows + 1, free_idx] -= steps
    return X, steps


def _al_merit(f, cons, mu, rho):
    t = np.maximum(0.0, mu + rho * cons)
    return f + (np.sum(t * t, axis=-1) - np.sum(mu * mu)) / (2.0 * rho)


def auglag_minimize(eval_batch, x0, bounds, n_con, opts, free_mask=None,
                    mu0=None, label=""):
    """Minimize f(x) s.t. g(x) <= 0 via an augmented Lagrangian.

    ``eval_batch(X) -> (f, cons)`` evaluates a stack of decision vectors at
    once; gradients come from central differences over the stack, so one
    batched call per inner iteration is the entire cost. ``free_mask``
    restricts the optimization to a coordinate subset (used by warm-up
    phases). Deterministic for fixed inputs.
    """
    x = np.asarray(x0, dtype=float).copy()
    dim = x.shape[0]
    free_idx = np.flatnonzero(
        np.ones(dim, bool) if free_mask is None else np.asarray(free_mask, bool)
    )
    mu = np.zeros(n_con) if mu0 is None else np.asarray(mu0, dtype=float).copy()
    rho = opts.rho0
    total_inner = 0
    best = None  # (objective, x, cons)
    prev_viol = np.inf
    prev_obj = np.inf
    stall = 0
    dead_inner = 0
    converged = False
    n_outer = 0

    lb = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    ub = np.array([b[1] if b[1] is not None else np.inf for b in bounds])
    red_bounds = [(lb[i], ub[i]) for i in free_idx]

    def merit(z):
        # single-row evaluation: line-search trials stay cheap
        xz = x.copy()
        xz[free_idx] = z
        f, cons = eval_batch(xz[None, :])
        return float(_al_merit(f, cons, mu, rho)[0])

    forward = getattr(opts, "fd_scheme", "central") == "forward"

    def merit_grad(z):
        xz = x.copy()
        xz[free_idx] = z
        X, steps = _fd_points(xz, free_idx, opts.fd_step,
                              scheme="forward" if forward else "central")
        f, cons = eval_batch(X)
        L = _al_merit(f, cons, mu, rho)
        if forward:
            return (L[1:] - L[0]) / steps
        return (L[0::2] - L[1::2]) / (2.0 * steps)

    def rescue(z0, max_steps=15):
        """Projected steepest descent with tiny steps for knife-edge merit
        regions where the L-BFGS line search fails outright."""
        z = z0.copy()
        L = merit(z)
        alpha = 1e-5
        moved = 0
        lo = np.array([b[0] for b in red_bounds])
        hi = np.array([b[1] for b in red_bounds])
        for _ in range(max_steps):
            g = merit_grad(z)
            gn = np.linalg.norm(g)
            if gn < 1e-12:
                break
            step_ok = False
            for _ in range(8):
                z_try = np.clip(z - alpha * g / gn, lo, hi)
                L_try = merit(z_try)
                if L_try < L - 1e-12:
                    z, L = z_try, L_try
                    alpha *= 2.0
                    step_ok = True
                    moved += 1
                    break
                alpha *= 0.25
            if not step_ok:
                break
        return z, moved

    for outer in range(opts.max_outer):
        n_outer = outer + 1
        res = minimize(
            merit,
            x[free_idx],
            jac=merit_grad,
            method="L-BFGS-B",
            bounds=red_bounds,
            options={"maxiter": opts.inner_maxiter, "ftol": 1e-12,
                     "gtol": max(1e-9, 1e-5 / (10.0 ** outer)),
                     "maxcor": 25, "maxls": opts.maxls},
        )
        total_inner += res.nit
        x[free_idx] = res.x
        progressed = res.nit > 0
        if not progressed:
            z_r, moved = rescue(x[free_idx])
            if moved:
                progressed = True
                x[free_idx] = z_r
                total_inner += moved
                res = minimize(
                    merit, x[free_idx], jac=merit_grad, method="L-BFGS-B",
                    bounds=red_bounds,
                    options={"maxiter": opts.inner_maxiter, "ftol": 1e-12,
                             "gtol": max(1e-9, 1e-5 / (10.0 ** outer)),
                             "maxcor": 25, "maxls": opts.maxls},
                )
                total_inner += res.nit
                x[free_idx] = res.x
        f_x, cons_x = eval_batch(x[None, :])
        f_x = float(f_x[0])
        cons_x = cons_x[0]
        viol = float(np.clip(cons_x, 0.0, None).max()) if n_con else 0.0
        if opts.verbose:
            print(f"[auglag{label}] outer {outer}: f={f_x:.6g} viol={viol:.3e} "
                  f"rho={rho:.1e} inner_it={res.nit}")
        if viol <= opts.tol_feas and (best is None or f_x < best[0]):
            best = (f_x, x.copy(), cons_x.copy())
        if viol <= opts.tol_feas:
            # feasible with diminishing returns: stop spending evaluations
            if abs(prev_obj - f_x) <= 1e-5 * (1.0 + abs(f_x)):
                stall += 1
            else:
                stall = 0
            if stall >= 1 and best is not None:
                converged = True
                break
        dead_inner = 0 if progressed else dead_inner + 1
        if dead_inner >= 2:
            # the inner solver cannot move; further penalty growth is futile
            break
        prev_obj = f_x
        mu = np.clip(np.maximum(0.0, mu + rho * cons_x), 0.0, opts.mu_max)
        if viol > max(opts.tol_feas, 0.25 * prev_viol):
            rho *= opts.rho_growth
        prev_viol = min(prev_viol, viol)

    if best is not None:
        f_b, x_b, cons_b = best
        viol_b = float(np.clip(cons_b, 0.0, None).max()) if n_con else 0.0
        return ALResult(x_b, f_b, cons_b, viol_b, total_inner,
                        converged or viol_b <= opts.tol_feas, n_outer), mu
    f_x, cons_x = eval_batch(x[None, :])
    cons_x = cons_x[0]
    viol = float(np.clip(cons_x, 0.0, None).max()) if n_con else 0.0
    return ALResult(x, float(f_x[0]), cons_x, viol, total_inner, False,
                    n_outer), mu


# ---------------------------------------------------------------------------
# problem containers
# ---------------------------------------------------------------------------


@dataclass
class TubeOCP:
    """Tube optimal control problem over one prediction horizon.

    The tube starts as the singleton at the measured state; the objective is
    the set-tracking inertia plus a control regularization; state constraints
    act on the whole cross-section via support values.
    """

    model: object
    T: float
    N: int
    x_hat: np.ndarray
    constraints: Optional[LinearStateConstraints]
    D: np.ndarray
    x_ref: np.ndarray
    rho_u: float = 0.0
    terminal: Optional[Ellipsoid] = None
    options: SolverOptions = field(default_factory=SolverOptions)
    enforce_domain: bool = True

    def __post_init__(self):
        self.x_hat = np.atleast_1d(np.asarray(self.x_hat, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        self.x_ref = np.atleast_1d(np.asarray(self.x_ref, dtype=float))
        if self.T <= 0.0 or self.N < 1:
            raise ValueError("need T > 0 and N >= 1")
        if np.linalg.eigvalsh(0.5 * (self.D + self.D.T))[0] < -1e-12:
            raise ValueError("objective weight D must be PSD")
        if self.rho_u < 0.0:
            raise ValueError("control regularization must be nonnegative")


@dataclass
class SolveReport:
    """Outcome of one tube OCP solve."""

    tube: TubeTrajectory
    objective_value: float
    max_constraint_violation: float
    iterations: int
    converged: bool
    wall_time: float
    diagnostics: dict = field(default_factory=dict)

    def summary_dict(self):
        return {
            "objective_value": self.objective_value,
            "max_constraint_violation": self.max_constraint_violation,
            "iterations": self.iterations,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "valid": self.tube.valid,
            "diagnostics": self.diagnostics,
        }

    def write(self, out_dir, n_dirs=64):
        """Persist summary JSON, tube CSV, boundary CSV and parameter trace."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
        self.tube.to_csv(os.path.join(out_dir, "tube.csv"))
        self.tube.boundary_csv(os.path.join(out_dir, "tube_boundary.csv"),
                               n_dirs=n_dirs)
        p = self.tube.params
        n_u = p.u_x.shape[1]
        n_x = p.S.shape[1]
        header = (
            ["k"]
            + [f"u_{i}" for i in range(n_u)]
            + ["gamma", "lambda", "kappa"]
            + [f"S_{i}_{j}" for i in range(n_x) for j in range(n_u)]
        )
        rows = [
            [k, *p.u_x[k], p.gamma[k], p.lam[k], p.kappa[k], *p.S[k].ravel()]
            for k in range(p.n_intervals)
        ]
        np.savetxt(os.path.join(out_dir, "params.csv"), np.asarray(rows),
                   delimiter=",", header=",".join(header), comments="")


# ---------------------------------------------------------------------------
# objective and constraint residuals
# ---------------------------------------------------------------------------


def inertia_nodes(q, Q, D, x_ref):
    """Set-tracking stage cost at tube nodes: squared weighted distance of
    the center plus the shape trace term Tr(D Q)/(n_x + 2)."""
    dq = q - x_ref
    n_x = q.shape[-1]
    quad = np.einsum("...i,ij,...j->...", dq, D, dq)
    tr = np.einsum("ij,...ji->...", D, Q)
    return quad + tr / (n_x + 2.0)


def objective_inertia(tube, D, x_ref, rho_u=0.0):
    """Trapezoidal quadrature of the inertia cost plus the per-interval
    control regularization (piecewise-constant controls integrate exactly)."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    x_ref = np.atleast_1d(np.asarray(x_ref, dtype=float))
    ell = inertia_nodes(tube.q, tube.Q, D, x_ref)
    J = float(np.trapezoid(ell, tube.grid))
    if rho_u > 0.0 and tube.params is not None:
        h = tube.horizon / tube.n_intervals
        J += rho_u * float(np.sum(tube.params.u_x ** 2)) * h
    return J


def state_constraint_residuals(tube, constraints):
    """Support-value residuals h_i . q + sqrt(h_i' Q h_i) - eta_i per
    (node, constraint); feasible iff all entries are <= 0."""
    return _constraint_residuals_batch(
        tube.q[None], tube.Q[None], constraints.h, constraints.eta
    )[0]


def _constraint_residuals_batch(qs, Qs, H, eta):
    lin = np.einsum("hi,pki->pkh", H, qs)
    quad = np.einsum("hi,pkij,hj->pkh", H, Qs, H)
    return lin + np.sqrt(np.clip(quad, 0.0, None)) - eta


def _domain_rows(model):
    """Box faces of the bounder domain as linear constraint rows."""
    lo, hi = model.hessian_domain
    n = model.n_x
    H = np.vstack([np.eye(n), -np.eye(n)])
    eta = np.concatenate([hi, -lo])
    return H, eta


# ---------------------------------------------------------------------------
# decision-vector transform for the tube problem
# ---------------------------------------------------------------------------


class _TubeTransform:
    """Smooth reparameterization of the per-interval decision variables.

    gamma through a scaled sigmoid, multipliers through exp with box bounds,
    the reference control through a ball map that lands inside the inner
    ellipsoid by construction (so the Lemma-5 shape matrix stays PSD at every
    iterate), and S raw (clamped inside the integrator, kept near the
    spectral ball by an explicit constraint).
    """

    def __init__(self, model, N, freeze_first_S=True):
        self.model = model
        self.N = N
        self.n_u = model.n_u
        self.n_x = model.n_x
        self.per = self.n_u + 3 + self.n_x * self.n_u
        self.dim = N * self.per
        self.freeze_first_S = freeze_first_S
        self.Qu_half = sqrt_psd(model.Q_u)
        self.Qu_half_inv = pinv_psd(self.Qu_half)

    def bounds(self):
        b = []
        for k in range(self.N):
            b += [(-60.0, 60.0)] * self.n_u  # ball-map coordinates
            b += [(-30.0, 30.0)]  # gamma sigmoid argument
            b += [(np.log(MULT_MIN), np.log(MULT_MAX))] * 2
            if k == 0 and self.freeze_first_S:
                # the tube starts as a point: shaping is useless there and a
                # nonzero S makes the shape ODE nonsmooth at the start
                b += [(0.0, 0.0)] * (self.n_x * self.n_u)
            else:
                b += [(-10.0, 10.0)] * (self.n_x * self.n_u)
        return b

    def s_slice(self, k):
        off = k * self.per + self.n_u + 3
        return slice(off, off + self.n_x * self.n_u)

    def decode(self, X):
        """(P, dim) -> dict of per-interval policy arrays."""
        P = X.shape[0]
        Z = X.reshape(P, self.N, self.per)
        tv = Z[..., : self.n_u]
        v = tv / np.sqrt(1.0 + np.sum(tv * tv, axis=-1, keepdims=True))
        gamma = GAMMA_MIN + (1.0 - 2.0 * GAMMA_MIN) / (
            1.0 + np.exp(-Z[..., self.n_u])
        )
        lam = np.exp(Z[..., self.n_u + 1])
        kap = np.exp(Z[..., self.n_u + 2])
        u = self.model.q_u + np.sqrt(gamma)[..., None] * (v @ self.Qu_half.T)
        S = Z[..., self.n_u + 3:].reshape(P, self.N, self.n_x, self.n_u)
        return {"u": u, "gamma": gamma, "lam": lam, "kap": kap, "S": S}

    def encode(self, u, gamma, lam, kap, S):
        """Inverse transform for warm starts; u is pulled inside the inner
        ellipsoid when it sits too close to its boundary."""
        gamma = np.asarray(gamma, dtype=float).copy()
        u = np.atleast_2d(np.asarray(u, dtype=float))
        d = u - self.model.q_u
        m = np.einsum("ki,ij,kj->k", d, pinv_psd(self.model.Q_u), d)
        gamma = np.clip(np.maximum(gamma, 1.2 * m), 2.0 * GAMMA_MIN,
                        1.0 - 2.0 * GAMMA_MIN)
        v = (d @ self.Qu_half_inv.T) / np.sqrt(gamma)[:, None]
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        v = np.where(nv > 0.99, v * (0.99 / np.maximum(nv, 1e-300)), v)
        tv = v / np.sqrt(np.clip(1.0 - np.sum(v * v, axis=-1, keepdims=True),
                                 1e-12, None))
        sg = (gamma - GAMMA_MIN) / (1.0 - 2.0 * GAMMA_MIN)
        theta_g = np.log(sg / (1.0 - sg))
        Z = np.concatenate(
            [
                tv,
                theta_g[:, None],
                np.log(np.clip(lam, MULT_MIN, MULT_MAX))[:, None],
                np.log(np.clip(kap, MULT_MIN, MULT_MAX))[:, None],
                np.asarray(S, dtype=float).reshape(self.N, -1),
            ],
            axis=1,
        )
        return Z.reshape(-1)

    def to_policy(self, x):
        dec = self.decode(x[None, :])
        S = _spectral_clamp(dec["S"][0])
        return PolicyParams(
            u_x=dec["u"][0],
            gamma=np.clip(dec["gamma"][0], GAMMA_MIN, 1.0 - GAMMA_MIN),
            lam=np.clip(dec["lam"][0], MULT_MIN, MULT_MAX),
            kappa=np.clip(dec["kap"][0], MULT_MIN, MULT_MAX),
            S=S,
        )


# ---------------------------------------------------------------------------
# tube OCP solve
# ---------------------------------------------------------------------------


def _integrate_lenient(model, x_hat, params, T, N, bound_data, n_sub):
    """Non-strict single-tube integration for diagnostics on bad iterates."""
    res = integrate_policy_batch(
        model, np.atleast_1d(x_hat)[None, :],
        np.zeros((1, model.n_x, model.n_x)),
        params.u_x[None], params.gamma[None], params.lam[None],
        params.kappa[None], params.S[None], T, N, bound_data,
        n_sub=n_sub, strict=False,
    )
    domain_ok = res["domain_ok"][0]
    return TubeTrajectory(
        grid=np.linspace(0.0, T, N + 1), q=res["q"][0], Q=res["Q"][0],
        params=params, R_u=res["R_u"][0],
        valid=bool(domain_ok.all() and not res["blown"][0]),
        domain_ok=domain_ok, dense_t=res["dense_t"],
        dense_q=res["dense_q"][0], dense_Q=res["dense_Q"][0], n_sub=n_sub,
    )


def solve_tube_ocp(problem: TubeOCP, bound_data, warm_start=None) -> SolveReport:
    """Solve the tube problem by single shooting.

    Initialization: reference controls from the certainty-equivalent
    solution, neutral multipliers, no feedback shaping; then a warm-up pass
    optimizing the shaping matrices alone before the full augmented
    Lagrangian. Returns the best feasible iterate; an infeasible outcome is
    reported as non-converged, never as success.
    """
    t_start = time.perf_counter()
    model = problem.model
    opts = problem.options
    N = problem.N
    tf = _TubeTransform(model, N, freeze_first_S=opts.first_interval_no_shaping)
    h = problem.T / N

    H_rows = []
    eta_rows = []
    if problem.constraints is not None:
        H_rows.append(problem.constraints.h)
        eta_rows.append(problem.constraints.eta)
    if problem.enforce_domain:
        Hd, ed = _domain_rows(model)
        H_rows.append(Hd)
        eta_rows.append(ed)
    H = np.vstack(H_rows) if H_rows else np.zeros((0, model.n_x))
    eta = np.concatenate(eta_rows) if eta_rows else np.zeros(0)
    n_h = H.shape[0]

    term_dirs = None
    if problem.terminal is not None:
        from .ellipsoid import sample_directions

        term_dirs = sample_directions(256, model.n_x, seed=opts.seed)
        t_lin = term_dirs @ problem.terminal.q
        t_quad = np.einsum("di,ij,dj->d", term_dirs, problem.terminal.Q, term_dirs)
        term_sup = t_lin + np.sqrt(np.clip(t_quad, 0.0, None))

    # constraint layout: state rows (nodes 1..N x n_h), S spectral (N),
    # integration negativity (1), substep-halving defect (1), terminal
    # containment (1 if set)
    check_conv = opts.conv_tol > 0.0
    n_con = N * n_h + N + 1 + int(check_conv) + (
        1 if problem.terminal is not None else 0
    )

    def eval_batch(X):
        P = X.shape[0]
        dec = tf.decode(X)
        res = integrate_policy_batch(
            model,
            np.tile(problem.x_hat, (P, 1)),
            np.zeros((P, model.n_x, model.n_x)),
            dec["u"], dec["gamma"], dec["lam"], dec["kap"], dec["S"],
            problem.T, N, bound_data,
            n_sub=opts.n_sub, strict=False, record_dense=False,
        )
        qs, Qs = res["q"], res["Q"]
        ell = inertia_nodes(qs, Qs, problem.D, problem.x_ref)
        f = np.trapezoid(ell, dx=h, axis=1)
        f = f + problem.rho_u * np.sum(dec["u"] ** 2, axis=(1, 2)) * h
        cons = np.empty((P, n_con))
        if n_h:
            cons[:, : N * n_h] = _constraint_residuals_batch(
                qs[:, 1:], Qs[:, 1:], H, eta
            ).reshape(P, -1)
        # raw S spectral-ball constraint
        SS = dec["S"] @ np.swapaxes(dec["S"], -1, -2)
        lam_max = np.linalg.eigvalsh(SS)[..., -1] if model.n_x > 1 else SS[..., 0, 0]
        cons[:, N * n_h: N * n_h + N] = lam_max - 1.0
        # scaled so that AL-feasible points are clean under the strict
        # dust tolerance of the final integration
        cons[:, N * n_h + N] = 1e4 * res["neg_excess"] - 0.5 * opts.tol_feas
        if check_conv:
            coarse = integrate_policy_batch(
                model,
                np.tile(problem.x_hat, (P, 1)),
                np.zeros((P, model.n_x, model.n_x)),
                dec["u"], dec["gamma"], dec["lam"], dec["kap"], dec["S"],
                problem.T, N, bound_data,
                n_sub=max(opts.n_sub // 2, 1), strict=False,
                record_dense=False,
            )
            with np.errstate(invalid="ignore", over="ignore"):
                dQ = np.sqrt(
                    np.sum((Qs - coarse["Q"]) ** 2, axis=(-2, -1))
                ).max(axis=1)
                dq = np.linalg.norm(qs - coarse["q"], axis=-1).max(axis=1)
            defect = np.where(np.isfinite(dQ) & np.isfinite(dq),
                              np.maximum(dQ, dq), 1.0)
            cons[:, N * n_h + N + 1] = defect - opts.conv_tol
            # the defect spans decades once the shape ODE is under-resolved;
            # a log-hinge keeps line searches out of that region while
            # vanishing identically at feasible points
            hinge = np.clip(
                np.log(np.maximum(defect, 1e-300) / opts.conv_tol), 0.0, None
            )
            f = f + 5.0 * hinge * hinge
        if problem.terminal is not None:
            sup_end = (term_dirs @ qs[:, -1].T).T + np.sqrt(
                np.clip(
                    np.einsum("di,pij,dj->pd", term_dirs, Qs[:, -1], term_dirs),
                    0.0, None,
                )
            )
            cons[:, -1] = (sup_end - term_sup).max(axis=1)
        blown = res["blown"]
        if np.any(blown):
            f = np.where(blown, 1e12, f)
            cons[blown] = 1.0
        bad = ~np.isfinite(f)
        if np.any(bad):
            f = np.where(bad, 1e12, f)
        return f, cons

    # initial guess: certainty-equivalent controls plus a ladder of shaping
    # heuristics (a bare reference tube diverges on long horizons once the
    # remainder bounder ignites, so damped/rotating starts are tried too)
    if warm_start is not None:
        x0 = warm_start
        skip_warmup = True
    else:
        ce_opts = SolverOptions(**{**asdict(opts), "max_outer": 5,
                                   "inner_maxiter": 35, "n_sub": 2,
                                   "tol_feas": max(opts.tol_feas, 1e-5)})
        u_ce, ce_info = solve_nominal_ocp(
            model, problem.x_hat, problem.T, N,
            constraints=problem.constraints,
            D=problem.D, x_ref=problem.x_ref,
            rho_u=max(problem.rho_u, 1e-6),
            options=ce_opts,
        )
        ones_S = -np.ones((model.n_x, model.n_u)) / np.sqrt(
            model.n_x * model.n_u
        )
        candidates = []
        for zeta, gamma0, mult in ((0.0, 0.5, 1.0), (0.5, 0.5, 4.0),
                                   (0.5, 0.7, 3.0), (0.5, 0.5, 2.0),
                                   (0.7, 0.5, 4.0), (0.3, 0.5, 8.0)):
            S0 = np.tile(zeta * ones_S, (N, 1, 1))
            candidates.append(tf.encode(
                u_ce, np.full(N, gamma0), np.full(N, mult), np.full(N, mult),
                S0,
            ))
        f_c, cons_c = eval_batch(np.asarray(candidates))
        merit0 = _al_merit(f_c, cons_c, np.zeros(n_con), opts.rho0)
        i_best = int(np.argmin(merit0))
        x0 = candidates[i_best]
        if problem.constraints is not None:
            # refine the reference controls with the candidate tube's
            # cross-section margins subtracted from the state bounds
            dec = tf.decode(x0[None, :])
            res0 = integrate_policy_batch(
                model, problem.x_hat[None, :],
                np.zeros((1, model.n_x, model.n_x)),
                dec["u"], dec["gamma"], dec["lam"], dec["kap"], dec["S"],
                problem.T, N, bound_data, n_sub=opts.n_sub, strict=False,
                record_dense=False,
            )
            if not res0["blown"][0]:
                Hu = problem.constraints.h
                margin = np.sqrt(np.clip(
                    np.einsum("hi,kij,hj->kh", Hu, res0["Q"][0, 1:], Hu),
                    0.0, None,
                ))
                u_tight, _ = solve_nominal_ocp(
                    model, problem.x_hat, problem.T, N,
                    constraints=problem.constraints,
                    D=problem.D, x_ref=problem.x_ref,
                    rho_u=max(problem.rho_u, 1e-6), options=ce_opts,
                    u0=u_ce, mu0=ce_info["mu"], tighten=margin,
                )
                refined = tf.encode(
                    u_tight, dec["gamma"][0], dec["lam"][0], dec["kap"][0],
                    dec["S"][0],
                )
                f_r, cons_r = eval_batch(refined[None, :])
                if float(_al_merit(f_r, cons_r, np.zeros(n_con),
                                   opts.rho0)[0]) < float(merit0[i_best]):
                    x0 = refined
        skip_warmup = False

    bounds = tf.bounds()
    total_iters = 0
    s_blocks = np.zeros(tf.dim, bool)
    for k in range(N):
        s_blocks[tf.s_slice(k)] = True
    if (not skip_warmup and opts.warmup_maxiter > 0
            and np.abs(x0[s_blocks]).max() < 1e-12):
        # unshaped start: grow the feedback first with everything else frozen
        warm_opts = SolverOptions(**{**asdict(opts),
                                     "max_outer": 2,
                                     "inner_maxiter": opts.warmup_maxiter})
        res_w, _ = auglag_minimize(eval_batch, x0, bounds, n_con, warm_opts,
                                   free_mask=s_blocks, label=":warmup")
        x0 = res_w.x
        total_iters += res_w.iterations

    res, _ = auglag_minimize(eval_batch, x0, bounds, n_con, opts, label=":tube")
    total_iters += res.iterations

    params = tf.to_policy(res.x)
    # the returned tube is integrated finer than the transcription grid, so
    # its own substep-halving defect shrinks by the RK4 order factor
    n_final = max(opts.n_sub_final, opts.n_sub)
    integration_clean = True
    try:
        tube = integrate_tube(model, problem.x_hat,
                              np.zeros((model.n_x, model.n_x)),
                              params, problem.T, N, bound_data,
                              n_sub=n_final)
    except (IntegrationError, InfeasiblePolicyError):
        # PSD dust beyond tolerance: re-run leniently and report
        # non-converged; a genuinely diverging tube is a hard error
        integration_clean = False
        tube = _integrate_lenient(model, problem.x_hat, params, problem.T, N,
                                  bound_data, n_final)
        if not np.all(np.isfinite(tube.Q)):
            raise IntegrationError(
                "tube integration diverged at the solver's final iterate"
            )
    half = _integrate_lenient(model, problem.x_hat, params, problem.T, N,
                              bound_data, max(n_final // 2, 1))
    with np.errstate(invalid="ignore"):
        halving_defect = float(max(
            np.sqrt(np.sum((tube.Q - half.Q) ** 2, axis=(-2, -1))).max(),
            np.linalg.norm(tube.q - half.q, axis=-1).max(),
        ))
    # re-derive the reported violation from the stored tube
    viol = 0.0
    if problem.constraints is not None:
        viol = max(viol, float(
            state_constraint_residuals(tube, problem.constraints)[1:].max()
        ))
    term_margin = None
    if problem.terminal is not None:
        _, term_margin = contains(problem.terminal, tube.node(N), 256,
                                  seed=opts.seed)
        viol = max(viol, -term_margin)
    objective = objective_inertia(tube, problem.D, problem.x_ref, problem.rho_u)
    converged = bool(res.converged and viol <= opts.tol_feas
                     and integration_clean)
    report = SolveReport(
        tube=tube,
        objective_value=objective,
        max_constraint_violation=viol,
        iterations=total_iters,
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        diagnostics={
            "al_objective": res.objective,
            "al_violation": res.max_violation,
            "n_outer": res.n_outer,
            "terminal_margin": term_margin,
            "halving_defect": halving_defect,
            "decision_vector": res.x.tolist(),
        },
    )
    if not converged and not res.converged:
        report.diagnostics["failure"] = "augmented Lagrangian did not converge"
    return report


# ---------------------------------------------------------------------------
# nominal (certainty-equivalent) optimal control
# ---------------------------------------------------------------------------


def integrate_states_batch(model, x0, u, T, N, n_sub=4, dense=False):
    """Batched RK4 for the nominal dynamics xdot = f(x, q_w) + G(x) u_k.

    Returns control-node states, or every substep state with ``dense=True``.
    """
    P, n_x = x0.shape
    hs = T / (N * n_sub)
    n_keep = N * n_sub if dense else N
    stride = 1 if dense else n_sub
    xs = np.empty((P, n_keep + 1, n_x))
    xs[:, 0] = x0
    x = x0.copy()

    def rhs(x, u_k):
        G = np.asarray(model.G(x), dtype=float)
        return model.f(x, model.q_w) + (G @ u_k[..., None])[..., 0]

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            u_k = u[:, k]
            for j in range(n_sub):
                k1 = rhs(x, u_k)
                k2 = rhs(x + 0.5 * hs * k1, u_k)
                k3 = rhs(x + 0.5 * hs * k2, u_k)
                k4 = rhs(x + hs * k3, u_k)
                x = x + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if dense:
                    xs[:, k * n_sub + j + 1] = x
            if not dense:
                xs[:, k + 1] = x
    return xs


def solve_nominal_ocp(model, x0, T, N, constraints, D, x_ref, rho_u,
                      options=None, u0=None, mu0=None, tighten=None):
    """Pointwise-constrained nominal OCP over piecewise-constant controls.

    Tracking objective (trapezoidal in the state term, exact in the control
    term) with admissible controls confined to the control ellipsoid; state
    constraints are enforced at substep resolution. ``tighten`` optionally
    shrinks the bounds per (node, row) — used to warm-start the tube solver
    with margin for the predicted cross-section. Used both as the
    certainty-equivalent baseline and as the tube solver's warm start.
    Returns (controls, info dict).
    """
    opts = options or SolverOptions()
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    x_ref = np.atleast_1d(np.asarray(x_ref, dtype=float))
    h = T / N
    n_u = model.n_u
    n_sub = opts.n_sub if tighten is None else max(opts.n_sub, 1)
    radius = np.sqrt(np.clip(np.diag(model.Q_u), 0.0, None))
    bounds = []
    for _ in range(N):
        for j in range(n_u):
            bounds.append((model.q_u[j] - radius[j], model.q_u[j] + radius[j]))
    H = constraints.h if constraints is not None else np.zeros((0, model.n_x))
    eta = constraints.eta if constraints is not None else np.zeros(0)
    n_h = H.shape[0]
    if n_h:
        # per-evaluation-point bounds on the substep grid (nodes excluded at
        # t = 0); tightening rows are held constant within each interval
        eta_fine = np.tile(eta, (N * n_sub, 1))
        if tighten is not None:
            eta_fine -= np.repeat(np.asarray(tighten, dtype=float), n_sub,
                                  axis=0)
    need_memb = n_u > 1  # the box equals the ellipsoid only in 1-D
    n_con = N * n_sub * n_h + (N if need_memb else 0)
    Qu_inv = pinv_psd(model.Q_u)

    def eval_batch(X):
        P = X.shape[0]
        u = X.reshape(P, N, n_u)
        xs = integrate_states_batch(model, np.tile(x0, (P, 1)), u, T, N,
                                    n_sub=n_sub, dense=True)
        dx = xs[:, ::n_sub] - x_ref
        stage = np.einsum("pki,ij,pkj->pk", dx, D, dx)
        f = np.trapezoid(stage, dx=h, axis=1) + rho_u * np.sum(u * u, axis=(1, 2)) * h
        cons = np.empty((P, n_con))
        if n_h:
            lin = np.einsum("hi,pki->pkh", H, xs[:, 1:])
            cons[:, : N * n_sub * n_h] = (lin - eta_fine).reshape(P, -1)
        if need_memb:
            du = u - model.q_u
            memb = np.einsum("pki,ij,pkj->pk", du, Qu_inv, du)
            cons[:, N * n_sub * n_h:] = memb - 1.0
        bad = ~np.all(np.isfinite(xs.reshape(P, -1)), axis=1)
        if np.any(bad):
            f = np.where(bad, 1e12, f)
            cons[bad] = 1.0
        return f, cons

    x_init = (np.tile(model.q_u, (N, 1)) if u0 is None
              else np.atleast_2d(np.asarray(u0, dtype=float))).reshape(-1)
    res, mu = auglag_minimize(eval_batch, x_init, bounds, n_con, opts, mu0=mu0,
                              label=":nominal")
    u_sol = res.x.reshape(N, n_u)
    info = {
        "objective": res.objective,
        "max_violation": res.max_violation,
        "iterations": res.iterations,
        "converged": res.converged,
        "mu": mu,
    }
    return u_sol, info


# ---------------------------------------------------------------------------
# terminal-set synthesis
# ---------------------------------------------------------------------------


@dataclass
class TerminalSet:
    """Time-invariant invariant-set certificate around a reference point."""

    Q_ref: np.ndarray
    lam: float
    kap: float
    S: np.ndarray
    lam_max: float  # certified largest eigenvalue of the shape derivative
    converged: bool
    iterations: int

    def as_ellipsoid(self, x_ref):
        return Ellipsoid(np.asarray(x_ref, float), self.Q_ref)


def solve_terminal_set(model, x_ref, bound_data, options=None,
                       margin=1e-8) -> TerminalSet:
    """Smallest-trace invariant ellipsoid fixed at the reference point.

    Minimizes Tr(Q) subject to the shape derivative (with the full control
    ellipsoid available for feedback) being negative semidefinite, plus the
    bounder-domain containment of the resulting set. A feasibility phase
    (minimizing the largest eigenvalue directly) precedes the augmented
    Lagrangian. The certificate eigenvalue is re-evaluated on the returned
    tuple.
    """
    opts = options or SolverOptions()
    x_ref = np.atleast_1d(np.asarray(x_ref, dtype=float))
    n_x, n_u = model.n_x, model.n_u
    tril = np.tril_indices(n_x)
    n_l = tril[0].shape[0]
    dim = n_l + 2 + n_x * n_u
    Hd, ed = _domain_rows(model)
    n_dom = Hd.shape[0]
    n_con = 1 + 1 + n_dom  # lam_max, S spectral, domain rows

    def unpack(x):
        L = np.zeros((n_x, n_x))
        L[tril] = x[:n_l]
        Q = L @ L.T
        # the derivative-free feasibility phase roams outside the box bounds
        lam = float(np.clip(np.exp(np.clip(x[n_l], -700, 700)),
                            MULT_MIN, MULT_MAX))
        kap = float(np.clip(np.exp(np.clip(x[n_l + 1], -700, 700)),
                            MULT_MIN, MULT_MAX))
        S = x[n_l + 2:].reshape(n_x, n_u)
        return Q, lam, kap, S

    def phi_eig(x):
        Q, lam, kap, S = unpack(x)
        S_cl = _spectral_clamp(S[None])[0]
        with np.errstate(over="ignore", invalid="ignore"):
            Phi = phi_g(model, x_ref, Q, S_cl, model.Q_u, lam, kap,
                        model.q_u, bound_data)
        if not np.all(np.isfinite(Phi)):
            return 1e12, Q, S
        return float(np.linalg.eigvalsh(Phi)[-1]), Q, S

    # the certificate eigenvalue lives orders of magnitude below the trace
    # objective; scale its row so the penalty carries real weight
    cert_scale = 1e4

    def eval_batch(X):
        P = X.shape[0]
        f = np.empty(P)
        cons = np.empty((P, n_con))
        for p in range(P):
            lmax, Q, S = phi_eig(X[p])
            f[p] = float(np.trace(Q))
            cons[p, 0] = cert_scale * (lmax + margin)
            SS = S @ S.T
            cons[p, 1] = float(np.linalg.eigvalsh(SS)[-1]) - 1.0
            r = np.sqrt(np.clip(np.diag(Q), 0.0, None))
            sup = Hd @ x_ref + np.abs(Hd) @ r
            cons[p, 2:] = sup - ed
        return f, cons

    bounds = (
        [(-10.0, 10.0)] * n_l
        + [(np.log(MULT_MIN), np.log(MULT_MAX))] * 2
        + [(-2.0, 2.0)] * (n_x * n_u)
    )
    # feasibility phase: drive the largest eigenvalue negative from a family
    # of structured starts (isotropic and anticorrelated shapes, with and
    # without input-aligned damping feedback)
    def feas_obj(x):
        return phi_eig(x)[0]

    def pack_start(Q0, lam0, kap0, S0):
        x = np.zeros(dim)
        L = np.linalg.cholesky(Q0 + 1e-12 * np.eye(n_x))
        x[:n_l] = L[tril]
        x[n_l] = np.log(lam0)
        x[n_l + 1] = np.log(kap0)
        x[n_l + 2:] = S0.ravel()
        return x

    couple = np.eye(n_x)
    if n_x > 1:
        couple = couple - 0.6 * (np.ones((n_x, n_x)) - np.eye(n_x)) / (n_x - 1)
    S_damp = -np.ones((n_x, n_u)) / np.sqrt(n_x * n_u)
    starts = []
    for a in (0.05, 0.2):
        for Q0 in (a * np.eye(n_x), a * couple):
            for S0 in (np.zeros((n_x, n_u)), 0.5 * S_damp):
                for mult in (1.0, 2.0):
                    starts.append(pack_start(Q0, mult, mult, S0))
    best_start = None
    for xs in starts:
        r0 = minimize(feas_obj, xs, method="Nelder-Mead",
                      options={"maxiter": 2000, "xatol": 1e-10,
                               "fatol": 1e-12})
        if best_start is None or r0.fun < best_start[0]:
            best_start = (r0.fun, r0.x)
    x0 = best_start[1]

    ts_opts = SolverOptions(**{**asdict(opts),
                               "max_outer": max(opts.max_outer, 12),
                               "inner_maxiter": max(opts.inner_maxiter, 120)})
    res, _ = auglag_minimize(eval_batch, x0, bounds, n_con, ts_opts,
                             label=":terminal")
    x_best = res.x
    if phi_eig(x_best)[0] > -margin:
        # trace minimization dragged the set across the feasibility
        # boundary: restore the certificate at a modest trace cost
        res_fix = minimize(feas_obj, x_best, method="Nelder-Mead",
                           options={"maxiter": 6000, "xatol": 1e-12,
                                    "fatol": 1e-14})
        if res_fix.fun < phi_eig(x_best)[0]:
            x_best = res_fix.x
    Q, lam, kap, S = unpack(x_best)
    S_cl = _spectral_clamp(S[None])[0]
    Phi = phi_g(model, x_ref, Q, S_cl, model.Q_u, lam, kap, model.q_u, bound_data)
    lam_max = float(np.linalg.eigvalsh(Phi)[-1])
    converged = bool(lam_max <= 0.0)
    return TerminalSet(Q_ref=Q, lam=lam, kap=kap, S=S_cl, lam_max=lam_max,
                       converged=converged, iterations=res.iterations)
