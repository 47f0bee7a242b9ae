"""Feedback synthesis and closed-loop Monte Carlo validation.

The explicit boundary feedback steers along the tube: at a state away from
the tube center it pushes against the outward normal with the full authority
of the inner control ellipsoid; at the center (or when no feedback direction
exists) it applies the reference control. Simulations hold the feedback
constant over each integrator substep, a sampled approximation of the
continuous law whose invariance is verified empirically.
"""

from __future__ import annotations

import multiprocessing
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .ellipsoid import pinv_psd, sqrt_psd
from .ocp import SolverOptions, TubeOCP, solve_nominal_ocp, solve_tube_ocp
from .tube import TubeTrajectory


class SimulationError(RuntimeError):
    pass


@dataclass
class FeedbackLaw:
    """Explicit feedback associated with a propagated tube.

    Evaluates the outward normal of the current cross-section at the query
    state and returns the admissible control minimizing the normal component
    of the input term; interior/degenerate queries fall back to the
    reference control.
    """

    tube: TubeTrajectory
    model: object
    eps_interior: float = 1e-9

    def __post_init__(self):
        if not self.tube.valid:
            raise ValueError("feedback law requires a tube with valid=True")
        if self.tube.params is None or self.tube.R_u is None:
            raise ValueError("tube carries no policy data")
        self._sqrt_Ru = np.array([sqrt_psd(R) for R in self.tube.R_u])

    def __call__(self, t, xi):
        tube = self.tube
        if t < tube.grid[0] - 1e-9 or t > tube.grid[-1] + 1e-9:
            raise ValueError(f"t = {t} outside the tube horizon")
        xi = np.asarray(xi, dtype=float)
        k = tube.interval_of(t)
        u_x = tube.params.u_x[k]
        R_u = tube.R_u[k]
        q, Q = tube.interp(t)
        d = xi - q
        lam_max = float(np.linalg.eigvalsh(Q)[-1])
        if np.linalg.norm(d) <= self.eps_interior * (1.0 + np.sqrt(max(lam_max, 0.0))):
            return u_x.copy()
        if lam_max <= 0.0:
            return u_x.copy()
        g_dir = pinv_psd(Q) @ d
        nrm = np.linalg.norm(g_dir)
        if nrm <= 1e-12 * (1.0 + np.linalg.norm(d)):
            # query direction carries no shape information (off-span)
            return u_x.copy()
        c = g_dir / nrm
        quad = float(c @ Q @ c)
        if quad <= 0.0:
            return u_x.copy()
        xi_star = q + (Q @ c) / np.sqrt(quad)
        g = np.asarray(self.model.G(xi_star), dtype=float).T @ c
        denom = np.linalg.norm(self._sqrt_Ru[k] @ g)
        if denom < 1e-12:
            return u_x.copy()
        return u_x - (R_u @ g) / denom


def feedback(law, t, xi):
    """Functional form of the feedback evaluation."""
    return law(t, xi)


def sample_disturbance(Q_w, q_w, mode, seed, n_steps):
    """Piecewise-constant disturbance values in the disturbance ellipsoid.

    ``uniform-ball`` draws uniformly from the ellipsoid volume; ``boundary``
    draws from its surface (adversarially biased). Deterministic per seed.
    """
    if mode not in ("uniform-ball", "boundary"):
        raise ValueError(f"unknown disturbance mode {mode!r}")
    if n_steps < 1:
        raise ValueError("need at least one step")
    Q_w = np.atleast_2d(np.asarray(Q_w, dtype=float))
    q_w = np.atleast_1d(np.asarray(q_w, dtype=float))
    n_w = q_w.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n_steps, n_w))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if mode == "uniform-ball":
        r = rng.random(n_steps) ** (1.0 / n_w)
        v *= r[:, None]
    return q_w + v @ sqrt_psd(Q_w).T


@dataclass
class ScenarioResult:
    """One closed-loop run: substep-resolution traces plus the containment
    and constraint records used by the validation suites."""

    t: np.ndarray  # (n_steps + 1,)
    x: np.ndarray  # (n_steps + 1, n_x)
    u: np.ndarray  # (n_steps, n_u)
    w: np.ndarray  # (n_steps, n_w)
    margins: Optional[np.ndarray]  # (n_nodes,) containment margins at nodes
    margin_times: Optional[np.ndarray]
    residuals: Optional[np.ndarray]  # (n_steps + 1, n_h) state residuals
    label: str = "robust"
    failed: bool = False
    fail_instant: Optional[int] = None
    u_membership_max: float = 0.0

    def n_violations(self, tol=1e-6):
        if self.residuals is None or self.residuals.size == 0:
            return 0
        return int(np.sum(np.any(self.residuals > tol, axis=1)))

    def violated(self, tol=1e-6):
        return self.n_violations(tol) > 0

    def worst_residual(self):
        if self.residuals is None or self.residuals.size == 0:
            return -np.inf
        return float(self.residuals.max())

    def min_margin(self):
        if self.margins is None or self.margins.size == 0:
            return np.inf
        return float(self.margins.min())

    def tracking_cost(self):
        """Trapezoidal quadrature of ||x||^2 + ||u||^2 along the run."""
        stage_x = np.sum(self.x * self.x, axis=1)
        cost = float(np.trapezoid(stage_x, self.t))
        dt = np.diff(self.t)
        cost += float(np.sum(np.sum(self.u * self.u, axis=1) * dt))
        return cost

    def to_csv(self, path):
        """Frozen trace schema: t, x_*, u_*, w_* (inputs NaN on final row)."""
        n_steps = self.u.shape[0]
        u_pad = np.vstack([self.u, np.full((1, self.u.shape[1]), np.nan)])
        w_pad = np.vstack([self.w, np.full((1, self.w.shape[1]), np.nan)])
        body = np.column_stack([self.t, self.x, u_pad, w_pad])
        header = (
            ["t"]
            + [f"x_{i}" for i in range(self.x.shape[1])]
            + [f"u_{i}" for i in range(self.u.shape[1])]
            + [f"w_{i}" for i in range(self.w.shape[1])]
        )
        np.savetxt(path, body, delimiter=",", header=",".join(header),
                   comments="")

    def margins_csv(self, path):
        if self.margins is None:
            return
        body = np.column_stack([self.margin_times, self.margins])
        np.savetxt(path, body, delimiter=",", header="t,margin", comments="")


def _containment_margin(x, q, Q):
    """1 - (x-q)' Q^+ (x-q), with off-span deviations treated as violations."""
    d = x - q
    scale = max(np.abs(Q).max(), 0.0)
    if scale == 0.0:
        return 1.0 if np.linalg.norm(d) <= 1e-9 * (1.0 + np.linalg.norm(q)) else -np.inf
    Qp = pinv_psd(Q)
    off = d - Q @ (Qp @ d)
    if np.linalg.norm(off) > 1e-6 * (1.0 + np.linalg.norm(d)):
        return -np.inf
    return 1.0 - float(d @ Qp @ d)


def _rk4_step(model, x, u, w, h):
    def rhs(z):
        G = np.asarray(model.G(z), dtype=float)
        return model.f(z, w) + G @ u

    k1 = rhs(x)
    k2 = rhs(x + 0.5 * h * k1)
    k3 = rhs(x + 0.5 * h * k2)
    k4 = rhs(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def simulate_closed_loop(model, law, x0, disturbance, n_sub=8,
                         constraints=None, label="robust"):
    """Run the plant under the sampled tube feedback.

    The disturbance array provides one value per substep (piecewise
    constant); the feedback is refreshed at every substep and held over it.
    Containment margins are recorded at the tube nodes, state-constraint
    residuals along the full substep trace.
    """
    tube = law.tube
    N = tube.n_intervals
    n_steps = N * n_sub
    disturbance = np.atleast_2d(np.asarray(disturbance, dtype=float))
    if disturbance.shape[0] != n_steps:
        raise ValueError(
            f"disturbance needs {n_steps} substep values, got {disturbance.shape[0]}"
        )
    h = tube.horizon / n_steps
    t0 = float(tube.grid[0])
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    xs = np.empty((n_steps + 1, model.n_x))
    us = np.empty((n_steps, model.n_u))
    xs[0] = x
    memb_max = 0.0
    Qu_inv = pinv_psd(model.Q_u)
    for j in range(n_steps):
        t = t0 + j * h
        u = law(t, x)
        du = u - model.q_u
        memb_max = max(memb_max, float(du @ Qu_inv @ du))
        x = _rk4_step(model, x, u, disturbance[j], h)
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"state blew up at t = {t + h:.6g}")
        xs[j + 1] = x
        us[j] = u
    times = t0 + np.arange(n_steps + 1) * h
    margins = np.array(
        [_containment_margin(xs[k * n_sub], tube.q[k], tube.Q[k])
         for k in range(N + 1)]
    )
    residuals = None
    if constraints is not None:
        residuals = xs @ constraints.h.T - constraints.eta
    return ScenarioResult(
        t=times, x=xs, u=us, w=disturbance, margins=margins,
        margin_times=tube.grid.copy(), residuals=residuals, label=label,
        u_membership_max=memb_max,
    )


def simulate_open_loop(model, x0, u_seq, T, N, disturbance, n_sub=8):
    """Plant under a fixed piecewise-constant control (no feedback)."""
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    n_steps = N * n_sub
    disturbance = np.atleast_2d(np.asarray(disturbance, dtype=float))
    if disturbance.shape[0] != n_steps:
        raise ValueError("disturbance grid does not match the substep count")
    h = T / n_steps
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    xs = np.empty((n_steps + 1, model.n_x))
    xs[0] = x
    for j in range(n_steps):
        k = min(j // n_sub, N - 1)
        x = _rk4_step(model, x, u_seq[k], disturbance[j], h)
        xs[j + 1] = x
    times = np.arange(n_steps + 1) * h
    us = np.repeat(u_seq, n_sub, axis=0)
    return ScenarioResult(
        t=times, x=xs, u=us, w=disturbance, margins=None, margin_times=None,
        residuals=None, label="open-loop",
    )


def _shift_decision(x, N, per, m):
    """Shift per-interval decision blocks by m intervals, repeating the tail."""
    Z = x.reshape(N, per)
    if m <= 0:
        return x.copy()
    m = min(m, N - 1)
    Z_new = np.vstack([Z[m:], np.tile(Z[-1], (m, 1))])
    return Z_new.reshape(-1)


def run_receding_horizon(model, problem_template, bound_data, x0,
                         sampling_period, duration, disturbance,
                         n_sub=8, warm_start=True, constraints_check=None):
    """Robust MPC loop: re-solve the tube problem at each sampling instant
    from the measured state and apply its feedback until the next instant.

    The tube problem is re-posed on the same horizon each time (shifting
    window); warm starts shift the previous decision blocks. A failed solve
    marks the scenario and stops the run.
    """
    h_tube = problem_template.T / problem_template.N
    steps_per_sub = h_tube / n_sub
    m_steps = int(round(sampling_period / steps_per_sub))
    if m_steps < 1 or abs(m_steps * steps_per_sub - sampling_period) > 1e-9:
        raise ValueError("sampling period must align with the substep grid")
    n_periods = int(round(duration / sampling_period))
    if abs(n_periods * sampling_period - duration) > 1e-9:
        raise ValueError("duration must be a whole number of sampling periods")
    disturbance = np.atleast_2d(np.asarray(disturbance, dtype=float))
    if disturbance.shape[0] < n_periods * m_steps:
        raise ValueError("disturbance signal shorter than the simulation")

    cons = (constraints_check if constraints_check is not None
            else problem_template.constraints)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    t_all = [0.0]
    xs = [x.copy()]
    us = []
    margins = []
    margin_times = []
    theta = None
    shift = int(round(sampling_period / h_tube)) if sampling_period >= h_tube else 0
    per = None
    Qu_inv = pinv_psd(model.Q_u)
    memb_max = 0.0
    failed = False
    fail_instant = None
    for j in range(n_periods):
        problem = replace(problem_template, x_hat=x.copy())
        report = solve_tube_ocp(problem, bound_data,
                                warm_start=theta if warm_start else None)
        if not report.converged or not report.tube.valid:
            failed = True
            fail_instant = j
            break
        theta = np.asarray(report.diagnostics["decision_vector"], dtype=float)
        if per is None:
            per = theta.shape[0] // problem_template.N
        law = FeedbackLaw(report.tube, model)
        t_local = 0.0
        for i in range(m_steps):
            u = law(t_local, x)
            du = u - model.q_u
            memb_max = max(memb_max, float(du @ Qu_inv @ du))
            w = disturbance[j * m_steps + i]
            x = _rk4_step(model, x, u, w, steps_per_sub)
            t_local += steps_per_sub
            t_all.append(j * sampling_period + t_local)
            xs.append(x.copy())
            us.append(u)
        # containment against the active tube at the nodes it covered
        for k in range(int(np.ceil(sampling_period / h_tube)) + 1):
            if k * h_tube <= sampling_period + 1e-12 and k <= problem_template.N:
                idx = j * m_steps + int(round(k * h_tube / steps_per_sub))
                margins.append(
                    _containment_margin(np.asarray(xs[idx]), report.tube.q[k],
                                        report.tube.Q[k])
                )
                margin_times.append(j * sampling_period + k * h_tube)
        theta = _shift_decision(theta, problem_template.N, per, shift)
    xs = np.asarray(xs)
    us = np.asarray(us) if us else np.zeros((0, model.n_u))
    n_done = us.shape[0]
    residuals = None
    if cons is not None:
        residuals = xs @ cons.h.T - cons.eta
    return ScenarioResult(
        t=np.asarray(t_all), x=xs, u=us, w=disturbance[:n_done],
        margins=np.asarray(margins) if margins else None,
        margin_times=np.asarray(margin_times) if margin_times else None,
        residuals=residuals, label="robust-receding", failed=failed,
        fail_instant=fail_instant, u_membership_max=memb_max,
    )


def run_ce_baseline(model, x0, disturbance, T, N, sampling_period,
                    constraints, options=None, n_sub=8, duration=None,
                    solve_n_sub=2):
    """Certainty-equivalent MPC: nominal tracking problem re-solved each
    period, optimal controls applied open loop until the next instant.

    ``solve_n_sub`` sets the integration/constraint grid of the re-solves;
    the plant simulation always runs at ``n_sub`` substeps per interval.
    """
    opts = options or SolverOptions()
    duration = T if duration is None else duration
    h = T / N
    steps_per_sub = h / n_sub
    m_steps = int(round(sampling_period / steps_per_sub))
    if m_steps < 1 or abs(m_steps * steps_per_sub - sampling_period) > 1e-9:
        raise ValueError("sampling period must align with the substep grid")
    n_periods = int(round(duration / sampling_period))
    disturbance = np.atleast_2d(np.asarray(disturbance, dtype=float))
    if disturbance.shape[0] < n_periods * m_steps:
        raise ValueError("disturbance signal shorter than the simulation")

    # warm-started re-solves run on a lean budget: forward differences and
    # a feasibility tolerance matched to the nominal 1e-3 accuracy band
    resolve_opts = SolverOptions(
        seed=opts.seed, tol_feas=max(opts.tol_feas, 1e-4), max_outer=2,
        inner_maxiter=10, rho0=opts.rho0, rho_growth=opts.rho_growth,
        fd_step=opts.fd_step, fd_scheme="forward", n_sub=solve_n_sub,
        maxls=6,
    )
    first_opts = SolverOptions(
        seed=opts.seed, tol_feas=max(opts.tol_feas, 1e-5), max_outer=8,
        inner_maxiter=60, rho0=opts.rho0, rho_growth=opts.rho_growth,
        fd_step=opts.fd_step, n_sub=solve_n_sub,
    )
    shift = int(round(sampling_period / h)) if sampling_period >= h else 0
    D = np.eye(model.n_x)
    x_ref = np.zeros(model.n_x)
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    t_all = [0.0]
    xs = [x.copy()]
    us = []
    memb_max = 0.0
    Qu_inv = pinv_psd(model.Q_u)
    u_prev = None
    mu_prev = None
    failed = False
    fail_instant = None
    for j in range(n_periods):
        u_sol, info = solve_nominal_ocp(
            model, x, T, N, constraints=constraints, D=D, x_ref=x_ref,
            rho_u=1.0, options=(first_opts if j == 0 else resolve_opts),
            u0=u_prev, mu0=mu_prev,
        )
        if not info["converged"] and not failed:
            # record the first unconverged re-solve but keep applying the
            # best iterate, as a deployed nominal MPC would
            failed = True
            fail_instant = j
        mu_prev = info["mu"]
        for i in range(m_steps):
            k = min(int(i * steps_per_sub / h), N - 1)
            u = u_sol[k]
            du = u - model.q_u
            memb_max = max(memb_max, float(du @ Qu_inv @ du))
            w = disturbance[j * m_steps + i]
            x = _rk4_step(model, x, u, w, steps_per_sub)
            t_all.append(j * sampling_period + (i + 1) * steps_per_sub)
            xs.append(x.copy())
            us.append(u)
        u_prev = (np.vstack([u_sol[shift:], np.tile(u_sol[-1], (shift, 1))])
                  if shift > 0 else u_sol)
    xs = np.asarray(xs)
    us = np.asarray(us) if us else np.zeros((0, model.n_u))
    residuals = xs @ constraints.h.T - constraints.eta if constraints else None
    return ScenarioResult(
        t=np.asarray(t_all), x=xs, u=us, w=disturbance[: us.shape[0]],
        margins=None, margin_times=None, residuals=residuals,
        label="certainty-equivalent", failed=failed, fail_instant=fail_instant,
        u_membership_max=memb_max,
    )


# ---------------------------------------------------------------------------
# Monte Carlo comparison
# ---------------------------------------------------------------------------

_WORKER_CTX = {}


def _robust_scenario(seed):
    ctx = _WORKER_CTX
    n_steps = ctx["law"].tube.n_intervals * ctx["n_sub"]
    w = sample_disturbance(ctx["model"].Q_w, ctx["model"].q_w, ctx["mode"],
                           seed, n_steps)
    return simulate_closed_loop(ctx["model"], ctx["law"], ctx["x0"], w,
                                n_sub=ctx["n_sub"],
                                constraints=ctx["constraints"])


def _ce_scenario(seed):
    ctx = _WORKER_CTX
    n_steps = ctx["N"] * ctx["n_sub"] * max(
        1, int(round(ctx["duration"] / ctx["T"]))
    )
    w = sample_disturbance(ctx["model"].Q_w, ctx["model"].q_w, ctx["mode"],
                           seed, n_steps)
    return run_ce_baseline(
        ctx["model"], ctx["x0"], w, ctx["T"], ctx["N"],
        ctx["sampling_period"], ctx["constraints"], options=ctx["options"],
        n_sub=ctx["n_sub"], duration=ctx["duration"],
        solve_n_sub=ctx.get("solve_n_sub", 2),
    )


def _run_pool(worker, seeds, ctx, jobs):
    global _WORKER_CTX
    _WORKER_CTX = ctx
    try:
        if jobs <= 1 or len(seeds) <= 1:
            return [worker(s) for s in seeds]
        with multiprocessing.get_context("fork").Pool(jobs) as pool:
            return pool.map(worker, seeds)
    finally:
        _WORKER_CTX = {}


@dataclass
class ComparisonSummary:
    rows: list = field(default_factory=list)  # per-controller dicts

    def to_csv(self, path):
        header = ["controller", "n_scenarios", "violation_rate",
                  "worst_residual", "mean_tracking_cost", "n_failed_solves"]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for r in self.rows:
                fh.write(",".join(str(r[k]) for k in header) + "\n")

    def rate(self, controller):
        for r in self.rows:
            if r["controller"] == controller:
                return r["violation_rate"]
        raise KeyError(controller)


def summarize_scenarios(label, results, tol=1e-6):
    """Violation rate counts genuine constraint crossings; unconverged
    re-solves are tallied separately."""
    n = len(results)
    viol = sum(1 for r in results if r.violated(tol))
    worst = max((r.worst_residual() for r in results), default=-np.inf)
    cost = float(np.mean([r.tracking_cost() for r in results])) if n else 0.0
    return {
        "controller": label,
        "n_scenarios": n,
        "violation_rate": viol / n if n else 0.0,
        "worst_residual": worst,
        "mean_tracking_cost": cost,
        "n_failed_solves": sum(1 for r in results if r.failed),
    }


def compare_controllers(model, bound_data, problem, n_scenarios, seed,
                        sampling_period, mode="uniform-ball", n_sub=8,
                        jobs=1, report=None):
    """Head-to-head violation statistics: tube feedback vs nominal MPC.

    The robust controller solves the tube problem once from the initial
    state and applies its feedback law in every scenario (the invariance
    guarantee makes re-solving unnecessary for constraint satisfaction);
    the certainty-equivalent controller re-solves its nominal problem at
    every sampling instant. Scenario seeds are ``seed + i``.

    Returns (summary, robust_results, ce_results, report).
    """
    if n_scenarios == 0:
        return ComparisonSummary(rows=[]), [], [], None
    if report is None:
        report = solve_tube_ocp(problem, bound_data)
        if not report.converged:
            raise SimulationError("tube problem did not converge")
    law = FeedbackLaw(report.tube, model)
    seeds = [seed + i for i in range(n_scenarios)]
    ctx_r = {
        "model": model, "law": law, "x0": problem.x_hat, "n_sub": n_sub,
        "mode": mode, "constraints": problem.constraints,
    }
    robust = _run_pool(_robust_scenario, seeds, ctx_r, jobs)
    ctx_c = {
        "model": model, "x0": problem.x_hat, "T": problem.T, "N": problem.N,
        "sampling_period": sampling_period, "constraints": problem.constraints,
        "options": problem.options, "n_sub": n_sub, "mode": mode,
        "duration": problem.T,
    }
    ce = _run_pool(_ce_scenario, seeds, ctx_c, jobs)
    summary = ComparisonSummary(rows=[
        summarize_scenarios("robust", robust),
        summarize_scenarios("certainty-equivalent", ce),
    ])
    return summary, robust, ce, report
