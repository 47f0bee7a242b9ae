"""Ellipsoidal invariant-tube dynamics and propagation.

The tube is a time-varying ellipsoid E(q_x(t), Q_x(t)) whose center follows
the nominal closed-loop dynamics and whose shape matrix follows the matrix
ODE  Qdot = phi_g(...), combining the linearized drift, the feedback shaping
term, multiplier trade-offs and the nonlinearity bounders. Everything here
is written batch-first: a stack of tubes integrates in one pass, which is
what makes finite-difference gradients affordable in the transcription
solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .bounders import omega_G, omega_n
from .ellipsoid import (
    Ellipsoid,
    min_eig_batch,
    pinv_psd,
    sample_directions,
    sqrt_psd,
    sqrt_psd_batch,
    sym_batch,
)

GAMMA_MIN = 1e-4
MULT_MIN = 1e-3
MULT_MAX = 1e6
PSD_STEP_TOL = 1e-10


class IntegrationError(RuntimeError):
    """Non-finite state or indefinite shape matrix during integration."""


class InfeasiblePolicyError(RuntimeError):
    """Policy parameters yield an infeasible inner control ellipsoid."""

    def __init__(self, interval, min_eig):
        self.interval = interval
        self.min_eig = min_eig
        super().__init__(
            f"inner control ellipsoid infeasible on interval {interval}: "
            f"min eigenvalue {min_eig:.3e}"
        )


class IntervalParams(NamedTuple):
    index: int
    u_x: np.ndarray
    gamma: float
    lam: float
    kappa: float
    S: np.ndarray


@dataclass
class PolicyParams:
    """Per-interval decision variables parameterizing the tube.

    Arrays are indexed by control interval: reference control ``u_x``, the
    inner-ellipsoid parameter ``gamma``, multipliers ``lam`` and ``kappa``,
    and the feedback shaping matrix ``S`` with spectral norm at most one.
    """

    u_x: np.ndarray  # (N, n_u)
    gamma: np.ndarray  # (N,)
    lam: np.ndarray  # (N,)
    kappa: np.ndarray  # (N,)
    S: np.ndarray  # (N, n_x, n_u)

    def __post_init__(self):
        self.u_x = np.atleast_2d(np.asarray(self.u_x, dtype=float))
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.kappa = np.atleast_1d(np.asarray(self.kappa, dtype=float))
        self.S = np.asarray(self.S, dtype=float)
        if self.S.ndim == 2:
            self.S = self.S[:, :, None]
        n = self.n_intervals
        for name in ("gamma", "lam", "kappa", "S"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} must have one entry per interval")

    @property
    def n_intervals(self):
        return self.u_x.shape[0]

    def interval(self, k):
        return IntervalParams(
            k, self.u_x[k], float(self.gamma[k]), float(self.lam[k]),
            float(self.kappa[k]), self.S[k],
        )

    def validate(self, model):
        """Check box/cone invariants and reference-control admissibility."""
        if np.any(self.gamma < GAMMA_MIN) or np.any(self.gamma > 1.0 - GAMMA_MIN):
            raise ValueError(f"gamma outside [{GAMMA_MIN}, {1 - GAMMA_MIN}]")
        for name, arr in (("lam", self.lam), ("kappa", self.kappa)):
            if np.any(arr < MULT_MIN) or np.any(arr > MULT_MAX):
                raise ValueError(f"{name} outside [{MULT_MIN}, {MULT_MAX}]")
        sig = np.linalg.svd(self.S, compute_uv=False)
        if np.any(sig > 1.0 + 1e-9):
            raise ValueError("S has spectral norm above one")
        Qu_inv = pinv_psd(model.Q_u)
        d = self.u_x - model.q_u
        memb = np.einsum("ki,ij,kj->k", d, Qu_inv, d)
        if np.any(memb > 1.0 + 1e-9):
            raise ValueError("reference control leaves the admissible ellipsoid")
        return self


@dataclass
class TubeTrajectory:
    """Time grid of tube cross-sections plus the policy that generated them.

    ``dense_*`` caches hold every integrator substep and back the feedback
    law's interpolation; the coarse ``grid``/``q``/``Q`` nodes are the
    contract surface used by constraints and certificates.
    """

    grid: np.ndarray  # (N+1,)
    q: np.ndarray  # (N+1, n_x)
    Q: np.ndarray  # (N+1, n_x, n_x)
    params: Optional[PolicyParams]
    R_u: Optional[np.ndarray]  # (N, n_u, n_u)
    valid: bool
    domain_ok: np.ndarray  # (N+1,) bool
    dense_t: Optional[np.ndarray] = field(default=None, repr=False)
    dense_q: Optional[np.ndarray] = field(default=None, repr=False)
    dense_Q: Optional[np.ndarray] = field(default=None, repr=False)
    n_sub: int = 4

    @property
    def n_intervals(self):
        return self.grid.shape[0] - 1

    @property
    def horizon(self):
        return float(self.grid[-1] - self.grid[0])

    @property
    def n_x(self):
        return self.q.shape[1]

    def node(self, k):
        return Ellipsoid(self.q[k], self.Q[k])

    def interval_of(self, t):
        h = (self.grid[-1] - self.grid[0]) / self.n_intervals
        k = int(np.floor((t - self.grid[0]) / h))
        return min(max(k, 0), self.n_intervals - 1)

    def interp(self, t):
        """Linear interpolation of (q, Q) on the dense substep grid."""
        ts = self.dense_t if self.dense_t is not None else self.grid
        qs = self.dense_q if self.dense_q is not None else self.q
        Qs = self.dense_Q if self.dense_Q is not None else self.Q
        t = float(np.clip(t, ts[0], ts[-1]))
        j = int(np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2))
        w = (t - ts[j]) / (ts[j + 1] - ts[j])
        return (1 - w) * qs[j] + w * qs[j + 1], (1 - w) * Qs[j] + w * Qs[j + 1]

    def u_at(self, t):
        k = self.interval_of(t)
        return self.params.u_x[k], (
            self.R_u[k] if self.R_u is not None else None
        ), k

    def to_csv(self, path):
        """Frozen schema: t, q_*, upper-triangular Q entries, valid flag."""
        n = self.n_x
        iu = [(i, j) for i in range(n) for j in range(i, n)]
        header = (
            ["t"]
            + [f"q_{i}" for i in range(n)]
            + [f"Q_{i}_{j}" for i, j in iu]
            + ["valid"]
        )
        rows = []
        for k in range(len(self.grid)):
            rows.append(
                [self.grid[k]]
                + list(self.q[k])
                + [self.Q[k][i, j] for i, j in iu]
                + [1.0 if self.domain_ok[k] else 0.0]
            )
        np.savetxt(path, np.asarray(rows), delimiter=",",
                   header=",".join(header), comments="")

    def boundary_csv(self, path, n_dirs=64, seed=0):
        """Per-node boundary samples: node, t, dir, x_*."""
        dirs = sample_directions(n_dirs, self.n_x, seed=seed)
        rows = []
        for k in range(len(self.grid)):
            quad = np.einsum("di,ij,dj->d", dirs, self.Q[k], dirs)
            scale = np.sqrt(np.clip(quad, 1e-300, None))
            pts = np.where(
                quad[:, None] > 0.0,
                self.q[k] + (dirs @ self.Q[k]) / scale[:, None],
                self.q[k] + 0.0 * dirs,
            )
            for d in range(n_dirs):
                rows.append([k, self.grid[k], d, *pts[d]])
        header = ["node", "t", "dir"] + [f"x_{i}" for i in range(self.n_x)]
        np.savetxt(path, np.asarray(rows), delimiter=",",
                   header=",".join(header), comments="")


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------


def inner_shape_batch(model, u, gamma):
    """Batched Lemma-5 shape matrices (no feasibility handling).

    u: (..., n_u), gamma: (...,) -> (..., n_u, n_u)
    """
    d = u - model.q_u
    outer = d[..., :, None] * d[..., None, :]
    g = gamma[..., None, None]
    return (1.0 - g) * model.Q_u + (1.0 - 1.0 / g) * outer


def _spectral_clamp(S):
    """Clamp singular values of (..., n, m) stacks to at most one."""
    if S.shape[-1] == 1:
        nrm = np.sqrt(np.sum(S * S, axis=(-2, -1), keepdims=True))
        return S / np.maximum(nrm, 1.0)
    U, sig, Vt = np.linalg.svd(S, full_matrices=False)
    sig = np.minimum(sig, 1.0)
    return U @ (sig[..., None] * Vt)


def phi_g(model, q_x, Q_x, S, R_u, lam, kap, u_x, bound_data):
    """Shape-matrix right-hand side at a single point (symmetrized).

    ``A Q + Q A' + Q^{1/2} S R^{1/2} G' + G R^{1/2} S' Q^{1/2}
    + (1/lam + 1/kap) Q + Omega_G + lam B Q_w B' + kap Omega_n``.
    """
    if lam <= 0.0 or kap <= 0.0:
        raise ValueError("multipliers lam and kap must be positive")
    q_x = np.asarray(q_x, dtype=float)
    Q_x = np.asarray(Q_x, dtype=float)
    A = np.asarray(model.A(q_x, u_x), dtype=float)
    G = np.asarray(model.G(q_x), dtype=float)
    B = np.asarray(model.B(q_x), dtype=float)
    Qh = sqrt_psd(Q_x)
    Rh = sqrt_psd(np.atleast_2d(R_u))
    M = Qh @ np.atleast_2d(S) @ Rh @ G.T
    out = (
        A @ Q_x
        + Q_x @ A.T
        + M
        + M.T
        + (1.0 / lam + 1.0 / kap) * Q_x
        + omega_G(model, Q_x, R_u)
        + lam * (B @ model.Q_w @ B.T)
        + kap * omega_n(bound_data, Q_x)
    )
    return 0.5 * (out + out.T)


def tube_rhs(model, q_x, Q_x, interval_params, bound_data):
    """Coupled center/shape derivatives for one control interval.

    Center follows the nominal dynamics under the reference control; the
    shape matrix takes equality in the invariance condition (tightest
    admissible choice).
    """
    from .ellipsoid import inner_control_ellipsoid

    p = interval_params
    R_u, feasible = inner_control_ellipsoid(model.q_u, model.Q_u, p.u_x, p.gamma)
    if not feasible:
        raise InfeasiblePolicyError(p.index, float(np.linalg.eigvalsh(R_u)[0]))
    G = np.asarray(model.G(np.asarray(q_x, float)), dtype=float)
    qdot = model.f(np.asarray(q_x, float), model.q_w) + G @ p.u_x
    Qdot = phi_g(model, q_x, Q_x, p.S, R_u, p.lam, p.kappa, p.u_x, bound_data)
    return qdot, Qdot


def _stage_batch(model, q, Q, u, cache, bound_data):
    """One RK stage for a (P,)-batch of tubes.

    ``cache`` holds per-interval precomputations: the S R_u^{1/2} G' factor
    when G is state-independent, multiplier coefficient stacks, and the
    (possibly constant) disturbance forcing term.
    """
    qdot = model.f(q, model.q_w) + (cache["Gu"] if cache["Gu"] is not None
                                    else (np.asarray(model.G(q), float)
                                          @ u[..., None])[..., 0])
    A = np.asarray(model.A(q, u), dtype=float)
    Qh = sqrt_psd_batch(Q)
    if cache["S_eff_GT"] is not None:
        M = Qh @ cache["S_eff_GT"]
    else:
        G = np.asarray(model.G(q), dtype=float)
        M = Qh @ cache["S_eff"] @ np.swapaxes(G, -1, -2)
    if cache["lam_BQB"] is not None:
        lam_BQB = cache["lam_BQB"]
    else:
        B = np.asarray(model.B(q), dtype=float)
        lam_BQB = cache["lam3"] * (B @ model.Q_w @ np.swapaxes(B, -1, -2))
    AQ = A @ Q
    Qdot = (
        AQ
        + np.swapaxes(AQ, -1, -2)
        + M
        + np.swapaxes(M, -1, -2)
        + cache["co3"] * Q
        + lam_BQB
        + cache["kap3"] * omega_n(bound_data, Q)
    )
    if not model.g_constant:
        Qdot = Qdot + omega_G(model, Q, cache["Ru_k"])
    return qdot, Qdot


def _psd_repair_batch(Q, strict):
    """Symmetrize and clip negative dust; returns (Q, neg_rel).

    ``neg_rel`` is the per-member relative negativity max(0, -lam_min) /
    (1 + scale); strict mode raises when it exceeds the dust tolerance.
    """
    Q = sym_batch(Q)
    lam_min = min_eig_batch(Q)
    finite = np.isfinite(lam_min)
    P = Q.shape[0]
    if not np.any(lam_min < 0.0):
        return Q, np.zeros(P)
    scale = 1.0 + np.clip(
        np.abs(np.diagonal(Q, axis1=-2, axis2=-1)).max(axis=-1), 0.0, None
    )
    neg_rel = np.where(finite, np.clip(-lam_min, 0.0, None) / scale, 0.0)
    if strict and neg_rel.max() > PSD_STEP_TOL:
        raise IntegrationError(
            f"shape matrix indefinite beyond tolerance "
            f"(relative negativity {neg_rel.max():.3e})"
        )
    needy = (lam_min < 0.0) & finite
    if np.any(needy):
        sub = Q[needy]
        w, V = np.linalg.eigh(sub)
        w = np.clip(w, 0.0, None)
        Q[needy] = V @ (w[..., None] * np.swapaxes(V, -1, -2))
    return Q, neg_rel


def integrate_policy_batch(
    model,
    q0,
    Q0,
    u,
    gamma,
    lam,
    kap,
    S,
    T,
    N,
    bound_data,
    n_sub=4,
    strict=True,
    record_dense=True,
):
    """Integrate a batch of tubes over the control grid.

    Shapes: q0 (P, n_x), Q0 (P, n_x, n_x), u (P, N, n_u), gamma/lam/kap
    (P, N), S (P, N, n_x, n_u). Classical fixed-step RK4 with ``n_sub``
    substeps per interval; the shape matrix is symmetrized and PSD-repaired
    after every substep.

    Returns a dict with node arrays, per-interval R_u, domain flags, the
    dense substep cache, and diagnostic scalars (PSD-repair excess,
    inner-ellipsoid infeasibility excess, blow-up mask).
    """
    P, n_x = q0.shape
    h = T / (N * n_sub)
    Ru = sym_batch(inner_shape_batch(model, u, gamma))  # (P, N, n_u, n_u)
    ru_min = min_eig_batch(Ru)
    ru_excess = float(np.clip(-ru_min, 0.0, None).max()) if ru_min.size else 0.0
    if strict and ru_excess > PSD_STEP_TOL * (1.0 + float(np.abs(Ru).max())):
        k_bad = int(np.argmax(np.clip(-ru_min, 0.0, None).max(axis=0)))
        raise InfeasiblePolicyError(k_bad, float(ru_min.min()))
    Ru_h = sqrt_psd_batch(Ru)
    S_eff_all = _spectral_clamp(S) @ Ru_h  # (P, N, n_x, n_u)

    qs = np.empty((P, N + 1, n_x))
    Qs = np.empty((P, N + 1, n_x, n_x))
    qs[:, 0] = q0
    Qs[:, 0] = Q0
    if record_dense:
        dt = np.empty(N * n_sub + 1)
        dq = np.empty((P, N * n_sub + 1, n_x))
        dQ = np.empty((P, N * n_sub + 1, n_x, n_x))
        dt[0] = 0.0
        dq[:, 0] = q0
        dQ[:, 0] = Q0
    q = q0.copy()
    Q = Q0.copy()
    neg_excess = np.zeros(P)
    n_x_dim = q0.shape[1]
    G0 = (np.asarray(model.G(np.zeros((1, n_x_dim))), dtype=float)[0]
          if model.g_constant else None)
    B0 = (np.asarray(model.B(np.zeros((1, n_x_dim))), dtype=float)[0]
          if getattr(model, "b_constant", False) else None)
    BQB0 = B0 @ model.Q_w @ B0.T if B0 is not None else None
    # overflow in diverging batch members is expected during solver
    # exploration; nonfinite members are masked out afterwards
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N):
            u_k = u[:, k]
            lam3 = lam[:, k, None, None]
            kap3 = kap[:, k, None, None]
            cache = {
                "Gu": (u_k @ G0.T) if G0 is not None else None,
                "S_eff": S_eff_all[:, k],
                "S_eff_GT": (S_eff_all[:, k] @ G0.T if G0 is not None
                             else None),
                "co3": 1.0 / lam3 + 1.0 / kap3,
                "lam3": lam3,
                "kap3": kap3,
                "lam_BQB": lam3 * BQB0 if BQB0 is not None else None,
                "Ru_k": Ru[:, k],
            }
            for j in range(n_sub):
                dq1, dQ1 = _stage_batch(model, q, Q, u_k, cache, bound_data)
                dq2, dQ2 = _stage_batch(model, q + 0.5 * h * dq1,
                                        Q + 0.5 * h * dQ1, u_k, cache,
                                        bound_data)
                dq3, dQ3 = _stage_batch(model, q + 0.5 * h * dq2,
                                        Q + 0.5 * h * dQ2, u_k, cache,
                                        bound_data)
                dq4, dQ4 = _stage_batch(model, q + h * dq3, Q + h * dQ3,
                                        u_k, cache, bound_data)
                q = q + (h / 6.0) * (dq1 + 2.0 * dq2 + 2.0 * dq3 + dq4)
                Q = Q + (h / 6.0) * (dQ1 + 2.0 * dQ2 + 2.0 * dQ3 + dQ4)
                Q, neg_rel = _psd_repair_batch(Q, strict)
                neg_excess = np.maximum(neg_excess, neg_rel)
                if strict and not np.all(np.isfinite(q) & np.isfinite(Q)):
                    raise IntegrationError(
                        f"state blew up at t = {(k * n_sub + j + 1) * h:.6g}"
                    )
                if record_dense:
                    idx = k * n_sub + j + 1
                    dt[idx] = idx * h
                    dq[:, idx] = q
                    dQ[:, idx] = Q
            qs[:, k + 1] = q
            Qs[:, k + 1] = Q

    blown = ~(
        np.all(np.isfinite(qs.reshape(P, -1)), axis=1)
        & np.all(np.isfinite(Qs.reshape(P, -1)), axis=1)
    )
    lo, hi = model.hessian_domain
    r = np.sqrt(np.clip(np.diagonal(Qs, axis1=-2, axis2=-1), 0.0, None))
    with np.errstate(invalid="ignore"):
        domain_ok = np.all(qs + r <= hi + 1e-12, axis=-1) & np.all(
            qs - r >= lo - 1e-12, axis=-1
        )
    domain_ok &= ~blown[:, None]
    out = {
        "q": qs,
        "Q": Qs,
        "R_u": Ru,
        "domain_ok": domain_ok,
        "blown": blown,
        "neg_excess": neg_excess,
        "ru_excess": ru_excess,
    }
    if record_dense:
        out["dense_t"] = dt
        out["dense_q"] = dq
        out["dense_Q"] = dQ
    return out


def integrate_tube(model, x0, Q0, params, T, N, bound_data, n_sub=4):
    """Propagate one tube from (x0, Q0) under a validated policy.

    Raises on infeasible inner ellipsoids, indefinite shape matrices beyond
    dust tolerance, and non-finite states. A tube whose cross-sections leave
    the bounder domain box is returned with ``valid=False``.
    """
    params.validate(model)
    if params.n_intervals != N:
        raise ValueError("policy arrays must have one entry per interval")
    if T <= 0.0:
        raise ValueError("horizon T must be positive")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    Q0 = np.atleast_2d(np.asarray(Q0, dtype=float))
    res = integrate_policy_batch(
        model,
        x0[None, :],
        Q0[None, :, :],
        params.u_x[None],
        params.gamma[None],
        params.lam[None],
        params.kappa[None],
        params.S[None],
        T,
        N,
        bound_data,
        n_sub=n_sub,
        strict=True,
    )
    grid = np.linspace(0.0, T, N + 1)
    domain_ok = res["domain_ok"][0]
    return TubeTrajectory(
        grid=grid,
        q=res["q"][0],
        Q=res["Q"][0],
        params=params,
        R_u=res["R_u"][0],
        valid=bool(domain_ok.all()),
        domain_ok=domain_ok,
        dense_t=res["dense_t"],
        dense_q=res["dense_q"][0],
        dense_Q=res["dense_Q"][0],
        n_sub=n_sub,
    )


def propagate_openloop(model, X0, u_fixed, T, N, lam, kap, bound_data, n_sub=4):
    """Reachable-tube enclosure under a fixed open-loop control.

    No feedback shaping: the inner control ellipsoid degenerates to a point
    (gamma = 1), so the shape dynamics reduce to the open-loop enclosure
    ``Qdot = AQ + QA' + (1/lam + 1/kap) Q + lam B Q_w B' + kap Omega_n``.
    """
    u_fixed = np.atleast_2d(np.asarray(u_fixed, dtype=float))
    if u_fixed.shape[0] == 1 and N > 1:
        u_fixed = np.repeat(u_fixed, N, axis=0)
    lam_arr = np.broadcast_to(np.asarray(lam, dtype=float), (N,)).copy()
    kap_arr = np.broadcast_to(np.asarray(kap, dtype=float), (N,)).copy()
    params = PolicyParams(
        u_x=u_fixed,
        gamma=np.ones(N),
        lam=lam_arr,
        kappa=kap_arr,
        S=np.zeros((N, model.n_x, model.n_u)),
    )
    res = integrate_policy_batch(
        model,
        np.asarray(X0.q, float)[None, :],
        np.asarray(X0.Q, float)[None, :, :],
        params.u_x[None],
        params.gamma[None],
        params.lam[None],
        params.kappa[None],
        params.S[None],
        T,
        N,
        bound_data,
        n_sub=n_sub,
        strict=True,
    )
    grid = np.linspace(0.0, T, N + 1)
    domain_ok = res["domain_ok"][0]
    return TubeTrajectory(
        grid=grid,
        q=res["q"][0],
        Q=res["Q"][0],
        params=params,
        R_u=res["R_u"][0],
        valid=bool(domain_ok.all()),
        domain_ok=domain_ok,
        dense_t=res["dense_t"],
        dense_q=res["dense_q"][0],
        dense_Q=res["dense_Q"][0],
        n_sub=n_sub,
    )


def di_residual(model, tube, c, t_index, bound_data):
    """Invariance-inequality residual at a node, exact right-hand side.

    Compares half the directional shape derivative against the worst-case
    directional growth (disturbance and remainder suprema minus the best
    admissible feedback decrease, with the input matrix evaluated at the
    support point). Nonnegative residuals certify the direction; ``None``
    signals a degenerate direction that carries no information.
    """
    c = np.asarray(c.c if hasattr(c, "c") else c, dtype=float)
    k = min(t_index, tube.n_intervals - 1)
    q = tube.q[t_index]
    Q = tube.Q[t_index]
    quad = float(c @ Q @ c)
    if quad <= 1e-12 * (1.0 + np.abs(Q).max()):
        return None
    p = tube.params.interval(k)
    _, Qdot = tube_rhs(model, q, Q, p, bound_data)
    R_u = tube.R_u[k]
    xi = q + (Q @ c) / np.sqrt(quad)
    G_xi = np.asarray(model.G(xi), dtype=float)
    A = np.asarray(model.A(q, p.u_x), dtype=float)
    B = np.asarray(model.B(q), dtype=float)
    nQc = float(np.sqrt(quad))
    lhs = 0.5 * float(c @ Qdot @ c)
    rhs = (
        float(c @ A @ Q @ c)
        - np.linalg.norm(sqrt_psd(R_u) @ G_xi.T @ c) * nQc
        + np.linalg.norm(sqrt_psd(omega_n(bound_data, Q)) @ c) * nQc
        + np.linalg.norm(sqrt_psd(model.Q_w) @ B.T @ c) * nQc
    )
    return lhs - rhs


def di_residual_sweep(model, tube, bound_data, n_dirs=64, seed=0):
    """Minimum residual over a direction grid at every node (skipping
    degenerate pairs); returns (min_residual, n_checked)."""
    dirs = sample_directions(n_dirs, tube.n_x, seed=seed)
    worst = np.inf
    checked = 0
    for t_index in range(len(tube.grid)):
        for c in dirs:
            r = di_residual(model, tube, c, t_index, bound_data)
            if r is not None:
                worst = min(worst, r)
                checked += 1
    return worst, checked
