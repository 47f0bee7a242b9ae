"""Ellipsoid type and set-calculus primitives.

An ellipsoid is parameterized by a center ``q`` and a symmetric positive
semidefinite shape matrix ``Q``:  ``E(q, Q) = {q + Q^{1/2} v : ||v|| <= 1}``.
Degenerate (flat) sets are allowed; all primitives handle rank-deficient Q
through eigenvalue clipping and pseudo-inverses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

# relative eigenvalue dust that may be clipped to zero on construction;
# anything more negative is a hard error
PSD_CLIP_REL = 1e-10
SYM_TOL_REL = 1e-12


class EllipsoidError(ValueError):
    """Invalid ellipsoid data or operation outside a primitive's domain."""


def _check_symmetric(Q, tol_rel=SYM_TOL_REL, what="Q"):
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise EllipsoidError(f"{what} must be a square matrix, got shape {Q.shape}")
    scale = 1.0 + (np.abs(Q).max() if Q.size else 0.0)
    asym = np.abs(Q - Q.T).max() if Q.size else 0.0
    if asym > tol_rel * scale:
        raise EllipsoidError(f"{what} is not symmetric: max|Q - Q^T| = {asym:.3e}")
    return 0.5 * (Q + Q.T)


def clip_psd(Q, tol_rel=PSD_CLIP_REL, what="Q"):
    """Repair tiny negative eigenvalue dust; error on genuine indefiniteness.

    Eigenvalues in ``[-tol_rel * (1 + lam_max), 0)`` are clipped to zero.
    """
    Q = _check_symmetric(Q, what=what)
    lam, V = np.linalg.eigh(Q)
    lo = -tol_rel * (1.0 + max(lam[-1], 0.0))
    if lam[0] < lo:
        raise EllipsoidError(
            f"{what} is not positive semidefinite: min eigenvalue {lam[0]:.3e} "
            f"(tolerance {lo:.3e})"
        )
    if lam[0] >= 0.0:
        return Q
    lam = np.clip(lam, 0.0, None)
    return (V * lam) @ V.T


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid with center ``q`` and PSD shape matrix ``Q``.

    Immutable; construction symmetrizes Q and clips negative eigenvalue dust.
    """

    q: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        q = np.atleast_1d(np.asarray(self.q, dtype=float))
        Q = clip_psd(self.Q)
        if Q.shape[0] != q.shape[0]:
            raise EllipsoidError(f"center dim {q.shape[0]} != shape dim {Q.shape[0]}")
        q.setflags(write=False)
        Q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "Q", Q)

    @property
    def dim(self):
        return self.q.shape[0]

    def contains_point(self, x, tol=1e-9):
        """Membership test (x - q)^T Q^+ (x - q) <= 1 + tol.

        Off-span components (relative to the range of Q) count as violations.
        """
        d = np.asarray(x, dtype=float) - self.q
        scale = np.sqrt(max(np.abs(self.Q).max(), 1e-300))
        off = d - self.Q @ (pinv_psd(self.Q) @ d)
        if np.linalg.norm(off) > tol * (1.0 + scale) + 1e-14:
            return False
        return float(d @ pinv_psd(self.Q) @ d) <= 1.0 + tol

    def to_dict(self):
        return {"q": self.q.tolist(), "Q": self.Q.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.asarray(data["q"], float), np.asarray(data["Q"], float))

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def boundary_points(self, n_dirs=64, seed=0):
        """Support points along ``n_dirs`` sampled directions, for plotting."""
        dirs = sample_directions(n_dirs, self.dim, seed=seed)
        return np.array([inverse_gauss_map(self, c) for c in dirs])


@dataclass(frozen=True)
class Direction:
    """Unit-norm direction vector."""

    c: np.ndarray = field()

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        nrm = np.linalg.norm(c)
        if abs(nrm - 1.0) > 1e-12:
            if nrm == 0.0:
                raise EllipsoidError("zero vector cannot be a direction")
            c = c / nrm
        c.setflags(write=False)
        object.__setattr__(self, "c", c)


def _as_dir(c, dim):
    c = c.c if isinstance(c, Direction) else np.asarray(c, dtype=float)
    if c.shape != (dim,):
        raise EllipsoidError(f"direction shape {c.shape} does not match dim {dim}")
    return c


def support(E, c):
    """Support function value max{c.z : z in E} = c.q + sqrt(c'Qc)."""
    c = _as_dir(c, E.dim)
    quad = float(c @ E.Q @ c)
    if quad < -1e-12 * (1.0 + np.abs(E.Q).max()):
        raise EllipsoidError(f"c'Qc = {quad:.3e} < 0 violates PSD invariant")
    return float(c @ E.q) + np.sqrt(max(quad, 0.0))


def sqrt_psd(Q):
    """Symmetric PSD square root via eigendecomposition.

    Negative eigenvalue dust is clipped to zero before taking roots.
    """
    Q = _check_symmetric(Q)
    lam, V = np.linalg.eigh(Q)
    lam = np.clip(lam, 0.0, None)
    return (V * np.sqrt(lam)) @ V.T


def pinv_psd(Q, rcond=1e-12):
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix."""
    Q = _check_symmetric(Q)
    lam, V = np.linalg.eigh(Q)
    cut = rcond * max(lam[-1], 0.0)
    inv = np.where(lam > cut, 1.0 / np.where(lam > cut, lam, 1.0), 0.0)
    return (V * inv) @ V.T


def gauss_map(E, xi):
    """Outward unit normal Q^+ (xi - q) / ||.|| on the extended domain E \\ {q}."""
    xi = np.asarray(xi, dtype=float)
    d = xi - E.q
    scale = 1.0 + np.linalg.norm(E.q)
    if np.linalg.norm(d) <= 1e-12 * scale:
        raise EllipsoidError("Gauss map undefined at the center point")
    g = pinv_psd(E.Q) @ d
    nrm = np.linalg.norm(g)
    if nrm <= 1e-14 * (1.0 + np.linalg.norm(d)):
        raise EllipsoidError("xi - q lies outside span(Q); no normal direction")
    return g / nrm


def inverse_gauss_map(E, c):
    """Support point q + Qc / sqrt(c'Qc); attains support(E, c) exactly."""
    c = _as_dir(c, E.dim)
    quad = float(c @ E.Q @ c)
    if np.abs(E.Q).max() == 0.0:
        return E.q.copy()
    if quad <= 0.0:
        raise EllipsoidError("direction lies in the nullspace of Q")
    return E.q + (E.Q @ c) / np.sqrt(quad)


def inner_control_ellipsoid(q_u, Q_u, u_x, gamma):
    """Shape matrix of the inner ellipsoid centered at a reference control.

    Returns ``R_u = (1 - gamma) Q_u + (1 - 1/gamma) d d^T`` with
    ``d = u_x - q_u``, plus a feasibility flag: R_u must be PSD for the
    guarantee ``E(u_x, R_u) ⊆ E(q_u, Q_u)`` to hold.

    Returns
    -------
    R_u : ndarray
        Shape matrix (PSD-repaired when feasible, raw otherwise).
    feasible : bool
        False when R_u has an eigenvalue below the PSD tolerance.
    """
    q_u = np.atleast_1d(np.asarray(q_u, float))
    Q_u = np.atleast_2d(np.asarray(Q_u, float))
    u_x = np.atleast_1d(np.asarray(u_x, float))
    if not (0.0 < gamma <= 1.0):
        raise EllipsoidError(f"gamma must be in (0, 1], got {gamma}")
    d = u_x - q_u
    memb = float(d @ pinv_psd(Q_u) @ d)
    off = d - Q_u @ (pinv_psd(Q_u) @ d)
    if memb > 1.0 + 1e-9 or np.linalg.norm(off) > 1e-9 * (1.0 + np.linalg.norm(d)):
        raise EllipsoidError("reference control lies outside the admissible ellipsoid")
    R = (1.0 - gamma) * Q_u + (1.0 - 1.0 / gamma) * np.outer(d, d)
    R = 0.5 * (R + R.T)
    lam = np.linalg.eigvalsh(R)
    feasible = lam[0] >= -PSD_CLIP_REL * (1.0 + max(lam[-1], 0.0))
    if feasible:
        R = clip_psd(R)
    return R, feasible


def minkowski_outer(Q1, Q2, beta):
    """Outer bound of the Minkowski sum of two centered ellipsoids.

    ``E(Q1) ⊕ E(Q2) ⊆ E(Q1/beta + Q2/(1-beta))`` for any beta in (0, 1).
    """
    if not (0.0 < beta < 1.0):
        raise EllipsoidError(f"beta must be in (0, 1), got {beta}")
    Q1 = np.atleast_2d(np.asarray(Q1, float))
    Q2 = np.atleast_2d(np.asarray(Q2, float))
    if Q1.shape != Q2.shape:
        raise EllipsoidError("summand shape matrices must have equal dimensions")
    return Q1 / beta + Q2 / (1.0 - beta)


def sample_directions(n, dim, seed=0):
    """Quasi-uniform unit directions, reproducible for a given seed.

    2-D uses equispaced angles, 3-D a Fibonacci sphere lattice (both ignore
    the seed); higher dimensions use seeded normalized Gaussian samples.
    """
    if n < 1:
        raise EllipsoidError("need at least one direction")
    if dim == 1:
        out = np.ones((n, 1))
        out[1::2, 0] = -1.0
        return out
    if dim == 2:
        theta = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return np.column_stack([np.cos(theta), np.sin(theta)])
    if dim == 3:
        k = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * k / n)
        golden = np.pi * (1.0 + np.sqrt(5.0))
        theta = golden * k
        return np.column_stack(
            [np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)]
        )
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def contains(outer, inner, n_dirs=256, seed=0, tol=1e-9):
    """Sampled containment test ``inner ⊆ outer`` via support dominance.

    Checks ``support(inner, c) <= support(outer, c) + tol`` over ``n_dirs``
    sampled directions. Necessary in general; sufficient in the limit of
    dense sampling.

    Returns
    -------
    ok : bool
    margin : float
        Minimum support gap over the sampled directions (negative when the
        test fails).
    """
    if outer.dim != inner.dim:
        raise EllipsoidError("dimension mismatch between outer and inner")
    if n_dirs < 16:
        raise EllipsoidError("n_dirs must be at least 16")
    dirs = sample_directions(n_dirs, outer.dim, seed=seed)
    gaps = np.array([support(outer, c) - support(inner, c) for c in dirs])
    margin = float(gaps.min())
    return margin >= -tol, margin


def boundary_csv(E, path, n_dirs=64, seed=0):
    """Write sampled boundary points to CSV (one row per direction)."""
    pts = E.boundary_points(n_dirs=n_dirs, seed=seed)
    header = ",".join(f"x_{i}" for i in range(E.dim))
    np.savetxt(path, pts, delimiter=",", header=header, comments="")


# ---------------------------------------------------------------------------
# batched helpers used by the tube integrator; dispatch on dimension so the
# hot path for 1x1 / 2x2 blocks avoids per-matrix LAPACK calls
# ---------------------------------------------------------------------------


def sym_batch(Q):
    return 0.5 * (Q + np.swapaxes(Q, -1, -2))


def sqrt_psd_batch(Q):
    """Symmetric PSD square roots of a (..., n, n) stack."""
    n = Q.shape[-1]
    if n == 1:
        return np.sqrt(np.clip(Q, 0.0, None))
    if n == 2:
        # closed form: sqrt(Q) = (Q + sqrt(det) I) / sqrt(tr + 2 sqrt(det))
        a = Q[..., 0, 0]
        b = Q[..., 0, 1]
        d = Q[..., 1, 1]
        det = np.clip(a * d - b * b, 0.0, None)
        s = np.sqrt(det)
        tr = np.clip(a, 0.0, None) + np.clip(d, 0.0, None)
        denom = np.sqrt(np.clip(tr + 2.0 * s, 1e-300, None))
        out = (Q + s[..., None, None] * np.eye(2)) / denom[..., None, None]
        # zero matrices map to zero, not 0/eps noise
        return np.where((tr + s)[..., None, None] > 0.0, out, 0.0)
    lam, V = np.linalg.eigh(Q)
    lam = np.clip(lam, 0.0, None)
    return V @ (np.sqrt(lam)[..., None] * np.swapaxes(V, -1, -2))


def min_eig_batch(Q):
    """Smallest eigenvalue of each matrix in a (..., n, n) stack."""
    n = Q.shape[-1]
    if n == 1:
        return Q[..., 0, 0]
    if n == 2:
        a = Q[..., 0, 0]
        b = Q[..., 0, 1]
        d = Q[..., 1, 1]
        m = 0.5 * (a + d)
        r = np.sqrt(np.clip((0.5 * (a - d)) ** 2 + b * b, 0.0, None))
        return m - r
    return np.linalg.eigvalsh(Q)[..., 0]


def clip_psd_batch(Q, tol_rel=PSD_CLIP_REL):
    """Batched PSD repair; raises on eigenvalues below the dust tolerance."""
    Q = sym_batch(Q)
    lam, V = np.linalg.eigh(Q)
    lo = -tol_rel * (1.0 + np.clip(lam[..., -1], 0.0, None))
    if np.any(lam[..., 0] < lo):
        worst = float((lam[..., 0] - lo).min())
        raise EllipsoidError(f"indefinite shape matrix in batch (excess {worst:.3e})")
    lam = np.clip(lam, 0.0, None)
    return V @ (lam[..., None] * np.swapaxes(V, -1, -2))
