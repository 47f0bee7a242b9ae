"""Nonlinearity bounders for the tube shape dynamics.

Two matrix-valued bounds feed the shape ODE: ``omega_n`` encloses the Taylor
remainder of the drift over the current tube cross-section, and ``omega_G``
encloses the input-matrix variation terms. The remainder bound rests on
per-component Frobenius-norm Hessian constants certified on a box domain by
grid maximization with a safety inflation.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .models import ModelError

SAFETY_INFLATION = 0.05


class BounderError(ValueError):
    """Invalid bound data or configuration."""


@dataclass(frozen=True)
class FrobeniusBoundData:
    """Per-component Hessian bounds certified on a box domain.

    ``fbar[i] >= sup_{y in domain} || d2 g_i/dy2 (y) . S_i ||_F`` for the
    invertible scalings ``S_i`` (identity by default). ``joint_xw`` marks
    data computed over the stacked (x, w) variable.
    """

    fbar: np.ndarray
    S: tuple  # per-component scaling matrices
    domain: tuple  # (lo, hi)
    grid_density: int
    joint_xw: bool = False

    @property
    def n_components(self):
        return self.fbar.shape[0]

    def S_inv(self, i):
        return np.linalg.inv(self.S[i])

    def S_inv_T_stack(self):
        """(n_components, n_y, n_y) stack of transposed inverse scalings,
        cached for the batched remainder bound."""
        cached = getattr(self, "_sinv_stack", None)
        if cached is None:
            cached = np.stack([np.linalg.inv(Si).T for Si in self.S])
            object.__setattr__(self, "_sinv_stack", cached)
        return cached

    def has_identity_scalings(self):
        cached = getattr(self, "_identity_S", None)
        if cached is None:
            n = self.S[0].shape[0]
            cached = all(np.array_equal(Si, np.eye(n)) for Si in self.S)
            object.__setattr__(self, "_identity_S", cached)
        return cached

    def to_dict(self):
        return {
            "fbar": self.fbar.tolist(),
            "S": [np.asarray(Si).tolist() for Si in self.S],
            "domain": [self.domain[0].tolist(), self.domain[1].tolist()],
            "grid_density": self.grid_density,
            "joint_xw": self.joint_xw,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            fbar=np.asarray(data["fbar"], float),
            S=tuple(np.asarray(Si, float) for Si in data["S"]),
            domain=(
                np.asarray(data["domain"][0], float),
                np.asarray(data["domain"][1], float),
            ),
            grid_density=int(data["grid_density"]),
            joint_xw=bool(data.get("joint_xw", False)),
        )


def _grid_points(lo, hi, density):
    axes = [np.linspace(lo[j], hi[j], density) for j in range(lo.shape[0])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _fd_hessian(fn, y, step=1e-4):
    """Central second differences of a vector function; (n_out, n, n)."""
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    f0 = np.asarray(fn(y), dtype=float)
    H = np.zeros((f0.shape[0], n, n))
    hs = step * (1.0 + np.abs(y))
    for j in range(n):
        ej = np.zeros(n)
        ej[j] = hs[j]
        H[:, j, j] = (fn(y + ej) - 2.0 * f0 + fn(y - ej)) / hs[j] ** 2
        for k in range(j + 1, n):
            ek = np.zeros(n)
            ek[k] = hs[k]
            mixed = (
                fn(y + ej + ek) - fn(y + ej - ek) - fn(y - ej + ek) + fn(y - ej - ek)
            ) / (4.0 * hs[j] * hs[k])
            H[:, j, k] = mixed
            H[:, k, j] = mixed
    return H


def _cache_key(model, lo, hi, grid_density, joint_xw):
    payload = json.dumps(
        {
            "model": model.name,
            "lo": lo.tolist(),
            "hi": hi.tolist(),
            "grid_density": grid_density,
            "joint_xw": joint_xw,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def compute_frobenius_constants(
    model,
    grid_density=50,
    S=None,
    joint_xw=False,
    cache_dir: Optional[str] = None,
):
    """Certify the per-component Hessian constants by grid maximization.

    Maximizes ``||H_i(y) S_i||_F`` over a regular grid on the domain box and
    inflates the result by 5%. Uses the model's analytic Hessian when
    provided, second-order finite differences otherwise. ``joint_xw=True``
    grids over the stacked variable y = (x, w) with the disturbance box taken
    as the bounding box of its ellipsoid.
    """
    lo, hi = model.hessian_domain
    if joint_xw:
        rw = np.sqrt(np.clip(np.diag(model.Q_w), 0.0, None))
        lo = np.concatenate([lo, model.q_w - rw])
        hi = np.concatenate([hi, model.q_w + rw])
        if np.any(lo >= hi):
            # flat disturbance axes carry no curvature; keep the box nonempty
            hi = np.where(hi <= lo, lo + 1e-9, hi)
    n_y = lo.shape[0]
    if S is None:
        S = tuple(np.eye(n_y) for _ in range(model.n_x))
    else:
        S = tuple(np.atleast_2d(np.asarray(Si, float)) for Si in S)
        for Si in S:
            if Si.shape != (n_y, n_y) or abs(np.linalg.det(Si)) < 1e-300:
                raise BounderError("each S_i must be an invertible n_y x n_y matrix")

    if cache_dir is not None:
        key = _cache_key(model, lo, hi, grid_density, joint_xw)
        path = os.path.join(cache_dir, f"bounders_{key}.json")
        if os.path.exists(path):
            with open(path) as fh:
                return FrobeniusBoundData.from_dict(json.load(fh))

    if joint_xw:
        def hess(y):
            return _fd_hessian(lambda z: model.f(z[: model.n_x], z[model.n_x:]), y)
    elif model.hess_f is not None:
        hess = model.hess_f
    else:
        def hess(y):
            return _fd_hessian(lambda z: model.f(z, model.q_w), y)

    pts = _grid_points(lo, hi, grid_density)
    sup = np.zeros(model.n_x)
    for y in pts:
        H = np.asarray(hess(y), dtype=float)
        if not np.all(np.isfinite(H)):
            raise BounderError(f"non-finite Hessian at grid point {y}")
        for i in range(model.n_x):
            sup[i] = max(sup[i], np.linalg.norm(H[i] @ S[i], ord="fro"))
    data = FrobeniusBoundData(
        fbar=(1.0 + SAFETY_INFLATION) * sup,
        S=S,
        domain=(lo, hi),
        grid_density=grid_density,
        joint_xw=joint_xw,
    )
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(data.to_dict(), fh)
    return data


def omega_n(bound_data, Q_x, Q_w=None):
    """Remainder-enclosing shape matrix over the tube cross-section.

    ``diag( fbar_i^2 ||S_i^{-1} Q_y||_F^2 ) / 4`` with Q_y the state shape
    matrix (or blockdiag(Q_x, Q_w) for joint bound data). Valid while the
    cross-section stays inside the certified domain box.
    """
    Q_x = np.asarray(Q_x, dtype=float)
    n_x = Q_x.shape[-1]
    if bound_data.joint_xw:
        if Q_w is None:
            raise BounderError("joint bound data needs Q_w to assemble Q_y")
        Q_w = np.asarray(Q_w, dtype=float)
        n_w = Q_w.shape[-1]
        Qy = np.zeros(Q_x.shape[:-2] + (n_x + n_w, n_x + n_w))
        Qy[..., :n_x, :n_x] = Q_x
        Qy[..., n_x:, n_x:] = Q_w
    else:
        Qy = Q_x
    out_dim = bound_data.fbar.shape[0]
    if bound_data.has_identity_scalings():
        diag = (0.25 * bound_data.fbar**2
                * np.sum(Qy * Qy, axis=(-2, -1))[..., None])
    else:
        # ||S_i^{-1} Q_y||_F == ||Q_y S_i^{-T}||_F; one batched product
        # covers every component: (..., 1, n, n) @ (c, n, n)
        M = Qy[..., None, :, :] @ bound_data.S_inv_T_stack()
        diag = 0.25 * bound_data.fbar**2 * np.sum(M * M, axis=(-2, -1))
    out = np.zeros(Q_x.shape[:-2] + (out_dim, out_dim))
    idx = np.arange(out_dim)
    out[..., idx, idx] = diag
    return out


def omega_G(model, Q_x, R_u):
    """Input-matrix variation bound; identically zero for constant G.

    For state-dependent G the bound is the conservative spectral estimate
    ``2 lmax(Q_x) sqrt(lmax(R_u)) L_G . I`` (experimental path; requires a
    user-supplied Lipschitz constant of G).
    """
    Q_x = np.asarray(Q_x, dtype=float)
    n_x = Q_x.shape[-1]
    if model.g_constant:
        return np.zeros(Q_x.shape[:-2] + (n_x, n_x))
    if model.lipschitz_G is None:
        raise BounderError("state-dependent G requires model.lipschitz_G")
    lam_Q = np.linalg.eigvalsh(Q_x)[..., -1]
    lam_R = np.clip(np.linalg.eigvalsh(np.atleast_2d(R_u))[..., -1], 0.0, None)
    beta = 2.0 * lam_Q * np.sqrt(lam_R) * model.lipschitz_G
    return beta[..., None, None] * np.eye(n_x)
