"""Model-based iterative reconstruction with isotropic total variation.

Two solvers for ``0.5 ||A x - y||^2 + weight * TV(x)``: proximal-gradient
with momentum (FISTA, monotone via restart) and ADMM with the gradient-field
splitting.  The TV proximal map itself is solved by dual projection.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.sparse.linalg

from .grids import ImageGrid, Sinogram
from .operators import Projector

__all__ = [
    "TVSpec",
    "SolveHistory",
    "tv_seminorm",
    "image_gradient",
    "image_divergence",
    "tv_prox",
    "fista_tv",
    "admm_tv",
]


@dataclasses.dataclass
class TVSpec:
    """Knobs shared by the TV solvers.

    ``weight`` of ``None`` picks the solver default (1e-3 for FISTA, 1e-2
    for ADMM).  ``prox_iterations`` bounds the inner dual projection;
    ``rho`` is the ADMM penalty.
    """

    weight: float | None = None
    outer_iterations: int = 200
    prox_iterations: int = 100
    nonneg: bool = False
    rho: float = 1.0

    def __post_init__(self) -> None:
        if self.weight is not None and self.weight < 0:
            raise ValueError("weight must be >= 0")
        if self.outer_iterations < 1 or self.prox_iterations < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclasses.dataclass
class SolveHistory:
    """Per-iteration diagnostics of a TV solver run.

    ``objective`` is the penalized objective after each outer iteration.
    ``primal_residual`` is ``||grad(x) - z||`` for ADMM (None for FISTA,
    which has no splitting).
    """

    objective: np.ndarray
    primal_residual: np.ndarray | None = None


def image_gradient(x: np.ndarray) -> np.ndarray:
    """Forward differences with Neumann boundary; shape ``(2, H, W)``."""
    g = np.zeros((2,) + x.shape)
    g[0, :-1, :] = x[1:, :] - x[:-1, :]
    g[1, :, :-1] = x[:, 1:] - x[:, :-1]
    return g


def image_divergence(p: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`image_gradient`."""
    div = np.zeros(p.shape[1:])
    div[:-1, :] += p[0, :-1, :]
    div[1:, :] -= p[0, :-1, :]
    div[:, :-1] += p[1, :, :-1]
    div[:, 1:] -= p[1, :, :-1]
    return div


def tv_seminorm(x: np.ndarray) -> float:
    g = image_gradient(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.sqrt(g[0] ** 2 + g[1] ** 2)))


def tv_prox(f: np.ndarray, weight: float, iterations: int = 100) -> np.ndarray:
    """Proximal map of ``weight * TV`` at ``f`` by dual projection.

    Iterates ``p <- (p + tau * grad(div p - f/weight)) / (1 + tau * |...|)``
    with the classical step ``tau = 1/8`` and returns ``f - weight * div p``.
    The map is non-expansive; ``weight == 0`` returns ``f`` unchanged.
    """
    if weight < 0:
        raise ValueError("weight must be >= 0")
    f = np.asarray(f, dtype=np.float64)
    if weight == 0.0:
        return f.copy()
    tau = 0.125
    p = np.zeros((2,) + f.shape)
    for _ in range(iterations):
        inner = image_divergence(p) - f / weight
        g = image_gradient(inner)
        mag = np.sqrt(g[0] ** 2 + g[1] ** 2)
        p = (p + tau * g) / (1.0 + tau * mag)
    return f - weight * image_divergence(p)


def _objective(proj, x, y, weight):
    return 0.5 * float(np.sum((proj.apply(x) - y) ** 2)) + weight * tv_seminorm(x)


def fista_tv(
    sino: Sinogram,
    grid_shape: tuple[int, int],
    spec: TVSpec | None = None,
    pixel_size: float = 1.0,
    projector: Projector | None = None,
):
    """FISTA for the TV-regularized least-squares objective.

    Uses the step ``1/L`` with ``L`` the operator norm of ``A^T A`` and
    restarts the momentum whenever the objective would rise, which keeps the
    recorded objective history non-increasing.  Returns the image and a
    :class:`SolveHistory`.
    """
    spec = spec or TVSpec()
    weight = 1e-3 if spec.weight is None else spec.weight
    proj = projector or Projector(sino.geometry, grid_shape, pixel_size)
    y = sino.values
    L = proj.op_norm_sq()
    x = np.zeros(grid_shape)
    z = x.copy()
    t_k = 1.0
    history = []
    obj_prev = _objective(proj, x, y, weight)
    for _ in range(spec.outer_iterations):
        grad = proj.apply_adjoint(proj.apply(z) - y)
        x_new = tv_prox(z - grad / L, weight / L, spec.prox_iterations)
        if spec.nonneg:
            np.maximum(x_new, 0.0, out=x_new)
        obj_new = _objective(proj, x_new, y, weight)
        if obj_new > obj_prev:
            # restart momentum from the last accepted iterate
            z = x.copy()
            t_k = 1.0
            grad = proj.apply_adjoint(proj.apply(z) - y)
            x_new = tv_prox(z - grad / L, weight / L, spec.prox_iterations)
            if spec.nonneg:
                np.maximum(x_new, 0.0, out=x_new)
            obj_new = _objective(proj, x_new, y, weight)
            if obj_new > obj_prev:
                x_new, obj_new = x, obj_prev
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t_k**2))
        z = x_new + ((t_k - 1.0) / t_next) * (x_new - x)
        x, t_k, obj_prev = x_new, t_next, obj_new
        history.append(obj_prev)
    return ImageGrid(x, pixel_size), SolveHistory(np.array(history))


def admm_tv(
    sino: Sinogram,
    grid_shape: tuple[int, int],
    spec: TVSpec | None = None,
    pixel_size: float = 1.0,
    projector: Projector | None = None,
    cg_tol: float = 1e-10,
    cg_max_iter: int = 200,
    u0: np.ndarray | None = None,
):
    """ADMM on the split ``z = grad(x)`` with isotropic shrinkage.

    The x-update solves ``(A^T A + rho * grad^T grad) x = A^T y +
    rho * grad^T (z - u)`` by warm-started conjugate gradient.  ``u0``
    optionally seeds the scaled dual variable (zeros by default); at
    convergence the output does not depend on it.  Returns the image and a
    :class:`SolveHistory` with objective and primal-residual traces.
    """
    spec = spec or TVSpec()
    weight = 1e-2 if spec.weight is None else spec.weight
    proj = projector or Projector(sino.geometry, grid_shape, pixel_size)
    y = sino.values
    rho = spec.rho
    aty = proj.apply_adjoint(y)
    n_pix = aty.size

    def system_op(v: np.ndarray) -> np.ndarray:
        img = v.reshape(grid_shape)
        out = proj.apply_adjoint(proj.apply(img)) - rho * image_divergence(
            image_gradient(img)
        )
        return out.ravel()

    op = scipy.sparse.linalg.LinearOperator((n_pix, n_pix), matvec=system_op)
    x = np.zeros(grid_shape)
    z = np.zeros((2,) + grid_shape)
    if u0 is None:
        u = np.zeros_like(z)
    else:
        u = np.array(u0, dtype=np.float64)
        if u.shape != z.shape:
            raise ValueError(f"u0 must have shape {z.shape}")
    history = []
    primal = []
    for _ in range(spec.outer_iterations):
        rhs = aty - rho * image_divergence(z - u)
        sol, _ = scipy.sparse.linalg.cg(
            op, rhs.ravel(), x0=x.ravel(), rtol=cg_tol, atol=0.0, maxiter=cg_max_iter
        )
        x = sol.reshape(grid_shape)
        if spec.nonneg:
            np.maximum(x, 0.0, out=x)
        gx = image_gradient(x)
        w = gx + u
        mag = np.sqrt(w[0] ** 2 + w[1] ** 2)
        shrink = np.maximum(1.0 - (weight / rho) / np.maximum(mag, 1e-300), 0.0)
        z = shrink * w
        u = u + gx - z
        history.append(_objective(proj, x, y, weight))
        primal.append(float(np.linalg.norm(gx - z)))
    return ImageGrid(x, pixel_size), SolveHistory(np.array(history), np.array(primal))
