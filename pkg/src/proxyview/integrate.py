"""Bilateral normal integration: recover a heightfield from a normal map.

Pixel coordinates: x grows with the column index, y grows toward the top row.
Under orthographic projection a unit normal (nx, ny, nz) gives the surface
gradient p = dz/dx = -nx/nz and q = dz/dy = -ny/nz, with nz floored.

For every foreground pixel and axis there are two one-sided differences
(forward toward +x / +y, backward toward -x / -y). Each one-sided residual is
weighted by a logistic function of the residual asymmetry so that the side
lying across a depth discontinuity is switched off. Residuals are scaled by
the (floored) nz so that grazing pixels near silhouettes carry little weight:

    r_plus  = nz * (D_plus z - g),  r_minus = nz * (D_minus z - g)
    w_plus  = sigmoid(k * (r_minus**2 - r_plus**2))
    w_minus = 1 - w_plus
    E(z)    = sum(w_plus * r_plus**2 + w_minus * r_minus**2)

A difference whose neighbor is background is dropped and the remaining side
gets weight 1. The energy is minimized by iteratively reweighted least squares
with a conjugate gradient inner solver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .imagegeo import DepthMap, ForegroundMask, NormalMap, ValidationError

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class IntegrationConfig:
    stiffness_k: float = 2.0
    max_outer_iters: int = 100
    outer_tol: float = 1e-5
    cg_tol: float = 1e-7
    cg_max_iters: int = 5000
    nz_floor: float = 1e-4

    def __post_init__(self):
        if self.stiffness_k <= 0 or self.outer_tol <= 0 or self.cg_tol <= 0:
            raise ValueError("stiffness and tolerances must be positive")
        if self.max_outer_iters < 1 or self.cg_max_iters < 1:
            raise ValueError("iteration limits must be at least 1")
        if not 0.0 < self.nz_floor < 0.5:
            raise ValueError("nz_floor must lie in (0, 0.5)")


@dataclass(frozen=True)
class GradientField:
    p: np.ndarray  # (H, W) dz/dx, NaN off the foreground
    q: np.ndarray  # (H, W) dz/dy
    nz: np.ndarray  # (H, W) floored nz, the residual scale


def normals_to_gradients(
    n: NormalMap, mask: ForegroundMask, cfg: IntegrationConfig = IntegrationConfig()
) -> GradientField:
    mask.require_nonempty()
    if n.data.shape[:2] != mask.data.shape:
        raise ValidationError(f"normals {n.data.shape[:2]} and mask {mask.data.shape} differ")
    fg = mask.data
    if not np.isfinite(n.data[fg]).all():
        raise ValidationError("normal map is not finite on the foreground")
    nz = np.maximum(n.data[..., 2], cfg.nz_floor)
    p = np.full(fg.shape, np.nan)
    q = np.full(fg.shape, np.nan)
    p[fg] = -n.data[..., 0][fg] / nz[fg]
    q[fg] = -n.data[..., 1][fg] / nz[fg]
    return GradientField(p, q, np.where(fg, nz, np.nan))


# ---------------------------------------------------------------- operators


@dataclass
class _Operators:
    """One-sided difference matrices over the foreground pixels (raster order)."""

    index: np.ndarray  # (H, W) int, -1 off the foreground
    # per direction: sparse (N, N) difference matrix and boolean row-presence vector
    diffs: dict = field(default_factory=dict)
    present: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int((self.index >= 0).sum())


# direction name -> (axis, row offset, col offset, sign)
# forward differences are z(neighbor) - z(u), backward are z(u) - z(neighbor)
_DIRECTIONS = {
    "x+": ("x", 0, 1, +1),
    "x-": ("x", 0, -1, -1),
    "y+": ("y", -1, 0, +1),
    "y-": ("y", 1, 0, -1),
}


def _build_operators(mask: np.ndarray) -> _Operators:
    h, w = mask.shape
    index = np.full(mask.shape, -1, dtype=np.int64)
    rows, cols = np.nonzero(mask)
    n = rows.size
    index[rows, cols] = np.arange(n)
    ops = _Operators(index)
    for name, (_, dr, dc, sign) in _DIRECTIONS.items():
        rr, cc = rows + dr, cols + dc
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        neighbor = np.full(n, -1, dtype=np.int64)
        neighbor[inside] = index[rr[inside], cc[inside]]
        has = neighbor >= 0
        me = np.nonzero(has)[0]
        data = np.concatenate([np.full(me.size, float(sign)), np.full(me.size, -float(sign))])
        ii = np.concatenate([me, me])
        jj = np.concatenate([neighbor[has], me])
        ops.diffs[name] = sp.csr_matrix((data, (ii, jj)), shape=(n, n))
        ops.present[name] = has
    return ops


@dataclass(frozen=True)
class _Targets:
    gx: np.ndarray
    gy: np.ndarray
    scale: np.ndarray


def _residuals(ops: _Operators, z: np.ndarray, tg: _Targets) -> dict:
    out = {}
    for name, (axis, *_rest) in _DIRECTIONS.items():
        g = tg.gx if axis == "x" else tg.gy
        r = tg.scale * (ops.diffs[name] @ z - g)
        out[name] = np.where(ops.present[name], r, 0.0)
    return out


def _weights(ops: _Operators, res: dict, k: float) -> dict:
    """Bilateral weights; each axis pair sums to one, a missing side gets zero."""
    out = {}
    for axis in ("x", "y"):
        plus, minus = f"{axis}+", f"{axis}-"
        has_p, has_m = ops.present[plus], ops.present[minus]
        arg = k * (res[minus] ** 2 - res[plus] ** 2)
        w_plus = 0.5 * (1.0 + np.tanh(0.5 * arg))  # overflow-free logistic
        w_plus = np.where(has_p & ~has_m, 1.0, w_plus)
        w_plus = np.where(has_m & ~has_p, 0.0, w_plus)
        out[plus] = w_plus
        out[minus] = 1.0 - w_plus
    return out


def _energy_of(ops: _Operators, z: np.ndarray, tg: _Targets, k: float) -> float:
    res = _residuals(ops, z, tg)
    wts = _weights(ops, res, k)
    total = 0.0
    for name in _DIRECTIONS:  # fixed summation order
        total += float(np.sum(wts[name] * res[name] ** 2))
    return total


def _normal_equations(ops: _Operators, wts: dict, tg: _Targets):
    a = sp.csr_matrix((ops.size, ops.size))
    b = np.zeros(ops.size)
    for name, (axis, *_rest) in _DIRECTIONS.items():
        d = ops.diffs[name]
        wv = np.where(ops.present[name], wts[name], 0.0) * tg.scale**2
        g = tg.gx if axis == "x" else tg.gy
        dt_w = d.T @ sp.diags(wv)
        a = a + dt_w @ d
        b = b + dt_w @ g
    return a.tocsr(), b


def conjugate_gradient(a: sp.spmatrix, b: np.ndarray, x0: np.ndarray, tol: float, max_iters: int):
    """Jacobi-preconditioned CG for symmetric positive semidefinite consistent systems.

    Returns (x, relative_residual, iterations). Raises SolverError when the
    relative residual ||b - Ax|| / ||b|| is still above ``tol`` after ``max_iters``.
    """
    b_norm = np.linalg.norm(b)
    x = x0.copy()
    if b_norm == 0.0:
        r = -(a @ x)
        if np.linalg.norm(r) == 0.0:
            return x, 0.0, 0
        b_norm = 1.0
    diag = a.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = b - a @ x
    rel = np.linalg.norm(r) / b_norm
    if rel < tol:
        return x, rel, 0
    zvec = inv_diag * r
    d = zvec.copy()
    rz = r @ zvec
    for it in range(1, max_iters + 1):
        ad = a @ d
        dad = d @ ad
        if dad <= 0.0:
            break
        alpha = rz / dad
        x += alpha * d
        r -= alpha * ad
        rel = np.linalg.norm(r) / b_norm
        if rel < tol:
            return x, rel, it
        zvec = inv_diag * r
        rz_new = r @ zvec
        d = zvec + (rz_new / rz) * d
        rz = rz_new
    raise SolverError(f"conjugate gradient did not converge in {max_iters} iterations", rel)


# ---------------------------------------------------------------- public API


@dataclass(frozen=True)
class IntegrationResult:
    depth: DepthMap
    energies: tuple  # energy of the initial guess followed by one entry per accepted iteration
    iterations: int
    converged: bool


def _foreground_values(depth: DepthMap, mask: ForegroundMask) -> np.ndarray:
    depth.check_foreground(mask)
    return depth.data[mask.data].astype(np.float64)


def energy(
    z: DepthMap, g: GradientField, mask: ForegroundMask, cfg: IntegrationConfig = IntegrationConfig()
) -> float:
    """Bilateral energy of a depth map against a gradient field (weights taken from ``z`` itself)."""
    ops = _build_operators(mask.data)
    zv = _foreground_values(z, mask)
    fg = mask.data
    return _energy_of(ops, zv, _Targets(g.p[fg], g.q[fg], g.nz[fg]), cfg.stiffness_k)


def bilateral_integration(
    n: NormalMap,
    mask: ForegroundMask,
    cfg: IntegrationConfig = IntegrationConfig(),
    depth: DepthMap | None = None,
) -> IntegrationResult:
    """Run the IRLS solver and return the depth together with the energy trace.

    An optional ``depth`` warm-starts the iteration (shifted to zero mean); it
    does not enter the objective. Iterates that would raise the energy are
    backtracked toward the previous iterate; if no step lowers it the solver
    stops at the previous iterate.
    """
    grads = normals_to_gradients(n, mask, cfg)
    fg = mask.data
    ops = _build_operators(fg)
    tg = _Targets(grads.p[fg], grads.q[fg], grads.nz[fg])
    k = cfg.stiffness_k

    if depth is None:
        z = np.zeros(ops.size)
    else:
        z = _foreground_values(depth, mask)
        z = z - z.mean()

    # per-component offsets are not fixed by the gradients; keep the warm start's
    labels, ncomp = ndimage.label(fg)
    comp = labels[fg] - 1
    counts = np.bincount(comp, minlength=ncomp)
    init_means = np.bincount(comp, weights=z, minlength=ncomp) / counts

    def fix_components(v: np.ndarray) -> np.ndarray:
        means = np.bincount(comp, weights=v, minlength=ncomp) / counts
        return v - means[comp] + init_means[comp]

    e_prev = _energy_of(ops, z, tg, k)
    energies = [e_prev]
    wts = _weights(ops, {name: np.zeros(ops.size) for name in _DIRECTIONS}, k)
    converged = False
    iterations = 0
    for it in range(1, cfg.max_outer_iters + 1):
        a, b = _normal_equations(ops, wts, tg)
        z_new, rel, cg_iters = conjugate_gradient(a, b, z, cfg.cg_tol, cfg.cg_max_iters)
        z_new = fix_components(z_new)
        e_new = _energy_of(ops, z_new, tg, k)
        step = 1.0
        while e_new > e_prev and step > 1e-3:
            step *= 0.5
            z_try = z + step * (z_new - z)
            e_try = _energy_of(ops, z_try, tg, k)
            if e_try <= e_prev:
                z_new, e_new = z_try, e_try
        log.debug("irls %d: energy %.6e, cg %d its, residual %.2e", it, e_new, cg_iters, rel)
        if e_new > e_prev:
            converged = True
            break
        iterations = it
        change = (e_prev - e_new) / e_prev if e_prev > 0 else 0.0
        z, e_prev = z_new, e_new
        energies.append(e_new)
        if change < cfg.outer_tol:
            converged = True
            break
        wts = _weights(ops, _residuals(ops, z, tg), k)

    z = z - z.mean()
    out = np.full(fg.shape, np.nan)
    out[fg] = z
    return IntegrationResult(DepthMap(out), tuple(energies), iterations, converged)


def integrate_normals(
    n: NormalMap,
    mask: ForegroundMask,
    cfg: IntegrationConfig = IntegrationConfig(),
    depth: DepthMap | None = None,
) -> DepthMap:
    """Integrate ``n`` over ``mask`` into a zero-mean depth map (NaN on background)."""
    return bilateral_integration(n, mask, cfg, depth).depth
