"""Uniform periodic 1D mesh with P1 and DG0 finite-element spaces.

Fields are plain ``numpy`` arrays of length ``N``: nodal values for P1
(node ``i`` at ``x = i*h``, node ``N`` identified with node 0) and cell values
for DG0 (cell ``i`` spans ``[i*h, (i+1)*h]``).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class Mesh:
    L: float
    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 4:
            raise MeshError(f"need at least 4 cells, got N={self.N}")
        if not self.L > 0:
            raise MeshError(f"domain length must be positive, got L={self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N) * self.h

    @property
    def cell_centres(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.h

    @property
    def cell_areas(self) -> np.ndarray:
        return np.full(self.N, self.h)


class CyclicTridiagonal:
    """Symmetric circulant tridiagonal matrix with a cached factorisation.

    Solves go through the Sherman-Morrison reduction of the periodic system
    to tridiagonal sweeps.
    """

    def __init__(self, diag: float, off: float, n: int):
        self.diag = float(diag)
        self.off = float(off)
        self.n = int(n)
        self.factors = _kernels.cyclic_factor(self.diag, self.off, self.n)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.ascontiguousarray(rhs, dtype=float)
        if rhs.shape != (self.n,):
            raise ValueError(f"expected shape ({self.n},), got {rhs.shape}")
        return _kernels.cyclic_solve(*self.factors, self.off, rhs)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return _kernels.cyclic_matvec(self.diag, self.off, np.asarray(x, dtype=float))

    def __matmul__(self, x):
        return self.matvec(x)

    def tosparse(self) -> sp.csr_matrix:
        return _circulant(self.diag, self.off, self.n)


def _circulant(d, e, n):
    i = np.arange(n)
    rows = np.concatenate([i, i, i])
    cols = np.concatenate([i, (i + 1) % n, (i - 1) % n])
    vals = np.concatenate([np.full(n, d), np.full(n, e), np.full(n, e)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


@dataclass(frozen=True)
class FemOperators:
    """Assembled P1 mass/stiffness and the DG0 -> P1 load map on one mesh."""

    mesh: Mesh
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    mixed_mass: sp.csr_matrix
    mass_solver: CyclicTridiagonal = field(repr=False)

    def helmholtz(self, coeff: float) -> CyclicTridiagonal:
        """Factorised ``M + coeff*K``."""
        h = self.mesh.h
        return CyclicTridiagonal(2 * h / 3 + 2 * coeff / h, h / 6 - coeff / h, self.mesh.N)


def assemble(mesh: Mesh) -> FemOperators:
    if not isinstance(mesh, Mesh):
        raise MeshError("assemble expects a Mesh")
    n, h = mesh.N, mesh.h
    mass = _circulant(2 * h / 3, h / 6, n)
    stiffness = _circulant(2 / h, -1 / h, n)
    # node i receives half of cell i-1 and half of cell i
    i = np.arange(n)
    mixed = sp.csr_matrix(
        (np.full(2 * n, h / 2), (np.concatenate([i, i]), np.concatenate([(i - 1) % n, i]))),
        shape=(n, n),
    )
    return FemOperators(mesh, mass, stiffness, mixed, CyclicTridiagonal(2 * h / 3, h / 6, n))


def _check(field_, mesh):
    a = np.asarray(field_, dtype=float)
    if a.shape != (mesh.N,):
        raise MeshError(f"field of shape {a.shape} does not live on a mesh with {mesh.N} cells")
    return a


def inner_l2(a, b, ops: FemOperators) -> float:
    """L2 inner product of two P1 fields, ``a^T M b``."""
    a = _check(a, ops.mesh)
    b = _check(b, ops.mesh)
    return float(a @ (ops.mass @ b))


def norm_l2(a, ops: FemOperators) -> float:
    return float(np.sqrt(max(inner_l2(a, a, ops), 0.0)))


def eval_at(values, x, mesh: Mesh):
    """Evaluate a P1 field at coordinates ``x`` in ``[0, L)``.

    Accepts a scalar or an array of coordinates.
    """
    values = _check(values, mesh)
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0) or np.any(xs >= mesh.L) or not np.all(np.isfinite(xs)):
        raise ValueError(f"coordinates must lie in [0, {mesh.L})")
    out = interpolation_matrix(xs.ravel(), mesh) @ values
    return float(out[0]) if xs.ndim == 0 else out.reshape(xs.shape)


def interpolation_matrix(points, mesh: Mesh) -> sp.csr_matrix:
    """Sparse ``(len(points), N)`` matrix evaluating P1 fields at ``points``."""
    pts = np.asarray(points, dtype=float)
    s = pts / mesh.h
    left = np.floor(s).astype(int)
    frac = s - left
    # points that round onto x = L sit on node 0
    left %= mesh.N
    right = (left + 1) % mesh.N
    rows = np.repeat(np.arange(pts.size), 2)
    cols = np.stack([left, right], axis=1).ravel()
    vals = np.stack([1 - frac, frac], axis=1).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(pts.size, mesh.N))
