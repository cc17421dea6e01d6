"""Quasi-static spring-lattice model of a soft box.

The box is a regular lattice with axis-aligned, face-diagonal and
cell-diagonal springs. One face can be clamped (the holding arm) and a patch
of surface vertices can be attached to a movable grasp (the manipulating
gripper). :func:`solve_equilibrium` returns the elastic equilibrium for the
current boundary conditions; there are no dynamics, contacts or gravity.

Stiffness ``k = E * A / L`` uses each cell's share of the cross-section
``A = V_cell / (4 L)``. Poisson's ratio only enters through the diagonal
springs, whose share is scaled by ``1 / (2 (1 + nu))`` (the shear-to-Young
ratio of an isotropic solid). This is a lattice approximation, not FEM.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

from .errors import ConvergenceError, GraspConflictError, GraspMissError, ParameterError, StateError
from .geom import PointCloud, fps

DEFAULT_DIMS = (0.2, 0.1, 0.05)
DEFAULT_RESOLUTION = (8, 4, 2)
DEFAULT_MAX_STEP = 0.02
DEFAULT_TOL = 1e-8
DEFAULT_CLOUD_SIZE = 2048
OVERSAMPLE = 4

_ARMIJO = 1e-4
# relative energy change treated as rounding noise
_FLAT = 1e-13


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 1000.0
    poisson_ratio: float = 0.3

    def __post_init__(self):
        if not self.young_modulus > 0:
            raise ParameterError("young_modulus must be positive")
        if not 0.0 <= self.poisson_ratio < 0.5:
            raise ParameterError("poisson_ratio must lie in [0, 0.5)")

    @property
    def diagonal_ratio(self) -> float:
        return 1.0 / (2.0 * (1.0 + self.poisson_ratio))


@dataclass
class GraspHandle:
    vertices: np.ndarray
    grasp_center: np.ndarray
    current_offset: np.ndarray
    anchors: np.ndarray  # vertex positions at grasp time

    def targets(self) -> np.ndarray:
        return self.anchors + self.current_offset


@dataclass
class MoveResult:
    applied: np.ndarray
    clamped: bool


@dataclass
class SpringMesh:
    rest_positions: np.ndarray
    positions: np.ndarray
    springs_i: np.ndarray
    springs_j: np.ndarray
    rest_length: np.ndarray
    stiffness: np.ndarray
    resolution: Tuple[int, int, int]
    dims: Tuple[float, float, float]
    material: MaterialParams = field(default_factory=MaterialParams)
    clamped: Set[int] = field(default_factory=set)
    attachment: Optional[GraspHandle] = None
    energy_history: List[float] = field(default_factory=list)
    _cloud_cache: Dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def springs(self):
        return list(zip(self.springs_i.tolist(), self.springs_j.tolist(),
                        self.rest_length.tolist(), self.stiffness.tolist()))

    def grid_index(self, i, j, k):
        nx, ny, nz = self.resolution
        return (np.asarray(i) * (ny + 1) + np.asarray(j)) * (nz + 1) + np.asarray(k)

    def grid_coords(self) -> np.ndarray:
        nx, ny, nz = self.resolution
        return np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1),
                                    indexing="ij"), axis=-1).reshape(-1, 3)

    def surface_mask(self) -> np.ndarray:
        g = self.grid_coords()
        return np.any((g == 0) | (g == np.asarray(self.resolution)), axis=1)

    def diagonal(self) -> float:
        return float(np.linalg.norm(self.dims))

    def copy(self) -> "SpringMesh":
        h = self.attachment
        att = None if h is None else GraspHandle(h.vertices.copy(), h.grasp_center.copy(),
                                                  h.current_offset.copy(), h.anchors.copy())
        out = SpringMesh(self.rest_positions, self.positions.copy(), self.springs_i, self.springs_j,
                         self.rest_length, self.stiffness, self.resolution, self.dims, self.material,
                         set(self.clamped), att)
        out._cloud_cache = self._cloud_cache
        return out


def build_box(dims=DEFAULT_DIMS, resolution=DEFAULT_RESOLUTION, material: MaterialParams = MaterialParams(),
              origin=(0.0, 0.0, 0.0)) -> SpringMesh:
    """Regular (nx+1)(ny+1)(nz+1) spring lattice filling an axis-aligned box."""
    dims = tuple(float(d) for d in dims)
    resolution = tuple(int(r) for r in resolution)
    if len(dims) != 3 or len(resolution) != 3 or min(dims) <= 0 or min(resolution) < 1:
        raise ParameterError(f"invalid box dims {dims} / resolution {resolution}")
    nx, ny, nz = resolution
    h = np.asarray(dims) / np.asarray(resolution)
    g = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"),
                 axis=-1).reshape(-1, 3)
    rest = g * h + np.asarray(origin, dtype=np.float64)

    def vid(c):
        return (c[..., 0] * (ny + 1) + c[..., 1]) * (nz + 1) + c[..., 2]

    cells = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"),
                     axis=-1).reshape(-1, 3)
    corners = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    pairs, diag = [], []
    for p in range(8):
        for q in range(p + 1, 8):
            n_diff = int(np.sum(corners[p] != corners[q]))
            pairs.append((p, q))
            diag.append(n_diff > 1)
    pairs = np.array(pairs)
    diag = np.array(diag)
    vi = vid(cells[:, None, :] + corners[pairs[:, 0]][None])
    vj = vid(cells[:, None, :] + corners[pairs[:, 1]][None])
    L = np.linalg.norm((corners[pairs[:, 1]] - corners[pairs[:, 0]]) * h, axis=1)
    vol = float(np.prod(h))
    share = np.where(diag, material.diagonal_ratio, 1.0) * vol / (4.0 * L)
    k_cell = material.young_modulus * share / L
    a, b = np.minimum(vi, vj).ravel(), np.maximum(vi, vj).ravel()
    keys = a * len(rest) + b
    uniq, inv = np.unique(keys, return_inverse=True)
    k = np.bincount(inv, weights=np.broadcast_to(k_cell, vi.shape).ravel())
    si, sj = uniq // len(rest), uniq % len(rest)
    rl = np.linalg.norm(rest[si] - rest[sj], axis=1)
    return SpringMesh(rest, rest.copy(), si, sj, rl, k, resolution, dims, material)


_FACES = {"-x": (0, 0), "+x": (0, 1), "-y": (1, 0), "+y": (1, 1), "-z": (2, 0), "+z": (2, 1)}


def face_vertices(mesh: SpringMesh, face: str) -> np.ndarray:
    if face not in _FACES:
        raise ParameterError(f"face must be one of {sorted(_FACES)}, got {face!r}")
    axis, side = _FACES[face]
    g = mesh.grid_coords()
    return np.flatnonzero(g[:, axis] == (mesh.resolution[axis] if side else 0))


def clamp_face(mesh: SpringMesh, face: str = "-x") -> SpringMesh:
    """Fix every vertex of a boundary face (set semantics, idempotent)."""
    verts = face_vertices(mesh, face)
    if mesh.attachment is not None and np.intersect1d(verts, mesh.attachment.vertices).size:
        raise GraspConflictError("face overlaps the grasped vertices")
    mesh.clamped.update(int(v) for v in verts)
    return mesh


def grasp(mesh: SpringMesh, point, radius: float) -> GraspHandle:
    """Attach every surface vertex within ``radius`` of ``point``."""
    if not radius > 0:
        raise ParameterError("grasp radius must be positive")
    point = np.asarray(point, dtype=np.float64)
    surf = np.flatnonzero(mesh.surface_mask())
    d = np.linalg.norm(mesh.positions[surf] - point, axis=1)
    verts = surf[d <= radius]
    if verts.size == 0:
        raise GraspMissError(f"no surface vertex within {radius} m of {point.tolist()}")
    if mesh.clamped.intersection(verts.tolist()):
        raise GraspConflictError("grasp overlaps clamped vertices")
    handle = GraspHandle(verts, point.copy(), np.zeros(3), mesh.positions[verts].copy())
    mesh.attachment = handle
    return handle


def move_grasp(mesh: SpringMesh, handle: GraspHandle, delta, max_step: Optional[float] = DEFAULT_MAX_STEP) -> MoveResult:
    """Shift the grasp target by ``delta`` (clamped to ``max_step`` in norm).

    The attached vertices follow rigidly on the next solve.
    """
    if mesh.attachment is not handle:
        raise StateError("handle is not attached to this mesh")
    delta = np.asarray(delta, dtype=np.float64)
    clamped = False
    norm = float(np.linalg.norm(delta))
    if max_step is not None and norm > max_step:
        delta = delta * (max_step / norm)
        clamped = True
    handle.current_offset = handle.current_offset + delta
    return MoveResult(delta, clamped)


def release(mesh: SpringMesh) -> None:
    mesh.attachment = None


def _constrained(mesh: SpringMesh) -> np.ndarray:
    mask = np.zeros(mesh.n_vertices, dtype=bool)
    if mesh.clamped:
        mask[list(mesh.clamped)] = True
    if mesh.attachment is not None:
        mask[mesh.attachment.vertices] = True
    return mask


def spring_energy(mesh: SpringMesh, x: np.ndarray) -> float:
    d = x[mesh.springs_i] - x[mesh.springs_j]
    l = np.sqrt(np.sum(d * d, axis=1))
    s = l - mesh.rest_length
    return 0.5 * float(np.sum(mesh.stiffness * s * s))


def _grad_hess(mesh: SpringMesh, x: np.ndarray, projected: bool = True):
    si, sj, k, L = mesh.springs_i, mesh.springs_j, mesh.stiffness, mesh.rest_length
    d = x[si] - x[sj]
    l = np.sqrt(np.sum(d * d, axis=1))
    n = d / l[:, None]
    f = (k * (l - L))[:, None] * n
    N = mesh.n_vertices
    grad = np.zeros((N, 3))
    np.add.at(grad, si, f)
    np.add.at(grad, sj, -f)
    # spring Hessian k [n n^T + (1 - L/l) (I - n n^T)]; the projected (PSD) form clips the
    # transverse term of compressed springs at zero
    t = 1.0 - L / l
    if projected:
        t = np.maximum(t, 0.0)
    nn = n[:, :, None] * n[:, None, :]
    blk = k[:, None, None] * (nn + t[:, None, None] * (np.eye(3)[None] - nn))
    r = np.arange(3)
    ri = (3 * si[:, None] + r)[:, :, None]
    rj = (3 * sj[:, None] + r)[:, :, None]
    ci = (3 * si[:, None] + r)[:, None, :]
    cj = (3 * sj[:, None] + r)[:, None, :]
    rows = np.concatenate([np.broadcast_to(a, blk.shape).ravel() for a in (ri, rj, ri, rj)])
    cols = np.concatenate([np.broadcast_to(b, blk.shape).ravel() for b in (ci, cj, cj, ci)])
    vals = np.concatenate([blk.ravel(), blk.ravel(), -blk.ravel(), -blk.ravel()])
    H = sp.csr_matrix((vals, (rows, cols)), shape=(3 * N, 3 * N))
    return grad, H


def _newton_step(H, free_dof, gf, anchored: bool):
    """Solve H_ff step = -g_f by Cholesky; None if H_ff is not positive definite."""
    Hff = H[free_dof][:, free_dof].toarray()
    if not anchored:
        Hff[np.diag_indices_from(Hff)] += 1e-12 * Hff.diagonal().max()
    try:
        c = sla.cho_factor(Hff)
    except np.linalg.LinAlgError:
        return None
    return sla.cho_solve(c, -gf)


def solve_equilibrium(mesh: SpringMesh, tol: float = DEFAULT_TOL, max_iters: int = 500) -> float:
    """Damped Newton solve for the free vertices; returns the final residual force norm (N).

    Clamped vertices stay where they are, attached vertices are placed on
    their grasp targets. Accepted iterates have non-increasing spring energy
    (Armijo backtracking, up to rounding once the energy is flat); the
    energy trace is kept in ``mesh.energy_history``.
    """
    if not tol > 0:
        raise ParameterError("tol must be positive")
    x = mesh.positions.copy()
    if mesh.attachment is not None:
        x[mesh.attachment.vertices] = mesh.attachment.targets()
    fixed = _constrained(mesh)
    free_dof = np.repeat(~fixed, 3)
    E = spring_energy(mesh, x)
    mesh.energy_history = [E]
    residual = np.inf
    for it in range(max_iters + 1):
        grad, H = _grad_hess(mesh, x, projected=False)
        gf = grad.ravel()[free_dof]
        residual = float(np.linalg.norm(gf))
        if residual <= tol or it == max_iters:
            break
        # exact Newton where the Hessian is positive definite, projected (PSD) Hessian otherwise
        step = _newton_step(H, free_dof, gf, fixed.any())
        if step is None:
            step = _newton_step(_grad_hess(mesh, x)[1], free_dof, gf, fixed.any())
        if step is None:
            # only a singular unanchored lattice lands here; fall back to gradient descent
            step = -gf / np.max(_grad_hess(mesh, x)[1].diagonal())
        slope = float(gf @ step)
        alpha = 1.0
        accepted = False
        for _ in range(40):
            xn = x.copy()
            xn.reshape(-1)[free_dof] += alpha * step
            En = spring_energy(mesh, xn)
            if En <= E + _ARMIJO * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # energy is flat to rounding: fall back to the residual as merit function
            xn = x.copy()
            xn.reshape(-1)[free_dof] += step
            En = spring_energy(mesh, xn)
            gn = _grad_hess(mesh, xn)[0].ravel()[free_dof]
            if En > E + _FLAT * abs(E) or np.linalg.norm(gn) >= residual:
                break
        x, E = xn, En
        mesh.energy_history.append(E)
    mesh.positions = x
    if residual > tol:
        raise ConvergenceError(residual, max_iters)
    return residual


# --- surface sampling ---------------------------------------------------------

def boundary_quads(mesh: SpringMesh) -> np.ndarray:
    """Outward-facing boundary quads as (q, 4) vertex ids (counter-clockwise seen from outside)."""
    nx, ny, nz = mesh.resolution
    quads = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            fixed_val = mesh.resolution[axis] if side else 0
            for a in range(mesh.resolution[u]):
                for b in range(mesh.resolution[v]):
                    cs = []
                    for da, db in ((0, 0), (1, 0), (1, 1), (0, 1)):
                        c = [0, 0, 0]
                        c[axis], c[u], c[v] = fixed_val, a + da, b + db
                        cs.append(int(mesh.grid_index(*c)))
                    # orientation: (u, v, axis) right-handed when axis == 1 is flipped
                    flip = (side == 0) != (axis == 1)
                    quads.append(cs[::-1] if flip else cs)
    return np.array(quads, dtype=np.int64)


def boundary_triangles(mesh: SpringMesh) -> np.ndarray:
    q = boundary_quads(mesh)
    return np.concatenate([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])


def _cloud_plan(mesh: SpringMesh, n: int, seed: int):
    key = (n, seed)
    if key not in mesh._cloud_cache:
        tris = boundary_triangles(mesh)
        r = mesh.rest_positions
        a, b, c = r[tris[:, 0]], r[tris[:, 1]], r[tris[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        rng = np.random.default_rng(seed)
        m = OVERSAMPLE * n
        t = rng.choice(len(tris), size=m, p=area / area.sum())
        s1 = np.sqrt(rng.random(m))
        s2 = rng.random(m)
        bary = np.stack([1.0 - s1, s1 * (1.0 - s2), s1 * s2], axis=1)
        verts = tris[t]
        rest_pts = np.einsum("mk,mkd->md", bary, r[verts])
        keep = fps(rest_pts, n, 0)
        verts, bary, rest_pts = verts[keep], bary[keep], rest_pts[keep]
        dist = np.linalg.norm(r[verts] - rest_pts[:, None, :], axis=2)
        src = verts[np.arange(n), dist.argmin(axis=1)]
        mesh._cloud_cache[key] = (verts, bary, src)
    return mesh._cloud_cache[key]


def surface_cloud(mesh: SpringMesh, n: int = DEFAULT_CLOUD_SIZE, seed: int = 0) -> PointCloud:
    """Point cloud of the current surface.

    Points are drawn uniformly by rest-state area over the boundary triangles
    (``OVERSAMPLE * n`` candidates), reduced to ``n`` by farthest point
    sampling on their rest positions, and carried to the current state by
    barycentric interpolation. The same seed therefore tracks the same
    material points across deformations.
    """
    if n < 1:
        raise ParameterError("cloud size must be >= 1")
    verts, bary, src = _cloud_plan(mesh, n, seed)
    pts = np.einsum("mk,mkd->md", bary, mesh.positions[verts])
    return PointCloud(pts, src)


def export_obj(mesh: SpringMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.positions]
    lines += ["f " + " ".join(str(i + 1) for i in q) for q in boundary_quads(mesh)]
    Path(path).write_text("\n".join(lines) + "\n")


def closest_surface_point(mesh: SpringMesh, point) -> np.ndarray:
    """Closest point on the current boundary surface (triangle-wise projection)."""
    p = np.asarray(point, dtype=np.float64)
    tris = boundary_triangles(mesh)
    x = mesh.positions
    best, best_d = None, np.inf
    for a, b, c in zip(x[tris[:, 0]], x[tris[:, 1]], x[tris[:, 2]]):
        q = _closest_on_triangle(p, a, b, c)
        d = float(np.sum((q - p) ** 2))
        if d < best_d:
            best, best_d = q, d
    return best


def _closest_on_triangle(p, a, b, c):
    # Ericson, Real-Time Collision Detection, 5.1.5
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)
