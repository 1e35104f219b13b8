"""
Curved quadrilateral meshes.

Each element is the image of the reference square [0, 1]² under a degree-m
tensor-product Lagrange map whose control points sit at Gauss–Lobatto nodes,
stored lexicographically (index ``j*(m+1) + i``, ``i`` along ξ).

Reference faces are numbered 0 bottom (s, 0), 1 right (1, s), 2 top (s, 1),
3 left (0, s). On an interior face the unit normal points from the first
registered element (K1) to the second (K2).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.basis import gauss_legendre, gauss_lobatto, lobatto_basis, tensor_gradients, tensor_hessians, tensor_values
from core.utils.filelock import write_locked_text
from core.utils.logger import get_logger

log = get_logger("🕸️ mesh")

REFERENCE_NORMALS = np.array([[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
BOUNDARY_TAGS = ("bottom", "right", "top", "left")


class MeshError(Exception):
    """Invalid mesh construction request or mesh data."""
    pass


class DegenerateElementError(MeshError):
    """An element map has a non-positive Jacobian determinant."""
    pass


class ConnectivityError(MeshError):
    """Faces do not match up (hanging nodes or mismatched face points)."""
    pass


def face_reference_points(local_face: int, s) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    zeros, ones = np.zeros_like(s), np.ones_like(s)
    if local_face == 0:
        return np.stack([s, zeros], -1)
    if local_face == 1:
        return np.stack([ones, s], -1)
    if local_face == 2:
        return np.stack([s, ones], -1)
    if local_face == 3:
        return np.stack([zeros, s], -1)
    raise MeshError(f"local face index {local_face} out of range")


@dataclass(frozen=True)
class Face:
    elements: Tuple[int, ...]
    local_faces: Tuple[int, ...]
    flipped: bool = False
    tag: str = "interior"

    @property
    def interior(self) -> bool:
        return len(self.elements) == 2

    def side_parameter(self, s, side: int):
        """Map K1's face coordinate to the coordinate on ``side`` (0 = K1, 1 = K2)."""
        s = np.asarray(s, dtype=float)
        return 1.0 - s if (side == 1 and self.flipped) else s


@dataclass
class ElementFrame:
    """Geometry of an element map at reference points; leading axes follow the input points."""

    x: np.ndarray
    F: np.ndarray
    J: np.ndarray
    F_inv: np.ndarray
    F_inv_T: np.ndarray
    dF: Optional[np.ndarray] = None  # dF[..., a, d, c] = ∂F_ad/∂ξ_c


@dataclass
class FaceFrame:
    x: np.ndarray
    normal: np.ndarray
    dl: np.ndarray
    xi1: np.ndarray
    xi2: Optional[np.ndarray] = None


class Mesh:
    """Immutable curved quadrilateral mesh."""

    def __init__(self, order: int, points, elements, check: bool = True):
        if order < 1:
            raise MeshError("geometric degree must be at least 1")
        self.order = int(order)
        self.points = np.array(points, dtype=float)
        self.elements = np.array(elements, dtype=np.int64)
        self.points.setflags(write=False)
        self.elements.setflags(write=False)
        nb = (self.order + 1) ** 2
        if self.elements.ndim != 2 or self.elements.shape[1] != nb:
            raise MeshError(f"elements must list {nb} control points each")
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= len(self.points)):
            raise MeshError("element references a missing control point")
        self._map_basis = lobatto_basis(self.order + 1)
        self.faces: List[Face] = []
        self.element_faces = np.full((self.num_elements, 4), -1, dtype=np.int64)
        self._frame_cache: Dict[Tuple, ElementFrame] = {}
        build_face_connectivity(self)
        if check:
            self.check_jacobians()

    # ---- basic queries ----
    @property
    def num_elements(self) -> int:
        return len(self.elements)

    @property
    def interior_faces(self) -> List[int]:
        return [f for f, face in enumerate(self.faces) if face.interior]

    @property
    def boundary_faces(self) -> List[int]:
        return [f for f, face in enumerate(self.faces) if not face.interior]

    def corner_indices(self, e: int) -> Tuple[int, int, int, int]:
        """Global control points at reference corners (0,0), (1,0), (0,1), (1,1)."""
        m = self.order
        el = self.elements[e]
        return int(el[0]), int(el[m]), int(el[m * (m + 1)]), int(el[(m + 1) ** 2 - 1])

    def face_control_points(self, e: int, local_face: int) -> List[int]:
        """Control points along a local face in increasing face coordinate."""
        m = self.order
        el = self.elements[e]
        if local_face == 0:
            return [int(el[i]) for i in range(m + 1)]
        if local_face == 1:
            return [int(el[j * (m + 1) + m]) for j in range(m + 1)]
        if local_face == 2:
            return [int(el[m * (m + 1) + i]) for i in range(m + 1)]
        return [int(el[j * (m + 1)]) for j in range(m + 1)]

    # ---- element maps ----
    def _map_shapes(self, xi, hessian: bool):
        b = self._map_basis
        vals = tensor_values(b, b, xi)
        grads = tensor_gradients(b, b, xi)
        hess = tensor_hessians(b, b, xi) if hessian else None
        return vals, grads, hess

    def _frames(self, X, xi, hessian: bool) -> ElementFrame:
        vals, grads, hess = self._map_shapes(xi, hessian)
        x = np.einsum("qi,...ia->...qa", vals, X)
        F = np.einsum("qib,...ia->...qab", grads, X)
        J = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            F_inv = np.stack(
                [np.stack([F[..., 1, 1], -F[..., 0, 1]], -1), np.stack([-F[..., 1, 0], F[..., 0, 0]], -1)], -2
            ) / J[..., None, None]
        dF = np.einsum("qidc,...ia->...qadc", hess, X) if hessian else None
        return ElementFrame(x=x, F=F, J=J, F_inv=F_inv, F_inv_T=np.swapaxes(F_inv, -1, -2), dF=dF)

    def element_frame(self, e: int, xi, hessian: bool = False) -> ElementFrame:
        """
        Map data of element ``e`` at reference point(s) ``xi``.

        Raises:
            DegenerateElementError: J <= 0 at one of the points.
        """
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        pts = np.atleast_2d(xi)
        frame = self._frames(self.points[self.elements[e]], pts, hessian)
        if np.any(frame.J <= 0):
            raise DegenerateElementError(f"element {e}: non-positive Jacobian (min J = {frame.J.min():.3e})")
        if single:
            frame = ElementFrame(
                x=frame.x[0], F=frame.F[0], J=frame.J[0], F_inv=frame.F_inv[0], F_inv_T=frame.F_inv_T[0],
                dF=None if frame.dF is None else frame.dF[0],
            )
        return frame

    def all_element_frames(self, xi, hessian: bool = False) -> ElementFrame:
        """Frames for every element at the same reference points; arrays lead with (ne, nq)."""
        xi = np.ascontiguousarray(xi, dtype=float)
        key = (xi.tobytes(), xi.shape, hessian)
        frame = self._frame_cache.get(key)
        if frame is None:
            frame = self._frames(self.points[self.elements], xi, hessian)
            if np.any(frame.J <= 0):
                bad = int(np.argmin(frame.J.min(axis=1)))
                raise DegenerateElementError(f"element {bad}: non-positive Jacobian")
            self._frame_cache[key] = frame
        return frame

    def check_jacobians(self):
        xg, _ = gauss_legendre(self.order + 2)
        xi = np.stack(np.meshgrid(xg, xg, indexing="xy"), -1).reshape(-1, 2)
        corners = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        frame = self._frames(self.points[self.elements], np.vstack([xi, corners]), False)
        bad = np.nonzero(frame.J.min(axis=1) <= 0)[0]
        if len(bad):
            raise DegenerateElementError(
                f"{len(bad)} element(s) with non-positive Jacobian, first {int(bad[0])} (min J = {frame.J.min():.3e})"
            )

    # ---- faces ----
    def face_frame(self, face, s) -> FaceFrame:
        """
        Face geometry at K1's face coordinate(s) ``s``: unit normal (K1 → K2 or
        outward on the boundary), length measure, and the reference points on
        each side.

        Raises:
            ConnectivityError: the two sides do not map to the same point.
        """
        if isinstance(face, (int, np.integer)):
            face = self.faces[int(face)]
        s = np.atleast_1d(np.asarray(s, dtype=float))
        e1, lf1 = face.elements[0], face.local_faces[0]
        xi1 = face_reference_points(lf1, s)
        fr = self.element_frame(e1, xi1)
        scaled = fr.J[:, None] * np.einsum("qab,b->qa", fr.F_inv_T, REFERENCE_NORMALS[lf1])
        dl = np.linalg.norm(scaled, axis=1)
        normal = scaled / dl[:, None]
        xi2 = None
        if face.interior:
            e2, lf2 = face.elements[1], face.local_faces[1]
            xi2 = face_reference_points(lf2, face.side_parameter(s, 1))
            x2 = self.element_frame(e2, xi2).x
            scale = max(1.0, float(np.abs(fr.x).max()))
            if np.abs(x2 - fr.x).max() > 1e-10 * scale:
                raise ConnectivityError(f"face between elements {e1} and {e2}: side points disagree")
        return FaceFrame(x=fr.x, normal=normal, dl=dl, xi1=xi1, xi2=xi2)

    # ---- supplementary geometry ----
    def element_area(self, e: int) -> float:
        xg, wg = gauss_legendre(self.order + 1)
        xi = np.stack(np.meshgrid(xg, xg, indexing="xy"), -1).reshape(-1, 2)
        w = np.outer(wg, wg).ravel()
        return float(w @ self.element_frame(e, xi).J)

    def element_areas(self) -> np.ndarray:
        xg, wg = gauss_legendre(self.order + 1)
        xi = np.stack(np.meshgrid(xg, xg, indexing="xy"), -1).reshape(-1, 2)
        w = np.outer(wg, wg).ravel()
        return self.all_element_frames(xi).J @ w

    def h_max(self) -> float:
        """Largest element size, measured as √area."""
        return float(np.sqrt(self.element_areas().max()))

    def centroids(self) -> np.ndarray:
        xg, wg = gauss_legendre(self.order + 1)
        xi = np.stack(np.meshgrid(xg, xg, indexing="xy"), -1).reshape(-1, 2)
        w = np.outer(wg, wg).ravel()
        fr = self.all_element_frames(xi)
        wj = fr.J * w
        return np.einsum("eq,eqa->ea", wj, fr.x) / wj.sum(axis=1)[:, None]

    def locate(self, x, tol: float = 1e-12, max_newton: int = 50) -> Tuple[int, np.ndarray]:
        """Element containing physical point ``x`` and its reference coordinates."""
        x = np.asarray(x, dtype=float)
        ctrl = self.points[self.elements]
        lo, hi = ctrl.min(axis=1), ctrl.max(axis=1)
        pad = 1e-9 * max(1.0, float(np.abs(self.points).max()))
        candidates = np.nonzero(np.all((x >= lo - pad) & (x <= hi + pad), axis=1))[0]
        for e in candidates:
            xi = np.array([0.5, 0.5])
            for _ in range(max_newton):
                fr = self._frames(ctrl[e], xi[None, :], False)
                r = fr.x[0] - x
                if np.linalg.norm(r) < tol * max(1.0, np.linalg.norm(x)):
                    break
                xi = xi - fr.F_inv[0] @ r
                if np.any(np.abs(xi - 0.5) > 2.0):
                    break
            if np.all(xi >= -1e-9) and np.all(xi <= 1 + 1e-9):
                fr = self._frames(ctrl[e], xi[None, :], False)
                if np.linalg.norm(fr.x[0] - x) < 1e-9 * max(1.0, np.linalg.norm(x)):
                    return int(e), np.clip(xi, 0.0, 1.0)
        raise MeshError(f"point {tuple(x)} lies outside the mesh")

    def with_points(self, points) -> "Mesh":
        """Same topology, moved control points (connectivity is rebuilt and checked)."""
        return Mesh(self.order, points, self.elements)

    def __repr__(self):
        return (
            f"Mesh(order={self.order}, elements={self.num_elements}, points={len(self.points)}, "
            f"interior_faces={len(self.interior_faces)}, boundary_faces={len(self.boundary_faces)})"
        )


def build_face_connectivity(mesh: Mesh) -> List[Face]:
    """
    Register every geometric face once, keyed by its end control points.

    Raises:
        ConnectivityError: a face is shared by more than two elements, shared
            faces carry different control points, or the boundary has hanging
            nodes.
    """
    registry: Dict[Tuple[int, int], List[Tuple[int, int]]] = {}
    for e in range(mesh.num_elements):
        for lf in range(4):
            pts = mesh.face_control_points(e, lf)
            key = tuple(sorted((pts[0], pts[-1])))
            registry.setdefault(key, []).append((e, lf))

    faces: List[Face] = []
    element_faces = np.full((mesh.num_elements, 4), -1, dtype=np.int64)
    boundary_degree: Dict[int, int] = {}
    for key, sides in registry.items():
        if len(sides) > 2:
            raise ConnectivityError(f"face {key} is shared by {len(sides)} elements")
        (e1, lf1) = sides[0]
        pts1 = mesh.face_control_points(e1, lf1)
        if len(sides) == 2:
            e2, lf2 = sides[1]
            pts2 = mesh.face_control_points(e2, lf2)
            flipped = pts2[0] != pts1[0]
            if (pts2[::-1] if flipped else pts2) != pts1:
                raise ConnectivityError(f"elements {e1} and {e2} disagree on shared face control points")
            face = Face(elements=(e1, e2), local_faces=(lf1, lf2), flipped=flipped)
        else:
            face = Face(elements=(e1,), local_faces=(lf1,), tag="boundary")
            for v in key:
                boundary_degree[v] = boundary_degree.get(v, 0) + 1
        element_faces[[e for e, _ in sides], [lf for _, lf in sides]] = len(faces)
        faces.append(face)

    hanging = [v for v, d in boundary_degree.items() if d != 2]
    if hanging:
        raise ConnectivityError(f"non-conforming mesh: {len(hanging)} boundary vertex(es) with hanging connectivity")

    mesh.element_faces = element_faces
    mesh.faces = [_tag_boundary(mesh, face) if not face.interior else face for face in faces]
    return mesh.faces


def _tag_boundary(mesh: Mesh, face: Face) -> Face:
    e, lf = face.elements[0], face.local_faces[0]
    fr = mesh._frames(mesh.points[mesh.elements[e]], face_reference_points(lf, np.array([0.5])), False)
    n = fr.J[0] * (fr.F_inv_T[0] @ REFERENCE_NORMALS[lf])
    if abs(n[0]) >= abs(n[1]):
        tag = "right" if n[0] > 0 else "left"
    else:
        tag = "top" if n[1] > 0 else "bottom"
    return Face(elements=face.elements, local_faces=face.local_faces, flipped=False, tag=tag)


def _tensor_mesh(xs: Sequence[float], ys: Sequence[float], m: int) -> Mesh:
    """Mesh whose vertex lines are ``xs`` × ``ys`` with straight-sided degree-m elements."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    t, _ = gauss_lobatto(m + 1)
    gx = np.append((xs[:-1, None] + np.outer(np.diff(xs), t[:-1])).ravel(), xs[-1])
    gy = np.append((ys[:-1, None] + np.outer(np.diff(ys), t[:-1])).ravel(), ys[-1])
    npx = len(gx)
    points = np.stack(np.meshgrid(gx, gy, indexing="xy"), -1).reshape(-1, 2)
    nx, ny = len(xs) - 1, len(ys) - 1
    elements = []
    for cj in range(ny):
        for ci in range(nx):
            elements.append(
                [(cj * m + j) * npx + ci * m + i for j in range(m + 1) for i in range(m + 1)]
            )
    return Mesh(m, points, elements)


def build_cartesian_mesh(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0), m: int = 1) -> Mesh:
    """Uniform ``nx`` × ``ny`` mesh of the rectangle (xmin, xmax, ymin, ymax)."""
    if nx < 1 or ny < 1:
        raise MeshError(f"cell counts must be positive, got {nx} x {ny}")
    if m < 1:
        raise MeshError("geometric degree must be at least 1")
    x0, x1, y0, y1 = domain
    if x1 <= x0 or y1 <= y0:
        raise MeshError(f"empty domain {domain}")
    mesh = _tensor_mesh(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1), m)
    log.debug(f"🧱 Cartesian mesh {nx}x{ny}, m={m}")
    return mesh


def chebyshev_points(n: int, a: float = 0.0, b: float = 1.0) -> np.ndarray:
    k = np.arange(n)
    return a + (b - a) * 0.5 * (1.0 - np.cos(k * np.pi / (n - 1)))


def build_chebyshev_mesh(n: int, domain=(0.0, 1.0, 0.0, 1.0), m: int = 1) -> Mesh:
    """Tensor mesh whose vertex lines are ``n`` Chebyshev points per direction."""
    if n < 3:
        raise MeshError(f"Chebyshev mesh needs at least 3 points per direction, got {n}")
    x0, x1, y0, y1 = domain
    return _tensor_mesh(chebyshev_points(n, x0, x1), chebyshev_points(n, y0, y1), m)


def taylor_green_velocity(x: np.ndarray) -> np.ndarray:
    return np.stack(
        [np.sin(x[..., 0]) * np.cos(x[..., 1]), -np.cos(x[..., 0]) * np.sin(x[..., 1])], -1
    )


def distort_taylor_green(mesh: Mesh, t_final: float, n_steps: int, cell_scaled: bool = False) -> Mesh:
    """
    Advect the control points with the Taylor–Green vortex by ``n_steps``
    forward-Euler steps over [0, t_final].

    With ``cell_scaled`` the bounding box is first mapped onto [0, π]², which
    keeps the domain boundary in place; otherwise coordinates are used as is.

    Raises:
        DegenerateElementError: the distorted mesh has J <= 0 somewhere.
    """
    if n_steps < 1:
        raise MeshError("n_steps must be at least 1")
    pts = np.array(mesh.points, dtype=float)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if cell_scaled:
        pts = (pts - lo) / (hi - lo) * np.pi
    dt = t_final / n_steps
    for _ in range(n_steps):
        pts = pts + dt * taylor_green_velocity(pts)
    if cell_scaled:
        pts = lo + pts / np.pi * (hi - lo)
    try:
        distorted = mesh.with_points(pts)
    except DegenerateElementError as e:
        log.error(f"❌ Taylor–Green distortion to t={t_final:.4g} tangled the mesh: {e}")
        raise
    log.debug(f"🌀 Taylor–Green distortion t={t_final:.4g}, {n_steps} steps")
    return distorted


# ---- text I/O ----

def write_mesh(mesh: Mesh, path) -> Path:
    """
    Line-oriented mesh format::

        # smmrad2d mesh
        order <m> points <N> elements <E>
        <x> <y>                       (N lines)
        <i0> <i1> ... <i_(m+1)^2-1>   (E lines)
    """
    lines = ["# smmrad2d mesh", f"order {mesh.order} points {len(mesh.points)} elements {mesh.num_elements}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.points.tolist()]
    lines += [" ".join(str(i) for i in el) for el in mesh.elements.tolist()]
    return write_locked_text(path, "\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    rows = [ln.split() for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    try:
        head = rows[0]
        m, npts, nel = int(head[1]), int(head[3]), int(head[5])
        points = [[float(v) for v in r] for r in rows[1 : 1 + npts]]
        elements = [[int(v) for v in r] for r in rows[1 + npts : 1 + npts + nel]]
    except (IndexError, ValueError) as e:
        raise MeshError(f"malformed mesh file {path}: {e}")
    if len(points) != npts or len(elements) != nel:
        raise MeshError(f"malformed mesh file {path}: truncated")
    return Mesh(m, points, elements)
