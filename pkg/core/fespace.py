"""
Finite element spaces on curved quadrilateral meshes.

    DG        Y_p   discontinuous Q_p, nodal at Gauss–Legendre points
    CG        V_p   continuous Q_p, nodal at Gauss–Lobatto points
    RT        RT_p  Q_{p+1,p} × Q_{p,p+1} under the contravariant Piola map,
                    normal components shared across interior faces
    BrokenRT        same local space, every unknown element-local
    Trace     Λ_p   degree-p polynomials on interior faces

RT unknowns are point values of the reference normal component (face
unknowns, scaled so each equals the outward flux density of its element) and
of interior components. A global RT function restricted to the second element
of a face carries sign -1 on that face's unknowns.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from core.basis import (
    gauss_legendre,
    legendre_node_basis,
    lobatto_basis,
    tensor_gradients,
    tensor_values,
)
from core.mesh import Mesh
from core.utils.filelock import write_locked_text
from core.utils.logger import get_logger

log = get_logger("📐 fespace")

SPACE_KINDS = ("DG", "CG", "RT", "BrokenRT", "Trace")


class SpaceError(Exception):
    """Unsupported space request or mismatched finite element data."""
    pass


# ---- quadrature ----

@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    order: int
    domain: str


@lru_cache(maxsize=None)
def make_quadrature(order: int, domain: str = "square") -> QuadratureRule:
    """Tensor Gauss–Legendre rule on [0,1] or [0,1]² exact to polynomial degree ``order``."""
    if order < 0:
        raise SpaceError(f"quadrature order must be non-negative, got {order}")
    n = max(1, math.ceil((order + 1) / 2))
    x, w = gauss_legendre(n)
    if domain == "segment":
        pts, wts = x.copy(), w.copy()
    elif domain == "square":
        pts = np.stack(np.meshgrid(x, x, indexing="xy"), -1).reshape(-1, 2)
        wts = np.outer(w, w).ravel()
    else:
        raise SpaceError(f"unknown quadrature domain '{domain}'")
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(points=pts, weights=wts, order=order, domain=domain)


# ---- shape evaluation results ----

@dataclass
class ShapeEval:
    """Basis data at points; ``values`` (nq, nloc[, 2]), ``gradients`` (nq, nloc, ...)."""

    values: np.ndarray
    gradients: np.ndarray
    divergence: Optional[np.ndarray] = None
    B_hat: Optional[np.ndarray] = None


@dataclass
class VolumeData:
    """Physical basis data of every element on one reference rule; arrays lead with (ne, nq)."""

    rule: QuadratureRule
    x: np.ndarray
    wJ: np.ndarray
    values: np.ndarray
    gradients: np.ndarray
    divergence: Optional[np.ndarray] = None


class FiniteElementSpace:
    kind: str = ""

    def __init__(self, mesh: Mesh, p: int):
        self.mesh = mesh
        self.p = int(p)
        self.element_dofs = np.zeros((mesh.num_elements, 0), dtype=np.int64)
        self.signs = np.ones((mesh.num_elements, 0))
        self.ndofs = 0
        self._volume_cache: Dict[int, VolumeData] = {}

    @property
    def nloc(self) -> int:
        return self.element_dofs.shape[1]

    def default_order(self) -> int:
        return 2 * self.p + 2 * self.mesh.order

    def local_coefficients(self, data: np.ndarray) -> np.ndarray:
        """Gather global coefficients per element, signs applied; shape (ne, nloc, ...)."""
        local = np.asarray(data)[self.element_dofs]
        s = self.signs.reshape(self.signs.shape + (1,) * (local.ndim - 2))
        return local * s

    def descriptor(self) -> str:
        return f"{self.kind} {self.p} {self.ndofs}"

    def __repr__(self):
        return f"{type(self).__name__}(kind={self.kind}, p={self.p}, ndofs={self.ndofs})"


class ScalarSpace(FiniteElementSpace):
    """Nodal tensor-product Q_p space (DG or CG)."""

    def __init__(self, mesh: Mesh, p: int, continuous: bool):
        super().__init__(mesh, p)
        self.kind = "CG" if continuous else "DG"
        self.basis1d = lobatto_basis(p + 1) if continuous else legendre_node_basis(p + 1)
        nloc = (p + 1) ** 2
        if continuous:
            self.element_dofs, self.ndofs = _number_cg(mesh, p)
        else:
            self.element_dofs = np.arange(mesh.num_elements * nloc, dtype=np.int64).reshape(-1, nloc)
            self.ndofs = mesh.num_elements * nloc
        self.signs = np.ones(self.element_dofs.shape)

    def reference_values(self, xi) -> np.ndarray:
        return tensor_values(self.basis1d, self.basis1d, np.atleast_2d(xi))

    def reference_gradients(self, xi) -> np.ndarray:
        return tensor_gradients(self.basis1d, self.basis1d, np.atleast_2d(xi))

    def eval_shape(self, e: int, xi) -> ShapeEval:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        frame = self.mesh.element_frame(e, xi)
        grads = np.einsum("qab,qib->qia", frame.F_inv_T, self.reference_gradients(xi))
        return ShapeEval(values=self.reference_values(xi), gradients=grads)

    def volume_data(self, order: Optional[int] = None) -> VolumeData:
        order = self.default_order() if order is None else order
        if order not in self._volume_cache:
            rule = make_quadrature(order)
            frame = self.mesh.all_element_frames(rule.points)
            grads = np.einsum("eqab,qib->eqia", frame.F_inv_T, self.reference_gradients(rule.points))
            self._volume_cache[order] = VolumeData(
                rule=rule, x=frame.x, wJ=frame.J * rule.weights, values=self.reference_values(rule.points), gradients=grads
            )
        return self._volume_cache[order]

    def nodal_weights(self) -> np.ndarray:
        """∫_K ℓ_i dx per element and local node, shape (ne, nloc)."""
        vd = self.volume_data()
        return vd.wJ @ vd.values

    def node_points(self) -> np.ndarray:
        """Physical node positions, shape (ne, nloc, 2)."""
        x1 = self.basis1d.nodes
        xi = np.stack(np.meshgrid(x1, x1, indexing="xy"), -1).reshape(-1, 2)
        return self.mesh.all_element_frames(xi).x


class RTSpace(FiniteElementSpace):
    """Raviart–Thomas space of index p (conforming, or broken when ``broken``)."""

    def __init__(self, mesh: Mesh, p: int, broken: bool = False):
        super().__init__(mesh, p)
        self.kind = "BrokenRT" if broken else "RT"
        self.closed = lobatto_basis(p + 2)
        self.open = legendre_node_basis(p + 1)
        self.n_x = (p + 2) * (p + 1)
        nloc = 2 * self.n_x
        self.local_sign = np.ones(nloc)
        self.face_dof_map = np.zeros((4, p + 1), dtype=np.int64)
        for t in range(p + 1):
            self.face_dof_map[3, t] = t * (p + 2)                       # x-component, i = 0
            self.face_dof_map[1, t] = t * (p + 2) + p + 1               # x-component, i = p+1
            self.face_dof_map[0, t] = self.n_x + t                      # y-component, j = 0
            self.face_dof_map[2, t] = self.n_x + (p + 1) * (p + 1) + t  # y-component, j = p+1
        self.local_sign[self.face_dof_map[3]] = -1.0
        self.local_sign[self.face_dof_map[0]] = -1.0
        if broken:
            self.element_dofs = np.arange(mesh.num_elements * nloc, dtype=np.int64).reshape(-1, nloc)
            self.ndofs = mesh.num_elements * nloc
            self.signs = np.ones(self.element_dofs.shape)
        else:
            self.element_dofs, self.signs, self.ndofs = _number_rt(mesh, p, self.face_dof_map, nloc)

    def reference_shapes(self, xi):
        """Reference values (nq, nloc, 2), gradients (nq, nloc, 2, 2) [component, derivative], divergence."""
        xi = np.atleast_2d(xi)
        nq, p = len(xi), self.p
        cx, cdx = self.closed.values(xi[:, 0]), self.closed.derivatives(xi[:, 0])
        ox, odx = self.open.values(xi[:, 0]), self.open.derivatives(xi[:, 0])
        cy, cdy = self.closed.values(xi[:, 1]), self.closed.derivatives(xi[:, 1])
        oy, ody = self.open.values(xi[:, 1]), self.open.derivatives(xi[:, 1])

        # x-component: closed in ξ (i = 0..p+1), open in η (j = 0..p)
        vx = (oy[:, :, None] * cx[:, None, :]).reshape(nq, -1)
        vx_dxi = (oy[:, :, None] * cdx[:, None, :]).reshape(nq, -1)
        vx_deta = (ody[:, :, None] * cx[:, None, :]).reshape(nq, -1)
        # y-component: open in ξ (i = 0..p), closed in η (j = 0..p+1)
        vy = (cy[:, :, None] * ox[:, None, :]).reshape(nq, -1)
        vy_dxi = (cy[:, :, None] * odx[:, None, :]).reshape(nq, -1)
        vy_deta = (cdy[:, :, None] * ox[:, None, :]).reshape(nq, -1)

        zx, zy = np.zeros_like(vx), np.zeros_like(vy)
        values = np.concatenate([np.stack([vx, zx], -1), np.stack([zy, vy], -1)], axis=1)
        grad_x = np.stack([np.stack([vx_dxi, vx_deta], -1), np.stack([zx, zx], -1)], -2)
        grad_y = np.stack([np.stack([zy, zy], -1), np.stack([vy_dxi, vy_deta], -1)], -2)
        grads = np.concatenate([grad_x, grad_y], axis=1)
        div = np.concatenate([vx_dxi, vy_deta], axis=1)
        s = self.local_sign
        return values * s[None, :, None], grads * s[None, :, None, None], div * s[None, :]

    @staticmethod
    def piola(frame, vhat, ghat, divhat):
        """
        Contravariant Piola map of reference basis data.

        Returns physical values, full physical gradients ∇v (including the
        curvature term), divergence, and B̂ = -J F⁻¹ H where H collects the
        derivatives of F/J.
        """
        F, J, F_inv = frame.F, frame.J, frame.F_inv
        v = np.einsum("...qad,qid->...qia", F, vhat) / J[..., None, None]
        div = divhat / J[..., None]
        A = np.einsum("...qad,qidc->...qiac", F, ghat) / J[..., None, None, None]
        if frame.dF is not None:
            tau = np.einsum("...qkl,...qlkc->...qc", F_inv, frame.dF)
            K = (frame.dF - F[..., None] * tau[..., None, None, :]) / J[..., None, None, None]
            H = np.einsum("...qadc,qid->...qiac", K, vhat)
        else:
            H = np.zeros_like(A)
        grads = np.einsum("...qiac,...qcb->...qiab", A + H, F_inv)
        B_hat = -J[..., None, None, None] * np.einsum("...qac,...qicb->...qiab", F_inv, H)
        return v, grads, div, B_hat

    def eval_shape(self, e: int, xi) -> ShapeEval:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        frame = self.mesh.element_frame(e, xi, hessian=True)
        v, g, d, B = self.piola(frame, *self.reference_shapes(xi))
        return ShapeEval(values=v, gradients=g, divergence=d, B_hat=B)

    def volume_data(self, order: Optional[int] = None) -> VolumeData:
        order = self.default_order() + 2 if order is None else order
        if order not in self._volume_cache:
            rule = make_quadrature(order)
            frame = self.mesh.all_element_frames(rule.points, hessian=True)
            v, g, d, _ = self.piola(frame, *self.reference_shapes(rule.points))
            self._volume_cache[order] = VolumeData(
                rule=rule, x=frame.x, wJ=frame.J * rule.weights, values=v, gradients=g, divergence=d
            )
        return self._volume_cache[order]


class TraceSpace(FiniteElementSpace):
    """Degree-p polynomials on interior faces, nodal at Gauss points in K1's face coordinate."""

    def __init__(self, mesh: Mesh, p: int):
        super().__init__(mesh, p)
        self.kind = "Trace"
        self.basis1d = legendre_node_basis(p + 1)
        self.faces = np.array(mesh.interior_faces, dtype=np.int64)
        self.face_index = {int(f): k for k, f in enumerate(self.faces)}
        self.face_dofs = np.arange(len(self.faces) * (p + 1), dtype=np.int64).reshape(-1, p + 1)
        self.ndofs = self.face_dofs.size
        self.element_dofs = np.zeros((mesh.num_elements, 0), dtype=np.int64)
        self.signs = np.zeros((mesh.num_elements, 0))

    def values(self, s) -> np.ndarray:
        return self.basis1d.values(np.atleast_1d(s))

    def dofs_of_face(self, face: int) -> np.ndarray:
        try:
            return self.face_dofs[self.face_index[int(face)]]
        except KeyError:
            raise SpaceError(f"face {face} is not an interior face")


def make_space(mesh: Mesh, kind: str, p: int) -> FiniteElementSpace:
    """
    Raises:
        SpaceError: unknown kind or unsupported degree.
    """
    if kind not in SPACE_KINDS:
        raise SpaceError(f"unknown space kind '{kind}' (expected one of {', '.join(SPACE_KINDS)})")
    if p < 0 or (kind == "CG" and p < 1):
        raise SpaceError(f"{kind} space does not support degree {p}")
    if kind == "DG":
        space = ScalarSpace(mesh, p, continuous=False)
    elif kind == "CG":
        space = ScalarSpace(mesh, p, continuous=True)
    elif kind == "RT":
        space = RTSpace(mesh, p)
    elif kind == "BrokenRT":
        space = RTSpace(mesh, p, broken=True)
    else:
        space = TraceSpace(mesh, p)
    log.debug(f"📦 {space!r} on {mesh.num_elements} elements")
    return space


def _element_face_side(mesh: Mesh, e: int, lf: int) -> Tuple[int, int, bool]:
    f = int(mesh.element_faces[e, lf])
    face = mesh.faces[f]
    side = 0 if (face.elements[0] == e and face.local_faces[0] == lf) else 1
    return f, side, face.flipped


def _number_cg(mesh: Mesh, p: int):
    numbering: Dict[tuple, int] = {}
    element_dofs = np.zeros((mesh.num_elements, (p + 1) ** 2), dtype=np.int64)
    for e in range(mesh.num_elements):
        corners = mesh.corner_indices(e)
        for j in range(p + 1):
            for i in range(p + 1):
                on_x = i in (0, p)
                on_y = j in (0, p)
                if on_x and on_y:
                    key = ("v", corners[(1 if i == p else 0) + (2 if j == p else 0)])
                elif on_x or on_y:
                    if on_y:
                        lf, t = (0 if j == 0 else 2), i
                    else:
                        lf, t = (3 if i == 0 else 1), j
                    f, side, flipped = _element_face_side(mesh, e, lf)
                    key = ("f", f, p - t if (side == 1 and flipped) else t)
                else:
                    key = ("e", e, i, j)
                element_dofs[e, j * (p + 1) + i] = numbering.setdefault(key, len(numbering))
    return element_dofs, len(numbering)


def _number_rt(mesh: Mesh, p: int, face_dof_map: np.ndarray, nloc: int):
    numbering: Dict[tuple, int] = {}
    element_dofs = np.zeros((mesh.num_elements, nloc), dtype=np.int64)
    signs = np.ones((mesh.num_elements, nloc))
    face_of = {}
    for lf in range(4):
        for t in range(p + 1):
            face_of[int(face_dof_map[lf, t])] = (lf, t)
    for e in range(mesh.num_elements):
        for k in range(nloc):
            if k in face_of:
                lf, t = face_of[k]
                f, side, flipped = _element_face_side(mesh, e, lf)
                key = ("f", f, p - t if (side == 1 and flipped) else t)
                signs[e, k] = 1.0 if side == 0 else -1.0
            else:
                key = ("e", e, k)
            element_dofs[e, k] = numbering.setdefault(key, len(numbering))
    return element_dofs, signs, len(numbering)


# ---- grid functions ----

class GridFunction:
    """Coefficients over a space; ``data`` has shape (ndofs, *value_shape)."""

    def __init__(self, space: FiniteElementSpace, data: Optional[np.ndarray] = None, value_shape: Tuple[int, ...] = ()):
        self.space = space
        if data is None:
            data = np.zeros((space.ndofs,) + tuple(value_shape))
        data = np.asarray(data, dtype=float)
        if data.shape[0] != space.ndofs:
            raise SpaceError(f"coefficient length {data.shape[0]} does not match {space.ndofs} unknowns")
        self.data = data

    @property
    def value_shape(self) -> Tuple[int, ...]:
        return self.data.shape[1:]

    def local(self, e: Optional[int] = None) -> np.ndarray:
        local = self.space.local_coefficients(self.data)
        return local if e is None else local[e]

    def eval(self, e: int, xi) -> np.ndarray:
        """Values at reference points of element ``e``: (nq, *value_shape) or (nq, 2) for RT."""
        shapes = self.space.eval_shape(e, xi)
        c = self.local(e)
        if isinstance(self.space, RTSpace):
            return np.einsum("qia,i->qa", shapes.values, c)
        return np.tensordot(shapes.values, c, axes=(1, 0))

    def gradient(self, e: int, xi) -> np.ndarray:
        if not isinstance(self.space, ScalarSpace):
            raise SpaceError("gradient is defined for scalar nodal spaces")
        shapes = self.space.eval_shape(e, xi)
        return np.einsum("qia,i...->q...a", shapes.gradients, self.local(e))

    def eval_volume(self, vd: VolumeData) -> np.ndarray:
        """Values on every element of a volume rule, shape (ne, nq, ...)."""
        c = self.local()
        if isinstance(self.space, RTSpace):
            return np.einsum("eqia,ei->eqa", vd.values, c)
        return np.einsum("qi,ei...->eq...", vd.values, c)

    def copy(self) -> "GridFunction":
        return GridFunction(self.space, self.data.copy())

    def save(self, path) -> Path:
        header = f"space {self.space.descriptor()} {' '.join(str(n) for n in self.value_shape)}".rstrip()
        rows = self.data.reshape(self.space.ndofs, -1)
        lines = [header] + [" ".join(repr(float(v)) for v in row) for row in rows]
        return write_locked_text(path, "\n".join(lines) + "\n")


def load_grid_function(path, space: FiniteElementSpace) -> GridFunction:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = lines[0].split()
    if head[0] != "space" or head[1:4] != space.descriptor().split():
        raise SpaceError(f"{path}: stored space '{' '.join(head[1:4])}' does not match {space.descriptor()}")
    value_shape = tuple(int(v) for v in head[4:])
    data = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + space.ndofs]])
    return GridFunction(space, data.reshape((space.ndofs,) + value_shape))


# ---- projection and norms ----

def l2_project(space: FiniteElementSpace, f: Callable[[np.ndarray], np.ndarray], order: Optional[int] = None) -> GridFunction:
    """
    L² projection onto the DG space by element-local mass solves.
    ``f`` maps points (n, 2) to values (n, *value_shape).
    """
    if space.kind != "DG":
        raise SpaceError("l2_project requires a DG space")
    vd = space.volume_data(space.default_order() + 2 if order is None else order)
    ne, nq = vd.wJ.shape
    fx = np.asarray(f(vd.x.reshape(-1, 2)), dtype=float)
    value_shape = fx.shape[1:]
    fx = fx.reshape(ne, nq, -1)
    mass = np.einsum("eq,qi,qj->eij", vd.wJ, vd.values, vd.values)
    rhs = np.einsum("eq,qi,eqk->eik", vd.wJ, vd.values, fx)
    try:
        coef = np.linalg.solve(mass, rhs)
    except np.linalg.LinAlgError as e:
        raise SpaceError(f"singular element mass matrix in projection: {e}")
    return GridFunction(space, coef.reshape((space.ndofs,) + value_shape))


Field = Union[GridFunction, Callable[[np.ndarray], np.ndarray]]


def l2_norm(g: Field, reference: Optional[Callable] = None, mesh: Optional[Mesh] = None, order: Optional[int] = None) -> float:
    """√∫ |g - reference|² dx; vector and tensor values use the Frobenius product."""
    if isinstance(g, GridFunction):
        mesh = g.space.mesh
        order = g.space.default_order() + 2 if order is None else order
    elif mesh is None:
        raise SpaceError("a mesh is required to integrate a pointwise field")
    order = 2 * mesh.order + 4 if order is None else order
    rule = make_quadrature(order)
    frame = mesh.all_element_frames(rule.points)
    wJ = frame.J * rule.weights
    ne, nq = wJ.shape
    if isinstance(g, GridFunction):
        vals = g.eval_volume(g.space.volume_data(order)).reshape(ne, nq, -1)
    else:
        vals = np.asarray(g(frame.x.reshape(-1, 2)), dtype=float).reshape(ne, nq, -1)
    if reference is not None:
        ref = np.asarray(reference(frame.x.reshape(-1, 2)), dtype=float).reshape(ne, nq, -1)
        vals = vals - ref
    return float(math.sqrt(max(0.0, np.sum(wJ[..., None] * vals**2))))


def l2_difference(a: GridFunction, b: GridFunction, order: Optional[int] = None) -> float:
    """‖a - b‖ for grid functions on the same mesh, possibly in different spaces."""
    mesh = a.space.mesh
    if b.space.mesh is not mesh:
        raise SpaceError("grid functions live on different meshes")
    order = max(a.space.default_order(), b.space.default_order()) + 2 if order is None else order
    va, vb = a.space.volume_data(order), b.space.volume_data(order)
    diff = a.eval_volume(va) - b.eval_volume(vb)
    ne, nq = va.wJ.shape
    return float(math.sqrt(max(0.0, np.sum(va.wJ[..., None] * diff.reshape(ne, nq, -1) ** 2))))
