"""
Transport-to-moment data: the correction tensor T = P - (φ/3) I, its broken
divergence, the boundary factor β, E_b0, the inflow partial current and the
source moments, all taken with the same angular quadrature.

T is stored nodewise in the angular flux's DG space as a full 3×3 tensor so
that tr(T) = 0 holds exactly; the moment forms use its x–y block.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from core.fespace import GridFunction, ScalarSpace
from core.transport import FOUR_PI, AngularFlux, AngularQuadrature, TransportProblem, angular_moments
from core.utils.logger import get_logger

log = get_logger("🧷 closures")


class ClosureError(Exception):
    """Closure quantity requested where it is not defined."""
    pass


def _as_normals3(normals) -> np.ndarray:
    n = np.atleast_2d(np.asarray(normals, dtype=float))
    out = np.zeros((len(n), 3))
    out[:, :2] = n[:, :2]
    return out


def discrete_eb0(normal, quad: AngularQuadrature):
    """Σ w |Ω·n| / 4π for one unit normal (float) or many (array)."""
    n = np.asarray(normal, dtype=float)
    values = np.abs(_as_normals3(n) @ quad.omega.T) @ quad.weights / FOUR_PI
    return float(values[0]) if n.ndim == 1 else values


def correction_tensor(psi: AngularFlux) -> GridFunction:
    phi, _, P = angular_moments(psi)
    T = P.data - phi.data[:, None, None] * np.eye(3) / 3.0
    return GridFunction(psi.space, T)


def broken_div_T(T: GridFunction, e: int, xi) -> np.ndarray:
    """Element-local ∇·T (x–y components) at reference points of element ``e``, shape (nq, 2)."""
    grad = T.gradient(e, xi)  # (nq, 3, 3, 2)
    return np.einsum("qabb->qa", grad[:, :2, :2, :])


def _face_psi(psi: AngularFlux, e: int, values: np.ndarray) -> np.ndarray:
    """ψ_d at face points of element ``e`` from side basis values (nq, nloc); shape (nd, nq)."""
    coeffs = psi.data[:, psi.space.element_dofs[e]]
    return coeffs @ values.T


def boundary_beta(psi: AngularFlux, face: int, s) -> np.ndarray:
    """
    β = Σ w |Ω·n| ψ - E_b0 Σ w ψ at K1 face coordinates ``s`` of a boundary face.

    Raises:
        ClosureError: ``face`` is an interior face.
    """
    mesh = psi.space.mesh
    fc = mesh.faces[face]
    if fc.interior:
        raise ClosureError(f"β is defined on boundary faces only (face {face} is interior)")
    fr = mesh.face_frame(face, s)
    values = psi.space.reference_values(fr.xi1)
    return _beta(psi.quad, _face_psi(psi, fc.elements[0], values), fr.normal)


def _beta(quad: AngularQuadrature, psi_q: np.ndarray, normals: np.ndarray) -> np.ndarray:
    absdot = np.abs(_as_normals3(normals) @ quad.omega.T)  # (nq, nd)
    eb0 = absdot @ quad.weights / FOUR_PI
    return np.einsum("d,qd,dq->q", quad.weights, absdot, psi_q) - eb0 * (quad.weights @ psi_q)


def inflow_current(problem: TransportProblem, face: int, s) -> np.ndarray:
    """
    J_in = Σ_{Ω·n<0} w (Ω·n) ψ̄ at K1 face coordinates ``s``; non-positive for ψ̄ ≥ 0.

    Raises:
        ClosureError: ``face`` is an interior face.
    """
    mesh = problem.mesh
    if mesh.faces[face].interior:
        raise ClosureError(f"the inflow current is defined on boundary faces only (face {face} is interior)")
    fr = mesh.face_frame(face, s)
    return _inflow_current(problem, fr.x, fr.normal)


def _inflow_current(problem: TransportProblem, x: np.ndarray, normals: np.ndarray) -> np.ndarray:
    quad = problem.quad
    if problem.inflow is None:
        return np.zeros(len(x))
    dots = _as_normals3(normals) @ quad.omega.T  # (nq, nd)
    out = np.zeros(len(x))
    for d, om in enumerate(quad.omega):
        incoming = dots[:, d] < 0
        if incoming.any():
            g = np.asarray(problem.inflow(x, om), dtype=float)
            out += quad.weights[d] * np.where(incoming, dots[:, d] * g, 0.0)
    return out


def source_moments(problem: TransportProblem, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Q₀ = Σ w q(x, Ω) and Q₁ = Σ w Ω_xy q(x, Ω) at points (n, 2)."""
    x = np.asarray(x, dtype=float)
    Q0, Q1 = np.zeros(len(x)), np.zeros((len(x), 2))
    if problem.source is None:
        return Q0, Q1
    for w, om in zip(problem.quad.weights, problem.quad.omega):
        q = np.asarray(problem.source(x, om), dtype=float)
        Q0 += w * q
        Q1 += w * q[:, None] * om[None, :2]
    return Q0, Q1


def scattering_source(problem: TransportProblem, varphi: GridFunction, order: Optional[int] = None) -> np.ndarray:
    """
    Mixed-space scattering: ∫ u (σ_s/4π) varphi for u in the transport DG
    space and varphi in any scalar space on the same mesh; shape (ne, nloc).
    """
    if not isinstance(varphi.space, ScalarSpace):
        raise ClosureError(f"scattering needs a scalar flux, got a {varphi.space.kind} field")
    if varphi.space.mesh is not problem.mesh:
        raise ClosureError("scalar flux lives on a different mesh than the transport problem")
    order = problem.space.default_order() if order is None else order
    vd = problem.space.volume_data(order)
    vals = varphi.eval_volume(varphi.space.volume_data(order))
    return np.einsum("e,eq,qi,eq->ei", problem.sigma_s / FOUR_PI, vd.wJ, vd.values, vals)


@dataclass
class BoundaryClosure:
    beta: np.ndarray
    inflow_current: np.ndarray
    eb0: np.ndarray


class ClosureFields:
    """Closures of one angular flux, evaluated on demand at assembly points."""

    def __init__(self, problem: TransportProblem, psi: AngularFlux):
        if psi.space.mesh is not problem.mesh:
            raise ClosureError("angular flux and problem live on different meshes")
        self.problem = problem
        self.psi = psi
        self.quad = psi.quad
        self.T = correction_tensor(psi)
        self.T_local = self.T.local()  # (ne, nloc, 3, 3)

    @property
    def space(self) -> ScalarSpace:
        return self.psi.space

    def T_at(self, e: int, values: np.ndarray) -> np.ndarray:
        """x–y block of T from basis values (nq, nloc); shape (nq, 2, 2)."""
        return np.einsum("qi,iab->qab", values, self.T_local[e, :, :2, :2])

    def div_T_at(self, e: int, gradients: np.ndarray) -> np.ndarray:
        """Broken ∇·T from physical basis gradients (nq, nloc, 2); shape (nq, 2)."""
        return np.einsum("qib,iab->qa", gradients, self.T_local[e, :, :2, :2])

    def T_volume(self, vd) -> np.ndarray:
        return np.einsum("qi,eiab->eqab", vd.values, self.T_local[:, :, :2, :2])

    def div_T_volume(self, vd) -> np.ndarray:
        return np.einsum("eqib,eiab->eqa", vd.gradients, self.T_local[:, :, :2, :2])

    def boundary(self, e: int, values: np.ndarray, x: np.ndarray, normals: np.ndarray) -> BoundaryClosure:
        """β, J_in and E_b0 at boundary points of element ``e``."""
        psi_q = _face_psi(self.psi, e, values)
        return BoundaryClosure(
            beta=_beta(self.quad, psi_q, normals),
            inflow_current=_inflow_current(self.problem, x, normals),
            eb0=discrete_eb0(np.atleast_2d(normals), self.quad),
        )
