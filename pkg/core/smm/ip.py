"""
Interior penalty SMM on the DG space Y_p.

    a(u, φ) = ∫_Γb E_b0 u φ + ∫_Γ0 κ ⟦u⟧⟦φ⟧ - ∫_Γ0 ⟦u⟧⟨D∇φ·n⟩ - ∫_Γ0 ⟨D∇u·n⟩⟦φ⟧
              + ∫ ∇u·D∇φ + ∫ σ_a u φ,                     D = 1/(3σ_t)

    l(u)    = ∫ u Q₀ + ∫ ∇u·Q₁/σ_t - ∫_Γ0 ⟦u⟧⟨Q₁·n/σ_t⟩ - ∫_Γb u (2J_in + β)
              + ∫_Γ0 ⟦u⟧⟨∇_h·T·n/σ_t⟩ + ∫_Γ0 ⟨∇u/σ_t⟩·⟦Tn⟧ - ∫ ∇u·∇_h·T/σ_t

⟦u⟧ = u₁ - u₂ and n points from K1 to K2. κ is the face average of
(p+1)²/(σ_t h_K) with h_K = √|K|, times ``penalty_scale``.
"""

from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from core.closures import ClosureFields, discrete_eb0, source_moments
from core.fespace import FiniteElementSpace, make_space
from core.linalg import Assembler, DirectSolver, GaussSeidel, SolveReport, krylov_solve, scatter_vector
from core.smm.base import MomentSystem, MomentSystemError, SolverOptions, face_quadrature, matrix_checksum, scalar_sides
from core.transport import TransportProblem
from core.utils.logger import get_logger

log = get_logger("📚 smm.ip")


class ScalarForms:
    """Bilinear and linear forms shared by the IP and CG discretizations on one scalar space."""

    def __init__(self, problem: TransportProblem, space: FiniteElementSpace, order: int, faces=None):
        self.problem = problem
        self.space = space
        self.order = order
        self.faces = face_quadrature(problem.mesh, order) if faces is None else faces
        self.sides = scalar_sides(space, self.faces)
        self.psi_sides = self.sides if space is problem.space else scalar_sides(problem.space, self.faces)
        self.vd = space.volume_data(order)
        self.psi_vd = problem.space.volume_data(order)
        self.diffusion = 1.0 / (3.0 * problem.sigma_t)
        self.inv_sigma = 1.0 / problem.sigma_t
        ne, nq = self.vd.wJ.shape
        Q0, Q1 = source_moments(problem, self.vd.x.reshape(-1, 2))
        self.Q0, self.Q1 = Q0.reshape(ne, nq), Q1.reshape(ne, nq, 2)
        self.q1n = {}
        for fp in self.faces:
            if fp.interior and problem.source is not None:
                self.q1n[fp.face] = np.einsum("qa,qa->q", source_moments(problem, fp.x)[1], fp.normal)

    def penalty(self, scale: float) -> np.ndarray:
        """κ per face (zero on boundary faces)."""
        h = np.sqrt(self.problem.mesh.element_areas())
        per_element = (self.space.p + 1) ** 2 / (self.problem.sigma_t * h)
        kappa = np.zeros(len(self.faces))
        for fp in self.faces:
            if fp.interior:
                kappa[fp.face] = scale * 0.5 * per_element[list(fp.elements)].sum()
        return kappa

    def matrix(self, penalty_scale: float = 1.0, jumps: bool = True) -> sp.csr_matrix:
        space, vd, D = self.space, self.vd, self.diffusion
        n = space.ndofs
        asm = Assembler(n, n)
        vol = np.einsum("e,eq,eqia,eqja->eij", D, vd.wJ, vd.gradients, vd.gradients)
        vol += np.einsum("e,eq,qi,qj->eij", self.problem.sigma_a, vd.wJ, vd.values, vd.values)
        asm.add_blocks(vol, space.element_dofs, space.element_dofs)

        kappa = self.penalty(penalty_scale)
        face_blocks, face_dofs = [], []
        for fp, sides in zip(self.faces, self.sides):
            if not fp.interior:
                eb0 = discrete_eb0(fp.normal, self.problem.quad)
                U = sides[0].values
                local = np.einsum("q,qi,qj->ij", fp.wdl * eb0, U, U)
                asm.add_blocks(local[None], space.element_dofs[[fp.elements[0]]], space.element_dofs[[fp.elements[0]]])
                continue
            if not jumps:
                continue
            e1, e2 = fp.elements
            jump = np.concatenate([sides[0].values, -sides[1].values], axis=1)
            flux = 0.5 * np.concatenate(
                [D[e1] * np.einsum("qia,qa->qi", sides[0].gradients, fp.normal),
                 D[e2] * np.einsum("qia,qa->qi", sides[1].gradients, fp.normal)],
                axis=1,
            )
            local = kappa[fp.face] * np.einsum("q,qi,qj->ij", fp.wdl, jump, jump)
            cross = np.einsum("q,qi,qj->ij", fp.wdl, jump, flux)
            face_blocks.append(local - cross - cross.T)
            face_dofs.append(np.concatenate([space.element_dofs[e1], space.element_dofs[e2]]))
        if face_blocks:
            dofs = np.array(face_dofs)
            asm.add_blocks(np.array(face_blocks), dofs, dofs)
        return asm.tocsr()

    def rhs(self, closures: ClosureFields, jumps: bool = True) -> np.ndarray:
        space, vd = self.space, self.vd
        inv = self.inv_sigma
        divT = closures.div_T_volume(self.psi_vd)
        local = np.einsum("eq,qi,eq->ei", vd.wJ, vd.values, self.Q0)
        local += np.einsum("eq,eqia,eqa->ei", vd.wJ * inv[:, None], vd.gradients, self.Q1 - divT)
        for fp, sides, psi_sides in zip(self.faces, self.sides, self.psi_sides):
            if not fp.interior:
                e = fp.elements[0]
                bc = closures.boundary(e, psi_sides[0].values, fp.x, fp.normal)
                local[e] -= sides[0].values.T @ (fp.wdl * (2.0 * bc.inflow_current + bc.beta))
                continue
            e1, e2 = fp.elements
            n = fp.normal
            Tn_jump = np.einsum(
                "qab,qb->qa", closures.T_at(e1, psi_sides[0].values) - closures.T_at(e2, psi_sides[1].values), n
            )
            local[e1] += 0.5 * inv[e1] * np.einsum("q,qia,qa->i", fp.wdl, sides[0].gradients, Tn_jump)
            local[e2] += 0.5 * inv[e2] * np.einsum("q,qia,qa->i", fp.wdl, sides[1].gradients, Tn_jump)
            if not jumps:
                continue
            dT1 = inv[e1] * np.einsum("qa,qa->q", closures.div_T_at(e1, psi_sides[0].gradients), n)
            dT2 = inv[e2] * np.einsum("qa,qa->q", closures.div_T_at(e2, psi_sides[1].gradients), n)
            g = 0.5 * (dT1 + dT2)
            if fp.face in self.q1n:
                g = g - 0.5 * (inv[e1] + inv[e2]) * self.q1n[fp.face]
            g = fp.wdl * g
            local[e1] += sides[0].values.T @ g
            local[e2] -= sides[1].values.T @ g
        return scatter_vector(space.ndofs, local, space.element_dofs)


def assemble_ip_matrix(
    problem: TransportProblem,
    space: Optional[FiniteElementSpace] = None,
    penalty_scale: float = 1.0,
    order: Optional[int] = None,
) -> sp.csr_matrix:
    """Interior penalty left-hand side on the DG space of ``problem`` (or ``space``)."""
    space = problem.space if space is None else space
    order = 2 * space.p + 2 * problem.mesh.order if order is None else order
    return ScalarForms(problem, space, order).matrix(penalty_scale, jumps=True)


class ScalarMomentSystem(MomentSystem):
    """Single-field moment system solved by sparse LU or SGS-preconditioned CG."""

    continuous = False
    jumps = True

    def __init__(self, problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None):
        super().__init__(problem, options, order)
        if self.p < 1:
            raise MomentSystemError(f"{self.kind.upper()} needs p >= 1")
        self.scalar_space = problem.space if not self.continuous else make_space(self.mesh, "CG", self.p)
        self.forms = ScalarForms(problem, self.scalar_space, self.order, self.face_points)
        self.A = self.forms.matrix(self.options.penalty_scale, jumps=self.jumps)
        if self.options.inner_solver == "direct":
            self._direct = DirectSolver(self.A)
        else:
            self._smoother = GaussSeidel(self.A, symmetric=True)
        log.info(f"🧮 Assembled {self.kind.upper()} system: {self.scalar_space.ndofs} unknowns, {self.A.nnz} nonzeros")

    def rhs(self, closures: ClosureFields) -> np.ndarray:
        return self.forms.rhs(closures, jumps=self.jumps)

    def _solve(self, b: np.ndarray, x0: Optional[np.ndarray]) -> Tuple[np.ndarray, SolveReport]:
        if self.options.inner_solver == "direct":
            return self._direct.solve(b)
        return krylov_solve("cg", self.A, b, M=self._smoother, tol=self.options.inner_tol, maxit=self.options.max_inner, x0=x0)

    def lhs_checksum(self) -> str:
        return matrix_checksum(self.A)


class IPSystem(ScalarMomentSystem):
    kind = "ip"


def assemble_ip(problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None) -> IPSystem:
    return IPSystem(problem, options, order)


def assemble_ip_rhs(system: IPSystem, closures: ClosureFields) -> np.ndarray:
    return system.rhs(closures)
