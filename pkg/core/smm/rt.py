"""
Raviart–Thomas SMM: (φ, J) ∈ Y_p × RT_p with the block system

    [ M_t  G  ] [J]   [g]
    [ D   M_a ] [φ] = [f]

    M_t = ∫ σ_t v·J + ∫_Γb (v·n)(J·n) / (3 E_b0)     G = -(1/3) ∫ ∇·v φ
    D   = ∫ u ∇·J                                     M_a = ∫ σ_a u φ

    g = ∫ v·Q₁ - ∫_Γb v·Tn + ∫_Γb v·n (2J_in + β) / (3 E_b0)
        - ∫_Γ0 ⟦v⟧·⟨Tn⟩ + ∫ ∇_h v : T
    f = ∫ u Q₀

Element blocks are computed in each element's local orientation; the
conforming space scatters them with the global face signs, the hybridized
system keeps them element-local.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.closures import ClosureFields, discrete_eb0
from core.fespace import RTSpace, make_space
from core.linalg import (
    Assembler,
    BlockOperator,
    DirectSolver,
    SolveReport,
    block_preconditioner,
    krylov_solve,
    scatter_vector,
)
from core.smm.base import MomentSystem, SolverOptions, matrix_checksum
from core.transport import TransportProblem
from core.utils.logger import get_logger

log = get_logger("📚 smm.rt")


@dataclass
class LocalBlocks:
    M_t: np.ndarray  # (ne, nr, nr)
    G: np.ndarray    # (ne, nr, nd)
    D: np.ndarray    # (ne, nd, nr)
    M_a: np.ndarray  # (ne, nd, nd)


class MixedForms:
    """Element-local mixed forms on an RT (or broken RT) space paired with Y_p."""

    def __init__(self, system: MomentSystem, rt: RTSpace):
        problem = system.problem
        self.problem = problem
        self.rt = rt
        self.dg = problem.space
        self.faces = system.face_points
        self.psi_sides = system._psi_sides
        self.vd = rt.volume_data(system.order)
        self.dg_vd = self.dg.volume_data(system.order)
        self.Q0, self.Q1 = system.volume_sources(self.vd.x)
        self.face_values: List[Tuple[np.ndarray, ...]] = [
            tuple(rt.eval_shape(e, xi).values for e, xi in zip(fp.elements, fp.xi)) for fp in self.faces
        ]

    def local_blocks(self) -> LocalBlocks:
        vd, U = self.vd, self.dg_vd.values
        sig_t, sig_a = self.problem.sigma_t, self.problem.sigma_a
        M_t = np.einsum("e,eq,eqia,eqja->eij", sig_t, vd.wJ, vd.values, vd.values)
        for fp, values in zip(self.faces, self.face_values):
            if fp.interior:
                continue
            vn = np.einsum("qia,qa->qi", values[0], fp.normal)
            eb0 = discrete_eb0(fp.normal, self.problem.quad)
            M_t[fp.elements[0]] += np.einsum("q,qi,qj->ij", fp.wdl / (3.0 * eb0), vn, vn)
        D = np.einsum("eq,qi,eqj->eij", vd.wJ, U, vd.divergence)
        G = -np.einsum("eq,eqi,qj->eij", vd.wJ, vd.divergence, U) / 3.0
        M_a = np.einsum("e,eq,qi,qj->eij", sig_a, vd.wJ, U, U)
        return LocalBlocks(M_t=M_t, G=G, D=D, M_a=M_a)

    def local_rhs(self, closures: ClosureFields) -> Tuple[np.ndarray, np.ndarray]:
        """Element-local g (ne, nr) and f (ne, nd)."""
        vd = self.vd
        T = closures.T_volume(self.dg_vd)
        g = np.einsum("eq,eqia,eqa->ei", vd.wJ, vd.values, self.Q1)
        g += np.einsum("eq,eqiab,eqab->ei", vd.wJ, vd.gradients, T)
        for fp, values, psi_sides in zip(self.faces, self.face_values, self.psi_sides):
            n = fp.normal
            if not fp.interior:
                e = fp.elements[0]
                Tn = np.einsum("qab,qb->qa", closures.T_at(e, psi_sides[0].values), n)
                bc = closures.boundary(e, psi_sides[0].values, fp.x, n)
                vn = np.einsum("qia,qa->qi", values[0], n)
                g[e] -= np.einsum("q,qia,qa->i", fp.wdl, values[0], Tn)
                g[e] += vn.T @ (fp.wdl * (2.0 * bc.inflow_current + bc.beta) / (3.0 * bc.eb0))
                continue
            e1, e2 = fp.elements
            avg_Tn = 0.5 * np.einsum(
                "qab,qb->qa", closures.T_at(e1, psi_sides[0].values) + closures.T_at(e2, psi_sides[1].values), n
            )
            g[e1] -= np.einsum("q,qia,qa->i", fp.wdl, values[0], avg_Tn)
            g[e2] += np.einsum("q,qia,qa->i", fp.wdl, values[1], avg_Tn)
        f = np.einsum("eq,qi,eq->ei", self.dg_vd.wJ, self.dg_vd.values, self.Q0)
        return g, f


class RTSystem(MomentSystem):
    """
    Conforming RT system. Solved by sparse LU, sign-scaled MINRES with the
    block-diagonal preconditioner, or BiCGStab with either block
    preconditioner on the unscaled system.
    """

    kind = "rt"

    def __init__(self, problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None):
        super().__init__(problem, options, order)
        self.scalar_space = problem.space
        self.current_space = make_space(self.mesh, "RT", self.p)
        self.forms = MixedForms(self, self.current_space)
        self.block = self._assemble()
        opts = self.options
        if opts.inner_solver == "direct":
            self._direct = DirectSolver(self.block.matrix())
        elif opts.rt_krylov == "minres":
            self._A = self.block.matrix(scaled=True)
            self._M = block_preconditioner(self.block, "diag", scaled=True)
        else:
            self._A = self.block.matrix()
            self._M = block_preconditioner(self.block, opts.preconditioner, scaled=False)
        log.info(
            f"🧮 Assembled RT system: {self.current_space.ndofs} current + {self.scalar_space.ndofs} scalar unknowns"
        )

    def default_order(self) -> int:
        return 2 * self.p + 2 * self.mesh.order + 2

    def _assemble(self) -> BlockOperator:
        rt, dg = self.current_space, self.scalar_space
        lb = self.forms.local_blocks()
        nr, nd = rt.ndofs, dg.ndofs
        rd, rs, dd = rt.element_dofs, rt.signs, dg.element_dofs
        blocks = {}
        for name, local, rows, cols, rsig, csig in (
            ("M_t", lb.M_t, (nr, rd), (nr, rd), rs, rs),
            ("G", lb.G, (nr, rd), (nd, dd), rs, None),
            ("D", lb.D, (nd, dd), (nr, rd), None, rs),
            ("M_a", lb.M_a, (nd, dd), (nd, dd), None, None),
        ):
            asm = Assembler(rows[0], cols[0])
            asm.add_blocks(local, rows[1], cols[1], rsig, csig)
            blocks[name] = asm.tocsr()
        return BlockOperator(**blocks)

    def rhs(self, closures: ClosureFields) -> np.ndarray:
        """Block-ordered right-hand side (g, f)."""
        g, f = self.forms.local_rhs(closures)
        rt, dg = self.current_space, self.scalar_space
        return np.concatenate(
            [scatter_vector(rt.ndofs, g, rt.element_dofs, rt.signs), scatter_vector(dg.ndofs, f, dg.element_dofs)]
        )

    def _to_block(self, X: np.ndarray) -> np.ndarray:
        n = self.scalar_space.ndofs
        return np.concatenate([X[n:], X[:n]])

    def _from_block(self, y: np.ndarray) -> np.ndarray:
        nj = self.current_space.ndofs
        return np.concatenate([y[nj:], y[:nj]])

    def _solve(self, b: np.ndarray, x0: Optional[np.ndarray]) -> Tuple[np.ndarray, SolveReport]:
        opts = self.options
        if opts.inner_solver == "direct":
            y, report = self._direct.solve(b)
            return self._from_block(y), report
        y0 = None if x0 is None else self._to_block(x0)
        if opts.rt_krylov == "minres":
            y, report = krylov_solve(
                "minres", self._A, self.block.scale_rhs(b), M=self._M, tol=opts.inner_tol, maxit=opts.max_inner, x0=y0
            )
        else:
            y, report = krylov_solve(
                "bicgstab", self._A, b, M=self._M, tol=opts.inner_tol, maxit=opts.max_inner, x0=y0
            )
        return self._from_block(y), report

    def lhs_checksum(self) -> str:
        return matrix_checksum(self.block.matrix())


def assemble_rt(problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None) -> RTSystem:
    return RTSystem(problem, options, order)


def assemble_rt_rhs(system: RTSystem, closures: ClosureFields) -> np.ndarray:
    return system.rhs(closures)
