"""
Hybridized RT SMM: (J, φ, λ) ∈ broken RT_p × Y_p × Λ_p.

Continuity of J·n across interior faces is imposed weakly by the multiplier
λ, which enters the first-moment equation as ∫_Γ0 ⟦v·n⟧ λ. Each element
block [[M_t, G], [D, M_a]] is inverted locally, leaving the trace system

    B A⁻¹ Bᵀ λ = B A⁻¹ r

on Λ_p, after which (J, φ) is recovered element by element.
"""

from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from core.closures import ClosureFields
from core.fespace import make_space
from core.linalg import Assembler, DirectSolver, GaussSeidel, SolveReport, krylov_solve
from core.smm.base import MomentSolution, MomentSystem, MomentSystemError, SolverOptions, matrix_checksum
from core.smm.rt import MixedForms
from core.transport import TransportProblem
from core.utils.logger import get_logger

log = get_logger("📚 smm.hrt")


class HRTSystem(MomentSystem):
    kind = "hrt"

    def __init__(self, problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None):
        super().__init__(problem, options, order)
        self.scalar_space = problem.space
        self.current_space = make_space(self.mesh, "BrokenRT", self.p)
        self.trace_space = make_space(self.mesh, "Trace", self.p)
        self.forms = MixedForms(self, self.current_space)
        self.n_current = self.current_space.nloc
        self.n_scalar = self.scalar_space.nloc
        self.n_local = self.n_current + self.n_scalar

        lb = self.forms.local_blocks()
        local = np.block([[lb.M_t, lb.G], [lb.D, lb.M_a]])
        try:
            self.local_inverses = np.linalg.inv(local)
        except np.linalg.LinAlgError as e:
            raise MomentSystemError(f"singular element block in hybridization: {e}")
        self.Ainv = sp.block_diag(list(self.local_inverses), format="csr")
        self.B = self._coupling()
        H = self.B @ self.Ainv @ self.B.T
        self.H = sp.csr_matrix(0.5 * (H + H.T))
        self._lam: Optional[np.ndarray] = None
        if self.trace_space.ndofs and self.options.inner_solver == "direct":
            self._direct = DirectSolver(self.H)
        elif self.trace_space.ndofs:
            self._smoother = GaussSeidel(self.H, symmetric=True)
        log.info(
            f"🧮 Assembled HRT system: {self.trace_space.ndofs} trace unknowns, "
            f"{self.mesh.num_elements} local blocks of size {self.n_local}"
        )

    def default_order(self) -> int:
        return 2 * self.p + 2 * self.mesh.order + 2

    def _coupling(self) -> sp.csr_matrix:
        """B[μ, (e, v)] = ∫_f μ (v·n_out,e) over interior faces."""
        trace = self.trace_space
        asm = Assembler(trace.ndofs, self.mesh.num_elements * self.n_local)
        cols = np.arange(self.n_current)
        for fp, values in zip(self.face_points, self.forms.face_values):
            if not fp.interior:
                continue
            mu = trace.values(fp.s)
            rows = trace.dofs_of_face(fp.face)
            for side, (e, v) in enumerate(zip(fp.elements, values)):
                vn = (1.0 if side == 0 else -1.0) * np.einsum("qia,qa->qi", v, fp.normal)
                local = np.einsum("q,qk,qi->ki", fp.wdl, mu, vn)
                asm.add_blocks(local[None], rows[None], (e * self.n_local + cols)[None])
        return asm.tocsr()

    def rhs(self, closures: ClosureFields) -> np.ndarray:
        """Element-ordered local right-hand sides [g_e, f_e], flattened."""
        g, f = self.forms.local_rhs(closures)
        return np.concatenate([g, f], axis=1).ravel()

    def _solve(self, r: np.ndarray, x0: Optional[np.ndarray]) -> Tuple[np.ndarray, SolveReport]:
        if self.trace_space.ndofs == 0:
            lam, report = np.zeros(0), SolveReport(iterations=0, solver="local")
        elif self.options.inner_solver == "direct":
            lam, report = self._direct.solve(self.B @ (self.Ainv @ r))
        else:
            lam, report = krylov_solve(
                "cg",
                self.H,
                self.B @ (self.Ainv @ r),
                M=self._smoother,
                tol=self.options.inner_tol,
                maxit=self.options.max_inner,
                x0=self._lam,
            )
        self._lam = lam
        x = (self.Ainv @ (r - self.B.T @ lam)).reshape(-1, self.n_local)
        X = np.concatenate([x[:, self.n_current :].ravel(), x[:, : self.n_current].ravel()])
        return X, report

    def _solution(self, varphi, J, report) -> MomentSolution:
        return MomentSolution(varphi=varphi, report=report, J=J, lam=self._lam.copy())

    def lhs_checksum(self) -> str:
        return matrix_checksum(self.H)


def assemble_hrt(problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None) -> HRTSystem:
    return HRTSystem(problem, options, order)


def hrt_solve(system: HRTSystem, closures: ClosureFields) -> MomentSolution:
    return system.solve(closures)
