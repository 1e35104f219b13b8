"""
Shared machinery of the SMM moment systems: face quadrature data, solver
options, the solution record, and the fixed-point unknown layout.

A moment system assembles its left-hand side once. Every fixed-point
iteration only rebuilds the right-hand side from fresh closures and solves
with the cached factorization or preconditioner.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from core.closures import ClosureFields, discrete_eb0, source_moments
from core.fespace import FiniteElementSpace, GridFunction, make_quadrature
from core.linalg import SolveReport
from core.mesh import Mesh
from core.transport import TransportProblem
from core.utils.logger import get_logger

log = get_logger("📚 smm")

MOMENT_KINDS = ("ip", "cg", "rt", "hrt")


class MomentSystemError(Exception):
    """Invalid moment system request or a failed local elimination."""
    pass


@dataclass(frozen=True)
class SolverOptions:
    inner_solver: str = "direct"
    inner_tol: float = 1e-8
    max_inner: int = 1000
    rt_krylov: str = "minres"
    preconditioner: str = "diag"
    penalty_scale: float = 1.0

    def __post_init__(self):
        if self.inner_solver not in ("direct", "krylov"):
            raise MomentSystemError(f"unknown inner solver '{self.inner_solver}'")
        if self.rt_krylov == "minres" and self.preconditioner == "tri":
            raise MomentSystemError("the lower block triangular preconditioner cannot be used with MINRES")


@dataclass
class FacePoints:
    """Quadrature points of one face in K1's coordinate; ``xi`` has one entry per side."""

    face: int
    elements: Tuple[int, ...]
    s: np.ndarray
    x: np.ndarray
    normal: np.ndarray
    wdl: np.ndarray
    xi: Tuple[np.ndarray, ...]

    @property
    def interior(self) -> bool:
        return len(self.elements) == 2


def face_quadrature(mesh: Mesh, order: int) -> List[FacePoints]:
    rule = make_quadrature(order, "segment")
    out = []
    for f, face in enumerate(mesh.faces):
        fr = mesh.face_frame(f, rule.points)
        xi = (fr.xi1,) if fr.xi2 is None else (fr.xi1, fr.xi2)
        out.append(FacePoints(f, face.elements, rule.points, fr.x, fr.normal, rule.weights * fr.dl, xi))
    return out


@dataclass
class ScalarSide:
    """Scalar basis data of one face side: values (nq, nloc), physical gradients (nq, nloc, 2)."""

    values: np.ndarray
    gradients: np.ndarray


def scalar_sides(space, faces: List[FacePoints]) -> List[Tuple[ScalarSide, ...]]:
    sides = []
    for fp in faces:
        per = []
        for e, xi in zip(fp.elements, fp.xi):
            sh = space.eval_shape(e, xi)
            per.append(ScalarSide(sh.values, sh.gradients))
        sides.append(tuple(per))
    return sides


@dataclass
class MomentSolution:
    varphi: GridFunction
    report: SolveReport
    J: Optional[GridFunction] = None
    lam: Optional[np.ndarray] = None


def matrix_checksum(A) -> str:
    """Digest of a sparse matrix's structure and values."""
    A = sp.csr_matrix(A)
    h = hashlib.sha256()
    for arr in (A.indptr, A.indices, A.data):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


class MomentSystem:
    """
    Base class of the four discretizations. Subclasses set ``kind``,
    ``scalar_space`` (and ``current_space`` for mixed methods), assemble in
    ``__init__`` and implement :meth:`rhs` and :meth:`_solve`.
    """

    kind: str = ""

    def __init__(self, problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None):
        self.problem = problem
        self.mesh = problem.mesh
        self.p = problem.p
        self.options = options or SolverOptions()
        self.order = self.default_order() if order is None else order
        self.scalar_space: FiniteElementSpace = None
        self.current_space: Optional[FiniteElementSpace] = None
        self.face_points = face_quadrature(self.mesh, self.order)
        self.psi_space = problem.space
        self._psi_sides = scalar_sides(self.psi_space, self.face_points)
        self._last: Optional[np.ndarray] = None
        self.solve_count = 0

    def default_order(self) -> int:
        return 2 * self.p + 2 * self.mesh.order

    # ---- layout ----
    @property
    def size(self) -> int:
        n = self.scalar_space.ndofs
        return n + (self.current_space.ndofs if self.current_space is not None else 0)

    def pack(self, solution: MomentSolution) -> np.ndarray:
        if solution.J is None:
            return solution.varphi.data.copy()
        return np.concatenate([solution.varphi.data, solution.J.data.ravel()])

    def unpack(self, X: np.ndarray) -> Tuple[GridFunction, Optional[GridFunction]]:
        n = self.scalar_space.ndofs
        varphi = GridFunction(self.scalar_space, X[:n])
        if self.current_space is None:
            return varphi, None
        return varphi, GridFunction(self.current_space, X[n:])

    def scalar_flux(self, X: np.ndarray) -> GridFunction:
        return GridFunction(self.scalar_space, X[: self.scalar_space.ndofs])

    def zero_guess(self) -> np.ndarray:
        return np.zeros(self.size)

    # ---- shared pieces ----
    def eb0_at(self, normals: np.ndarray) -> np.ndarray:
        return discrete_eb0(np.atleast_2d(normals), self.problem.quad)

    def volume_sources(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Q₀ (ne, nq) and Q₁ (ne, nq, 2) at volume points (ne, nq, 2)."""
        ne, nq = x.shape[:2]
        Q0, Q1 = source_moments(self.problem, x.reshape(-1, 2))
        return Q0.reshape(ne, nq), Q1.reshape(ne, nq, 2)

    def boundary_closure(self, closures: ClosureFields, fp: FacePoints):
        side = self._psi_sides[fp.face][0]
        return closures.boundary(fp.elements[0], side.values, fp.x, fp.normal)

    # ---- solving ----
    def rhs(self, closures: ClosureFields) -> np.ndarray:
        raise NotImplementedError

    def _solve(self, b: np.ndarray, x0: Optional[np.ndarray]) -> Tuple[np.ndarray, SolveReport]:
        raise NotImplementedError

    def solve(self, closures: ClosureFields, x0: Optional[np.ndarray] = None) -> MomentSolution:
        """Assemble the right-hand side from ``closures`` and solve; the last solution is the default guess."""
        b = self.rhs(closures)
        return self.solve_rhs(b, x0)

    def solve_rhs(self, b: np.ndarray, x0: Optional[np.ndarray] = None) -> MomentSolution:
        guess = self._last if x0 is None else x0
        X, report = self._solve(b, guess)
        self._last = X.copy()
        self.solve_count += 1
        varphi, J = self.unpack(X)
        return self._solution(varphi, J, report)

    def _solution(self, varphi, J, report) -> MomentSolution:
        return MomentSolution(varphi=varphi, report=report, J=J)

    def lhs_checksum(self) -> str:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(p={self.p}, unknowns={self.size})"


def moment_balance(system: MomentSystem, solution: MomentSolution, closures: ClosureFields) -> Dict[str, float]:
    """
    Zeroth-moment equation tested against the constant function:
    leakage + absorption - source, with leakage ∫ J·n over the boundary (the
    discrete Marshak relation for the scalar methods).
    """
    problem = system.problem
    space = system.scalar_space
    vd = space.volume_data(system.order)
    Q0, _ = system.volume_sources(vd.x)
    phi_q = solution.varphi.eval_volume(vd)
    source = float(np.sum(vd.wJ * Q0))
    absorption = float(np.sum(problem.sigma_a[:, None] * vd.wJ * phi_q))
    leakage = 0.0
    for fp in system.face_points:
        if fp.interior:
            continue
        e = fp.elements[0]
        if solution.J is not None:
            shapes = system.current_space.eval_shape(e, fp.xi[0])
            Jq = np.einsum("qia,i->qa", shapes.values, solution.J.local(e))
            leakage += float(np.sum(fp.wdl * np.einsum("qa,qa->q", Jq, fp.normal)))
        else:
            bc = system.boundary_closure(closures, fp)
            vals = space.eval_shape(e, fp.xi[0]).values @ solution.varphi.local(e)
            leakage += float(np.sum(fp.wdl * (bc.eb0 * vals + 2.0 * bc.inflow_current + bc.beta)))
    residual = leakage + absorption - source
    return {
        "leakage": leakage,
        "absorption": absorption,
        "source": source,
        "residual": residual,
        "relative_residual": abs(residual) / max(abs(source), abs(leakage), np.finfo(float).tiny),
    }
