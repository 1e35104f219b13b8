"""
Sparse assembly, Krylov solvers, block preconditioners, lumping and the
Anderson-accelerated fixed-point driver.

Matrices are ``scipy.sparse.csr_matrix`` with sorted, duplicate-free indices.
Non-convergence is reported through :class:`SolveReport`, never raised.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.utils.filelock import write_locked_text
from core.utils.logger import get_logger

log = get_logger("🧮 linalg")

BREAKDOWN_TOL = 1e-30
KRYLOV_KINDS = ("cg", "minres", "bicgstab")


class SolverError(Exception):
    """Linear algebra setup failure."""
    pass


class SingularLumpError(SolverError):
    """A lumped mass matrix has a zero row sum."""
    pass


@dataclass
class SolveReport:
    iterations: int = 0
    residual: float = 0.0
    converged: bool = True
    wall_time: float = 0.0
    breakdown: bool = False
    solver: str = ""
    history: List[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "solver": self.solver,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "breakdown": self.breakdown,
            "wall_time": self.wall_time,
        }


Operator = Union[sp.spmatrix, spla.LinearOperator, np.ndarray]
Preconditioner = Optional[Union[Callable[[np.ndarray], np.ndarray], spla.LinearOperator]]


# ---- assembly ----

def sparse_from_triplets(rows: int, cols: int, triplets) -> sp.csr_matrix:
    """
    CSR matrix from (i, j, value) triplets; duplicates are summed.

    Raises:
        SolverError: an index is out of range.
    """
    data = np.asarray(list(triplets) if not isinstance(triplets, np.ndarray) else triplets, dtype=float)
    if data.size == 0:
        return sp.csr_matrix((rows, cols))
    data = data.reshape(-1, 3)
    i, j, v = data[:, 0].astype(np.int64), data[:, 1].astype(np.int64), data[:, 2]
    if i.min() < 0 or i.max() >= rows or j.min() < 0 or j.max() >= cols:
        raise SolverError(f"triplet index outside a {rows}x{cols} matrix")
    A = sp.coo_matrix((v, (i, j)), shape=(rows, cols)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


class Assembler:
    """Accumulates element blocks in coordinate form; one writer per matrix."""

    def __init__(self, rows: int, cols: int):
        self.shape = (rows, cols)
        self._i: List[np.ndarray] = []
        self._j: List[np.ndarray] = []
        self._v: List[np.ndarray] = []

    def add_blocks(self, local, row_dofs, col_dofs, row_signs=None, col_signs=None):
        """Scatter ``local`` (n, nr, nc) with dof maps (n, nr) and (n, nc)."""
        local = np.asarray(local, dtype=float)
        row_dofs, col_dofs = np.asarray(row_dofs), np.asarray(col_dofs)
        if row_signs is not None:
            local = local * np.asarray(row_signs)[:, :, None]
        if col_signs is not None:
            local = local * np.asarray(col_signs)[:, None, :]
        n, nr, nc = local.shape
        self._i.append(np.broadcast_to(row_dofs[:, :, None], (n, nr, nc)).ravel())
        self._j.append(np.broadcast_to(col_dofs[:, None, :], (n, nr, nc)).ravel())
        self._v.append(local.ravel())

    def tocsr(self) -> sp.csr_matrix:
        if not self._v:
            return sp.csr_matrix(self.shape)
        A = sp.coo_matrix(
            (np.concatenate(self._v), (np.concatenate(self._i), np.concatenate(self._j))), shape=self.shape
        ).tocsr()
        A.sum_duplicates()
        A.sort_indices()
        return A


def scatter_vector(n: int, local, dofs, signs=None) -> np.ndarray:
    local = np.asarray(local, dtype=float)
    if signs is not None:
        local = local * np.asarray(signs)
    out = np.zeros(n)
    np.add.at(out, np.asarray(dofs).ravel(), local.ravel())
    return out


def export_coo(A, path) -> Path:
    """Write ``row col value`` lines (0-based)."""
    C = sp.coo_matrix(A)
    lines = [f"# {C.shape[0]} {C.shape[1]} {C.nnz}"]
    lines += [f"{i} {j} {v!r}" for i, j, v in zip(C.row.tolist(), C.col.tolist(), C.data.tolist())]
    return write_locked_text(path, "\n".join(lines) + "\n")


# ---- lumping and Gauss–Seidel ----

def lump_mass(M) -> sp.dia_matrix:
    """Diagonal of row sums."""
    M = sp.csr_matrix(M)
    if M.shape[0] != M.shape[1]:
        raise SolverError(f"lumping needs a square matrix, got {M.shape}")
    rows = np.asarray(M.sum(axis=1)).ravel()
    scale = np.asarray(abs(M).sum(axis=1)).ravel()
    zero = np.abs(rows) <= 1e-14 * np.maximum(scale, np.finfo(float).tiny)
    if np.any(zero):
        raise SingularLumpError(f"{int(zero.sum())} zero row sum(s) in lumped mass matrix")
    return sp.diags(rows)


class GaussSeidel:
    """One forward (or symmetric) Gauss–Seidel sweep from a zero guess, as a preconditioner."""

    def __init__(self, A, symmetric: bool = True):
        A = sp.csr_matrix(A)
        self.shape = A.shape
        self.symmetric = symmetric
        self.lower = sp.tril(A, format="csr")
        self.upper = sp.triu(A, format="csr")
        self.diag = A.diagonal()
        if np.any(self.diag == 0):
            raise SolverError("Gauss–Seidel needs a non-zero diagonal")

    def __call__(self, r: np.ndarray) -> np.ndarray:
        y = spla.spsolve_triangular(self.lower, r, lower=True)
        if not self.symmetric:
            return y
        return spla.spsolve_triangular(self.upper, self.diag * y, lower=False)

    def as_operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(self.shape, matvec=self, dtype=float)


class DirectSolver:
    """Cached sparse LU factorization."""

    def __init__(self, A):
        self.A = sp.csc_matrix(A)
        try:
            self._lu = spla.splu(self.A)
        except RuntimeError as e:
            raise SolverError(f"sparse factorization failed: {e}")

    def solve(self, b: np.ndarray) -> Tuple[np.ndarray, SolveReport]:
        start = time.perf_counter()
        x = self._lu.solve(np.asarray(b, dtype=float))
        bnorm = np.linalg.norm(b)
        res = float(np.linalg.norm(b - self.A @ x) / bnorm) if bnorm > 0 else 0.0
        return x, SolveReport(iterations=1, residual=res, converged=True, wall_time=time.perf_counter() - start, solver="direct")


# ---- Krylov ----

def _apply(M: Preconditioner, r: np.ndarray) -> np.ndarray:
    if M is None:
        return r.copy()
    if isinstance(M, spla.LinearOperator):
        return M.matvec(r)
    return M(r)


def _pcg(A, b, M, tol, maxit, x0) -> Tuple[np.ndarray, SolveReport]:
    report = SolveReport(solver="cg")
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    r = b - A @ x
    rel = np.linalg.norm(r) / bnorm
    report.history.append(float(rel))
    if rel <= tol:
        report.residual = float(rel)
        return x, report
    z = _apply(M, r)
    p = z.copy()
    rz = float(r @ z)
    report.converged = False
    for k in range(1, maxit + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp < BREAKDOWN_TOL:
            report.breakdown = True
            log.error(f"💥 CG breakdown at iteration {k}: pᵀAp = {pAp:.3e} (indefinite or singular operator)")
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        report.iterations = k
        rel = np.linalg.norm(r) / bnorm
        report.history.append(float(rel))
        if rel <= tol:
            report.converged = True
            break
        z = _apply(M, r)
        rz_new = float(r @ z)
        if abs(rz_new) < BREAKDOWN_TOL:
            report.breakdown = True
            log.error(f"💥 CG breakdown at iteration {k}: rᵀz = {rz_new:.3e}")
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, report


def _scipy_krylov(kind, A, b, M, tol, maxit, x0) -> Tuple[np.ndarray, SolveReport]:
    report = SolveReport(solver=kind)
    count = [0]

    def _count(_xk):
        count[0] += 1

    if M is not None and not isinstance(M, spla.LinearOperator):
        M = spla.LinearOperator((len(b), len(b)), matvec=M, dtype=float)
    if kind == "minres":
        x, info = spla.minres(A, b, x0=x0, rtol=tol, maxiter=maxit, M=M, callback=_count)
    else:
        x, info = spla.bicgstab(A, b, x0=x0, rtol=tol, atol=0.0, maxiter=maxit, M=M, callback=_count)
    report.iterations = count[0]
    report.converged = info == 0
    if info < 0:
        report.breakdown = True
        log.error(f"💥 {kind} breakdown (info={info})")
    return x, report


def krylov_solve(
    kind: str,
    A: Operator,
    b: np.ndarray,
    M: Preconditioner = None,
    tol: float = 1e-8,
    maxit: int = 1000,
    x0: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, SolveReport]:
    """
    Solve ``A x = b`` with CG, MINRES or BiCGStab.

    ``converged`` reflects the solver's own stopping test; ``residual`` is
    always the true ‖b - Ax‖/‖b‖.
    """
    if kind not in KRYLOV_KINDS:
        raise SolverError(f"unknown Krylov method '{kind}'")
    b = np.asarray(b, dtype=float)
    start = time.perf_counter()
    if np.linalg.norm(b) == 0.0:
        return np.zeros_like(b), SolveReport(solver=kind, converged=True)
    if kind == "cg":
        x, report = _pcg(A, b, M, tol, maxit, x0)
    else:
        x, report = _scipy_krylov(kind, A, b, M, tol, maxit, x0)
    report.residual = float(np.linalg.norm(b - A @ x) / np.linalg.norm(b))
    report.wall_time = time.perf_counter() - start
    if not report.converged and not report.breakdown:
        log.warning(f"⚠️ {kind} not converged in {maxit} iterations (relative residual {report.residual:.2e})")
    else:
        log.debug(f"🔁 {kind}: {report.iterations} iterations, residual {report.residual:.2e}")
    return x, report


# ---- block systems ----

@dataclass
class BlockOperator:
    """[[M_t, G], [D, M_a]] acting on (current, scalar)."""

    M_t: sp.csr_matrix
    G: sp.csr_matrix
    D: sp.csr_matrix
    M_a: sp.csr_matrix

    def __post_init__(self):
        nj, nphi = self.M_t.shape[0], self.M_a.shape[0]
        if self.M_t.shape != (nj, nj) or self.G.shape != (nj, nphi) or self.D.shape != (nphi, nj) or self.M_a.shape != (nphi, nphi):
            raise SolverError("block dimensions are not conformal")

    @property
    def split(self) -> int:
        return self.M_t.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        n = self.M_t.shape[0] + self.M_a.shape[0]
        return n, n

    def matrix(self, scaled: bool = False) -> sp.csr_matrix:
        """Assembled block matrix; ``scaled`` multiplies the top row by -3."""
        top = -3.0 if scaled else 1.0
        return sp.bmat([[top * self.M_t, top * self.G], [self.D, self.M_a]], format="csr")

    def scale_rhs(self, rhs: np.ndarray) -> np.ndarray:
        out = np.array(rhs, dtype=float)
        out[: self.split] *= -3.0
        return out

    def smm_identity_error(self) -> float:
        """max |G + Dᵀ/3|, zero for the SMM block structure."""
        diff = self.G + self.D.T / 3.0
        return float(abs(diff).max()) if diff.nnz else 0.0


def approximate_schur(op: BlockOperator) -> sp.csr_matrix:
    """Ŝ = M_a - D M̂_t⁻¹ G with M̂_t the lumped M_t."""
    lumped = lump_mass(op.M_t).diagonal()
    bad = lumped <= 0
    if np.any(bad):
        log.warning(f"⚠️ {int(bad.sum())} non-positive lumped entries; using the diagonal of M_t there")
        lumped = np.where(bad, op.M_t.diagonal(), lumped)
    S = op.M_a - op.D @ sp.diags(1.0 / lumped) @ op.G
    return sp.csr_matrix(S)


def block_preconditioner(op: BlockOperator, variant: str = "diag", scaled: bool = False) -> spla.LinearOperator:
    """
    ``diag``: blockdiag(SGS(c·M_t), Ŝ⁻¹) with c = 3 for the sign-scaled system
    and 1 otherwise; symmetric positive definite.
    ``tri``: lower block triangular, one forward Gauss–Seidel sweep on M_t
    followed by Ŝ⁻¹(r_a - D z_t); not symmetric.

    Raises:
        SolverError: Ŝ cannot be factored, or an unknown variant.
    """
    if variant not in ("diag", "tri"):
        raise SolverError(f"unknown block preconditioner '{variant}'")
    n_t = op.split
    try:
        schur = DirectSolver(approximate_schur(op))
    except SolverError as e:
        raise SolverError(f"approximate Schur complement assembly failed: {e}")

    if variant == "diag":
        gs = GaussSeidel((3.0 if scaled else 1.0) * op.M_t, symmetric=True)

        def apply(r):
            return np.concatenate([gs(r[:n_t]), schur._lu.solve(r[n_t:])])
    else:
        gs = GaussSeidel(op.M_t, symmetric=False)

        def apply(r):
            z_t = gs(r[:n_t])
            return np.concatenate([z_t, schur._lu.solve(r[n_t:] - op.D @ z_t)])

    return spla.LinearOperator(op.shape, matvec=apply, dtype=float)


# ---- Anderson ----

def anderson_solve(
    G: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    space_size: int = 0,
    tol: float = 1e-6,
    maxit: int = 100,
    callback: Optional[Callable[[int, np.ndarray, float], None]] = None,
) -> Tuple[np.ndarray, SolveReport]:
    """
    Type-II Anderson acceleration of ``x = G(x)``.

    Stops when ‖G(x) - x‖_∞ < tol, counting evaluations of ``G``. With
    ``space_size = 0`` the iterates are exactly x ← G(x). The history is
    cleared when the difference matrix loses rank.
    """
    start = time.perf_counter()
    report = SolveReport(solver=f"anderson({space_size})" if space_size else "picard", converged=False)
    x = np.array(x0, dtype=float)
    dF: List[np.ndarray] = []
    dG: List[np.ndarray] = []
    f_prev = g_prev = None
    for k in range(1, maxit + 1):
        gx = np.asarray(G(x), dtype=float)
        f = gx - x
        change = float(np.max(np.abs(f))) if f.size else 0.0
        report.iterations = k
        report.history.append(change)
        if callback is not None:
            callback(k, gx, change)
        log.debug(f"🔂 outer {k}: ‖Δx‖∞ = {change:.3e}")
        if change < tol:
            x = gx
            report.converged = True
            break
        if space_size == 0:
            x = gx
            continue
        if f_prev is not None:
            dF.append(f - f_prev)
            dG.append(gx - g_prev)
            if len(dF) > space_size:
                dF.pop(0)
                dG.pop(0)
        f_prev, g_prev = f, gx
        if not dF:
            x = gx
            continue
        Q, R = np.linalg.qr(np.column_stack(dF))
        diag = np.abs(np.diag(R))
        if diag.min() <= 1e-12 * max(diag.max(), np.finfo(float).tiny):
            log.debug(f"♻️ Anderson restart at iteration {k} (rank-deficient history)")
            dF.clear()
            dG.clear()
            x = gx
            continue
        gamma = sla.solve_triangular(R, Q.T @ f)
        x = gx - np.column_stack(dG) @ gamma
    report.residual = report.history[-1] if report.history else 0.0
    report.wall_time = time.perf_counter() - start
    if not report.converged:
        log.warning(f"⚠️ fixed-point iteration not converged in {maxit} evaluations (‖Δx‖∞ = {report.residual:.2e})")
    return x, report
