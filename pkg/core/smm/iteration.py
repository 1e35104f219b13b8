"""
The SMM fixed-point operator X ↦ G(X): sweep on the scattering source of X's
scalar flux, compute closures from the new angular flux, rebuild the moment
right-hand side and solve with the frozen left-hand side.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from core.closures import ClosureFields
from core.fespace import GridFunction
from core.linalg import SolveReport, anderson_solve
from core.smm.base import MomentSolution, MomentSystem, moment_balance
from core.transport import AngularFlux, TransportSweeper
from core.utils.logger import PhaseTimer, get_logger

log = get_logger("🔁 smm.iteration")


class SmmIteration:
    """
    Callable fixed-point map holding the state carried between evaluations:
    the previous angular flux (for lagged reentrant faces), the last closures
    and moment solution, and per-evaluation inner reports.
    """

    def __init__(
        self,
        system: MomentSystem,
        fixup: bool = False,
        sweeper: Optional[TransportSweeper] = None,
        timer: Optional[PhaseTimer] = None,
    ):
        self.system = system
        self.problem = system.problem
        self.fixup = fixup
        self.sweeper = sweeper or TransportSweeper(self.problem)
        self.timer = timer or PhaseTimer()
        self.psi: Optional[AngularFlux] = None
        self.closures: Optional[ClosureFields] = None
        self.solution: Optional[MomentSolution] = None
        self.inner: List[SolveReport] = []
        self.min_psi: List[float] = []
        self.initial_checksum = system.lhs_checksum()

    def __call__(self, X: np.ndarray) -> np.ndarray:
        varphi = self.system.scalar_flux(X)
        with self.timer.phase("sweep", log):
            self.psi = self.sweeper.sweep(varphi, self.psi, self.fixup)
        self.min_psi.append(self.sweeper.min_psi)
        with self.timer.phase("closures", log):
            self.closures = ClosureFields(self.problem, self.psi)
        with self.timer.phase("rhs", log):
            b = self.system.rhs(self.closures)
        with self.timer.phase("solve", log):
            self.solution = self.system.solve_rhs(b)
        self.inner.append(self.solution.report)
        return self.system.pack(self.solution)


def fixed_point_operator(X: np.ndarray, state: SmmIteration) -> np.ndarray:
    return state(X)


@dataclass
class IterationResult:
    varphi: GridFunction
    psi: AngularFlux
    outer: SolveReport
    inner: List[SolveReport]
    balance: Dict[str, float]
    timings: Dict[str, float]
    lhs_fixed: bool
    min_psi: float
    J: Optional[GridFunction] = None
    lam: Optional[np.ndarray] = None
    extra: Dict[str, float] = field(default_factory=dict)

    @property
    def inner_iterations(self) -> List[int]:
        return [r.iterations for r in self.inner]

    def summary(self) -> Dict[str, float]:
        counts = self.inner_iterations or [0]
        return {
            "outer_iterations": self.outer.iterations,
            "outer_converged": self.outer.converged,
            "inner_avg": float(np.mean(counts)),
            "inner_min": int(min(counts)),
            "inner_max": int(max(counts)),
            "balance": self.balance["relative_residual"],
            "min_psi": self.min_psi,
        }


def run_smm(
    system: MomentSystem,
    outer_solver: str = "picard",
    anderson_size: int = 2,
    tol: float = 1e-6,
    maxit: int = 200,
    fixup: bool = False,
    x0: Optional[np.ndarray] = None,
    sweeper: Optional[TransportSweeper] = None,
    timer: Optional[PhaseTimer] = None,
) -> IterationResult:
    """Converge the coupled sweep/moment iteration from ``x0`` (zero by default)."""
    state = SmmIteration(system, fixup=fixup, sweeper=sweeper, timer=timer)
    m = anderson_size if outer_solver == "anderson" else 0
    guess = system.zero_guess() if x0 is None else np.asarray(x0, dtype=float)
    _, report = anderson_solve(state, guess, space_size=m, tol=tol, maxit=maxit)
    solution = state.solution
    balance = moment_balance(system, solution, state.closures)
    lhs_fixed = system.lhs_checksum() == state.initial_checksum
    if not lhs_fixed:
        log.error("❌ moment left-hand side changed during the iteration")
    log.info(
        f"✅ {system.kind.upper()} SMM: {report.iterations} outer iterations, "
        f"balance {balance['relative_residual']:.1e}, converged={report.converged}"
    )
    return IterationResult(
        varphi=solution.varphi,
        psi=state.psi,
        outer=report,
        inner=state.inner,
        balance=balance,
        timings=dict(state.timer.totals),
        lhs_fixed=lhs_fixed,
        min_psi=float(min(state.min_psi)) if state.min_psi else 0.0,
        J=solution.J,
        lam=solution.lam,
    )
