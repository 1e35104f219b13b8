from typing import Optional

from core.smm.base import MOMENT_KINDS, MomentSolution, MomentSystem, MomentSystemError, SolverOptions, moment_balance
from core.smm.cg import CGSystem
from core.smm.hrt import HRTSystem
from core.smm.ip import IPSystem
from core.smm.iteration import IterationResult, SmmIteration, fixed_point_operator, run_smm
from core.smm.rt import RTSystem
from core.transport import TransportProblem

_SYSTEMS = {"ip": IPSystem, "cg": CGSystem, "rt": RTSystem, "hrt": HRTSystem}


def make_moment_system(
    kind: str, problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None
) -> MomentSystem:
    """
    Raises:
        MomentSystemError: unknown kind.
    """
    try:
        cls = _SYSTEMS[kind.lower()]
    except KeyError:
        raise MomentSystemError(f"unknown moment system '{kind}' (expected one of {', '.join(MOMENT_KINDS)})")
    return cls(problem, options, order)


def moment_solve(system: MomentSystem, rhs, x0=None) -> MomentSolution:
    return system.solve_rhs(rhs, x0)


__all__ = [
    "MOMENT_KINDS",
    "CGSystem",
    "HRTSystem",
    "IPSystem",
    "IterationResult",
    "MomentSolution",
    "MomentSystem",
    "MomentSystemError",
    "RTSystem",
    "SmmIteration",
    "SolverOptions",
    "fixed_point_operator",
    "make_moment_system",
    "moment_balance",
    "moment_solve",
    "run_smm",
]
