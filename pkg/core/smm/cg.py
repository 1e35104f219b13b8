"""
Continuous Galerkin SMM on V_p.

The forms are the interior penalty ones with every jump of the test and
trial functions removed; only the correction term ∫_Γ0 ⟨∇u/σ_t⟩·⟦Tn⟧
survives on interior faces.
"""

from typing import Optional

import numpy as np

from core.closures import ClosureFields
from core.smm.base import SolverOptions
from core.smm.ip import ScalarMomentSystem
from core.transport import TransportProblem


class CGSystem(ScalarMomentSystem):
    kind = "cg"
    continuous = True
    jumps = False


def assemble_cg(problem: TransportProblem, options: Optional[SolverOptions] = None, order: Optional[int] = None) -> CGSystem:
    return CGSystem(problem, options, order)


def assemble_cg_rhs(system: CGSystem, closures: ClosureFields) -> np.ndarray:
    return system.rhs(closures)
