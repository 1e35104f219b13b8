"""
Problem builders for the drivers: meshes from the config, material layouts,
sources and inflow boundaries.
"""

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from core.config import ConfigError, ProblemConfig, Region
from core.harness.mms import ManufacturedSolution
from core.mesh import Mesh, build_cartesian_mesh, build_chebyshev_mesh, distort_taylor_green
from core.smm import SolverOptions
from core.transport import (
    AngularFunction,
    AngularQuadrature,
    TransportProblem,
    build_angular_quadrature,
    build_level_symmetric_quadrature,
    isotropic,
)

BOUNDARY_TOL = 1e-10


def build_mesh(config: ProblemConfig, n: int) -> Mesh:
    """Mesh of refinement level ``n`` (cells per side, or Chebyshev points per side)."""
    domain, m = config.domain, config.geometric_order
    if config.mesh == "chebyshev":
        return build_chebyshev_mesh(n, domain, m)
    x0, x1, y0, y1 = domain
    ny = n
    nx = max(1, int(round(n * (x1 - x0) / (y1 - y0))))
    mesh = build_cartesian_mesh(nx, ny, domain, m)
    if config.mesh == "taylor_green":
        mesh = distort_taylor_green(mesh, config.tg_final_time, config.tg_steps, config.tg_cell_scaled)
    return mesh


def build_quadrature(config: ProblemConfig) -> AngularQuadrature:
    if config.quadrature == "level_symmetric":
        return build_level_symmetric_quadrature(config.sn_order)
    return build_angular_quadrature(config.n_polar, config.n_azimuthal)


def solver_options(config: ProblemConfig) -> SolverOptions:
    return SolverOptions(
        inner_solver=config.inner_solver,
        inner_tol=config.inner_tol,
        max_inner=config.max_inner,
        rt_krylov=config.rt_krylov,
        preconditioner=config.preconditioner,
        penalty_scale=config.penalty_scale,
    )


def region_cross_sections(mesh: Mesh, regions: List[Region]) -> Tuple[np.ndarray, np.ndarray]:
    """σ_t, σ_s per element from the first region containing its centroid."""
    c = mesh.centroids()
    sig_t, sig_s = np.zeros(len(c)), np.zeros(len(c))
    for e, (x, y) in enumerate(c):
        region = next((r for r in regions if r.contains(x, y)), None)
        if region is None:
            raise ConfigError(f"element {e} centroid ({x:.3g}, {y:.3g}) lies outside every region")
        sig_t[e], sig_s[e] = region.sigma_t, region.sigma_s
    return sig_t, sig_s


# ---- manufactured solution ----

def mms_problem(config: ProblemConfig, mesh: Mesh, quad: AngularQuadrature) -> Tuple[TransportProblem, ManufacturedSolution]:
    mms = ManufacturedSolution(config.sigma_t, config.sigma_s)
    problem = TransportProblem(
        mesh, config.p, quad, config.sigma_t, config.sigma_s,
        source=mms.angular_source, inflow=mms.angular_flux, workers=config.workers,
    )
    return problem, mms


# ---- thick diffusion limit ----

def diffusion_limit_problem(mesh: Mesh, p: int, quad: AngularQuadrature, epsilon: float, workers: int = 1) -> TransportProblem:
    """σ_t = 1/ε, σ_a = ε, q = ε with vacuum boundaries."""
    return TransportProblem(
        mesh, p, quad, 1.0 / epsilon, 1.0 / epsilon - epsilon, source=isotropic(epsilon), inflow=None, workers=workers
    )


# ---- Z-channel multi-material problem ----

@dataclass(frozen=True)
class ZChannel:
    """
    Pipe of half-width ``half_width`` that enters on the left at height y_low,
    rises to y_high at one third of the width, and drops back to y_low at two
    thirds before leaving on the right.
    """

    domain: Tuple[float, float, float, float]
    half_width: float

    @property
    def levels(self) -> Tuple[float, float]:
        _, _, y0, y1 = self.domain
        return y0 + 0.25 * (y1 - y0), y0 + 0.75 * (y1 - y0)

    @property
    def bends(self) -> Tuple[float, float]:
        x0, x1, _, _ = self.domain
        return x0 + (x1 - x0) / 3.0, x0 + 2.0 * (x1 - x0) / 3.0

    def boxes(self) -> List[Tuple[float, float, float, float]]:
        x0, x1, _, _ = self.domain
        (yl, yu), (b1, b2), h = self.levels, self.bends, self.half_width
        return [
            (x0, b1 + h, yl - h, yl + h),
            (b1 - h, b1 + h, yl - h, yu + h),
            (b1 - h, b2 + h, yu - h, yu + h),
            (b2 - h, b2 + h, yl - h, yu + h),
            (b2 - h, x1, yl - h, yl + h),
        ]

    def contains(self, x: float, y: float) -> bool:
        return any(a <= x <= b and c <= y <= d for a, b, c, d in self.boxes())

    def entrance(self, x: np.ndarray) -> np.ndarray:
        x0 = self.domain[0]
        yl = self.levels[0]
        return (np.abs(x[:, 0] - x0) < BOUNDARY_TOL) & (np.abs(x[:, 1] - yl) <= self.half_width + BOUNDARY_TOL)


def entrance_inflow(channel: ZChannel, magnitude: float) -> AngularFunction:
    def f(x, omega):
        x = np.atleast_2d(x)
        return np.where(channel.entrance(x), magnitude, 0.0)

    return f


def multimaterial_problem(config: ProblemConfig, mesh: Mesh, quad: AngularQuadrature) -> TransportProblem:
    """
    Purely scattering pipe and wall plus the artificial absorption and source
    of one backward Euler step; isotropic inflow on the pipe entrance.
    Explicit ``region`` entries replace the built-in channel layout.
    """
    channel = ZChannel(tuple(config.domain), config.channel_half_width)
    if config.region:
        sig_t, sig_s = region_cross_sections(mesh, config.region)
    else:
        inside = np.array([channel.contains(x, y) for x, y in mesh.centroids()])
        sig_t = np.where(inside, config.pipe_sigma_t, config.wall_sigma_t)
        sig_s = sig_t.copy()
    return TransportProblem(
        mesh, config.p, quad, sig_t + config.absorption, sig_s,
        source=isotropic(config.source), inflow=entrance_inflow(channel, config.inflow), workers=config.workers,
    )


def nominal_h(config: ProblemConfig, n: int) -> float:
    """Structured mesh size used for regression: the y-extent over the cell count."""
    _, _, y0, y1 = config.domain
    return (y1 - y0) / n
