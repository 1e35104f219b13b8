import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.closures import (
    ClosureError,
    ClosureFields,
    boundary_beta,
    correction_tensor,
    discrete_eb0,
    inflow_current,
    scattering_source,
    source_moments,
)
from core.fespace import GridFunction, make_space
from core.mesh import build_cartesian_mesh
from core.transport import FOUR_PI, AngularFlux, TransportProblem, build_angular_quadrature, isotropic

S = np.array([0.2, 0.5, 0.9])


def linear_flux(x, omega):
    return 1.0 + x[:, 0] + 0.3 * omega[0] - 0.2 * omega[1] * x[:, 1]


def test_isotropic_flux_has_no_correction(curved_mesh, quad):
    problem = TransportProblem(curved_mesh, 1, quad, 1.0, 0.0)
    psi = AngularFlux.from_function(problem.space, quad, lambda x, om: 2.0 + x[:, 0] * x[:, 1])
    np.testing.assert_allclose(correction_tensor(psi).data, 0.0, atol=1e-13)
    for f in curved_mesh.boundary_faces:
        np.testing.assert_allclose(boundary_beta(psi, f, S), 0.0, atol=1e-13)


def test_linear_flux_has_no_in_plane_correction(square_mesh, quad):
    problem = TransportProblem(square_mesh, 1, quad, 1.0, 0.0)
    psi = AngularFlux.from_function(problem.space, quad, linear_flux)
    T = correction_tensor(psi).data
    np.testing.assert_allclose(T[:, :2, :2], 0.0, atol=1e-13)
    np.testing.assert_allclose(T[:, 2, 2], 0.0, atol=1e-13)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_correction_tensor_is_traceless_and_symmetric(seed):
    mesh = build_cartesian_mesh(1, 1)
    quad = build_angular_quadrature(2, 4)
    space = make_space(mesh, "DG", 1)
    data = np.random.default_rng(seed).uniform(0.0, 3.0, (quad.size, space.ndofs))
    T = correction_tensor(AngularFlux(space, quad, data)).data
    np.testing.assert_allclose(np.trace(T, axis1=1, axis2=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(T, np.swapaxes(T, 1, 2), atol=1e-13)


def test_closure_fields_match_the_tensor(square_mesh, quad):
    problem = TransportProblem(square_mesh, 1, quad, 1.0, 0.0)
    data = np.random.default_rng(4).uniform(0.0, 1.0, (quad.size, problem.space.ndofs))
    closures = ClosureFields(problem, AngularFlux(problem.space, quad, data))
    xi = np.array([[0.3, 0.6]])
    values = problem.space.reference_values(xi)
    np.testing.assert_allclose(closures.T_at(0, values)[0], closures.T.eval(0, xi)[0, :2, :2], atol=1e-13)
    grads = problem.space.eval_shape(0, xi).gradients
    expected = np.einsum("abb->a", closures.T.gradient(0, xi)[0, :2, :2, :])
    np.testing.assert_allclose(closures.div_T_at(0, grads)[0], expected, atol=1e-12)


def test_eb0_matches_a_quarter_for_fine_quadrature():
    fine = build_angular_quadrature(8, 64)
    assert discrete_eb0(np.array([1.0, 0.0]), fine) == pytest.approx(0.25, rel=1e-2)
    normals = np.array([[1.0, 0.0], [0.0, -1.0]])
    np.testing.assert_allclose(discrete_eb0(normals, fine), discrete_eb0(normals[0], fine))


def test_isotropic_inflow_current(square_mesh, quad):
    g = 0.3
    problem = TransportProblem(square_mesh, 1, quad, 1.0, 0.0, inflow=isotropic(g))
    for f in square_mesh.boundary_faces:
        normal = square_mesh.face_frame(f, S).normal[0]
        expected = -0.5 * FOUR_PI * discrete_eb0(normal, quad) * g
        np.testing.assert_allclose(inflow_current(problem, f, S), expected, rtol=1e-13)


def test_vacuum_inflow_current_is_zero(scattering_problem):
    vacuum = TransportProblem(scattering_problem.mesh, 1, scattering_problem.quad, 1.0, 0.5)
    f = vacuum.mesh.boundary_faces[0]
    assert not inflow_current(vacuum, f, S).any()


def test_interior_faces_are_rejected(scattering_problem):
    psi = AngularFlux.zeros(scattering_problem.space, scattering_problem.quad)
    f = scattering_problem.mesh.interior_faces[0]
    with pytest.raises(ClosureError):
        boundary_beta(psi, f, S)
    with pytest.raises(ClosureError):
        inflow_current(scattering_problem, f, S)


def test_source_moments_of_isotropic_source(scattering_problem):
    Q0, Q1 = source_moments(scattering_problem, np.array([[0.1, 0.2], [0.5, 0.5]]))
    np.testing.assert_allclose(Q0, FOUR_PI)
    np.testing.assert_allclose(Q1, 0.0, atol=1e-13)


def test_scattering_source_from_a_continuous_flux(scattering_problem):
    cg = make_space(scattering_problem.mesh, "CG", 1)
    phi = GridFunction(cg, np.full(cg.ndofs, FOUR_PI))
    vec = scattering_source(scattering_problem, phi)
    assert vec.sum() == pytest.approx(0.5 * 1.0, rel=1e-12)


def test_scattering_source_rejects_a_foreign_mesh(scattering_problem):
    other = make_space(build_cartesian_mesh(2, 2), "DG", 1)
    with pytest.raises(ClosureError):
        scattering_source(scattering_problem, GridFunction(other))
    with pytest.raises(ClosureError):
        ClosureFields(scattering_problem, AngularFlux.zeros(other, scattering_problem.quad))


def test_beta_vanishes_for_quarter_range_symmetric_flux(square_mesh, quad):
    problem = TransportProblem(square_mesh, 1, quad, 1.0, 0.0)
    psi = AngularFlux.from_function(problem.space, quad, lambda x, om: np.full(len(x), 1.0 + 0.5 * om[0] * om[1]))
    bottom = next(f for f in square_mesh.boundary_faces if square_mesh.faces[f].tag == "bottom")
    assert np.abs(boundary_beta(psi, bottom, S)).max() < 1e-13
