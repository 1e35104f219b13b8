import math

import numpy as np
import pytest

from core.fespace import (
    GridFunction,
    SpaceError,
    l2_difference,
    l2_norm,
    l2_project,
    load_grid_function,
    make_quadrature,
    make_space,
)
from core.mesh import build_cartesian_mesh


def linear(x):
    return 1.0 + 2.0 * x[:, 0] - 3.0 * x[:, 1]


@pytest.mark.parametrize("p", [0, 1, 2])
def test_dg_and_cg_sizes(rect_mesh, p):
    assert make_space(rect_mesh, "DG", p).ndofs == 6 * (p + 1) ** 2
    if p:
        assert make_space(rect_mesh, "CG", p).ndofs == (3 * p + 1) * (2 * p + 1)


@pytest.mark.parametrize("p", [0, 1, 2])
def test_rt_sizes(rect_mesh, p):
    faces = len(rect_mesh.faces)
    rt = make_space(rect_mesh, "RT", p)
    assert rt.nloc == 2 * (p + 1) * (p + 2)
    assert rt.ndofs == faces * (p + 1) + 6 * 2 * p * (p + 1)
    assert make_space(rect_mesh, "BrokenRT", p).ndofs == 6 * rt.nloc
    assert make_space(rect_mesh, "Trace", p).ndofs == len(rect_mesh.interior_faces) * (p + 1)


def test_unknown_space_and_degree(square_mesh):
    with pytest.raises(SpaceError):
        make_space(square_mesh, "Nedelec", 1)
    with pytest.raises(SpaceError):
        make_space(square_mesh, "CG", 0)


def test_quadrature_exactness():
    rule = make_quadrature(5)
    x = rule.points
    assert rule.weights @ (x[:, 0] ** 5 * x[:, 1] ** 4) == pytest.approx(1.0 / 30.0, rel=1e-13)
    with pytest.raises(SpaceError):
        make_quadrature(2, "triangle")


def test_projection_reproduces_linear_functions(rect_mesh):
    g = l2_project(make_space(rect_mesh, "DG", 1), linear)
    assert l2_norm(g, linear) < 1e-12


def test_projection_on_curved_mesh_converges(curved_mesh):
    f = lambda x: np.sin(math.pi * x[:, 0]) * np.cos(math.pi * x[:, 1])
    coarse = l2_norm(l2_project(make_space(curved_mesh, "DG", 1), f), f)
    fine = l2_norm(l2_project(make_space(curved_mesh, "DG", 3), f), f)
    assert fine < 0.1 * coarse


def test_l2_norm_of_constant(rect_mesh):
    assert l2_norm(lambda x: np.ones(len(x)), mesh=rect_mesh) == pytest.approx(math.sqrt(1.5), rel=1e-12)
    with pytest.raises(SpaceError):
        l2_norm(lambda x: np.ones(len(x)))


def test_l2_difference_across_spaces(square_mesh):
    dg = l2_project(make_space(square_mesh, "DG", 2), linear)
    cg_space = make_space(square_mesh, "CG", 1)
    nodes = np.zeros((cg_space.ndofs, 2))
    nodes[cg_space.element_dofs.ravel()] = cg_space.node_points().reshape(-1, 2)
    cg = GridFunction(cg_space, linear(nodes))
    assert l2_difference(dg, cg) < 1e-12
    assert l2_difference(dg, dg) == 0.0


def test_l2_difference_needs_one_mesh(square_mesh):
    other = build_cartesian_mesh(2, 2)
    a = GridFunction(make_space(square_mesh, "DG", 1))
    b = GridFunction(make_space(other, "DG", 1))
    with pytest.raises(SpaceError):
        l2_difference(a, b)


def test_grid_function_length_is_checked(square_mesh):
    with pytest.raises(SpaceError):
        GridFunction(make_space(square_mesh, "DG", 1), np.zeros(3))


def test_rt_normal_component_is_continuous(curved_mesh):
    rt = make_space(curved_mesh, "RT", 1)
    J = GridFunction(rt, np.random.default_rng(7).normal(size=rt.ndofs))
    s = np.array([0.1, 0.5, 0.8])
    for f in curved_mesh.interior_faces:
        fr = curved_mesh.face_frame(f, s)
        e1, e2 = curved_mesh.faces[f].elements
        v1 = np.einsum("qa,qa->q", J.eval(e1, fr.xi1), fr.normal)
        v2 = np.einsum("qa,qa->q", J.eval(e2, fr.xi2), fr.normal)
        np.testing.assert_allclose(v1, v2, atol=1e-11)


def test_rt_divergence_theorem(curved_mesh):
    rt = make_space(curved_mesh, "RT", 1)
    J = GridFunction(rt, np.random.default_rng(3).normal(size=rt.ndofs))
    vd = rt.volume_data()
    div = np.einsum("eqi,ei->eq", vd.divergence, J.local())
    volume = (vd.wJ * div).sum(axis=1)
    rule = make_quadrature(8, "segment")
    outflow = np.zeros(curved_mesh.num_elements)
    for f, face in enumerate(curved_mesh.faces):
        fr = curved_mesh.face_frame(f, rule.points)
        e1 = face.elements[0]
        flux = rule.weights * fr.dl @ np.einsum("qa,qa->q", J.eval(e1, fr.xi1), fr.normal)
        outflow[e1] += flux
        if face.interior:
            outflow[face.elements[1]] -= flux
    np.testing.assert_allclose(volume, outflow, atol=1e-10)


def test_trace_dofs_only_on_interior_faces(square_mesh):
    trace = make_space(square_mesh, "Trace", 1)
    assert len(trace.dofs_of_face(square_mesh.interior_faces[0])) == 2
    with pytest.raises(SpaceError):
        trace.dofs_of_face(square_mesh.boundary_faces[0])


def test_grid_function_file_must_match_space(tmp_path, square_mesh):
    g = l2_project(make_space(square_mesh, "DG", 1), linear)
    path = g.save(tmp_path / "phi.txt")
    np.testing.assert_allclose(load_grid_function(path, g.space).data, g.data)
    with pytest.raises(SpaceError):
        load_grid_function(path, make_space(square_mesh, "DG", 2))


@pytest.mark.parametrize("p", [0, 1, 2])
def test_piola_gradient_matches_finite_differences(curved_mesh, p):
    rt = make_space(curved_mesh, "RT", p)
    xi0, step = np.array([0.37, 0.61]), 1e-5
    for e in (0, 4, 8):
        frame = curved_mesh.element_frame(e, xi0[None, :])
        grads = rt.eval_shape(e, xi0[None, :]).gradients[0]
        scale = np.abs(grads).max()
        for k in range(2):
            offset = np.zeros(2)
            offset[k] = step
            plus = rt.eval_shape(e, (xi0 + offset)[None, :]).values[0]
            minus = rt.eval_shape(e, (xi0 - offset)[None, :]).values[0]
            along = np.einsum("iab,b->ia", grads, frame.F[0][:, k])
            np.testing.assert_allclose(along, (plus - minus) / (2 * step), atol=1e-6 * scale)


def test_piola_curvature_term_is_trace_free(curved_mesh):
    rt = make_space(curved_mesh, "RT", 2)
    xi = np.random.default_rng(11).uniform(0.05, 0.95, size=(6, 2))
    for e in range(curved_mesh.num_elements):
        shapes = rt.eval_shape(e, xi)
        B = shapes.B_hat
        assert np.abs(B).max() > 0
        np.testing.assert_allclose(np.einsum("qiaa->qi", B), 0.0, atol=1e-10 * np.abs(B).max())
        # the trace of the full gradient is the divergence
        np.testing.assert_allclose(
            np.einsum("qiaa->qi", shapes.gradients), shapes.divergence, atol=1e-10 * np.abs(shapes.gradients).max()
        )
