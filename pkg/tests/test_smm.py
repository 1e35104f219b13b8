import numpy as np
import pytest

from core.closures import ClosureFields, broken_div_T, discrete_eb0
from core.fespace import GridFunction, l2_difference, l2_norm
from core.mesh import build_cartesian_mesh
from core.smm import (
    MOMENT_KINDS,
    MomentSystemError,
    SmmIteration,
    SolverOptions,
    fixed_point_operator,
    make_moment_system,
    moment_balance,
    moment_solve,
    run_smm,
)
from core.smm.cg import assemble_cg, assemble_cg_rhs
from core.smm.hrt import assemble_hrt, hrt_solve
from core.smm.ip import assemble_ip, assemble_ip_rhs
from core.smm.rt import assemble_rt, assemble_rt_rhs
from core.transport import FOUR_PI, AngularFlux, TransportProblem, TransportSweeper, dsa_reference_solve, isotropic

KRYLOV = {
    "ip": SolverOptions(inner_solver="krylov", inner_tol=1e-12),
    "cg": SolverOptions(inner_solver="krylov", inner_tol=1e-12),
    "rt": SolverOptions(inner_solver="krylov", inner_tol=1e-12, rt_krylov="minres"),
    "hrt": SolverOptions(inner_solver="krylov", inner_tol=1e-12),
}


@pytest.fixture
def closures(scattering_problem):
    space = scattering_problem.space
    phi = GridFunction(space, np.linspace(1.0, 3.0, space.ndofs))
    psi = TransportSweeper(scattering_problem).sweep(phi)
    return ClosureFields(scattering_problem, psi)


def test_unknown_counts(scattering_problem):
    sizes = {kind: make_moment_system(kind, scattering_problem).size for kind in MOMENT_KINDS}
    assert sizes == {"ip": 16, "cg": 9, "rt": 16 + 40, "hrt": 16 + 48}


def test_bad_requests(scattering_problem, square_mesh, quad):
    with pytest.raises(MomentSystemError):
        make_moment_system("p1", scattering_problem)
    with pytest.raises(MomentSystemError):
        SolverOptions(rt_krylov="minres", preconditioner="tri")
    with pytest.raises(MomentSystemError):
        SolverOptions(inner_solver="multigrid")
    with pytest.raises(MomentSystemError):
        make_moment_system("ip", TransportProblem(square_mesh, 0, quad, 1.0, 0.5))


@pytest.mark.parametrize("kind", ["ip", "cg"])
def test_scalar_matrices_are_spd(scattering_problem, kind):
    A = make_moment_system(kind, scattering_problem).A.toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-13)
    assert np.linalg.eigvalsh(0.5 * (A + A.T)).min() > 0


def test_rt_blocks_satisfy_the_smm_identity(scattering_problem):
    block = make_moment_system("rt", scattering_problem).block
    assert block.smm_identity_error() < 1e-13
    A = block.matrix(scaled=True)
    assert abs(A - A.T).max() < 1e-12


def test_hybridized_matrix_is_spd(scattering_problem):
    H = make_moment_system("hrt", scattering_problem).H.toarray()
    np.testing.assert_allclose(H, H.T, atol=1e-13)
    assert np.linalg.eigvalsh(H).min() > 0


@pytest.mark.parametrize("kind", MOMENT_KINDS)
def test_direct_solves_balance(scattering_problem, closures, kind):
    system = make_moment_system(kind, scattering_problem)
    solution = system.solve(closures)
    balance = moment_balance(system, solution, closures)
    assert balance["relative_residual"] < 1e-10
    assert balance["leakage"] > 0
    assert solution.report.converged


def test_rt_and_hrt_agree(scattering_problem, closures):
    rt = make_moment_system("rt", scattering_problem).solve(closures)
    hrt = hrt_solve(make_moment_system("hrt", scattering_problem), closures)
    assert l2_difference(rt.varphi, hrt.varphi) < 1e-10 * l2_norm(rt.varphi)
    assert l2_difference(rt.J, hrt.J) < 1e-10 * l2_norm(rt.J)
    assert hrt.lam is not None and len(hrt.lam) == 4 * 2


def test_curved_rt_and_hrt_agree(curved_mesh, quad):
    problem = TransportProblem(curved_mesh, 1, quad, 2.0, 1.0, source=isotropic(1.0))
    closures = ClosureFields(problem, TransportSweeper(problem).sweep())
    rt = make_moment_system("rt", problem).solve(closures)
    hrt = make_moment_system("hrt", problem).solve(closures)
    assert l2_difference(rt.varphi, hrt.varphi) < 1e-9 * l2_norm(rt.varphi)
    assert l2_difference(rt.J, hrt.J) < 1e-9 * l2_norm(rt.J)


def test_single_element_hybridization_is_local(quad):
    problem = TransportProblem(build_cartesian_mesh(1, 1), 1, quad, 1.0, 0.5, source=isotropic(1.0))
    closures = ClosureFields(problem, TransportSweeper(problem).sweep())
    system = make_moment_system("hrt", problem)
    assert system.trace_space.ndofs == 0
    solution = system.solve(closures)
    assert solution.report.solver == "local"
    assert len(solution.lam) == 0
    rt = make_moment_system("rt", problem).solve(closures)
    np.testing.assert_allclose(solution.varphi.data, rt.varphi.data, atol=1e-11)


@pytest.mark.parametrize("kind", MOMENT_KINDS)
def test_krylov_matches_direct(scattering_problem, closures, kind):
    direct = make_moment_system(kind, scattering_problem).solve(closures)
    iterative = make_moment_system(kind, scattering_problem, KRYLOV[kind]).solve(closures)
    assert l2_difference(direct.varphi, iterative.varphi) < 1e-6 * l2_norm(direct.varphi)
    assert iterative.report.iterations > 0


def test_rt_bicgstab_with_triangular_preconditioner(scattering_problem, closures):
    options = SolverOptions(inner_solver="krylov", inner_tol=1e-12, rt_krylov="bicgstab", preconditioner="tri")
    direct = make_moment_system("rt", scattering_problem).solve(closures)
    iterative = make_moment_system("rt", scattering_problem, options).solve(closures)
    assert l2_difference(direct.varphi, iterative.varphi) < 1e-6 * l2_norm(direct.varphi)


@pytest.mark.parametrize("kind", ["ip", "hrt"])
def test_warm_start_reuses_the_last_solution(scattering_problem, closures, kind):
    options = SolverOptions(inner_solver="krylov", inner_tol=1e-8)
    system = make_moment_system(kind, scattering_problem, options)
    b = system.rhs(closures)
    first = system.solve_rhs(b)
    second = system.solve_rhs(b)
    assert second.report.iterations < first.report.iterations
    assert system.solve_count == 2


def test_moment_solve_and_pack_layout(scattering_problem, closures):
    system = make_moment_system("rt", scattering_problem)
    solution = moment_solve(system, system.rhs(closures))
    X = system.pack(solution)
    assert X.shape == (system.size,)
    varphi, J = system.unpack(X)
    np.testing.assert_array_equal(varphi.data, solution.varphi.data)
    np.testing.assert_array_equal(J.data, solution.J.data)
    np.testing.assert_array_equal(system.scalar_flux(X).data, solution.varphi.data)


@pytest.mark.parametrize("kind", MOMENT_KINDS)
def test_left_hand_side_is_frozen(scattering_problem, closures, kind):
    system = make_moment_system(kind, scattering_problem)
    before = system.lhs_checksum()
    system.solve(closures)
    system.solve(closures, x0=system.zero_guess())
    assert system.lhs_checksum() == before


def test_fixed_point_operator_runs_one_evaluation(scattering_problem):
    system = make_moment_system("ip", scattering_problem)
    state = SmmIteration(system)
    X = fixed_point_operator(system.zero_guess(), state)
    assert X.shape == (system.size,)
    assert len(state.inner) == 1
    assert set(state.timer.totals) == {"sweep", "closures", "rhs", "solve"}


@pytest.mark.parametrize("kind", MOMENT_KINDS)
def test_pure_absorber_converges_in_two_evaluations(square_mesh, quad, kind):
    problem = TransportProblem(square_mesh, 1, quad, 1.0, 0.0, source=isotropic(1.0))
    result = run_smm(make_moment_system(kind, problem), tol=1e-12)
    assert result.outer.converged
    assert result.outer.iterations == 2


@pytest.mark.parametrize("kind", MOMENT_KINDS)
def test_picard_and_anderson_reach_the_same_solution(scattering_problem, kind):
    picard = run_smm(make_moment_system(kind, scattering_problem), "picard", tol=1e-10)
    anderson = run_smm(make_moment_system(kind, scattering_problem), "anderson", anderson_size=2, tol=1e-10)
    assert picard.outer.converged and anderson.outer.converged
    assert l2_difference(picard.varphi, anderson.varphi) < 1e-7 * l2_norm(picard.varphi)
    for result in (picard, anderson):
        assert result.lhs_fixed
        assert result.balance["relative_residual"] < 1e-9
        summary = result.summary()
        assert summary["outer_iterations"] == result.outer.iterations
        assert summary["inner_min"] <= summary["inner_avg"] <= summary["inner_max"]
        assert set(result.timings) >= {"sweep", "closures", "rhs", "solve"}
        assert len(result.inner) == result.outer.iterations


def test_converged_smm_is_close_to_the_transport_solution(quad):
    problem = TransportProblem(build_cartesian_mesh(4, 4), 2, quad, 1.0, 0.5, source=isotropic(1.0))
    sweeper = TransportSweeper(problem)
    reference = dsa_reference_solve(problem, tol=1e-10, sweeper=sweeper)
    for kind in MOMENT_KINDS:
        result = run_smm(make_moment_system(kind, problem), tol=1e-10, sweeper=sweeper)
        assert l2_difference(result.varphi, reference.phi) < 0.05 * l2_norm(reference.phi)


def test_fixup_keeps_the_iteration_nonnegative(quad):
    mesh = build_cartesian_mesh(4, 1, (0.0, 2.0, 0.0, 0.5))

    def left_beam(x, omega):
        return np.where(np.abs(x[:, 0]) < 1e-12, 1.0, 0.0)

    problem = TransportProblem(mesh, 2, quad, 20.0, 10.0, inflow=left_beam)
    result = run_smm(make_moment_system("rt", problem), tol=1e-6, fixup=True)
    assert result.outer.converged
    assert result.psi.data.min() >= 0.0
    assert result.min_psi < 0.0


@pytest.mark.parametrize(
    "kind, assemble, assemble_rhs",
    [
        ("ip", assemble_ip, assemble_ip_rhs),
        ("cg", assemble_cg, assemble_cg_rhs),
        ("rt", assemble_rt, assemble_rt_rhs),
        ("hrt", assemble_hrt, None),
    ],
)
def test_assemblers_match_the_factory(scattering_problem, closures, kind, assemble, assemble_rhs):
    system = assemble(scattering_problem)
    reference = make_moment_system(kind, scattering_problem)
    assert system.lhs_checksum() == reference.lhs_checksum()
    if assemble_rhs is not None:
        np.testing.assert_array_equal(assemble_rhs(system, closures), reference.rhs(closures))


@pytest.mark.parametrize("kind", ["ip", "cg"])
def test_constants_only_see_the_boundary_term(quad, kind):
    problem = TransportProblem(build_cartesian_mesh(3, 3), 1, quad, 1.0, 1.0)
    system = make_moment_system(kind, problem)
    ones = np.ones(system.size)
    eb0 = discrete_eb0(np.array([1.0, 0.0]), quad)
    assert ones @ system.A @ ones == pytest.approx(4.0 * eb0, rel=1e-12)
    if kind == "ip":
        centre = int(np.argmin(np.linalg.norm(problem.mesh.centroids() - 0.5, axis=1)))
        rows = system.scalar_space.element_dofs[centre]
        np.testing.assert_allclose((system.A @ ones)[rows], 0.0, atol=1e-12)


def test_isotropic_closures_reduce_to_the_diffusion_source(scattering_problem):
    quad = scattering_problem.quad
    vacuum = TransportProblem(scattering_problem.mesh, 1, quad, 1.0, 0.5, source=isotropic(1.0))
    psi = AngularFlux(vacuum.space, quad, np.full((quad.size, vacuum.space.ndofs), 0.3))
    closures = ClosureFields(vacuum, psi)
    for kind in ("ip", "cg"):
        system = make_moment_system(kind, vacuum)
        b = system.rhs(closures)
        weights = system.scalar_space.nodal_weights()
        expected = np.zeros(system.size)
        np.add.at(expected, system.scalar_space.element_dofs, FOUR_PI * weights)
        np.testing.assert_allclose(b, expected, atol=1e-12)


@pytest.mark.parametrize("kind", ["ip", "cg", "rt"])
def test_quadrature_is_saturated_on_affine_meshes(scattering_problem, closures, kind):
    base = make_moment_system(kind, scattering_problem)
    richer = make_moment_system(kind, scattering_problem, order=base.order + 2)
    A0 = base.block.matrix() if kind == "rt" else base.A
    A1 = richer.block.matrix() if kind == "rt" else richer.A
    assert abs(A1 - A0).max() < 1e-12 * abs(A0).max()
    b0, b1 = base.rhs(closures), richer.rhs(closures)
    assert np.abs(b1 - b0).max() < 1e-12 * np.abs(b0).max()


def test_broken_divergence_of_the_correction(scattering_problem):
    space, quad = scattering_problem.space, scattering_problem.quad
    xi = np.array([[0.2, 0.4], [0.7, 0.9]])
    constant = ClosureFields(scattering_problem, AngularFlux(space, quad, np.full((quad.size, space.ndofs), 1.5)))
    np.testing.assert_allclose(broken_div_T(constant.T, 0, xi), 0.0, atol=1e-12)
    data = np.random.default_rng(11).uniform(0.0, 1.0, (quad.size, space.ndofs))
    closures = ClosureFields(scattering_problem, AngularFlux(space, quad, data))
    grads = space.eval_shape(2, xi).gradients
    np.testing.assert_allclose(broken_div_T(closures.T, 2, xi), closures.div_T_at(2, grads), atol=1e-12)


def brute_force_ip_forms(problem):
    """Each interior penalty bilinear form summed entry by entry with its own Gauss rule."""
    mesh, space, quad, p = problem.mesh, problem.space, problem.quad, problem.p
    n, ne = space.ndofs, mesh.num_elements
    forms = {k: np.zeros((n, n)) for k in ("diffusion", "absorption", "boundary", "penalty", "consistency")}
    t, w = np.polynomial.legendre.leggauss(6)
    s, ws = 0.5 * (t + 1.0), 0.5 * w
    xi = np.array([[a, b] for b in s for a in s])
    wxi = np.array([wa * wb for wb in ws for wa in ws])
    D = 1.0 / (3.0 * problem.sigma_t)
    area = np.zeros(ne)
    for e in range(ne):
        wJ = wxi * mesh.element_frame(e, xi).J
        sh = space.eval_shape(e, xi)
        area[e] = wJ.sum()
        for a, i in enumerate(space.element_dofs[e]):
            for b, j in enumerate(space.element_dofs[e]):
                forms["diffusion"][i, j] += D[e] * np.sum(wJ * np.sum(sh.gradients[:, a] * sh.gradients[:, b], axis=1))
                forms["absorption"][i, j] += problem.sigma_a[e] * np.sum(wJ * sh.values[:, a] * sh.values[:, b])

    for f, face in enumerate(mesh.faces):
        fr = mesh.face_frame(f, s)
        wl = ws * fr.dl
        if not face.interior:
            e = face.elements[0]
            U = space.eval_shape(e, fr.xi1).values
            eb0 = np.array([quad.weights @ np.abs(quad.omega[:, :2] @ nq) for nq in fr.normal]) / FOUR_PI
            for a, i in enumerate(space.element_dofs[e]):
                for b, j in enumerate(space.element_dofs[e]):
                    forms["boundary"][i, j] += np.sum(wl * eb0 * U[:, a] * U[:, b])
            continue
        e1, e2 = face.elements
        kappa = 0.5 * sum((p + 1) ** 2 / (problem.sigma_t[k] * np.sqrt(area[k])) for k in (e1, e2))
        jump, flux = np.zeros((len(s), n)), np.zeros((len(s), n))
        for e, xi_f, sign in ((e1, fr.xi1, 1.0), (e2, fr.xi2, -1.0)):
            sh = space.eval_shape(e, xi_f)
            for a, i in enumerate(space.element_dofs[e]):
                jump[:, i] += sign * sh.values[:, a]
                flux[:, i] += 0.5 * D[e] * np.sum(sh.gradients[:, a] * fr.normal, axis=1)
        for i in range(n):
            for j in range(n):
                forms["penalty"][i, j] += kappa * np.sum(wl * jump[:, i] * jump[:, j])
                forms["consistency"][i, j] += np.sum(wl * jump[:, i] * flux[:, j])
    return forms


def test_ip_matrix_matches_term_by_term_assembly(square_mesh, quad):
    problem = TransportProblem(square_mesh, 1, quad, [1.0, 2.0, 3.0, 4.0], [0.5, 1.0, 2.5, 1.0])
    forms = brute_force_ip_forms(problem)
    system = assemble_ip(problem)
    A = system.A.toarray()
    scale = np.abs(A).max()
    C = forms["consistency"]
    expected = forms["diffusion"] + forms["absorption"] + forms["boundary"] + forms["penalty"] - C - C.T
    np.testing.assert_allclose(A, expected, atol=1e-12 * scale)

    volume_and_boundary = system.forms.matrix(1.0, jumps=False).toarray()
    np.testing.assert_allclose(
        volume_and_boundary, forms["diffusion"] + forms["absorption"] + forms["boundary"], atol=1e-12 * scale
    )
    doubled = system.forms.matrix(2.0).toarray()
    np.testing.assert_allclose(doubled - A, forms["penalty"], atol=1e-12 * scale)
    assert np.abs(forms["penalty"]).max() > 0 and np.abs(C).max() > 0
