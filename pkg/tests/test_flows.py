"""Assignment and similarity flow dynamics, potentials, differentials."""

import csv

import numpy as np
import pytest

from assignflow import flows, geometry, graph
from assignflow.errors import NotApplicableError, SingularityError

RNG = np.random.default_rng(20240818)


def make_params(height, width, c, rho=None, symmetric=False, rng=RNG):
    w = graph.uniform_weights(graph.grid_graph(height, width))
    if symmetric:
        w = graph.symmetrize(w)
    d = rng.uniform(0.0, 2.0, size=(height * width, c))
    if rho is None:
        rho = flows.default_rho(d)
    return flows.FlowParams(rho=rho, omega=w, distances=d)


def random_interior(n, c, rng=RNG):
    m = rng.uniform(0.2, 1.0, size=(n, c))
    return m / m.sum(axis=1, keepdims=True)


def random_tangent(n, c, rng=RNG):
    x = rng.standard_normal((n, c))
    return x - x.mean(axis=1, keepdims=True)


# ---------------------------------------------------------------- params

def test_params_reject_bad_rho():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    with pytest.raises(ValueError):
        flows.FlowParams(rho=0.0, omega=w, distances=np.zeros((1, 2)))


def test_params_reject_shape_mismatch():
    w = graph.uniform_weights(graph.grid_graph(2, 1))
    with pytest.raises(ValueError):
        flows.FlowParams(rho=1.0, omega=w, distances=np.zeros((3, 2)))


def test_params_reject_negative_distances():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    with pytest.raises(ValueError):
        flows.FlowParams(rho=1.0, omega=w, distances=np.array([[0.1, -0.2]]))


def test_default_rho():
    assert flows.default_rho(np.array([[0.0, 2.0], [4.0, 0.0]])) == 3.0
    assert flows.default_rho(np.zeros((2, 3))) == 1.0


# ------------------------------------------------------------ likelihood

def test_likelihood_constant_row_is_identity():
    w = graph.uniform_weights(graph.grid_graph(2, 1))
    params = flows.FlowParams(rho=0.7, omega=w, distances=np.full((2, 3), 1.3))
    mat = random_interior(2, 3)
    np.testing.assert_allclose(flows.likelihood(params, mat), mat, atol=1e-14)


def test_likelihood_large_gap_concentrates():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    params = flows.FlowParams(rho=1.0, omega=w, distances=np.array([[0.0, 60.0]]))
    out = flows.likelihood(params, np.array([[0.5, 0.5]]))
    # the interior clamp keeps the losing entry at the floor, not at zero
    assert out[0, 0] >= 1.0 - 3e-12


def test_likelihood_matches_geometry_exp():
    params = make_params(2, 2, 4)
    mat = random_interior(4, 4)
    via_exp = geometry.exp_map(mat, -params.distances / params.rho)
    np.testing.assert_allclose(flows.likelihood(params, mat), via_exp, atol=1e-12)


# ------------------------------------------------------------ similarity

def test_similarity_single_node_zero_distance_is_identity():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    params = flows.FlowParams(rho=1.0, omega=w, distances=np.zeros((1, 3)))
    mat = random_interior(1, 3)
    np.testing.assert_allclose(flows.similarity(params, mat), mat, atol=1e-12)


def test_similarity_constant_field_stays_constant():
    w = graph.uniform_weights(graph.grid_graph(3, 3))
    d = np.tile(np.array([0.5, 1.0, 0.2]), (9, 1))
    params = flows.FlowParams(rho=1.0, omega=w, distances=d)
    mat = np.tile(np.array([0.2, 0.3, 0.5]), (9, 1))
    s = flows.similarity(params, mat)
    np.testing.assert_allclose(s, np.tile(s[0], (9, 1)), atol=1e-13)


def test_similarity_agrees_with_closed_form():
    # the two routes share no code beyond the geometry primitives
    for _ in range(100):
        params = make_params(2, 2, 3)
        mat = random_interior(4, 3)
        a = flows.similarity(params, mat)
        b = flows.similarity_closed_form(params, mat)
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_similarity_rows_on_simplex():
    params = make_params(3, 2, 5)
    s = flows.similarity(params, random_interior(6, 5))
    geometry.check_simplex(s)


# ------------------------------------------------------- right-hand sides

def test_assignment_rhs_constant_similarity_is_zero():
    # a constant fitness vector lies in the kernel of every replicator row
    p = np.array([[0.3, 0.2, 0.5]])
    np.testing.assert_allclose(
        geometry.replicator_map(p, np.full((1, 3), 4.2)), np.zeros((1, 3)), atol=1e-15
    )


def test_assignment_rhs_hand_value():
    # Diag(p) - pp^T at p = (1/2, 1/2) applied to (0.8, 0.2)
    p = np.array([0.5, 0.5])
    s = np.array([0.8, 0.2])
    np.testing.assert_allclose(geometry.replicator_map(p, s), [0.15, -0.15], atol=1e-15)


def test_assignment_rhs_rows_are_tangent():
    params = make_params(2, 3, 4)
    v = flows.assignment_flow_rhs(params, random_interior(6, 4))
    np.testing.assert_allclose(v.sum(axis=1), 0.0, atol=1e-12)


def test_s_flow_rhs_zero_at_uniform():
    w = graph.uniform_weights(graph.grid_graph(2, 2))
    s = flows.barycenter_matrix(4, 3)
    np.testing.assert_allclose(flows.s_flow_rhs(w, s), 0.0, atol=1e-15)


def test_s_flow_rhs_near_zero_at_vertices():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(2, 2)))
    s = np.full((4, 3), 1e-9)
    s[np.arange(4), [0, 0, 1, 2]] = 1.0
    s = s / s.sum(axis=1, keepdims=True)
    assert np.max(np.abs(flows.s_flow_rhs(w, s))) < 1e-8


def test_s_flow_rhs_is_negative_riemannian_gradient():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(3, 3)))
    s = random_interior(9, 4)
    np.testing.assert_allclose(
        flows.s_flow_rhs(w, s), -flows.riemannian_grad_potential(w, s), atol=1e-12
    )


# -------------------------------------------------------------- potential

def test_potential_uniform_value():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(4, 3)))
    s = flows.barycenter_matrix(12, 5)
    # row-stochastic averaging fixes constant fields, so J = -n/(2c)
    assert flows.potential_value(w, s) == pytest.approx(-12 / 10.0, abs=1e-14)


def test_potential_single_node_vertex():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(1, 1)))
    assert flows.potential_value(w, np.array([[1.0, 0.0]])) == pytest.approx(-0.5)


def test_potential_warns_when_not_symmetric():
    w = graph.uniform_weights(graph.grid_graph(3, 3))
    assert not w.symmetric
    with pytest.warns(UserWarning):
        flows.potential_value(w, flows.barycenter_matrix(9, 2))


def test_dirichlet_form_constant_field():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(2, 2)))
    s = np.tile(np.array([0.1, 0.9]), (4, 1))
    assert flows.potential_dirichlet_form(w, s) == pytest.approx(
        -0.5 * float(np.sum(s * s)), abs=1e-14
    )


def test_dirichlet_form_two_node_hand_value():
    w = graph.uniform_weights(graph.grid_graph(2, 1))
    assert w.symmetric
    s = np.array([[0.8, 0.2], [0.4, 0.6]])
    # pair term 1/4 * (2 * 0.5 * 0.32) = 0.08, norm term -0.6
    assert flows.potential_dirichlet_form(w, s) == pytest.approx(-0.52, abs=1e-14)
    assert flows.potential_value(w, s) == pytest.approx(-0.52, abs=1e-14)


def test_dirichlet_form_matches_potential():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(4, 4)))
    for _ in range(20):
        s = random_interior(16, 3)
        assert flows.potential_dirichlet_form(w, s) == pytest.approx(
            flows.potential_value(w, s), abs=1e-12
        )


def test_euclidean_gradient_single_node():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(1, 1)))
    s = np.array([[0.25, 0.75]])
    np.testing.assert_allclose(flows.euclidean_grad_potential(w, s), -s, atol=1e-15)


def test_euclidean_gradient_finite_differences():
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(3, 2)))
    s = random_interior(6, 3)
    g = flows.euclidean_grad_potential(w, s)
    h = 1e-6
    fd = np.zeros_like(s)
    for i in range(s.shape[0]):
        for j in range(s.shape[1]):
            e = np.zeros_like(s)
            e[i, j] = h
            fd[i, j] = (
                flows.potential_value(w, s + e) - flows.potential_value(w, s - e)
            ) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


# ------------------------------------------------------------ differential

def test_jacobian_zero_direction():
    params = make_params(2, 2, 3)
    mat = random_interior(4, 3)
    np.testing.assert_allclose(
        flows.similarity_jacobian_apply(params, mat, np.zeros((4, 3))), 0.0, atol=1e-15
    )
    np.testing.assert_allclose(
        flows.similarity_jacobian_adjoint_apply(params, mat, np.zeros((4, 3))),
        0.0,
        atol=1e-15,
    )


def test_jacobian_single_node_closed_form():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    params = flows.FlowParams(rho=1.0, omega=w, distances=np.array([[0.2, 0.9, 0.4]]))
    mat = random_interior(1, 3)
    x = random_tangent(1, 3)
    s = flows.similarity(params, mat)
    expected = geometry.replicator_map(s, x / mat)
    np.testing.assert_allclose(
        flows.similarity_jacobian_apply(params, mat, x), expected, atol=1e-12
    )


def test_jacobian_matches_finite_differences():
    params = make_params(3, 3, 3)
    mat = random_interior(9, 3)
    h = 1e-6
    for _ in range(20):
        x = random_tangent(9, 3)
        x = x / np.max(np.abs(x))
        jac = flows.similarity_jacobian_apply(params, mat, x)
        fd = (
            flows.similarity(params, geometry.clamp_interior(mat + h * x))
            - flows.similarity(params, geometry.clamp_interior(mat - h * x))
        ) / (2 * h)
        denom = max(1.0, float(np.max(np.abs(jac))))
        assert np.max(np.abs(jac - fd)) / denom < 1e-6


def test_adjoint_pairing():
    params = make_params(3, 2, 4)
    mat = random_interior(6, 4)
    for _ in range(20):
        x = random_tangent(6, 4)
        y = random_tangent(6, 4)
        lhs = float(np.sum(flows.similarity_jacobian_apply(params, mat, x) * y))
        rhs = float(np.sum(x * flows.similarity_jacobian_adjoint_apply(params, mat, y)))
        assert abs(lhs - rhs) < 1e-12


def test_jacobian_rejects_boundary_point():
    params = make_params(2, 2, 3)
    mat = random_interior(4, 3)
    mat[0, 0] = 0.0
    with pytest.raises(SingularityError):
        flows.similarity_jacobian_apply(params, mat, np.zeros((4, 3)))


# ---------------------------------------------------------------- witness

def test_witness_positive_asymmetry_and_closed_form():
    w = graph.uniform_weights(graph.grid_graph(2, 2))
    d = RNG.uniform(0.1, 1.5, size=(4, 3))
    params = flows.FlowParams(rho=1.0, omega=w, distances=d)
    res = flows.non_potential_witness(params)
    assert res.asymmetry_norm > 1e-8
    rel = abs(res.asymmetry_norm - res.closed_form_norm) / res.closed_form_norm
    assert rel < 1e-10


def test_witness_rejects_constant_distances():
    w = graph.uniform_weights(graph.grid_graph(2, 2))
    params = flows.FlowParams(rho=1.0, omega=w, distances=np.zeros((4, 3)))
    with pytest.raises(NotApplicableError):
        flows.non_potential_witness(params)


def test_witness_rejects_two_labels():
    w = graph.uniform_weights(graph.grid_graph(2, 2))
    d = np.array([[0.0, 1.0]] * 4)
    params = flows.FlowParams(rho=1.0, omega=w, distances=d)
    with pytest.raises(NotApplicableError):
        flows.non_potential_witness(params)


# -------------------------------------------------------------- integrators

def test_euler_constant_trajectory_from_barycenter():
    w = graph.uniform_weights(graph.grid_graph(1, 1))
    params = flows.FlowParams(rho=1.0, omega=w, distances=np.full((1, 3), 0.8))
    state = flows.FlowState(W=flows.barycenter_matrix(1, 3), t=0.0)
    traj = flows.integrate_geometric_euler("assignment", params, state, 0.1, 1.0)
    for st in traj:
        np.testing.assert_allclose(st.W, state.W, atol=1e-13)


def test_euler_iterates_stay_on_manifold():
    params = make_params(3, 3, 4)
    state = flows.FlowState(W=flows.barycenter_matrix(9, 4), t=0.0)
    traj = flows.integrate_geometric_euler("assignment", params, state, 0.2, 4.0)
    assert traj[-1].t == pytest.approx(4.0)
    for st in traj:
        geometry.check_simplex(st.W)


def test_euler_first_order_error_decay():
    params = make_params(2, 2, 3)
    state = flows.FlowState(W=flows.barycenter_matrix(4, 3), t=0.0)
    ref = flows.integrate_rk4("assignment", params, state, 1e-3, 1.0)[-1].W
    errs = []
    for h in (0.1, 0.05):
        end = flows.integrate_geometric_euler("assignment", params, state, h, 1.0)[-1].W
        errs.append(np.max(np.abs(end - ref)))
    ratio = errs[0] / errs[1]
    assert 1.5 < ratio < 2.6


def test_flow_rounds_to_nearest_prototype():
    # two self-only neighborhoods: each node follows the single-node
    # replicator limit and must settle on its argmin-distance label
    from scipy import sparse

    w = graph.AveragingOperator(matrix=sparse.identity(2, format="csr"), symmetric=True)
    d = np.array([[0.0, 5.0], [5.0, 0.0]])
    params = flows.FlowParams(rho=1.0, omega=w, distances=d)
    state = flows.FlowState(W=flows.barycenter_matrix(2, 2), t=0.0)
    end = flows.integrate_geometric_euler("assignment", params, state, 0.1, 40.0)[-1].W
    assert list(np.argmax(end, axis=1)) == [0, 1]
    assert end[0, 0] > 0.99 and end[1, 1] > 0.99


def test_rk4_matches_euler_at_small_step():
    params = make_params(2, 2, 3)
    state = flows.FlowState(W=flows.barycenter_matrix(4, 3), t=0.0)
    a = flows.integrate_rk4("s_flow", params, state, 1e-3, 0.5)[-1].W
    b = flows.integrate_geometric_euler("s_flow", params, state, 1e-4, 0.5)[-1].W
    assert np.max(np.abs(a - b)) < 1e-3


def test_integrator_rejects_bad_kind_and_step():
    params = make_params(1, 1, 2)
    state = flows.FlowState(W=flows.barycenter_matrix(1, 2), t=0.0)
    with pytest.raises(ValueError):
        flows.integrate_geometric_euler("bogus", params, state, 0.1, 1.0)
    with pytest.raises(ValueError):
        flows.integrate_geometric_euler("assignment", params, state, -0.1, 1.0)


def test_integrator_zero_horizon():
    params = make_params(1, 1, 2)
    state = flows.FlowState(W=flows.barycenter_matrix(1, 2), t=0.0)
    traj = flows.integrate_geometric_euler("assignment", params, state, 0.1, 0.0)
    assert len(traj) == 1 and traj[0].t == 0.0


# ---------------------------------------------------------- flow equivalence

def test_flow_equivalence_zero_horizon():
    params = make_params(2, 2, 3, symmetric=True)
    assert flows.check_flow_equivalence(params, 1e-2, 0.0) == 0.0


def test_flow_equivalence_single_node():
    params = make_params(1, 1, 3, symmetric=True)
    assert flows.check_flow_equivalence(params, 1e-3, 5.0) <= 1e-8


def test_flow_equivalence_small_grid():
    params = make_params(2, 2, 3, symmetric=True)
    assert flows.check_flow_equivalence(params, 1e-2, 2.0) <= 1e-4


# --------------------------------------------------------- labeling runs

def test_run_labeling_flow_reaches_low_entropy():
    rng = np.random.default_rng(7)
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(3, 3)))
    d = rng.uniform(0.0, 2.0, size=(9, 3))
    params = flows.FlowParams(rho=flows.default_rho(d), omega=w, distances=d)
    final, rows = flows.run_labeling_flow(params, "assignment", step=0.1, t_end=100.0)
    assert rows[-1].mean_entropy < 1e-3
    geometry.check_simplex(final)
    assert rows[0].mean_entropy == pytest.approx(np.log(3))


def test_run_labeling_flow_s_flow_potential_descends():
    rng = np.random.default_rng(8)
    w = graph.symmetrize(graph.uniform_weights(graph.grid_graph(3, 3)))
    d = rng.uniform(0.0, 2.0, size=(9, 3))
    params = flows.FlowParams(rho=flows.default_rho(d), omega=w, distances=d)
    _, rows = flows.run_labeling_flow(params, "s_flow", step=0.1, t_end=60.0)
    vals = [r.potential for r in rows]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))


def test_mean_entropy_uniform():
    assert flows.mean_entropy(flows.barycenter_matrix(4, 3)) == pytest.approx(np.log(3))


# ----------------------------------------------------------------- export

def test_trajectory_csv_roundtrip(tmp_path):
    rows = [
        flows.FlowTraceRow(t=0.0, potential=-1.25, mean_entropy=1.0986, min_entry=0.333),
        flows.FlowTraceRow(t=0.1, potential=-1.5, mean_entropy=0.9, min_entry=0.2),
    ]
    path = tmp_path / "trace.csv"
    flows.write_trajectory_csv(path, rows)
    with open(path, newline="") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["t", "J", "mean_entropy", "min_entry"]
    assert [float(x) for x in got[1]] == [0.0, -1.25, 1.0986, 0.333]
    assert len(got) == 3


def test_matrix_snapshot_roundtrip(tmp_path):
    m = RNG.standard_normal((5, 3))
    path = tmp_path / "snap.bin"
    flows.save_matrix(path, m)
    np.testing.assert_array_equal(flows.load_matrix(path), m)


def test_matrix_snapshot_truncated(tmp_path):
    path = tmp_path / "snap.bin"
    flows.save_matrix(path, np.ones((2, 2)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        flows.load_matrix(path)
    path.write_bytes(raw[:4])
    with pytest.raises(ValueError):
        flows.load_matrix(path)
