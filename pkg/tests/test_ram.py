import numpy as np
import pytest

from lvm import Model, compile_model, covariate, identify
from lvm.ram import CancellationMatrix, SelectionMatrix, cancellation_matrix, selection_matrix
from tests.oracles import independent as ref

PRINTED_J_6_34 = np.array([
    [1, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 1],
])

PRINTED_P_6_34 = np.diag([1, 1, 0, 0, 1, 1])


def test_selection_matrix_matches_printed_display():
    # indices are 0-based: rows 3 and 4 counted from one are 2 and 3 here
    J = selection_matrix(6, {2, 3})
    assert J.shape == (4, 6)
    assert np.array_equal(J, PRINTED_J_6_34)
    assert np.array_equal(J, ref.selection_by_definition(6, {3, 4}))


def test_selection_matrix_edge_cases():
    assert np.array_equal(selection_matrix(5, set()), np.eye(5))
    assert np.array_equal(selection_matrix(2, {0}), np.array([[0.0, 1.0]]))
    with pytest.raises(IndexError):
        selection_matrix(3, {3})


def test_cancellation_matrix_matches_printed_display():
    p = cancellation_matrix(6, {2, 3})
    assert np.array_equal(p, PRINTED_P_6_34)
    assert np.array_equal(p, ref.cancellation_by_definition(6, {3, 4}))


def test_cancellation_matrix_edge_cases():
    assert np.array_equal(cancellation_matrix(4, set()), np.eye(4))
    assert np.array_equal(cancellation_matrix(3, {0, 1, 2}), np.zeros((3, 3)))
    with pytest.raises(IndexError):
        cancellation_matrix(3, {-1})


@pytest.mark.parametrize("n,drop", [(6, {2, 3}), (5, {0}), (7, {1, 4, 6}), (3, set())])
def test_zero_one_identities(n, drop):
    J = selection_matrix(n, drop)
    assert np.array_equal(J @ J.T, np.eye(n - len(drop)))
    p = cancellation_matrix(n, drop)
    comp = cancellation_matrix(n, set(range(n)) - set(drop))
    assert np.array_equal(p @ p, p)
    assert np.array_equal(p + comp, np.eye(n))
    B = np.arange(n * n, dtype=float).reshape(n, n)
    assert np.array_equal(SelectionMatrix(n, drop).apply(B), J @ B)
    assert np.array_equal(CancellationMatrix(n, drop).apply(B), p @ B)


def test_mregr_parameter_count(mregr):
    table = compile_model(mregr)
    assert mregr.npar() == (11, 2)
    assert table.n_params == 13
    assert table.names == mregr.coef_names()


def test_covariance_block_from_formula_call():
    m = Model("y1 + y2 + y3 ~ x")
    m.covariance("y1 + y2 ~ y2 + y3", value=[0.5, "r", "r0", 0.3])
    table = compile_model(m)
    pos = {v: i for i, v in enumerate(table.vars)}
    theta = np.zeros(table.n_params)
    theta[table.lookup("r")] = 0.7
    theta[table.lookup("r0")] = 1.9
    _, P, _ = table.materialize(theta)
    e = [pos["y1"], pos["y2"], pos["y3"]]
    block = P[np.ix_(e, e)]
    assert block[0, 1] == block[1, 0] == 0.5
    assert block[0, 2] == block[2, 0] == 0.7
    assert block[1, 1] == 1.9
    assert block[1, 2] == block[2, 1] == 0.3


def test_empty_model_compiles_to_nothing():
    table = compile_model(Model())
    assert table.n_params == 0
    assert table.m == 0


def test_materialize_fixed_and_free_parts(m1):
    table = compile_model(identify(m1, "hybrid"))
    pos = {v: i for i, v in enumerate(table.vars)}
    for theta in (np.zeros(table.n_params), np.random.default_rng(1).normal(size=table.n_params)):
        A, P, v = table.materialize(theta)
        assert A[pos["y1"], pos["u1"]] == 1.0
        assert A[pos["z1"], pos["u2"]] == 1.0
        assert v[pos["u1"]] == 0.0
    A, P, v = table.materialize(np.zeros(table.n_params))
    fixed = {(s.row, s.col) for s in table.slots if s.mat == "A" and s.source == "fixed"}
    for i, j in zip(*np.nonzero(A)):
        assert (i, j) in fixed


def test_covariate_bound_slot_takes_row_value():
    m = Model("y ~ u", "u ~ x")
    m.latent("u")
    m.regression("y", "u", value=covariate("z"))
    table = compile_model(m)
    pos = {v: i for i, v in enumerate(table.vars)}
    theta = np.random.default_rng(3).normal(size=table.n_params)
    A, _, _ = table.materialize(theta, row={"z": 2.5})
    assert A[pos["y"], pos["u"]] == 2.5
    A2, _, _ = table.materialize(2 * theta, row={"z": 2.5})
    assert A2[pos["y"], pos["u"]] == 2.5


def test_materialize_is_affine_and_symmetric(m1):
    table = compile_model(m1)
    rng = np.random.default_rng(5)
    t1, t2 = rng.normal(size=(2, table.n_params))
    base = table.materialize(np.zeros(table.n_params))
    for a, b, c, z in zip(table.materialize(t1), table.materialize(t2),
                          table.materialize(t1 + t2), base):
        assert np.allclose(c - z, (a - z) + (b - z), atol=1e-14)
    _, P, _ = table.materialize(t1)
    assert np.array_equal(P, P.T)


def test_every_parameter_index_appears(m1, mregr):
    for model in (m1, mregr, identify(m1, "hybrid")):
        table = compile_model(model)
        seen = {s.payload for s in table.slots if s.source == "param"}
        assert seen == set(range(table.n_params))
        assert all(not (s.mat == "A" and s.row == s.col) for s in table.slots)


def test_shared_label_uses_one_index():
    m = Model("y1 + y2 ~ x")
    m.regression("y1 + y2 ~ x", value="b")
    table = compile_model(m)
    ix = [s.payload for s in table.slots if s.mat == "A"]
    assert len(set(ix)) == 1
