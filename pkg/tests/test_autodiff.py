"""Gradient correctness for every autodiff op, checked against central
finite differences (step 1e-5). Linear ops must agree to 1e-6 relative,
nonlinear ops to 1e-4. Nonlinear inputs are kept away from kinks (relu at 0,
max-pool ties) because the derivative does not exist there."""

import numpy as np
import pytest

from audiotriplet.autodiff import Tape, gradcheck
from audiotriplet.errors import ContractError, DivergenceError, ShapeError

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4
N_SEEDS = 20


def _weighted_sum(tape, rng, out):
    """Reduce an op output to a scalar with fixed random weights so every
    output element contributes an O(1) term to the loss."""
    w = tape.leaf(rng.normal(size=tape.value(out).shape))
    return tape.sum_all(tape.mul(out, w))


def _away_from_zero(rng, shape, margin=0.25):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


# -- builders: (name, linear?, builder(tape, rng) -> loss id) ----------------


def _build_conv2d(stride):
    def build(tape, rng):
        x = tape.parameter(rng.normal(size=(2, 3, 6, 7)))
        w = tape.parameter(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        b = tape.parameter(rng.normal(size=4))
        return _weighted_sum(tape, rng, tape.conv2d(x, w, b, stride=stride))
    return build


def _build_dense(tape, rng):
    x = tape.parameter(rng.normal(size=(5, 7)))
    w = tape.parameter(rng.normal(size=(7, 4)))
    b = tape.parameter(rng.normal(size=4))
    return _weighted_sum(tape, rng, tape.dense(x, w, b))


def _build_relu(tape, rng):
    x = tape.parameter(_away_from_zero(rng, (6, 5)))
    return _weighted_sum(tape, rng, tape.relu(x))


def _build_hinge(tape, rng):
    x = tape.parameter(_away_from_zero(rng, (17,)))
    return _weighted_sum(tape, rng, tape.hinge(x))


def _build_add(tape, rng):
    x = tape.parameter(rng.normal(size=(4, 5)))
    y = tape.parameter(rng.normal(size=(4, 5)))
    return _weighted_sum(tape, rng, tape.add(x, y))


def _build_sub(tape, rng):
    x = tape.parameter(rng.normal(size=(4, 5)))
    y = tape.parameter(rng.normal(size=(4, 5)))
    return _weighted_sum(tape, rng, tape.sub(x, y))


def _build_mul(tape, rng):
    x = tape.parameter(rng.normal(size=(4, 5)))
    y = tape.parameter(rng.normal(size=(4, 5)))
    return _weighted_sum(tape, rng, tape.mul(x, y))


def _build_add_scalar(tape, rng):
    x = tape.parameter(rng.normal(size=(3, 4)))
    return _weighted_sum(tape, rng, tape.add_scalar(x, 0.37))


def _build_mul_scalar(tape, rng):
    x = tape.parameter(rng.normal(size=(3, 4)))
    return _weighted_sum(tape, rng, tape.mul_scalar(x, -1.82))


def _build_gap(tape, rng):
    x = tape.parameter(rng.normal(size=(3, 4, 5, 6)))
    return _weighted_sum(tape, rng, tape.global_avg_pool2d(x))


def _build_max_pool(tape, rng):
    x = tape.parameter(rng.normal(size=(2, 3, 6, 8)))
    return _weighted_sum(tape, rng, tape.max_pool2d(x))


def _build_l2_normalize(tape, rng):
    x = tape.parameter(rng.normal(size=(5, 6)) + 0.1)
    return _weighted_sum(tape, rng, tape.l2_normalize(x))


def _build_pairwise_sqdist(tape, rng):
    x = tape.parameter(rng.normal(size=(6, 4)))
    return _weighted_sum(tape, rng, tape.pairwise_sqdist(x))


def _build_take(tape, rng):
    x = tape.parameter(rng.normal(size=(4, 5)))
    idx = rng.integers(0, 20, size=9)  # repeats exercise scatter-add
    return _weighted_sum(tape, rng, tape.take(x, idx))


def _build_mean_all(tape, rng):
    x = tape.parameter(rng.normal(size=(3, 7)))
    return tape.mean_all(x)


def _build_sum_all(tape, rng):
    x = tape.parameter(rng.normal(size=(3, 7)))
    return tape.sum_all(x)


def _build_softmax_xent(tape, rng):
    x = tape.parameter(rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, size=6)
    return tape.softmax_xent(x, labels)


OP_BUILDERS = [
    ("conv2d_s1", True, _build_conv2d(1)),
    ("conv2d_s2", True, _build_conv2d(2)),
    ("dense", True, _build_dense),
    ("relu", False, _build_relu),
    ("hinge", False, _build_hinge),
    ("add", True, _build_add),
    ("sub", True, _build_sub),
    ("mul", False, _build_mul),  # bilinear overall: quadratic loss terms
    ("add_scalar", True, _build_add_scalar),
    ("mul_scalar", True, _build_mul_scalar),
    ("global_avg_pool2d", True, _build_gap),
    ("max_pool2d", False, _build_max_pool),
    ("l2_normalize", False, _build_l2_normalize),
    ("pairwise_sqdist", False, _build_pairwise_sqdist),
    ("take", True, _build_take),
    ("mean_all", True, _build_mean_all),
    ("sum_all", True, _build_sum_all),
    ("softmax_xent", False, _build_softmax_xent),
]


@pytest.mark.parametrize("name,linear,builder", OP_BUILDERS, ids=[b[0] for b in OP_BUILDERS])
def test_gradcheck_every_op(name, linear, builder):
    tol = LINEAR_TOL if linear else NONLINEAR_TOL
    for seed in range(N_SEEDS):
        err = gradcheck(builder, seed=seed)
        assert err < tol, f"{name} seed {seed}: max relative error {err:.3e} >= {tol}"


# -- hand-computed gradients --------------------------------------------------


def test_relu_gradient_values():
    tape = Tape()
    x = tape.parameter(np.array([[-2.0, 0.0, 3.0]]))
    loss = tape.sum_all(tape.relu(x))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], [[0.0, 0.0, 1.0]])


def test_pairwise_sqdist_gradient_two_points():
    # D[0,1] = ||a - b||^2, d/da = 2(a - b); factor 2 from symmetric matrix.
    a = np.array([1.0, -2.0])
    b = np.array([0.5, 4.0])
    tape = Tape()
    x = tape.parameter(np.stack([a, b]))
    loss = tape.sum_all(tape.pairwise_sqdist(x))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x][0], 2 * 2.0 * (a - b), rtol=1e-12)
    np.testing.assert_allclose(grads[x][1], 2 * 2.0 * (b - a), rtol=1e-12)


def test_dead_branch_gets_zero_gradient():
    tape = Tape()
    used = tape.parameter(np.ones((2, 2)))
    unused = tape.parameter(np.ones((3, 3)))
    loss = tape.sum_all(tape.relu(used))
    grads = tape.backward(loss)
    assert grads[unused].shape == (3, 3)
    np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))


def test_relu_all_negative_upstream_zero_grad():
    tape = Tape()
    x = tape.parameter(np.full((4, 4), -1.0))
    w = tape.parameter(np.ones((4, 3)))
    b = tape.parameter(np.zeros(3))
    loss = tape.sum_all(tape.dense(tape.relu(x), w, b))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], np.zeros((4, 4)))


def test_l2_normalize_at_unit_norm_orthogonal_gradient():
    # At a unit-norm row, the Jacobian is (I - x x^T) up to the eps guard;
    # check against finite differences with a pinned orthogonal direction.
    def build(tape, rng):
        x = np.array([[0.6, 0.8, 0.0]])
        ortho = np.array([[0.8, -0.6, 0.0]])
        p = tape.parameter(x)
        y = tape.l2_normalize(p)
        w = tape.leaf(ortho)
        return tape.sum_all(tape.mul(y, w))

    assert gradcheck(build, seed=0) < NONLINEAR_TOL


def test_l2_normalize_zero_row_stays_zero():
    tape = Tape()
    x = tape.parameter(np.zeros((2, 3)))
    y = tape.l2_normalize(x)
    np.testing.assert_array_equal(tape.value(y), np.zeros((2, 3)))


def test_max_pool_forward_and_routing():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    tape = Tape()
    p = tape.parameter(x)
    out = tape.max_pool2d(p)
    np.testing.assert_array_equal(tape.value(out)[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    grads = tape.backward(tape.sum_all(out))
    expected = np.zeros((4, 4))
    expected[1, 1] = expected[1, 3] = expected[3, 1] = expected[3, 3] = 1.0
    np.testing.assert_array_equal(grads[p][0, 0], expected)


def test_take_accumulates_repeated_indices():
    tape = Tape()
    x = tape.parameter(np.array([10.0, 20.0, 30.0]))
    loss = tape.sum_all(tape.take(x, [1, 1, 2]))
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], [0.0, 2.0, 1.0])


def test_softmax_xent_uniform_logits():
    tape = Tape()
    x = tape.parameter(np.zeros((3, 4)))
    loss = tape.softmax_xent(x, [0, 1, 2])
    assert tape.value(loss) == pytest.approx(np.log(4.0), rel=1e-12)


# -- replay and error contracts ----------------------------------------------


def test_replay_is_deterministic():
    tape = Tape()
    rng = np.random.default_rng(3)
    x = tape.parameter(rng.normal(size=(3, 2, 6, 6)))
    w = tape.parameter(rng.normal(size=(4, 2, 3, 3)))
    b = tape.parameter(np.zeros(4))
    out = tape.relu(tape.conv2d(x, w, b, stride=2))
    loss = tape.mean_all(out)
    before = tape.value(loss).copy()
    tape.replay()
    assert tape.value(loss) == before


def test_backward_requires_scalar_loss():
    tape = Tape()
    x = tape.parameter(np.ones((2, 2)))
    y = tape.relu(x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_shape_mismatch_names_op():
    tape = Tape()
    x = tape.leaf(np.ones((2, 3)))
    y = tape.leaf(np.ones((3, 2)))
    with pytest.raises(ShapeError, match="add"):
        tape.add(x, y)


def test_conv2d_channel_mismatch():
    tape = Tape()
    x = tape.leaf(np.ones((1, 3, 4, 4)))
    w = tape.leaf(np.ones((2, 5, 3, 3)))
    b = tape.leaf(np.zeros(2))
    with pytest.raises(ShapeError, match="conv2d"):
        tape.conv2d(x, w, b)


def test_non_finite_output_raises_divergence():
    tape = Tape()
    x = tape.leaf(np.array([[1e308]]))
    y = tape.leaf(np.array([[1e308]]))
    with np.errstate(over="ignore"), pytest.raises(DivergenceError):
        tape.add(x, y)


def test_take_index_out_of_range():
    tape = Tape()
    x = tape.leaf(np.ones(4))
    with pytest.raises(ShapeError, match="take"):
        tape.take(x, [4])


def test_max_pool_odd_dims_rejected():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 3, 4)))
    with pytest.raises(ShapeError, match="max_pool2d"):
        tape.max_pool2d(x)
