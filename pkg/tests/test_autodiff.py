import numpy as np
import pytest

from poissonnet import autodiff as ad
from poissonnet import shapes
from poissonnet.autodiff import Parameter, Tape, TapeError, finite_diff_check
from poissonnet.network import prepare_mesh
from poissonnet.poisson import adjoint_solve, solve_centered


@pytest.fixture(scope="module")
def ctx():
    return prepare_mesh(shapes.torus(10, 6, wobble=0.3))


def _check(loss_fn, params, tol=1e-6):
    rep = finite_diff_check(loss_fn, params, h=1e-5, tol=tol, max_tol=10 * tol)
    assert rep.passed, rep.to_dict()
    return rep


def test_quadratic_toy():
    p = Parameter("x", [1.0, -2.0, 0.5])
    A = np.array([[2.0, 0.3, 0], [0.3, 1.0, 0.1], [0, 0.1, 3.0]])

    def loss(tape):
        x = tape.param(p)
        return ad.sum_all(ad.mul(x, ad.matmul(A, x)))

    rep = finite_diff_check(loss, [p], tol=1e-9, max_tol=1e-9)
    assert rep.passed and rep.max_rel_error < 1e-9


def test_backward_errors():
    p = Parameter("x", np.ones(3))
    tape = Tape()
    x = tape.param(p)
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(ad.mul(x, 2.0))
    loss = ad.sum_all(x)
    with pytest.raises(TapeError):
        Tape().backward(loss)
    with pytest.raises(TapeError):
        tape.backward(np.float64(1.0))
    tape.backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(loss)


def test_unused_parameter_has_exact_zero_grad():
    a, b = Parameter("a", np.ones(2)), Parameter("b", np.ones(2))
    tape = Tape()
    loss = ad.sum_all(ad.mul(tape.param(a), 3.0))
    tape.param(b)
    tape.backward(loss)
    np.testing.assert_array_equal(b.grad, 0.0)
    np.testing.assert_array_equal(a.grad, 3.0)


def test_gradients_accumulate_until_zeroed():
    p = Parameter("p", np.ones(2))
    for _ in range(2):
        t = Tape()
        t.backward(ad.sum_all(t.param(p)))
    np.testing.assert_array_equal(p.grad, 2.0)
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, 0.0)


def test_linearity(rng):
    p = Parameter("p", rng.normal(size=(4, 3)))
    t1 = rng.normal(size=(4, 3))

    def grad_of(fn):
        p.zero_grad()
        t = Tape()
        t.backward(fn(t.param(p)))
        return p.grad.copy()

    l1 = lambda x: ad.weighted_sum_sq(ad.sub(x, t1), 1.0)
    l2 = lambda x: ad.sum_all(ad.softplus(x))
    g1, g2 = grad_of(l1), grad_of(l2)
    g = grad_of(lambda x: ad.add(ad.mul(l1(x), 2.0), ad.mul(l2(x), -0.5)))
    np.testing.assert_allclose(g, 2.0 * g1 - 0.5 * g2, atol=1e-10)


def test_solve_vjp_is_adjoint(ctx, rng):
    rhs = Parameter("rhs", rng.normal(size=(ctx.n_vertices, 2)))
    tape = Tape()
    u = ad.poisson_solve(ctx.fact, tape.param(rhs))
    tape.backward(ad.weighted_sum_sq(u, 0.5))
    expect = adjoint_solve(ctx.fact, solve_centered(ctx.fact, rhs.value))
    np.testing.assert_allclose(rhs.grad, expect, atol=1e-12)


def test_primitives_on_plain_arrays(ctx, rng):
    s = rng.normal(size=(ctx.n_vertices, 2))
    f = ad.face_grad(ctx.ops.grad, s)
    assert isinstance(f, np.ndarray) and f.shape == (2, ctx.mesh.n_faces, 2)
    np.testing.assert_allclose(ad.face_div(ctx.ops.divergence, f), ctx.ops.laplacian @ s, atol=1e-10)


def test_fd_face_ops_and_solve(ctx, rng):
    s = Parameter("s", rng.normal(size=(ctx.n_vertices, 2)))
    w = rng.normal(size=(ctx.n_vertices, 2))

    def loss(tape):
        f = ad.face_grad(ctx.ops.grad, tape.param(s))
        u = ad.poisson_solve(ctx.fact, ad.face_div(ctx.ops.divergence, ad.mul(f, f)))
        return ad.sum_all(ad.mul(u, w))

    _check(loss, [s])


def test_fd_vector_linear(ctx, rng):
    F = ctx.mesh.n_faces
    f = rng.normal(size=(2, F, 3))
    Wr, Wi = Parameter("Wr", rng.normal(size=(3, 3))), Parameter("Wi", rng.normal(size=(3, 3)))
    b = Parameter("b", rng.normal(0, 0.1, size=3))
    target = rng.normal(size=(2, F, 3))

    def loss(tape):
        g = ad.magnitude_gate(ad.complex_linear(f, tape.param(Wr), tape.param(Wi)), tape.param(b))
        return ad.weighted_sum_sq(ad.sub(g, target), 1.0)

    rep = _check(loss, [Wr, Wi, b])
    assert rep.entries[0].max_rel_error < 1e-6


def test_fd_modulation(ctx, rng):
    F = ctx.mesh.n_faces
    f = rng.normal(size=(2, F, 3))
    scale_in = Parameter("g", rng.normal(size=(F, 3)))
    theta = Parameter("t", rng.normal(size=(F, 3)))
    w = rng.normal(size=(2, F, 3))

    def loss(tape):
        k = ad.add(ad.softplus(tape.param(scale_in)), 1e-4)
        return ad.sum_all(ad.mul(ad.rotate_scale(f, k, tape.param(theta)), w))

    rep = finite_diff_check(loss, [scale_in, theta], h=1e-5, tol=1e-5, max_tol=1e-5)
    assert rep.passed


def test_fd_losses(rng):
    logits = Parameter("z", rng.normal(size=(6, 4)))
    labels = rng.integers(0, 4, 6)
    pred = Parameter("p", rng.normal(size=(6, 3)))
    target = rng.normal(size=(6, 3))
    weights = rng.uniform(0.5, 2.0, 6)
    _check(lambda t: ad.cross_entropy(t.param(logits), labels), [logits])
    _check(lambda t: ad.mse(t.param(pred), target), [pred])
    _check(lambda t: ad.mse(t.param(pred), target, weights), [pred])


def test_fd_mlp_pieces(rng):
    x = rng.normal(size=(7, 3))
    W, b = Parameter("W", rng.normal(size=(3, 5))), Parameter("b", rng.normal(size=5))
    c = rng.normal(size=(7, 2))

    def loss(tape):
        h = ad.relu(ad.linear(x, tape.param(W), tape.param(b)))
        h = ad.concat([h, c], axis=1)
        h = ad.take_cols(h, 1, 6)
        return ad.weighted_sum_sq(ad.sin(ad.cos(h)), 1.0)

    _check(loss, [W, b])


def test_magnitude_gate_zero_guard():
    f = np.zeros((2, 3, 1))
    out = ad.magnitude_gate(f, np.array([0.5]))
    np.testing.assert_array_equal(out, 0.0)
    p = Parameter("f", f)
    bp = Parameter("b", np.array([0.5]))
    t = Tape()
    t.backward(ad.sum_all(ad.magnitude_gate(t.param(p), t.param(bp))))
    np.testing.assert_array_equal(p.grad, 0.0)
    np.testing.assert_array_equal(bp.grad, 0.0)


def test_kink_exclusion_counts():
    # relu with an entry sitting within h of zero is excluded, not failed
    p = Parameter("x", np.array([1.0, 3e-6, -2.0]))
    rep = finite_diff_check(lambda t: ad.sum_all(ad.relu(t.param(p))), [p], h=1e-5)
    assert rep.passed
    assert rep.n_excluded == 1 and rep.n_checked == 2


def test_report_dict_fields():
    p = Parameter("x", np.ones(2))
    d = finite_diff_check(lambda t: ad.weighted_sum_sq(t.param(p), 1.0), [p]).to_dict()
    assert {"h", "tol", "p90_rel_error", "max_rel_error", "passed", "parameters"} <= set(d)
