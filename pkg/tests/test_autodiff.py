import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdnas import autodiff as ad
from fdnas.autodiff import OptimizerState, Parameter, Tensor, finite_diff_grad, relative_error


def project(out: Tensor, r: np.ndarray) -> Tensor:
    """Scalar sum_b <out_b, r> built from primitives."""
    if out.data.size == 1:
        return out
    flat = ad.flatten(out) if out.data.ndim != 2 else out
    return ad.tsum(ad.linear(flat, Tensor(r.reshape(1, -1))))


def check_grad(build, arrays, tol=1e-6, seed=0):
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.copy(), requires_grad=True, name=f"in{i}") for i, a in enumerate(arrays)]
    with ad.Tape() as tape:
        out = build(*tensors)
        r = rng.normal(size=int(np.prod(out.shape[1:])) if out.data.ndim > 1 else out.data.size)
        loss = project(out, r)
    grads = ad.backward(tape, loss)
    for i, a in enumerate(arrays):
        def f(theta, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(theta.reshape(a.shape))
            with ad.no_grad():
                return project(build(*args), r).item()
        num = finite_diff_grad(f, a.reshape(-1), eps=1e-6)
        assert relative_error(grads[f"in{i}"], num) < tol, f"gradient of input {i}"


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.sampled_from([1, 2]), k=st.sampled_from([1, 3, 5]))
def test_conv2d_gradients(seed, stride, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 6, 6))
    w = rng.normal(size=(4, 3, k, k))
    check_grad(lambda a, b: ad.conv2d(a, b, stride), [x, w], seed=seed)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), stride=st.sampled_from([1, 2]), k=st.sampled_from([3, 5]))
def test_depthwise_gradients(seed, stride, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(3, k, k))
    check_grad(lambda a, b: ad.depthwise_conv2d(a, b, stride), [x, w], seed=seed)


def test_linear_relu6_pool_gradients():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 5)) * 3
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    check_grad(lambda a, c, d: ad.relu6(ad.linear(a, c, d)), [x, w, b])
    check_grad(lambda a: ad.global_avg_pool(a), [rng.normal(size=(2, 3, 4, 4))])


def test_batch_norm_training_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3, 3, 3))
    g = rng.uniform(0.5, 1.5, size=3)
    be = rng.normal(size=3)
    rm, rv = np.zeros(3), np.ones(3)
    check_grad(lambda a, c, d: ad.batch_norm(a, c, d, Tensor(rm), Tensor(rv), training=True), [x, g, be])
    check_grad(lambda a, c, d: ad.batch_norm(a, c, d, Tensor(rm), Tensor(rv), training=False), [x, g, be])


def test_scale_add_cross_entropy_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 2, 2))
    s = np.array([0.7])
    check_grad(lambda a, c: ad.add(ad.scale(a, c), a), [x, s])
    labels = np.array([0, 2, 1])
    check_grad(lambda z: ad.cross_entropy(z, labels), [rng.normal(size=(3, 3))])


def test_batch_norm_updates_running_stats_only_on_request():
    x = Tensor(np.random.default_rng(0).normal(2.0, 3.0, size=(8, 2, 3, 3)))
    rm, rv = Tensor(np.zeros(2)), Tensor(np.ones(2))
    ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, update_stats=False)
    assert np.all(rm.data == 0) and np.all(rv.data == 1)
    ad.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, update_stats=True)
    np.testing.assert_allclose(rm.data, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_shape_errors_name_the_operation():
    with pytest.raises(ad.ShapeError, match="linear"):
        ad.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_tape_is_single_use_and_unreached_params_get_zeros():
    p = Parameter(np.ones(3), "p")
    q = Parameter(np.ones(2), "q")
    with ad.Tape() as tape:
        loss = ad.tsum(ad.scale(p, 2.0))
    grads = ad.backward(tape, loss, [p, q])
    np.testing.assert_array_equal(grads["p"], [2.0, 2.0, 2.0])
    np.testing.assert_array_equal(grads["q"], [0.0, 0.0])
    with pytest.raises(RuntimeError):
        ad.backward(tape, loss)


def test_non_finite_gradient_raises():
    p = Parameter(np.array([1.0, 2.0]), "p")
    with ad.Tape() as tape:
        loss = ad.tsum(ad.scale(p, np.inf))
    with pytest.raises(FloatingPointError, match="'p'"):
        ad.backward(tape, loss, [p])


def test_no_grad_records_nothing():
    with ad.Tape() as tape:
        with ad.no_grad():
            ad.relu6(Tensor(np.ones(3)))
    assert len(tape) == 0


def test_sgd_momentum_matches_closed_form():
    p = Parameter(np.array([1.0, -2.0]), "w")
    opt = OptimizerState("sgd_momentum", 0.1, momentum=0.9, weight_decay=0.01)
    g = np.array([0.5, 0.25])
    ad.sgd_momentum_step({"w": p}, {"w": g}, opt)
    v1 = g + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * v1)
    w1 = p.data.copy()
    ad.sgd_momentum_step({"w": p}, {"w": g}, opt)
    v2 = 0.9 * v1 + g + 0.01 * w1
    np.testing.assert_allclose(p.data, w1 - 0.1 * v2)


def test_adam_mask_freezes_unselected_entries():
    p = Parameter(np.zeros(4), "a", trainable=False)
    opt = OptimizerState("adam", 0.05, betas=(0.0, 0.999), group="arch", weight_decay=1.0)
    assert opt.weight_decay == 0.0
    mask = np.array([True, False, True, False])
    ad.adam_step({"a": p}, {"a": np.array([1.0, 5.0, -2.0, 5.0])}, opt, masks={"a": mask})
    # first bias-corrected step moves by lr * sign(g)
    np.testing.assert_allclose(p.data, [-0.05, 0.0, 0.05, 0.0], atol=1e-7)
    assert opt.buffers["a"]["t"].tolist() == [1.0, 0.0, 1.0, 0.0]


def test_cosine_lr_endpoints():
    assert ad.cosine_lr(0, 10, 0.2) == 0.2
    assert ad.cosine_lr(10, 10, 0.2) == pytest.approx(0.0, abs=1e-15)
    assert ad.cosine_lr(5, 10, 0.2) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        ad.cosine_lr(11, 10, 0.2)
