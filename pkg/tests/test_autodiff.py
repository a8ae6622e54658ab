import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcml import tensor as tn
from hcml.autodiff import GraphError, backward, format_reports, grad_check, relative_error
from hcml.contrastive import info_nce
from hcml.flow_head import reconstruction_loss
from hcml.tensor import Tensor


def test_mean_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(tn.mean(x))
    np.testing.assert_array_equal(x.grad, 0.25)


def test_relu_subgradient():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    backward(tn.sum(tn.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_cosine_gradient_vanishes_when_aligned():
    u = Tensor(np.array([1.0, 0.0]), requires_grad=True)
    v = Tensor(np.array([1.0, 0.0]))
    backward(tn.cosine_sim(u, v))
    np.testing.assert_allclose(u.grad, 0.0, atol=1e-12)
    report = grad_check(lambda: tn.cosine_sim(u, v), {"u": u}, tol=1e-4)
    assert report.passed


def test_non_scalar_loss_rejected():
    with pytest.raises(GraphError):
        backward(Tensor(np.ones(3), requires_grad=True))


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(tn.sum(tn.add(tn.mul(x, x), x)))
    assert x.grad[0] == 5.0


def test_grad_check_quadratic():
    x = Tensor(np.random.default_rng(0).standard_normal(6), requires_grad=True)
    assert grad_check(lambda: tn.mean(tn.mul(x, x)), {"x": x}, h=1e-5, tol=1e-6).passed


def test_grad_check_reconstruction_two_frame_clip(rng):
    frames = rng.uniform(0, 1, (1, 3, 2, 8, 8))
    flow = Tensor(rng.uniform(-1.3, 1.3, (1, 2, 1, 8, 8)) + 0.03, requires_grad=True)
    rep = grad_check(lambda: reconstruction_loss(frames, flow, zeta=0.1), {"flow": flow}, tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_grad_check_contrastive_one_positive_five_negatives(rng):
    preds = Tensor(rng.standard_normal((1, 8)), requires_grad=True)
    targets = Tensor(rng.standard_normal((6, 8)), requires_grad=True)
    rep = grad_check(lambda: info_nce(preds, targets, np.array([2]), 0.1),
                     {"preds": preds, "targets": targets}, tol=1e-4)
    assert rep.passed


def test_grad_check_flags_wrong_gradient():
    x = Tensor(np.array([0.5, 1.5]), requires_grad=True)

    def bad():
        y = tn.mul(x, x)
        y._backward = lambda g: (g * 3.0 * x.data, g * 0.0)   # wrong factor
        return tn.sum(y)

    rep = grad_check(bad, {"x": x}, tol=1e-4)
    assert not rep.passed
    assert "FAIL" in format_reports([rep])


def test_grad_check_non_finite_fails_with_diagnostic():
    x = Tensor(np.array([1.0]), requires_grad=True)
    rep = grad_check(lambda: tn.scale(tn.sum(x), np.inf), {"x": x})
    assert not rep.passed and rep.diagnostic


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]))[0] == pytest.approx(1e-9 / 1e-8)


@given(seed=st.integers(0, 2**32 - 1))
def test_backward_linear_in_losses(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal(5), requires_grad=True)
    a, b = Tensor(r.standard_normal(5)), Tensor(r.standard_normal(5))
    f1 = lambda: tn.sum(tn.mul(tn.relu(x), a))
    f2 = lambda: tn.mean(tn.mul(x, tn.mul(x, b)))
    backward(f1()); g1 = x.grad.copy()
    backward(f2()); g2 = x.grad.copy()
    backward(tn.add(f1(), f2()))
    np.testing.assert_allclose(x.grad, g1 + g2, atol=1e-12)


def test_backward_deterministic(rng):
    x = Tensor(rng.standard_normal((2, 3, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    loss = tn.mean(tn.relu(tn.conv3x3_spatial(x, w)))
    backward(loss); g1 = w.grad.copy()
    backward(loss); g2 = w.grad.copy()
    np.testing.assert_array_equal(g1, g2)


def test_every_reachable_node_gets_a_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    tape = backward(tn.sum(tn.relu(tn.linear(x, Tensor(rng.standard_normal((2, 4)))))))
    for node in tape.nodes:
        if node.requires_grad:
            assert node.grad.shape == node.shape
