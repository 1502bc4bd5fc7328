import numpy as np
import pytest

from treesb.bridge_matching import bm_target
from treesb.drift_net import (
    Architecture,
    DriftNet,
    OptimState,
    grad_step,
    load_checkpoint,
    save_checkpoint,
)
from treesb.errors import CheckpointMismatch, DimensionMismatch, NonFiniteGradient

TINY = Architecture(2, (4, 4), (4, 4), (4, 4), embed_dim=4, n_freqs=3)


def tiny_net(seed=0, dtype=np.float64, random_output=True):
    rng = np.random.default_rng(seed)
    net = DriftNet(TINY, rng=rng, dtype=dtype)
    if random_output:
        net.theta[:] = rng.normal(scale=0.7, size=net.theta.shape)
    return net


def bridge_batch(seed=1, n=16):
    rng = np.random.default_rng(seed)
    x_u, x_v = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    t = rng.uniform(0.05, 0.95, size=n)
    x_t = x_u + t[:, None] * (x_v - x_u) + 0.3 * np.sqrt(t * (1 - t))[:, None] * rng.normal(size=(n, 2))
    return x_t, t, bm_target(x_t, x_v, t, 1.0)


def loss_and_grad(net, x, t, target):
    def grad_fn(out):
        r = out - target
        return float(np.mean(np.sum(r * r, axis=1))), 2 * r / len(r)

    return net.forward_backward(x, t, grad_fn)


def test_fresh_net_outputs_zero():
    net = DriftNet(Architecture.scaled(3, 0.25), rng=np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 3)) * 10
    np.testing.assert_array_equal(net.forward(x, np.linspace(0, 1, 7)), np.zeros((7, 3)))


def test_forward_is_deterministic():
    net = tiny_net()
    x, t, _ = bridge_batch()
    assert net.forward(x, t).tobytes() == net.forward(x, t).tobytes()


def test_forward_shape_checks():
    net = tiny_net()
    with pytest.raises(DimensionMismatch):
        net.forward(np.zeros((4, 3)), np.zeros(4))
    with pytest.raises(DimensionMismatch):
        net.forward(np.zeros((4, 2)), np.zeros(5))


def test_gradient_matches_central_differences():
    net = tiny_net()
    x, t, target = bridge_batch()
    _, grad = loss_and_grad(net, x, t, target)
    h = 1e-4
    fd = np.empty_like(grad)
    for i in range(len(grad)):
        plus, minus = net.theta.copy(), net.theta.copy()
        plus[i] += h
        minus[i] -= h
        fp, _ = loss_and_grad(net.with_params(plus), x, t, target)
        fm, _ = loss_and_grad(net.with_params(minus), x, t, target)
        fd[i] = (fp - fm) / (2 * h)
    assert np.linalg.norm(fd - grad) / np.linalg.norm(grad) < 1e-5


def test_single_weight_perturbation_is_first_order():
    net = tiny_net(seed=3)
    x, t, target = bridge_batch(seed=4)
    f0, grad = loss_and_grad(net, x, t, target)
    i = int(np.argmax(np.abs(grad)))
    errs = []
    for h in (1e-3, 5e-4):
        theta = net.theta.copy()
        theta[i] += h
        f1, _ = loss_and_grad(net.with_params(theta), x, t, target)
        errs.append(abs(f1 - f0 - h * grad[i]))
    # second-order remainder: halving h quarters the error
    assert errs[1] / errs[0] == pytest.approx(0.25, abs=0.05)


def test_zero_gradient_leaves_parameters_and_ema():
    net = tiny_net()
    opt = OptimState.for_net(net)
    before = net.theta.copy()
    grad_step(net, opt, np.zeros_like(net.theta))
    np.testing.assert_array_equal(net.theta, before)
    np.testing.assert_array_equal(opt.ema, before)


def test_adam_first_step_is_normalised_gradient():
    net = tiny_net()
    opt = OptimState.for_net(net, lr=0.01)
    g = np.random.default_rng(5).normal(size=net.theta.shape)
    before = net.theta.copy()
    grad_step(net, opt, g)
    np.testing.assert_allclose(net.theta - before, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-10, atol=1e-15)


def test_zero_decay_ema_tracks_parameters():
    net = tiny_net()
    opt = OptimState.for_net(net, ema_decay=0.0)
    rng = np.random.default_rng(6)
    for _ in range(5):
        grad_step(net, opt, rng.normal(size=net.theta.shape))
        np.testing.assert_array_equal(opt.ema, net.theta)


def test_ema_stays_in_hull_of_past_parameters():
    net = tiny_net()
    opt = OptimState.for_net(net, lr=0.05, ema_decay=0.9)
    lo, hi = net.theta.copy(), net.theta.copy()
    rng = np.random.default_rng(7)
    for _ in range(50):
        grad_step(net, opt, rng.normal(size=net.theta.shape))
        lo = np.minimum(lo, net.theta)
        hi = np.maximum(hi, net.theta)
        assert np.all(opt.ema >= lo - 1e-12) and np.all(opt.ema <= hi + 1e-12)


def test_non_finite_gradient_is_rejected():
    net = tiny_net()
    opt = OptimState.for_net(net)
    g = np.zeros_like(net.theta)
    g[3] = np.nan
    before = net.theta.copy()
    with pytest.raises(NonFiniteGradient):
        grad_step(net, opt, g)
    np.testing.assert_array_equal(net.theta, before)
    assert opt.step == 0


def test_checkpoint_round_trip(tmp_path):
    net = tiny_net()
    opt = OptimState.for_net(net, ema_decay=0.5)
    grad_step(net, opt, np.ones_like(net.theta))
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, net, opt)
    header, theta, ema = load_checkpoint(path, expect=TINY)
    assert header["step"] == 1 and header["ema_decay"] == 0.5
    np.testing.assert_array_equal(theta, net.theta)
    np.testing.assert_array_equal(ema, opt.ema)


def test_checkpoint_architecture_mismatch(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, tiny_net())
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expect=Architecture.scaled(2, 0.25))
