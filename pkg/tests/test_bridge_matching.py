import numpy as np
import pytest

from treesb.bridge_matching import EdgeTrainer, TrainingParams, bm_loss, bm_target, edge_batches, train_edge
from treesb.errors import TimeAtTerminal
from treesb.reference import EdgeBridges, build_precision
from treesb.simulation import euler_maruyama_edge
from treesb.tree import validate_tree

SIGMA = 0.5


def bridge_tree(length=1.0):
    return validate_tree({"vertices": 2, "edges": [[0, 1, length]], "observed": [0, 1], "sigma": SIGMA})


def trainer(seed=0, **kw):
    params = TrainingParams(**{"steps": 0, "batch_size": 256, "width_mult": 0.125, **kw})
    return EdgeTrainer.create(bridge_tree(), 0, 1, params, np.random.default_rng(seed), dtype=np.float64)


def test_target_at_start_is_chord_velocity():
    np.testing.assert_allclose(bm_target(np.array([1.0, 2.0]), np.array([4.0, -2.0]), 0.0, 2.0), [1.5, -2.0])


def test_target_hand_value():
    assert bm_target(1.0, 3.0, 0.5, 1.0) == pytest.approx(4.0)


def test_target_zero_at_endpoint_value():
    np.testing.assert_array_equal(bm_target(np.full((3, 2), 0.7), np.full((3, 2), 0.7), np.array([0.1, 0.4, 0.9]), 1.0), 0.0)


def test_target_rejects_terminal_time():
    with pytest.raises(TimeAtTerminal):
        bm_target(0.0, 1.0, 1.0, 1.0)


def one_point_batch(x_u, x_v, t, x_t, T=1.0):
    a = lambda v: np.array([[v]], dtype=float)
    return EdgeBridges(0, T, a(x_u), a(x_v), np.array([t]), a(x_t))


def test_loss_with_zero_nets_is_squared_targets():
    tr = trainer()
    batch = one_point_batch(x_u=-1.0, x_v=3.0, t=0.25, x_t=0.5)
    loss, lf, lb, *_ = bm_loss(tr, batch)
    assert lf == pytest.approx(((3.0 - 0.5) / 0.75) ** 2)
    assert lb == pytest.approx(((-1.0 - 0.5) / 0.25) ** 2)
    assert loss == pytest.approx(lf + lb)


def test_duplicated_rows_keep_the_loss():
    tr = trainer()
    tr.forward_net.theta[:] = np.random.default_rng(1).normal(scale=0.3, size=tr.forward_net.theta.shape)
    rng = np.random.default_rng(2)
    x_u, x_v = rng.normal(size=(5, 1)), rng.normal(size=(5, 1))
    t = rng.uniform(0.1, 0.9, 5)
    x_t = x_u + t[:, None] * (x_v - x_u)
    once = EdgeBridges(0, 1.0, x_u, x_v, t, x_t)
    twice = EdgeBridges(0, 1.0, *(np.concatenate([a, a]) for a in (x_u, x_v, t, x_t)))
    assert bm_loss(tr, once)[0] == pytest.approx(bm_loss(tr, twice)[0], rel=1e-12)


def test_zero_steps_leaves_trainer_unchanged():
    tr = trainer()
    before = tr.forward_net.theta.copy(), tr.backward_net.theta.copy()
    train_edge(tr, iter(()), 0)
    np.testing.assert_array_equal(tr.forward_net.theta, before[0])
    np.testing.assert_array_equal(tr.backward_net.theta, before[1])
    assert tr.loss_trace == []


def _train(seed, coupling, steps):
    tree = bridge_tree()
    tr = trainer(seed)
    batches = edge_batches(tree, build_precision(tree), coupling, 0, 256, 1, np.random.default_rng(seed + 100))
    return train_edge(tr, batches, steps)


def test_training_is_deterministic():
    coupling = np.random.default_rng(0).normal(size=(500, 2, 1))
    a, b = _train(3, coupling, 20), _train(3, coupling, 20)
    assert a.forward_net.theta.tobytes() == b.forward_net.theta.tobytes()
    assert a.backward_opt.ema.tobytes() == b.backward_opt.ema.tobytes()


@pytest.fixture(scope="module")
def gaussian_edge():
    """Edge trained on an independent N(0,1) x N(0,1) coupling."""
    n = 20_000
    coupling = np.random.default_rng(11).normal(size=(n, 2, 1))
    tree = bridge_tree()
    params = TrainingParams(steps=0, batch_size=512, lr=1e-3, width_mult=0.125)
    tr = EdgeTrainer.create(tree, 0, 1, params, np.random.default_rng(5), dtype=np.float32)
    batches = edge_batches(tree, build_precision(tree), coupling, 0, 512, 1, np.random.default_rng(6))
    return train_edge(tr, batches, 4000)


def reciprocal_variance(t):
    return (1 - t) ** 2 + t**2 + SIGMA**2 * t * (1 - t)


def test_learned_drift_matches_projection_drift(gaussian_edge):
    fwd, _ = gaussian_edge.ema_nets()
    for t in (0.2, 0.5, 0.8):
        v = reciprocal_variance(t)
        x = np.linspace(-1.5, 1.5, 31)[:, None] * np.sqrt(v)
        exact = (t * x / v - x) / (1 - t)
        learned = fwd(x, np.full(len(x), t))
        assert np.sqrt(np.mean((learned - exact) ** 2)) < 0.15 * np.sqrt(np.mean(exact**2)) + 0.05


def _simulate_to(drift, x0, frac, rng):
    # 200 steps keep the Euler bias (about 3% of the variance at 50 steps) out of the comparison;
    # integrate the [0, 1]-normalised drift only over [0, frac]
    return euler_maruyama_edge(lambda x, s: drift(x, s * frac), x0, frac, SIGMA, int(200 * frac), rng)


@pytest.mark.parametrize("frac", [0.5, 1.0])
def test_forward_simulation_preserves_marginals(gaussian_edge, frac):
    fwd, _ = gaussian_edge.ema_nets()
    rng = np.random.default_rng(21)
    x = _simulate_to(fwd, rng.normal(size=(10_000, 1)), frac, rng)
    assert abs(x.mean()) < 0.05 * np.sqrt(reciprocal_variance(frac))
    assert x.var() == pytest.approx(reciprocal_variance(frac), rel=0.05)


def test_backward_simulation_recovers_source(gaussian_edge):
    _, bwd = gaussian_edge.ema_nets()
    rng = np.random.default_rng(22)
    x = _simulate_to(bwd, rng.normal(size=(10_000, 1)), 1.0, rng)
    assert abs(x.mean()) < 0.05
    assert x.var() == pytest.approx(1.0, rel=0.05)


def test_loss_decreases(gaussian_edge):
    trace = np.array([lf + lb for _, lf, lb in gaussian_edge.loss_trace])
    assert trace[-500:].mean() <= trace[99]
