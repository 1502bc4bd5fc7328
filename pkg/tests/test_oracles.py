import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treesb.errors import MaxIterExceeded, WeightsNotNormalised
from treesb.metrics import EmpiricalMoments, bw2_squared
from treesb.oracles import (
    GaussianSpec,
    Grid2D,
    gaussian_fixed_point_barycentre,
    gaussian_histogram,
    gaussian_ot_map,
    grid_entropic_barycentre,
    grid_entropic_coupling_1d,
    random_gaussian_instance,
)


def test_identical_gaussians_are_their_own_barycentre():
    spec = random_gaussian_instance(1, 3, count=1)[0]
    bary = gaussian_fixed_point_barycentre([spec] * 3, [0.2, 0.3, 0.5])
    np.testing.assert_allclose(bary.mean, spec.mean, atol=1e-12)
    np.testing.assert_allclose(bary.cov, spec.cov, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.1, 3.0), min_size=2, max_size=5), st.integers(0, 1000))
def test_scalar_barycentre_std_is_weighted_mean(stds, seed):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(len(stds)))
    w[-1] = 1.0 - w[:-1].sum()
    specs = [GaussianSpec([rng.normal()], [[s * s]]) for s in stds]
    bary = gaussian_fixed_point_barycentre(specs, w)
    assert np.sqrt(bary.cov[0, 0]) == pytest.approx(w @ stds, abs=1e-8)
    assert bary.mean[0] == pytest.approx(sum(wi * s.mean[0] for wi, s in zip(w, specs)), abs=1e-12)


def test_diagonal_barycentre_averages_square_roots():
    diag = np.array([[1.0, 4.0, 0.25], [9.0, 1.0, 1.0], [0.5, 2.0, 3.0]])
    w = np.array([0.5, 0.3, 0.2])
    specs = [GaussianSpec(np.zeros(3), np.diag(d)) for d in diag]
    bary = gaussian_fixed_point_barycentre(specs, w)
    np.testing.assert_allclose(np.sqrt(np.diag(bary.cov)), w @ np.sqrt(diag), atol=1e-8)


@pytest.mark.parametrize("dim", [2, 4, 8])
def test_barycentre_optimality_condition(dim):
    specs = random_gaussian_instance(7, dim)
    w = np.array([0.2, 0.3, 0.5])
    bary = gaussian_fixed_point_barycentre(specs, w)
    maps = [gaussian_ot_map(bary, s) for s in specs]
    z = bary.sample(1000, np.random.default_rng(0))
    combined = sum(wi * T(z) for wi, T in zip(w, maps))
    np.testing.assert_allclose(combined, z, atol=1e-6)


def test_barycentre_weight_checks():
    specs = random_gaussian_instance(0, 2)
    with pytest.raises(WeightsNotNormalised):
        gaussian_fixed_point_barycentre(specs, [0.5, 0.5, 0.5])
    with pytest.raises(MaxIterExceeded):
        gaussian_fixed_point_barycentre(specs, [1 / 3] * 3, max_iter=1)


def test_instance_eigenvalues_in_range():
    for spec in random_gaussian_instance(3, 6, count=4):
        ev = np.linalg.eigvalsh(spec.cov)
        assert ev.min() >= 0.5 - 1e-10 and ev.max() <= 2.0 + 1e-10


def test_ot_map_to_self_is_identity():
    spec = random_gaussian_instance(2, 3, count=1)[0]
    T = gaussian_ot_map(spec, spec)
    np.testing.assert_allclose(T.matrix, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(T.translation, 0.0, atol=1e-10)


def test_scalar_ot_map():
    T = gaussian_ot_map(GaussianSpec([1.0], [[4.0]]), GaussianSpec([-2.0], [[9.0]]))
    assert T.matrix[0, 0] == pytest.approx(1.5)
    assert T.translation[0] == pytest.approx(-2.0 - 1.5 * 1.0)


def test_equal_covariance_map_is_translation():
    cov = random_gaussian_instance(4, 3, count=1)[0].cov
    T = gaussian_ot_map(GaussianSpec(np.zeros(3), cov), GaussianSpec([1.0, 2.0, 3.0], cov))
    np.testing.assert_allclose(T.matrix, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(T.translation, [1.0, 2.0, 3.0], atol=1e-10)


def test_ot_map_pushes_source_onto_target():
    src, dst = random_gaussian_instance(5, 4, count=2)
    pushed = gaussian_ot_map(src, dst)(src.sample(100_000, np.random.default_rng(1)))
    gap = bw2_squared(EmpiricalMoments.from_samples(pushed), EmpiricalMoments(dst.mean, dst.cov, 0))
    assert gap < 1e-3 * np.trace(dst.cov)


def test_gaussian_spec_json_round_trip():
    spec = random_gaussian_instance(6, 2, count=1)[0]
    again = GaussianSpec.from_dict(spec.to_dict())
    np.testing.assert_array_equal(again.cov, spec.cov)


def blob(centre, n=4000, scale=0.3, seed=0):
    return np.asarray(centre) + scale * np.random.default_rng(seed).normal(size=(n, 2))


def small_grid(lo=-2.0, hi=2.0, size=41):
    axis = np.linspace(lo, hi, size)
    return Grid2D(axis, axis.copy())


def tv(p, q):
    return 0.5 * np.abs(p - q).sum()


def test_equal_marginals_give_back_the_marginal():
    grid = small_grid()
    x = blob([0.2, -0.1])
    bary = grid_entropic_barycentre([x, x, x], [1 / 3] * 3, 1e-3, grid=grid)
    assert tv(bary.hist, grid.histogram(x)) < 0.05


def test_degenerate_weights_select_first_marginal():
    grid = small_grid()
    clouds = [blob([0.5, 0.0]), blob([-0.5, 0.5], seed=1), blob([0.0, -0.7], seed=2)]
    bary = grid_entropic_barycentre(clouds, [1.0, 0.0, 0.0], 1e-3, grid=grid)
    assert tv(bary.hist, grid.histogram(clouds[0])) < 0.05


def test_opposite_point_masses_meet_in_the_middle():
    grid = small_grid()
    left, right = np.array([[-1.0, 0.0]] * 2), np.array([[1.0, 0.0]] * 2)
    bary = grid_entropic_barycentre([left, right], [0.5, 0.5], 1e-3, grid=grid)
    i, j = np.unravel_index(np.argmax(bary.hist), grid.shape)
    assert (grid.xs[i], grid.ys[j]) == pytest.approx((0.0, 0.0), abs=1e-12)
    assert bary.hist[i, j] > 0.9


def test_refined_samples_follow_the_exact_centre_law():
    # With point-mass marginals the centre is N(midpoint, eps / (2 * sum w) I) off the grid.
    grid = small_grid()
    left, right = np.array([[-1.0, 0.0]] * 2), np.array([[1.0, 0.0]] * 2)
    bary = grid_entropic_barycentre([left, right], [0.5, 0.5], 0.05, grid=grid)
    z = bary.sample(20000, np.random.default_rng(0))
    assert z.mean(axis=0) == pytest.approx([0.0, 0.0], abs=0.01)
    assert z.std(axis=0) == pytest.approx([np.sqrt(0.025)] * 2, rel=0.03)


def test_translation_equivariance():
    grid = small_grid()
    clouds = [blob([0.5, 0.0]), blob([-0.5, 0.5], seed=1)]
    shift = np.array([3.0, -1.5])
    moved = Grid2D(grid.xs + shift[0], grid.ys + shift[1])
    a = grid_entropic_barycentre(clouds, [0.4, 0.6], 0.05, grid=grid)
    b = grid_entropic_barycentre([c + shift for c in clouds], [0.4, 0.6], 0.05, grid=moved)
    np.testing.assert_allclose(a.hist, b.hist, atol=1e-9)


def test_point_mass_coupling_is_diagonal():
    grid = np.linspace(-1, 1, 21)
    mass = np.zeros(21)
    mass[7] = 1.0
    c = grid_entropic_coupling_1d(grid, mass, grid, mass, 0.1)
    assert c.plan[7, 7] == pytest.approx(1.0)
    assert c.plan.sum() == pytest.approx(1.0)


def test_large_epsilon_gives_independence():
    grid = np.linspace(-4, 4, 161)
    mu = gaussian_histogram(0.0, 1.0, grid)
    nu = gaussian_histogram(0.5, 1.2, grid)
    c = grid_entropic_coupling_1d(grid, mu, grid, nu, 1e3 * 8.0)
    assert c.mutual_information() < 1e-3


def test_gaussian_coupling_matches_closed_form():
    # entropic OT between N(0, a) and N(0, b) at regularisation 2 s:
    # covariance c solves c^2 + s c = a b
    grid = np.linspace(-8, 8, 401)
    a, b, s = 1.0, 2.25, 0.25
    c = grid_entropic_coupling_1d(grid, gaussian_histogram(0, 1.0, grid), grid, gaussian_histogram(0, 1.5, grid), 2 * s)
    exact = (-s + np.sqrt(s * s + 4 * a * b)) / 2 / np.sqrt(a * b)
    assert c.correlation == pytest.approx(exact, abs=2e-4)
