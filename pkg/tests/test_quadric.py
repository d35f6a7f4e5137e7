import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import look_at, random_ellipsoid, ring_views
from mcoslam.geometry import EllipsoidParams, GaussianEllipse, conic_to_gaussian, project_quadric, so3_exp, wasserstein2_sq
from mcoslam.quadric import (
    EstimatorConfig,
    InsufficientObservations,
    NoAssociatedPoints,
    Observation,
    ObservationSet,
    TriangulationDegenerate,
    _Problem,
    _obs_blocks,
    init_quadric,
    numeric_jacobian,
    optimize_quadric,
    residual_center,
    residual_proj,
    total_cost,
)


def exact_observations(ell, poses, points=()):
    obs = [Observation(0, k, conic_to_gaussian(project_quadric(ell, p)), p) for k, p in enumerate(poses)]
    return ObservationSet(obs, np.asarray(points, dtype=float).reshape(-1, 3))


def perturbed(ell, rng, frac=0.1):
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return EllipsoidParams(ell.center + frac * np.linalg.norm(ell.semi_axes) * d,
                           ell.rotation @ so3_exp(frac * d),
                           ell.semi_axes * (1 + frac * rng.choice([-1, 1], 3)))


@pytest.fixture
def scene(rng):
    ell = random_ellipsoid(rng)
    return ell, exact_observations(ell, ring_views(rng, ell.center))


def test_duplicate_observation_keys_rejected(scene):
    ell, obs = scene
    with pytest.raises(ValueError):
        ObservationSet([obs.observations[0], obs.observations[0]])


def test_residuals_vanish_at_truth(scene):
    ell, obs = scene
    assert np.all(residual_proj(ell, obs) < 1e-20)
    assert total_cost(ell, obs, EstimatorConfig()) < 1e-20


def test_residual_equals_wasserstein(rng):
    ell = random_ellipsoid(rng)
    obs = exact_observations(ell, ring_views(rng, ell.center, n=4))
    other = perturbed(ell, rng, 0.2)
    got = residual_proj(other, obs)
    for o, r in zip(obs.observations, got):
        pred = conic_to_gaussian(project_quadric(other, o.pose))
        assert r == pytest.approx(wasserstein2_sq(o.ellipse, pred), rel=1e-10)


def test_invisible_observation_is_nan(scene):
    ell, obs = scene
    moved = EllipsoidParams(obs.observations[0].pose.center - 3 * obs.observations[0].pose.R[2],
                            ell.rotation, ell.semi_axes)
    assert np.isnan(residual_proj(moved, obs)[0])


def test_center_residual_needs_points(scene):
    ell, obs = scene
    with pytest.raises(NoAssociatedPoints):
        residual_center(ell, obs)
    withpts = ObservationSet(obs.observations, ell.center + np.array([[0.1, 0, 0], [-0.1, 0, 0]]))
    assert np.allclose(residual_center(ell, withpts), 0.0)


def test_batched_jacobian_matches_reference(rng):
    ell = random_ellipsoid(rng)
    obs = exact_observations(ell, ring_views(rng, ell.center), points=ell.center + rng.normal(size=(5, 3)))
    x = perturbed(ell, rng)
    prob = _Problem(obs, EstimatorConfig())
    _, valid = _obs_blocks(x, prob.stacked)
    J = prob.jacobian(x, valid, 1e-6)
    ref = numeric_jacobian(lambda p: prob.residual_vector(p, valid), x, 1e-6)
    assert J.shape == (5 * valid.sum() + 3, 9)
    assert np.allclose(J, ref, atol=1e-8)


# --- initialization ----------------------------------------------------------

def test_two_ray_triangulation_recovers_center():
    target = np.array([1.0, 2.0, 0.5])
    ell = EllipsoidParams(target, np.eye(3), [0.5, 0.5, 0.5])
    poses = [look_at([10.0, 0.0, 1.0], target), look_at([0.0, 12.0, -1.0], target)]
    init = init_quadric(exact_observations(ell, poses))
    # the silhouette center of a sphere lies on the ray through its center
    assert np.allclose(init.center, target, atol=1e-9)
    assert np.allclose(init.rotation, np.eye(3))
    assert np.all(init.semi_axes == init.semi_axes[0])


def test_two_ray_triangulation_skew_rays():
    # ray 1 runs along +x from the origin, ray 2 along -z through (5, 1, .); they pass
    # closest at (5, 0, 0) and (5, 1, 0), so the estimate is the midpoint
    p1 = look_at(np.zeros(3), [5.0, 0.0, 0.0])
    p2 = look_at([5.0, 1.0, 3.0], [5.0, 1.0, 0.0], up=(1.0, 0.0, 0.0))
    dot = GaussianEllipse([0, 0], np.eye(2) * 1e-3)
    obs = ObservationSet([Observation(0, 0, dot, p1), Observation(0, 1, dot, p2)])
    assert np.allclose(init_quadric(obs).center, [5.0, 0.5, 0.0], atol=1e-9)


def test_init_prefers_point_centroid(scene):
    ell, obs = scene
    pts = ell.center + np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 0.5, 0], [0, -0.5, 0]])
    init = init_quadric(ObservationSet(obs.observations, pts))
    assert np.allclose(init.center, ell.center)


def test_init_errors(scene):
    ell, obs = scene
    with pytest.raises(InsufficientObservations):
        init_quadric(ObservationSet(obs.observations[:1]))
    o = obs.observations[0]
    twin = Observation(1, 99, o.ellipse, o.pose)
    with pytest.raises(TriangulationDegenerate):
        init_quadric(ObservationSet([o, twin]))


# --- optimization ---------------------------------------------------------------

def test_too_few_observations(scene):
    ell, obs = scene
    with pytest.raises(InsufficientObservations):
        optimize_quadric(ell, ObservationSet(obs.observations[:2]))


def test_already_optimal_stops_immediately(scene):
    ell, obs = scene
    fit = optimize_quadric(ell, obs)
    assert fit.converged and fit.iterations == 0
    params, cost, its = fit
    assert params is ell and cost < 1e-20


@pytest.mark.parametrize("seed", range(10))
def test_converges_from_perturbed_init(seed):
    rng = np.random.default_rng(seed)
    ell = random_ellipsoid(rng)
    obs = exact_observations(ell, ring_views(rng, ell.center))
    fit = optimize_quadric(perturbed(ell, rng), obs)
    assert fit.iterations <= 50
    assert np.linalg.norm(fit.params.center - ell.center) < 1e-3
    assert np.max(np.abs(np.sort(fit.params.semi_axes) / np.sort(ell.semi_axes) - 1)) < 1e-2


@given(seed=st.integers(0, 10_000), sigma=st.floats(0.0, 0.005))
def test_cost_never_increases(seed, sigma):
    rng = np.random.default_rng(seed)
    ell = random_ellipsoid(rng)
    obs = exact_observations(ell, ring_views(rng, ell.center, n=5))
    noisy = ObservationSet([Observation(o.camera_id, o.frame_id,
                                        GaussianEllipse(o.ellipse.mu + sigma * rng.normal(size=2), o.ellipse.sigma),
                                        o.pose) for o in obs.observations])
    init = perturbed(ell, rng, 0.2)
    fit = optimize_quadric(init, noisy, EstimatorConfig(max_iterations=20))
    assert fit.cost <= total_cost(init, noisy, EstimatorConfig()) + 1e-15
    assert np.all(fit.params.semi_axes > 0)


def test_center_prior_pulls_towards_points(scene):
    ell, obs = scene
    # observations from only three views plus a strong prior on the true center
    few = ObservationSet(obs.observations[:3], np.tile(ell.center, (4, 1)))
    fit = optimize_quadric(perturbed(ell, np.random.default_rng(3), 0.1), few, EstimatorConfig(w_c=10.0))
    assert np.linalg.norm(fit.params.center - ell.center) < 1e-3


def test_estimator_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(w_c=-1.0)
    with pytest.raises(ValueError):
        EstimatorConfig(min_observations=2)
