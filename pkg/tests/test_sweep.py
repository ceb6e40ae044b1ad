import numpy as np
import pandas as pd
import pytest
from conftest import SPHERE_RADIUS, capsule_sdf, translation, union_mesh

from swept_sdf.exceptions import InputError, TrajectoryError
from swept_sdf.geometry import MeshDistanceIndex, make_box, make_icosphere
from swept_sdf.sweep import (
    MotionOracle,
    SweepOptions,
    SweptBatch,
    SweptSdfEngine,
    WarmStartCache,
    argmin_time,
    argmin_times,
    default_seed_stride,
    dense_clearance,
    grid_shape,
    read_grid,
    sdf_at_time,
    sdf_time_derivative,
    seed_candidates,
    seed_grid,
    seed_time,
    select_obstacles,
    sweep_grid,
    swept_sdf,
    to_body,
    write_grid,
    write_slice_csv,
)
from swept_sdf.trajectory import BoundaryState, minco_construct


def dense_minimum(index, motion, point, samples=2001):
    times = np.linspace(motion.t_min, motion.t_max, samples)
    return min(sdf_at_time(index, motion, point, t) for t in times)


def test_options_validation():
    with pytest.raises(InputError, match="armijo"):
        SweepOptions(armijo=1.5)
    with pytest.raises(InputError):
        SweepOptions(initial_step=0.0)
    with pytest.raises(InputError):
        SweepOptions(seed_stride=-1.0)
    with pytest.raises(InputError, match="refine_levels"):
        SweepOptions(refine_levels=-1)
    with pytest.raises(InputError):
        SweepOptions(max_starts=0)


def test_seed_grid(sliding_motion):
    np.testing.assert_allclose(seed_grid(sliding_motion, 0.3), [0.0, 0.3, 0.6, 0.9, 1.0])
    np.testing.assert_allclose(seed_grid(sliding_motion, 0.5), [0.0, 0.5, 1.0])
    assert default_seed_stride(0.5, 2.0, 10.0, 32) == pytest.approx(0.125)
    assert default_seed_stride(0.5, 2.0, 1.0, 32) == pytest.approx(1.0 / 32)
    with pytest.raises(InputError):
        seed_grid(sliding_motion, 0.0)


def test_seed_time(sphere_index, sliding_motion):
    assert seed_time(sphere_index, sliding_motion, [0.62, 2.0, 0.0], 0.3) == pytest.approx(0.6)
    assert seed_time(sphere_index, sliding_motion, [3.0, 0.0, 0.0], 0.3) == pytest.approx(1.0)
    assert seed_time(sphere_index, sliding_motion, [-3.0, 0.0, 0.0], 0.3) == 0.0


def test_vertex_closest_point(sphere_index, sliding_motion):
    """(0, 1, 0) is a mesh vertex, so the minimum is exact"""
    result = argmin_time(sphere_index, sliding_motion, [0.5, 2.0, 0.0], 0.0)
    assert result.interior
    assert result.t_star == pytest.approx(0.5, abs=1e-6)
    assert result.f_star == pytest.approx(1.5, abs=1e-9)
    np.testing.assert_allclose(result.x_rel, [0.5 - result.t_star, 2.0, 0.0], atol=1e-12)
    assert result.converged


def test_boundary_minima(sphere_index, sliding_motion):
    batch = argmin_times(sphere_index, sliding_motion, [[-2.0, 0.0, 0.0], [3.0, 0.0, 0.0]], [0.5, 0.5])
    assert [batch[i].at_boundary for i in range(2)] == ["t_min", "t_max"]
    np.testing.assert_allclose(batch.t_star, [0.0, 1.0])
    np.testing.assert_allclose(batch.f_star, [1.5, 1.5], atol=5e-3)
    assert batch.f_dot[0] > 0 and batch.f_dot[1] < 0


def test_translating_sphere_sweeps_a_capsule(sphere_index, sliding_motion, rng):
    engine = SweptSdfEngine(sphere_index, sliding_motion.trajectory, SweepOptions(seed_stride=0.05))
    points = rng.uniform([-1.5, -1.5, -1.5], [2.5, 1.5, 1.5], size=(300, 3))
    batch = engine.query_many(points)
    expected = capsule_sdf(points, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], SPHERE_RADIUS)
    np.testing.assert_allclose(batch.f_star, expected, atol=5e-3)


def test_matches_dense_sampling(sphere_index, sliding_motion, rng):
    """Distance to a translating convex body is unimodal in time, so the search finds the global minimum"""
    points = rng.uniform([-1.0, -1.0, -1.0], [2.0, 1.0, 1.0], size=(20, 3))
    engine = SweptSdfEngine(sphere_index, sliding_motion.trajectory)
    batch = engine.query_many(points)
    for point, value in zip(points, batch.f_star):
        reference = dense_minimum(sphere_index, sliding_motion, point)
        assert value <= reference + 1e-9
        assert value >= reference - 1e-3


def test_two_basin_candidates(sliding_motion):
    """Each of two disjoint spheres passes closest to the point at one end of the horizon"""
    index = MeshDistanceIndex(union_mesh(make_icosphere(2, 0.2), make_icosphere(2, 0.2, (1.0, 0.0, 0.0))))
    starts, valid = seed_candidates(index, sliding_motion, [[1.0, 0.5, 0.0]], 0.1)
    assert starts.shape == valid.shape == (1, SweepOptions().max_starts)
    assert valid[0, 0]
    assert (valid & (starts < 0.3)).any() and (valid & (starts > 0.7)).any()
    result = argmin_time(index, sliding_motion, [1.0, 0.5, 0.0])
    assert result.f_star == pytest.approx(0.3, abs=1e-2)


def test_tumbling_non_convex_body_matches_dense_sampling(rng):
    """Two bars in an L on an aggressive path; the time profile has several local minima"""
    index = MeshDistanceIndex(union_mesh(make_box((0.8, 0.1, 0.1)), make_box((0.1, 0.1, 0.6), (0.5, 0.0, 0.45))))
    trajectory = minco_construct(
        [[1.0, 0.8, 0.0], [0.0, 1.6, 0.0]],
        [0.5, 0.5, 0.5],
        BoundaryState(np.zeros(3)),
        BoundaryState(np.array([1.2, 2.4, 0.0])),
    )
    motion = MotionOracle(trajectory)
    p, R = motion.pose(np.linspace(motion.t_min, motion.t_max, 3001))
    points = trajectory.eval_many(rng.uniform(0.0, motion.t_max, 40)) + 0.4 * rng.normal(size=(40, 3))
    batch = SweptSdfEngine(index, trajectory).query_many(points)
    for point, value in zip(points, batch.f_star):
        dense = index.signed_distances(to_body(point, p, R)).min()
        assert value <= dense + 1e-4
        assert value >= dense - 5e-3


def test_result_is_consistent(cube_index, random_minco, rng):
    motion = MotionOracle(random_minco)
    engine = SweptSdfEngine(cube_index, random_minco, SweepOptions(seed_stride=0.02))
    points = random_minco.eval_many(rng.uniform(0.0, random_minco.total_duration, 15)) + rng.normal(size=(15, 3))
    batch = engine.query_many(points)
    for i, point in enumerate(points):
        assert batch.f_star[i] == pytest.approx(sdf_at_time(cube_index, motion, point, batch.t_star[i]), abs=1e-12)
        assert motion.t_min <= batch.t_star[i] <= motion.t_max
        if batch.interior[i] and batch.converged[i]:
            assert abs(batch.f_dot[i]) <= engine.options.stationarity_tol
        elif batch.boundary[i] == 1:
            assert batch.t_star[i] == motion.t_min and batch.f_dot[i] >= 0
        elif batch.boundary[i] == 2:
            assert batch.t_star[i] == motion.t_max and batch.f_dot[i] <= 0


def test_time_derivative_matches_finite_differences(cube_index, random_minco, rng):
    motion = MotionOracle(random_minco)
    h = 1e-6
    for _ in range(5):
        t = rng.uniform(0.1, random_minco.total_duration - 0.1)
        point = random_minco.eval(t) + 3.0 * rng.normal(size=3)
        fd = (sdf_at_time(cube_index, motion, point, t + h) - sdf_at_time(cube_index, motion, point, t - h)) / (2 * h)
        assert sdf_time_derivative(cube_index, motion, point, t) == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_argmin_input_checks(sphere_index, sliding_motion):
    assert len(argmin_times(sphere_index, sliding_motion, np.zeros((0, 3)), [])) == 0
    with pytest.raises(TrajectoryError):
        argmin_time(sphere_index, sliding_motion, [0.0, 1.0, 0.0], 1.5)


def test_warm_start_cache(sphere_index, sliding_motion, rng):
    engine = SweptSdfEngine(sphere_index, sliding_motion.trajectory)
    points = rng.uniform(-1.0, 2.0, size=(40, 3))
    keys = np.arange(40)
    cold = engine.query_many(points, keys)
    assert cold.seeded.all()
    assert len(engine.cache) == 40
    warm = engine.query_many(points, keys)
    assert not warm.seeded.any()
    assert warm.iterations.sum() < cold.iterations.sum()
    np.testing.assert_allclose(warm.f_star, cold.f_star, atol=1e-9)
    assert swept_sdf(engine, points[3], key=3).f_star == pytest.approx(cold.f_star[3], abs=1e-9)


def test_cache_invalidation():
    cache = WarmStartCache()
    waypoints = np.zeros((2, 3))
    assert not cache.invalidate_if_moved(waypoints, 0.5)
    cache.update_many([1, 2], [0.3, 0.7])
    assert not cache.invalidate_if_moved(waypoints + 0.1, 0.5)
    assert len(cache) == 2
    assert cache.get(2, 0.0, 0.5) == 0.5
    assert cache.invalidate_if_moved(waypoints + 1.0, 0.5)
    assert len(cache) == 0
    assert cache.get(1, 0.0, 1.0) is None


def test_cache_drift_accumulates():
    cache = WarmStartCache()
    waypoints = np.zeros((2, 3))
    cache.invalidate_if_moved(waypoints, 0.5)
    cache.put(1, 0.3)
    assert not cache.invalidate_if_moved(waypoints + 0.3, 0.5)
    cache.put(2, 0.4)
    assert cache.invalidate_if_moved(waypoints + 0.6, 0.5)
    assert 1 not in cache and 2 in cache
    assert cache.invalidate_if_moved(waypoints + 0.9, 0.5)
    assert len(cache) == 0


def test_swept_distance_is_one_lipschitz(sphere_index, sliding_motion, rng):
    engine = SweptSdfEngine(sphere_index, sliding_motion.trajectory)
    points = rng.uniform([-1.0, -1.0, -1.0], [2.0, 1.0, 1.0], size=(50, 3))
    nearby = points + 0.05 * rng.normal(size=points.shape)
    gap = np.abs(engine.query_many(points).f_star - engine.query_many(nearby).f_star)
    assert np.all(gap <= np.linalg.norm(points - nearby, axis=1) + 1e-6)

    on_path = np.column_stack([rng.uniform(0.0, 1.0, 20), np.zeros((20, 2))])
    assert np.all(engine.query_many(on_path).f_star < 0)
    outside = points[capsule_sdf(points, [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], SPHERE_RADIUS) > 0.05]
    assert len(outside) and np.all(engine.query_many(outside).f_star > 0)


def test_threads_do_not_change_results(sphere_index, random_minco, rng):
    points = random_minco.eval_many(rng.uniform(0.0, random_minco.total_duration, 64)) + rng.normal(size=(64, 3))
    keys = np.arange(64)
    serial = SweptSdfEngine(sphere_index, random_minco)
    parallel = SweptSdfEngine(sphere_index, random_minco)
    a = serial.query_many(points, keys, threads=1)
    b = parallel.query_many(points, keys, threads=4)
    np.testing.assert_allclose(b.f_star, a.f_star, atol=1e-12)
    np.testing.assert_allclose(b.t_star, a.t_star, atol=1e-12)
    assert len(parallel.cache) == 64


def test_select_obstacles(sliding_motion):
    cloud = np.array([[0.5, 0.5, 0.0], [0.5, 0.7, 0.0], [-0.7, 0.0, 0.0], [1.5, 0.0, 0.0]])
    np.testing.assert_array_equal(select_obstacles(cloud, sliding_motion, 0.6), [0, 3])
    assert select_obstacles(np.zeros((0, 3)), sliding_motion, 0.6).size == 0
    with pytest.raises(InputError):
        select_obstacles(cloud, sliding_motion, -1.0)


def test_dense_clearance(sphere_index, sliding_motion):
    cloud = np.array([[0.5, 1.0, 0.0], [3.0, 0.0, 0.0]])
    report = dense_clearance(sphere_index, sliding_motion, cloud, 1e-3)
    assert report.min_clearance == pytest.approx(0.5, abs=5e-3)
    assert report.point_index == 0
    assert report.checked_points == 2
    assert report.samples >= 1001
    culled = dense_clearance(sphere_index, sliding_motion, cloud, 1e-3, cutoff=1.0)
    assert culled.checked_points == 1
    assert culled.min_clearance == pytest.approx(report.min_clearance)
    nothing = dense_clearance(sphere_index, sliding_motion, cloud, 1e-3, cutoff=0.1)
    assert nothing.min_clearance == np.inf and nothing.checked_points == 0
    with pytest.raises(InputError):
        dense_clearance(sphere_index, sliding_motion, cloud, 0.0)


def test_grid_shape():
    origin, shape = grid_shape([0, 0, 0, 1, 0.5, 0], 0.25)
    np.testing.assert_array_equal(origin, [0, 0, 0])
    assert shape == (5, 3, 1)
    with pytest.raises(InputError, match="resolution"):
        grid_shape([0, 0, 0, 1, 1, 1], 0.0)
    with pytest.raises(InputError):
        grid_shape([1, 0, 0, 0, 1, 1], 0.5)


def test_sweep_grid_files(sphere_index, tmp_path):
    engine = SweptSdfEngine(sphere_index, translation((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)))
    grid = sweep_grid(engine, [-1.0, -1.0, -0.5, 2.0, 1.0, 0.5], 0.5)
    assert grid.shape == (7, 5, 3)
    direct = engine.query_many(grid.points()).f_star
    np.testing.assert_allclose(grid.values.ravel(), direct, atol=1e-7)

    path = tmp_path / "sweep.grid"
    write_grid(grid, path)
    loaded = read_grid(path)
    np.testing.assert_array_equal(loaded.origin, grid.origin)
    assert loaded.spacing == grid.spacing
    np.testing.assert_array_equal(loaded.values, grid.values.astype(np.float32))

    frame = write_slice_csv(grid, tmp_path / "slice.csv", z=0.1)
    assert list(frame.columns) == ["x", "y", "z", "f_star"]
    assert len(frame) == 35
    assert (frame["z"] == 0.0).all()
    pd.testing.assert_frame_equal(pd.read_csv(tmp_path / "slice.csv"), frame)

    (tmp_path / "bad.grid").write_bytes(b"not a grid")
    with pytest.raises(InputError):
        read_grid(tmp_path / "bad.grid")


def test_batch_frame():
    frame = SweptBatch.empty().to_frame(np.zeros((0, 3)))
    assert list(frame.columns) == ["x", "y", "z", "f_star", "t_star", "at_boundary"]
    assert len(frame) == 0
