import numpy as np
import pytest

from swept_sdf.exceptions import CollisionError, InputError, SolverError
from swept_sdf.geometry import MeshDistanceIndex, make_box
from swept_sdf.objective import PlannerConfig, total_cost
from swept_sdf.solver import (
    SolveOptions,
    Status,
    check_endpoint,
    initial_guess,
    minimize,
    pack,
    pack_gradient,
    plan,
    unpack,
    weak_wolfe_search,
)
from swept_sdf.sweep import MotionOracle, SweptSdfEngine
from swept_sdf.trajectory import BoundaryState, minco_construct


def rosenbrock(x):
    value = 100.0 * (x[1] - x[0] ** 2) ** 2 + (1.0 - x[0]) ** 2
    grad = np.array([-400.0 * x[0] * (x[1] - x[0] ** 2) - 2.0 * (1.0 - x[0]), 200.0 * (x[1] - x[0] ** 2)])
    return value, grad


def test_decision_vector():
    q = np.arange(6.0).reshape(2, 3)
    T = np.array([0.5, 1.0, 2.0])
    x = pack(q, T)
    assert len(x) == 4 * 3 - 3
    q_back, T_back = unpack(x, 3)
    np.testing.assert_array_equal(q_back, q)
    np.testing.assert_allclose(T_back, T)
    np.testing.assert_allclose(pack_gradient(np.ones((2, 3)), [1.0, 1.0, 1.0], T)[-3:], T)
    with pytest.raises(InputError):
        pack(q, [1.0, 0.0, 1.0])
    with pytest.raises(InputError):
        unpack(x, 2)


def test_options_validation():
    with pytest.raises(InputError):
        SolveOptions(c1=0.9, c2=0.1)
    with pytest.raises(InputError):
        SolveOptions(memory=0)
    with pytest.raises(InputError):
        SolveOptions(grad_tol=0.0)


def test_quadratic(rng):
    basis = np.linalg.qr(rng.normal(size=(10, 10)))[0]
    A = basis @ np.diag(np.linspace(1.0, 50.0, 10)) @ basis.T
    b = rng.normal(size=10)
    records = []
    report = minimize(
        lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), np.zeros(10), SolveOptions(rel_tol=1e-30), records.append
    )
    assert report.status == Status.GRADIENT
    assert not report.failed
    np.testing.assert_allclose(report.x, np.linalg.solve(A, b), atol=1e-6)
    assert len(records) == report.iterations
    assert [r.iteration for r in records] == list(range(1, report.iterations + 1))
    assert all(later.cost <= earlier.cost for earlier, later in zip(records, records[1:]))


def test_rosenbrock():
    options = SolveOptions(grad_tol=1e-10, rel_tol=1e-20, max_iterations=500)
    report = minimize(rosenbrock, [-1.2, 1.0], options)
    np.testing.assert_allclose(report.x, [1.0, 1.0], atol=1e-5)
    assert not report.failed
    assert report.to_dict()["message"] == report.message


def test_nonsmooth_l1():
    """The weak Wolfe search still makes progress on a polyhedral kink"""
    report = minimize(lambda x: (np.abs(x).sum(), np.sign(x)), [1.3, -0.7], SolveOptions(max_iterations=200))
    assert report.cost < 1e-4


def test_non_finite_start():
    with pytest.raises(SolverError):
        minimize(lambda x: (np.inf, np.zeros_like(x)), [0.0])


def test_line_search_backs_off_non_finite_values():
    def fun(x):
        if x[0] >= 1.5:
            return np.nan, np.full(1, np.nan)
        return (x[0] - 1.0) ** 2, 2.0 * (x - 1.0)

    x = np.zeros(1)
    f, g = fun(x)
    result = weak_wolfe_search(fun, x, f, g, np.ones(1), 10.0, SolveOptions())
    assert result.success
    assert 0.0 < result.x[0] < 1.5
    assert result.f < f


def test_line_search_failure_returns_start():
    x = np.zeros(1)
    def uphill(y):
        return float(y[0]), np.ones(1)

    result = weak_wolfe_search(uphill, x, 0.0, np.ones(1), np.ones(1), 1.0, SolveOptions())
    assert not result.success
    assert result.step == 0.0
    np.testing.assert_array_equal(result.x, x)


def test_initial_guess():
    config = PlannerConfig(v_max=2.0, segment_length=1.0)
    waypoints, durations = initial_guess(BoundaryState([0, 0, 0]), BoundaryState([3, 0, 0]), config)
    np.testing.assert_allclose(waypoints, [[1, 0, 0], [2, 0, 0]])
    np.testing.assert_allclose(durations, [1.0, 1.0, 1.0])
    waypoints, durations = initial_guess(BoundaryState([0, 0, 0]), BoundaryState([0.3, 0, 0]), config)
    assert len(durations) == 2
    with pytest.raises(InputError, match="coincide"):
        initial_guess(BoundaryState([1, 1, 1]), BoundaryState([1, 1, 1]), config)


def test_endpoint_collision(cube_index):
    state = BoundaryState([0.0, 0.0, 0.0])
    assert check_endpoint(cube_index, [[2.0, 0.0, 0.0]], state, "start", 9.81) == pytest.approx(1.5)
    assert check_endpoint(cube_index, np.zeros((0, 3)), state, "start", 9.81) == np.inf
    with pytest.raises(CollisionError, match="goal state in collision"):
        check_endpoint(cube_index, [[0.1, 0.0, 0.0]], state, "goal", 9.81)


def test_plan_without_obstacles():
    robot = make_box((0.2, 0.2, 0.1))
    start, goal = BoundaryState([0.0, 0.0, 1.0]), BoundaryState([2.0, 0.0, 1.0])
    result = plan(robot, np.zeros((0, 3)), start, goal, options=SolveOptions(max_iterations=30))
    traj = result.trajectory
    np.testing.assert_allclose(traj.eval(0.0), start.position, atol=1e-9)
    np.testing.assert_allclose(traj.eval(traj.total_duration), goal.position, atol=1e-9)
    assert result.cost.safety == 0.0
    assert result.cost.total <= result.history[0].total
    assert len(result.history) == result.report.iterations + 1
    summary = result.to_summary()
    assert summary["clearance"]["min_clearance"] is None
    assert summary["pieces"] == traj.pieces


def test_plan_rejects_colliding_start():
    robot = make_box((0.2, 0.2, 0.1))
    with pytest.raises(CollisionError):
        plan(robot, [[0.0, 0.0, 1.0]], BoundaryState([0.0, 0.0, 1.0]), BoundaryState([2.0, 0.0, 1.0]))


@pytest.mark.slow
def test_plan_moves_away_from_obstacles():
    robot = make_box((0.2, 0.2, 0.1))
    cloud = np.array([[1.0, 0.03, 1.01], [1.0, 0.06, 0.99], [1.02, 0.0, 1.0]])
    start, goal = BoundaryState([0.0, 0.0, 1.0]), BoundaryState([2.0, 0.0, 1.0])
    result = plan(robot, cloud, start, goal, options=SolveOptions(max_iterations=60))
    assert result.history[0].safety > 0
    assert result.cost.safety < 1e-2 * result.history[0].safety
    assert result.clearance.min_clearance > 0
    assert result.clearance.checked_points == 3
    assert len(result.selected) > 0
    assert result.clearance.point_index in (0, 1, 2)


def slot_walls(gap, x_span=(-0.1, 0.1), y_span=(-0.6, 0.6), height=1.0):
    """Two horizontal plates of points leaving a ``gap`` high slot around ``height``."""
    x, y = np.meshgrid(np.linspace(*x_span, 5), np.linspace(*y_span, 25))
    x, y = x.ravel(), y.ravel()
    plates = [np.column_stack([x, y, np.full_like(x, height + side * gap / 2)]) for side in (-1.0, 1.0)]
    return np.vstack(plates)


@pytest.mark.slow
def test_plan_through_slot():
    """0.3 m slot: wider than the 0.2 m robot thickness, narrower than its 0.6 m sides"""
    robot = make_box((0.6, 0.6, 0.2))
    cloud = slot_walls(0.3)
    start, goal = BoundaryState([-2.5, 0.0, 1.0]), BoundaryState([2.5, 0.0, 1.0])
    config = PlannerConfig(v_max=2.0, safety_margin=0.02, time_weight=0.0)
    result = plan(robot, cloud, start, goal, config, SolveOptions(max_iterations=40))
    assert result.cost.safety == 0.0
    assert result.clearance.min_clearance >= config.safety_margin - 1e-3
    traj = result.trajectory
    speeds = np.linalg.norm(traj.eval_many(np.linspace(0.0, traj.total_duration, 2001), 1), axis=1)
    assert speeds.max() <= config.v_max + 1e-3


@pytest.mark.slow
def test_thin_plate_between_samples_is_caught():
    """A coarse sampled check misses the plate; the swept cost does not"""
    robot = make_box((0.2, 0.2, 0.1))
    index = MeshDistanceIndex(robot)
    start, goal = BoundaryState([0.0, 0.0, 1.0]), BoundaryState([4.0, 0.0, 1.0])
    config = PlannerConfig()
    traj = minco_construct(*initial_guess(start, goal, config), start, goal)
    motion = MotionOracle(traj)
    p, R = motion.pose(np.linspace(0.0, traj.total_duration, 10))
    plate_x = 0.5 * (p[4, 0] + p[5, 0])
    y, z = np.meshgrid(np.linspace(-0.3, 0.3, 13), np.linspace(0.7, 1.3, 13))
    plate = np.column_stack([np.full(y.size, plate_x), y.ravel(), z.ravel()])

    sampled = min(index.signed_distances((plate - p[k]) @ R[k]).min() for k in range(len(p)))
    assert sampled > config.safety_margin
    engine = SweptSdfEngine(index, traj)
    swept = total_cost(engine, traj, config, cloud=plate)
    assert swept.safety > 0
    deepest = engine.query_many(plate).f_star.min()
    assert deepest < 0

    result = plan(robot, plate, start, goal, config, SolveOptions(max_iterations=60))
    assert result.cost.safety < swept.safety
    assert result.clearance.min_clearance > deepest
