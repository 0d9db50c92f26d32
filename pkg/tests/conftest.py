import numpy as np
import pytest

from dustgsg.geom import RigidTransform, UnitQuaternion
from dustgsg.render import Camera
from dustgsg.scene import AgentNode, GaussianSet, PoseTrajectory, SceneGraph


def gset(means, scale=0.2, opacity=0.7, color=(0.8, 0.3, 0.2), quats=None):
    means = np.asarray(means, dtype=float).reshape(-1, 3)
    n = len(means)
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)) if quats is None else quats
    return GaussianSet(means, np.full((n, 3), np.log(scale)), q, np.full(n, opacity), np.tile(color, (n, 1)))


def front_camera(width=32, height=32, f=30.0, distance=6.0) -> Camera:
    """Looks down +y at the origin from (0, -distance, 0)."""
    return Camera.look_at([0.0, -distance, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], f, f, width, height)


def linear_traj(p0, v, times, source="vehicle") -> PoseTrajectory:
    times = np.asarray(times, dtype=float)
    return PoseTrajectory(times, np.asarray(p0, float) + np.outer(times, v), np.tile([1.0, 0, 0, 0], (len(times), 1)), source)


def one_agent_scene(v=(2.0, 0.0, 0.0), dtau=0.1, rng=None) -> SceneGraph:
    rng = rng or np.random.default_rng(0)
    canon = GaussianSet(
        rng.uniform(-0.4, 0.4, (4, 3)),
        np.log(rng.uniform(0.15, 0.25, (4, 3))),
        np.tile([1.0, 0, 0, 0], (4, 1)),
        rng.uniform(0.5, 0.8, 4),
        rng.uniform(0.2, 0.9, (4, 3)),
    )
    tf = np.arange(4) * 0.1
    tv = tf + dtau
    return SceneGraph(
        gset([[0.0, 2.0, 0.0]], scale=1.5, opacity=0.9, color=(0.3, 0.5, 0.3)),
        [AgentNode("car", canon, linear_traj([-0.3, 0.0, 0.0], v, tv, "vehicle"), linear_traj([-0.3, 0.0, 0.0], v, tf, "infra"))],
    )


def rot_z(deg: float) -> RigidTransform:
    return RigidTransform(UnitQuaternion.from_axis_angle([0, 0, 1], np.radians(deg)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (number, name, passed, detail) rows appended by test_acceptance, printed at the end of the run
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:>2} {name}: {detail}")
