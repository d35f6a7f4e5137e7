from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mcoslam.geometry import EllipsoidParams, Pose, so3_exp

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def look_at(cam, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose with +z pointing from ``cam`` towards ``target``."""
    cam = np.asarray(cam, dtype=float)
    z = np.asarray(target, dtype=float) - cam
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_body(np.stack([x, y, z], axis=1), cam)


def random_ellipsoid(rng, center_scale=2.0, axes=(0.5, 2.0)) -> EllipsoidParams:
    return EllipsoidParams(rng.uniform(-center_scale, center_scale, 3),
                           so3_exp(rng.normal(size=3)), rng.uniform(*axes, 3))


def ring_views(rng, target, n=8, dist=(8.0, 12.0)) -> list[Pose]:
    """``n`` cameras spread around ``target``, each looking roughly at it."""
    poses = []
    for k in range(n):
        ang = 2 * np.pi * k / n + rng.uniform(-0.2, 0.2)
        d = rng.uniform(*dist)
        cam = target + np.array([d * np.cos(ang), d * np.sin(ang), rng.uniform(-1.0, 3.0)])
        poses.append(look_at(cam, target + rng.normal(scale=0.5, size=3)))
    return poses


def random_pose(rng, trans=5.0) -> Pose:
    return Pose(so3_exp(rng.normal(size=3)), rng.uniform(-trans, trans, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
