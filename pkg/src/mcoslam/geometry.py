"""Camera models, conic/quadric algebra and ellipse metrics.

Conventions
-----------
* ``Pose`` maps world coordinates into the local frame: ``x_local = R @ x_world + t``.
* All ellipse quantities live on the normalized image plane (z = 1).
* Dual conics are scaled so that ``C[2, 2] == -1``; dual quadrics so that ``Q[3, 3] == -1``.
  With this scaling an ellipse with center ``mu`` and shape ``S`` has
  ``C = [[S - mu mu^T, -mu], [-mu^T, -1]]`` and ``S`` is the Gaussian covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation
from shapely.geometry import Polygon

EIG_FLOOR = 1e-12
IOU_VERTICES = 256


class GeometryError(ValueError):
    pass


class NonInvertiblePixel(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class DegenerateInput(GeometryError):
    pass


class NotAnEllipse(GeometryError):
    pass


class QuadricBehindCamera(GeometryError):
    pass


class DegenerateProjection(GeometryError):
    pass


# ---------------------------------------------------------------------------
# rotations

def skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.sqrt(w @ w)
    K = skew(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th ** 2 * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    th = np.arctan2(0.5 * np.linalg.norm(v), 0.5 * (np.trace(R) - 1))
    if th < 1e-8:
        return 0.5 * v
    if th > np.pi - 1e-4:
        return Rotation.from_matrix(R).as_rotvec()
    return th / (2 * np.sin(th)) * v


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def quat_wxyz(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x_local = R @ x_world + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_body(cls, R_wb, position) -> "Pose":
        """Build the world-to-local pose of a frame whose axes in world are ``R_wb`` at ``position``."""
        R_wb = np.asarray(R_wb, dtype=float)
        return cls(R_wb.T, -R_wb.T @ np.asarray(position, dtype=float))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        # (self @ other)(x) = self(other(x))
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        """Origin of the local frame expressed in world coordinates."""
        return -self.R.T @ self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) < tol)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)


# ---------------------------------------------------------------------------
# unified (Mei) camera model

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    xi: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.xi < 0:
            raise ValueError("xi must be non-negative")


@dataclass(frozen=True)
class CameraRig:
    """Ordered cameras; ``extrinsics[i]`` maps body coordinates into camera ``i``."""

    intrinsics: tuple[CameraIntrinsics, ...]
    extrinsics: tuple[Pose, ...]

    def __post_init__(self):
        if len(self.intrinsics) == 0 or len(self.intrinsics) != len(self.extrinsics):
            raise ValueError("rig needs matching, non-empty intrinsics and extrinsics")

    def __len__(self):
        return len(self.intrinsics)

    def camera_poses(self, body: Pose) -> list[Pose]:
        """World-to-camera poses for a world-to-body rig pose."""
        return [ext @ body for ext in self.extrinsics]


def project_point(intr: CameraIntrinsics, p_cam) -> np.ndarray:
    """Project camera-frame point(s) to pixels with the unified sphere model."""
    p = np.asarray(p_cam, dtype=float)
    d = np.linalg.norm(p, axis=-1)
    denom = p[..., 2] + intr.xi * d
    if np.any(d <= 0) or np.any(denom <= 0):
        raise BehindCamera("point not projectable under the unified model")
    u = intr.fx * p[..., 0] / denom + intr.cx
    v = intr.fy * p[..., 1] / denom + intr.cy
    return np.stack([u, v], axis=-1)


def unproject_pixel(intr: CameraIntrinsics, u) -> np.ndarray:
    """Back-project pixel(s) to the normalized plane; third component is exactly 1."""
    u = np.asarray(u, dtype=float)
    mx = (u[..., 0] - intr.cx) / intr.fx
    my = (u[..., 1] - intr.cy) / intr.fy
    r2 = mx * mx + my * my
    disc = 1.0 + (1.0 - intr.xi * intr.xi) * r2
    if np.any(disc < 0):
        raise NonInvertiblePixel("pixel outside the valid image circle")
    eta = (intr.xi + np.sqrt(disc)) / (1.0 + r2)
    z = eta - intr.xi
    if np.any(z <= 0):
        raise NonInvertiblePixel("back-projected ray has non-positive depth")
    x = eta * mx / z
    y = eta * my / z
    return np.stack([x, y, np.ones_like(x)], axis=-1)


# ---------------------------------------------------------------------------
# ellipses, conics, quadrics

def _sym_sqrt(S):
    S = np.asarray(S, dtype=float)
    if S.shape[-2:] == (2, 2):
        # closed form for 2x2 SPD: (S + sqrt(det) I) / sqrt(tr + 2 sqrt(det))
        det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
        tr = S[..., 0, 0] + S[..., 1, 1]
        if np.all(det > EIG_FLOOR ** 2) and np.all(tr > 0):
            sd = np.sqrt(det)
            out = S + sd[..., None, None] * np.eye(2)
            return out / np.sqrt(tr + 2 * sd)[..., None, None]
    w, V = np.linalg.eigh(S)
    w = np.maximum(w, EIG_FLOOR)
    return (V * np.sqrt(w)[..., None, :]) @ np.swapaxes(V, -1, -2)


@dataclass(frozen=True, eq=False)
class GaussianEllipse:
    """Ellipse ``(x - mu)^T sigma^{-1} (x - mu) = 1`` on the normalized plane.

    ``theta`` is the angle of the major axis from +x, and ``alpha >= beta`` are
    the semi-axis lengths, so that ``sigma^{-1} = R(theta)^T diag(1/alpha^2, 1/beta^2) R(theta)``
    with ``R(theta) = [[cos, sin], [-sin, cos]]``.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float).reshape(2))
        s = np.asarray(self.sigma, dtype=float).reshape(2, 2)
        object.__setattr__(self, "sigma", 0.5 * (s + s.T))

    @classmethod
    def from_axes(cls, mu, alpha: float, beta: float, theta: float) -> "GaussianEllipse":
        c, s = np.cos(theta), np.sin(theta)
        Rt = np.array([[c, -s], [s, c]])
        return cls(mu, Rt @ np.diag([alpha ** 2, beta ** 2]) @ Rt.T)

    def _eig(self):
        w, V = np.linalg.eigh(self.sigma)
        return w, V

    @property
    def alpha(self) -> float:
        return float(np.sqrt(max(self._eig()[0][1], 0.0)))

    @property
    def beta(self) -> float:
        return float(np.sqrt(max(self._eig()[0][0], 0.0)))

    @property
    def theta(self) -> float:
        v = self._eig()[1][:, 1]
        th = np.arctan2(v[1], v[0])
        if th > np.pi / 2:
            th -= np.pi
        elif th <= -np.pi / 2:
            th += np.pi
        return float(th)

    @property
    def area(self) -> float:
        return float(np.pi * np.sqrt(max(np.linalg.det(self.sigma), 0.0)))

    def is_valid(self) -> bool:
        return bool(np.all(np.isfinite(self.sigma)) and np.all(np.linalg.eigvalsh(self.sigma) > 0))

    def boundary(self, n: int = IOU_VERTICES) -> np.ndarray:
        phi = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        circle = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return self.mu + circle @ _sym_sqrt(self.sigma).T

    def __eq__(self, other):
        if not isinstance(other, GaussianEllipse):
            return NotImplemented
        return np.array_equal(self.mu, other.mu) and np.array_equal(self.sigma, other.sigma)


@dataclass(frozen=True, eq=False)
class DualConic:
    C: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.C, dtype=float).reshape(3, 3)
        object.__setattr__(self, "C", 0.5 * (C + C.T))


@dataclass(frozen=True, eq=False)
class DualQuadric:
    Q: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float).reshape(4, 4)
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))

    @property
    def center(self) -> np.ndarray:
        return -self.Q[:3, 3] / -self.Q[3, 3]


@dataclass(frozen=True, eq=False)
class EllipsoidParams:
    center: np.ndarray
    rotation: np.ndarray
    semi_axes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "semi_axes", np.asarray(self.semi_axes, dtype=float).reshape(3))
        if np.any(self.semi_axes <= 0):
            raise ValueError("semi-axes must be strictly positive")

    def dual_quadric(self) -> DualQuadric:
        return DualQuadric(ellipsoid_dual_matrix(self.center, self.rotation, self.semi_axes))

    def contains(self, X) -> np.ndarray:
        local = (np.asarray(X, dtype=float) - self.center) @ self.rotation
        return np.sum((local / self.semi_axes) ** 2, axis=-1) <= 1.0

    def __eq__(self, other):
        if not isinstance(other, EllipsoidParams):
            return NotImplemented
        return (np.array_equal(self.center, other.center)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.semi_axes, other.semi_axes))


def ellipsoid_dual_matrix(center, rotation, semi_axes) -> np.ndarray:
    """``T diag(a^2, b^2, c^2, -1) T^T``; broadcasts over leading axes."""
    center = np.asarray(center, dtype=float)
    R = np.asarray(rotation, dtype=float)
    a2 = np.asarray(semi_axes, dtype=float) ** 2
    Q = np.zeros(center.shape[:-1] + (4, 4))
    Q[..., :3, :3] = (R * a2[..., None, :]) @ np.swapaxes(R, -1, -2) - center[..., :, None] * center[..., None, :]
    Q[..., :3, 3] = -center
    Q[..., 3, :3] = -center
    Q[..., 3, 3] = -1.0
    return Q


def normalize_dual_conic(C) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if abs(C[2, 2]) < 1e-300:
        raise NotAnEllipse("conic has no finite center")
    return C / -C[2, 2]


def conic_to_gaussian(C: DualConic) -> GaussianEllipse:
    Cn = normalize_dual_conic(C.C if isinstance(C, DualConic) else C)
    mu = -Cn[:2, 2]
    S = Cn[:2, :2] + np.outer(mu, mu)
    S = 0.5 * (S + S.T)
    if not np.all(np.linalg.eigvalsh(S) > 0):
        raise NotAnEllipse("dual conic does not describe a real ellipse")
    return GaussianEllipse(mu, S)


def gaussian_to_conic(g: GaussianEllipse) -> DualConic:
    C = np.empty((3, 3))
    C[:2, :2] = g.sigma - np.outer(g.mu, g.mu)
    C[:2, 2] = -g.mu
    C[2, :2] = -g.mu
    C[2, 2] = -1.0
    return DualConic(C)


def fit_dual_conic(points) -> DualConic:
    """Direct least-squares ellipse fit (Fitzgibbon / Halir-Flusser) returned in dual form."""
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[0] < 5:
        raise DegenerateInput("need at least 5 points")
    P = P[:, :2]
    # condition: center and scale
    m = P.mean(axis=0)
    s = np.sqrt(np.mean(np.sum((P - m) ** 2, axis=1)))
    if s < 1e-15:
        raise DegenerateInput("points coincide")
    x, y = ((P - m) / s).T
    if np.linalg.matrix_rank(np.stack([x, y]), tol=1e-9) < 2:
        raise DegenerateInput("points are collinear")

    D1 = np.stack([x * x, x * y, y * y], axis=1)
    D2 = np.stack([x, y, np.ones_like(x)], axis=1)
    S1, S2, S3 = D1.T @ D1, D1.T @ D2, D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as exc:
        raise DegenerateInput("singular scatter matrix") from exc
    M = S1 + S2 @ T
    M = np.array([M[2] / 2, -M[1], M[0] / 2])
    w, V = np.linalg.eig(M)
    V = np.real(V)
    cond = 4 * V[0] * V[2] - V[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise NotAnEllipse("fit is not an ellipse")
    a1 = V[:, ok[np.argmin(np.abs(np.real(w[ok])))]]
    a, b, c = a1
    d, e, f = T @ a1

    A = np.array([[a, b / 2, d / 2], [b / 2, c, e / 2], [d / 2, e / 2, f]])
    # undo conditioning: x_n = H x with H = [[1/s, 0, -mx/s], [0, 1/s, -my/s], [0, 0, 1]]
    H = np.array([[1 / s, 0, -m[0] / s], [0, 1 / s, -m[1] / s], [0, 0, 1.0]])
    A = H.T @ A @ H
    if A[0, 1] ** 2 - A[0, 0] * A[1, 1] >= 0:
        raise NotAnEllipse("fit is not an ellipse")
    C = np.linalg.inv(A)
    Cn = normalize_dual_conic(C)
    conic_to_gaussian(DualConic(Cn))  # validates real ellipse
    return DualConic(Cn)


def _quadric_matrix(Q) -> np.ndarray:
    if isinstance(Q, DualQuadric):
        return Q.Q
    if isinstance(Q, EllipsoidParams):
        return Q.dual_quadric().Q
    return np.asarray(Q, dtype=float)


def project_quadric(Q, pose: Pose) -> DualConic:
    """Project a dual quadric through ``[R | t]`` onto the normalized plane."""
    Qm = _quadric_matrix(Q)
    Qm = Qm / -Qm[3, 3]
    P = np.hstack([pose.R, pose.t[:, None]])
    C = P @ Qm @ P.T
    z_center = pose.R[2] @ (-Qm[:3, 3]) + pose.t[2]
    # C[2, 2] < 0 iff the ellipsoid does not meet the plane z = 0
    if z_center <= 0 or C[2, 2] >= 0:
        raise QuadricBehindCamera("ellipsoid is not entirely in front of the camera")
    Cn = normalize_dual_conic(C)
    try:
        conic_to_gaussian(DualConic(Cn))
    except NotAnEllipse as exc:
        raise DegenerateProjection(str(exc)) from exc
    return DualConic(Cn)


def project_quadric_batch(Qm: np.ndarray, Rs: np.ndarray, ts: np.ndarray):
    """Vectorized projection to (mu, sigma, valid) for stacked poses.

    Returns arrays of shape (n, 2), (n, 2, 2) and (n,); invalid rows hold
    unspecified values. A stack of quadrics ``Qm`` of shape (m, 4, 4) gives
    outputs with a leading axis of size m.
    """
    Qm = np.asarray(Qm, dtype=float)
    Qm = Qm / -Qm[..., 3:4, 3:4]
    P = np.concatenate([Rs, ts[:, :, None]], axis=2)
    C = P @ Qm[..., None, :, :] @ np.swapaxes(P, -1, -2)
    z_center = (-Qm[..., :3, 3]) @ Rs[:, 2, :].T + ts[:, 2]
    c22 = C[..., 2, 2]
    valid = (z_center > 0) & (c22 < 0)
    scale = np.where(valid, -c22, 1.0)
    C = C / scale[..., None, None]
    mu = -C[..., :2, 2]
    S = C[..., :2, :2] + mu[..., :, None] * mu[..., None, :]
    det = S[..., 0, 0] * S[..., 1, 1] - S[..., 0, 1] * S[..., 1, 0]
    valid &= (S[..., 0, 0] > 0) & (det > 0)
    return mu, S, valid


# ---------------------------------------------------------------------------
# metrics

def wasserstein2_sq(g1: GaussianEllipse, g2: GaussianEllipse) -> float:
    """Squared mean distance plus squared Frobenius distance of the covariance square roots."""
    dm = g1.mu - g2.mu
    dS = _sym_sqrt(g1.sigma) - _sym_sqrt(g2.sigma)
    return float(dm @ dm + np.sum(dS * dS))


def sqrtm_spd(S) -> np.ndarray:
    """Symmetric square root of (stacked) SPD matrices with eigenvalue floor."""
    return _sym_sqrt(np.asarray(S, dtype=float))


def _bbox(g: GaussianEllipse):
    half = np.sqrt(np.clip(np.diag(g.sigma), 0.0, None))
    return g.mu - half, g.mu + half


def ellipse_iou(g1: GaussianEllipse, g2: GaussianEllipse, n: int = IOU_VERTICES) -> float:
    lo1, hi1 = _bbox(g1)
    lo2, hi2 = _bbox(g2)
    if np.any(hi1 < lo2) or np.any(hi2 < lo1):
        return 0.0
    p1 = Polygon(g1.boundary(n))
    p2 = Polygon(g2.boundary(n))
    inter = p1.intersection(p2).area
    if inter <= 0:
        return 0.0
    union = p1.area + p2.area - inter
    return float(min(max(inter / union, 0.0), 1.0))


def polyline_distance(point, polyline) -> float:
    """Minimal Euclidean distance from a point to a polyline (any dimension)."""
    p = np.asarray(point, dtype=float)
    L = np.asarray(polyline, dtype=float)
    if len(L) == 1:
        return float(np.linalg.norm(p - L[0]))
    a, b = L[:-1], L[1:]
    ab = b - a
    denom = np.sum(ab * ab, axis=1)
    s = np.where(denom > 0, np.sum((p - a) * ab, axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    s = np.clip(s, 0.0, 1.0)
    closest = a + s[:, None] * ab
    return float(np.min(np.linalg.norm(p - closest, axis=1)))


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with ``dst ~ R @ src + t`` (Kabsch, no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, md - R @ ms)


def as_points(seq: Sequence) -> np.ndarray:
    return np.asarray(seq, dtype=float).reshape(-1, 3)
