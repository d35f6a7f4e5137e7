"""Joint multi-camera, multi-frame dual-quadric estimation.

The landmark is parametrized by 9 numbers: center (3), a rotation tangent
increment applied on the right of the current rotation (3) and log semi-axes (3).
Each observation contributes a 5-vector whose squared norm is the Wasserstein
residual between observed and predicted ellipse, so the Levenberg-Marquardt
solver below minimizes exactly the summed residuals plus the weighted center term.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    EllipsoidParams,
    GaussianEllipse,
    Pose,
    ellipsoid_dual_matrix,
    project_quadric_batch,
    sqrtm_spd,
    so3_exp,
)

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


class EstimationError(ValueError):
    pass


class InsufficientObservations(EstimationError):
    pass


class TriangulationDegenerate(EstimationError):
    pass


class NoAssociatedPoints(EstimationError):
    pass


@dataclass(frozen=True)
class Observation:
    camera_id: int
    frame_id: int
    ellipse: GaussianEllipse
    pose: Pose


@dataclass
class ObservationSet:
    observations: list[Observation] = field(default_factory=list)
    associated_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.associated_points = np.asarray(self.associated_points, dtype=float).reshape(-1, 3)
        keys = [(o.camera_id, o.frame_id) for o in self.observations]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (camera_id, frame_id) in observation set")

    @property
    def point_centroid(self) -> np.ndarray | None:
        if len(self.associated_points) == 0:
            return None
        return self.associated_points.mean(axis=0)

    def __len__(self):
        return len(self.observations)

    def stacked(self):
        """Observation arrays: mu (n,2), sqrt(sigma) (n,2,2), R (n,3,3), t (n,3)."""
        obs = self.observations
        mu = np.array([o.ellipse.mu for o in obs]).reshape(-1, 2)
        S = np.array([o.ellipse.sigma for o in obs]).reshape(-1, 2, 2)
        Rs = np.array([o.pose.R for o in obs]).reshape(-1, 3, 3)
        ts = np.array([o.pose.t for o in obs]).reshape(-1, 3)
        return mu, sqrtm_spd(S), Rs, ts


@dataclass(frozen=True)
class EstimatorConfig:
    w_c: float = 1.0
    max_iterations: int = 50
    convergence_tol: float = 1e-8
    robust_loss_scale: float = 1.0
    min_observations: int = 3
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.w_c < 0:
            raise ValueError("w_c must be non-negative")
        if self.min_observations < 3:
            raise ValueError("min_observations must be >= 3")


@dataclass
class QuadricFit:
    params: EllipsoidParams
    cost: float
    iterations: int
    converged: bool = True
    initial_cost: float = float("nan")
    n_invalid: int = 0

    def __iter__(self):
        # unpacks as (params, final_cost, iterations)
        return iter((self.params, self.cost, self.iterations))


# ---------------------------------------------------------------------------
# initialization

def _bearing(o: Observation):
    origin = o.pose.center
    d = o.pose.R.T @ np.array([o.ellipse.mu[0], o.ellipse.mu[1], 1.0])
    return origin, d / np.linalg.norm(d)


def init_quadric(obs: ObservationSet) -> EllipsoidParams:
    """Coarse isotropic ellipsoid from the point centroid or two-ray triangulation."""
    centroid = obs.point_centroid
    if centroid is None:
        if len(obs) < 2:
            raise InsufficientObservations("need two observations or associated points")
        rays = [_bearing(o) for o in obs.observations]
        best, pair = -1.0, None
        for i in range(len(rays)):
            for j in range(i + 1, len(rays)):
                ang = np.arccos(np.clip(rays[i][1] @ rays[j][1], -1.0, 1.0))
                if ang > best:
                    best, pair = ang, (i, j)
        if best < np.radians(1.0):
            raise TriangulationDegenerate("bearing rays are (nearly) parallel")
        (o1, d1), (o2, d2) = rays[pair[0]], rays[pair[1]]
        # closest points o1 + s d1, o2 + u d2
        b = d1 @ d2
        w = o1 - o2
        denom = 1.0 - b * b
        s = (b * (d2 @ w) - (d1 @ w)) / denom
        u = ((d2 @ w) - b * (d1 @ w)) / denom
        center = 0.5 * ((o1 + s * d1) + (o2 + u * d2))
    else:
        center = centroid
    if len(obs):
        depths = np.array([np.linalg.norm(center - o.pose.center) for o in obs.observations])
        sizes = np.array([np.sqrt(o.ellipse.alpha * o.ellipse.beta) for o in obs.observations])
        radius = float(np.mean(depths * sizes))
    else:
        radius = 1.0
    radius = max(radius, 1e-3)
    return EllipsoidParams(center, np.eye(3), np.full(3, radius))


# ---------------------------------------------------------------------------
# residuals

MAX_LOG_AXIS_STEP = 2.0  # per-step cap on log semi-axis change


def _split(params: EllipsoidParams):
    return params.center, params.rotation, np.log(params.semi_axes)


def _retract(base: EllipsoidParams, delta) -> EllipsoidParams:
    delta = np.asarray(delta, dtype=float)
    return EllipsoidParams(
        base.center + delta[:3],
        base.rotation @ so3_exp(delta[3:6]),
        base.semi_axes * np.exp(np.clip(delta[6:9], -MAX_LOG_AXIS_STEP, MAX_LOG_AXIS_STEP)),
    )


def _obs_blocks(params, stacked):
    """Per-observation 5-vectors (n, 5) and validity mask.

    ``params`` may also be an (m, 4, 4) stack of dual quadrics, giving (m, n, 5).
    """
    mu_o, L_o, Rs, ts = stacked
    if isinstance(params, EllipsoidParams):
        Qm = ellipsoid_dual_matrix(params.center, params.rotation, params.semi_axes)
    else:
        Qm = params  # pre-built stack of dual quadric matrices
    mu_e, S_e, valid = project_quadric_batch(Qm, Rs, ts)
    S_e = np.where(valid[..., None, None], S_e, np.eye(2))
    L_e = sqrtm_spd(S_e)
    dL = L_o - L_e
    r = np.stack([
        mu_o[:, 0] - mu_e[..., 0],
        mu_o[:, 1] - mu_e[..., 1],
        dL[..., 0, 0],
        dL[..., 1, 1],
        SQRT2 * dL[..., 0, 1],
    ], axis=-1)
    return r, valid


def residual_proj(params: EllipsoidParams, obs: ObservationSet) -> np.ndarray:
    """Per-observation squared Wasserstein residuals; NaN where the quadric is not visible."""
    if len(obs) == 0:
        return np.zeros(0)
    r, valid = _obs_blocks(params, obs.stacked())
    out = np.sum(r * r, axis=1)
    out[~valid] = np.nan
    return out


def residual_center(params: EllipsoidParams, obs: ObservationSet) -> np.ndarray:
    centroid = obs.point_centroid
    if centroid is None:
        raise NoAssociatedPoints("observation set has no associated points")
    return params.center - centroid


def _huber_weights(sq: np.ndarray, delta: float) -> np.ndarray:
    n = np.sqrt(sq)
    return np.where(n <= delta, 1.0, delta / np.maximum(n, 1e-300))


def _huber_cost(sq: np.ndarray, delta: float) -> np.ndarray:
    n = np.sqrt(sq)
    return np.where(n <= delta, sq, 2 * delta * n - delta * delta)


class _Problem:
    """Cost and stacked residual vector for one landmark."""

    def __init__(self, obs: ObservationSet, cfg: EstimatorConfig):
        self.stacked = obs.stacked()
        self.cfg = cfg
        self.n_obs = len(obs)
        self.centroid = obs.point_centroid
        self.w_center = cfg.w_c * self.n_obs if self.centroid is not None else 0.0

    def evaluate(self, params: EllipsoidParams, mask: np.ndarray):
        """Return (cost, residual vector, all-masked-visible flag)."""
        r, valid = _obs_blocks(params, self.stacked)
        sq = np.sum(r * r, axis=1)
        ok = bool(np.all(valid[mask]))
        use = mask & valid
        w = _huber_weights(sq[use], self.cfg.robust_loss_scale)
        parts = [(r[use] * np.sqrt(w)[:, None]).ravel()]
        cost = float(np.sum(_huber_cost(sq[use], self.cfg.robust_loss_scale)))
        if self.w_center > 0:
            e = params.center - self.centroid
            parts.append(np.sqrt(self.w_center) * e)
            cost += self.w_center * float(e @ e)
        return cost, np.concatenate(parts), ok

    def residual_vector(self, params, mask):
        r, valid = _obs_blocks(params, self.stacked)
        sq = np.sum(r * r, axis=1)
        w = _huber_weights(sq[mask], self.cfg.robust_loss_scale)
        parts = [(r[mask] * np.sqrt(w)[:, None]).ravel()]
        if self.w_center > 0:
            parts.append(np.sqrt(self.w_center) * (params.center - self.centroid))
        return np.concatenate(parts)

    def jacobian(self, params, mask, h):
        """Central-difference Jacobian of ``residual_vector``, all 18 probes in one batch.

        Probe order is (+h, -h) for each of the 9 increment coordinates.
        """
        c0, R0, a0 = params.center, params.rotation, params.semi_axes
        steps = np.repeat(np.eye(9) * h, 2, axis=0)
        steps[1::2] *= -1
        centers = c0 + steps[:, :3]
        rots = np.array([R0 @ so3_exp(d) if np.any(d) else R0 for d in steps[:, 3:6]])
        axes = a0 * np.exp(steps[:, 6:9])
        Qm = ellipsoid_dual_matrix(centers, rots, axes)
        r, _ = _obs_blocks(Qm, self.stacked)
        r = r[:, mask]
        w = _huber_weights(np.sum(r * r, axis=2), self.cfg.robust_loss_scale)
        rows = (r * np.sqrt(w)[..., None]).reshape(18, -1)
        if self.w_center > 0:
            rows = np.concatenate([rows, np.sqrt(self.w_center) * (centers - self.centroid)], axis=1)
        return ((rows[0::2] - rows[1::2]) / (2 * h)).T


def numeric_jacobian(fun, params: EllipsoidParams, h: float) -> np.ndarray:
    """Central finite-difference Jacobian of ``fun`` w.r.t. the 9-DOF increment."""
    cols = []
    for k in range(9):
        d = np.zeros(9)
        d[k] = h
        cols.append((fun(_retract(params, d)) - fun(_retract(params, -d))) / (2 * h))
    return np.stack(cols, axis=1)


def total_cost(params: EllipsoidParams, obs: ObservationSet, cfg: EstimatorConfig) -> float:
    prob = _Problem(obs, cfg)
    _, valid = _obs_blocks(params, prob.stacked)
    return prob.evaluate(params, valid)[0]


def optimize_quadric(init: EllipsoidParams, obs: ObservationSet,
                     cfg: EstimatorConfig = EstimatorConfig()) -> QuadricFit:
    """Levenberg-Marquardt over the 9-DOF ellipsoid parametrization.

    Observations whose camera cannot see the current iterate are dropped for
    that iteration; a trial step that makes a currently used observation
    invalid is rejected.
    """
    if len(obs) < cfg.min_observations:
        raise InsufficientObservations(
            f"{len(obs)} observations < min_observations={cfg.min_observations}")
    prob = _Problem(obs, cfg)
    params = init
    _, valid = _obs_blocks(params, prob.stacked)
    if valid.sum() < cfg.min_observations:
        raise InsufficientObservations("too few observations see the initial quadric")
    cost, r, _ = prob.evaluate(params, valid)
    initial_cost = cost
    lam = 1e-3
    iterations = 0
    converged = False
    n_invalid = int((~valid).sum())

    while iterations < cfg.max_iterations:
        if cost < 1e-20:
            converged = True
            break
        mask = valid
        J = prob.jacobian(params, mask, cfg.fd_step)
        g = J.T @ r
        if np.max(np.abs(g)) < 1e-14:
            converged = True
            break
        H = J.T @ J
        accepted = False
        while iterations < cfg.max_iterations:
            iterations += 1
            A = H + lam * np.diag(np.maximum(np.diag(H), 1e-12))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10
                continue
            trial = _retract(params, delta)
            t_cost, t_r, ok = prob.evaluate(trial, mask)
            if ok and np.isfinite(t_cost) and t_cost <= cost:
                rel = (cost - t_cost) / max(cost, 1e-300)
                params, cost, r = trial, t_cost, t_r
                lam = max(lam / 3, 1e-12)
                accepted = True
                if rel < cfg.convergence_tol:
                    converged = True
                break
            lam *= 4
            if lam > 1e12:
                break
        if not accepted:
            # no descent possible from here: local minimum at working precision
            converged = lam > 1e12
            break
        if converged:
            break
        _, valid = _obs_blocks(params, prob.stacked)
        n_invalid = max(n_invalid, int((~valid).sum()))
        if valid.sum() < cfg.min_observations:
            break
        cost, r, _ = prob.evaluate(params, valid)

    if not converged:
        log.debug("quadric optimization did not converge after %d iterations", iterations)
    return QuadricFit(params, cost, iterations, converged, initial_cost, n_invalid)
