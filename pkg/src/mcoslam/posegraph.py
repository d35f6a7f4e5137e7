"""SE(3) pose graph with Gauss-Newton optimization.

Nodes hold body-to-world transforms ``T`` (4x4). An edge ``(i, j, Z)`` measures
``T_i^{-1} T_j``; its residual is ``log(Z^{-1} T_i^{-1} T_j)`` as a 6-vector
``(rho, phi)`` and contributes ``r^T diag(info) r`` to the cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import skew, so3_exp, so3_log

log = logging.getLogger(__name__)


class OptimizationDiverged(RuntimeError):
    pass


def se3_exp(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    th = np.linalg.norm(phi)
    P = skew(phi)
    # series below 1e-4: the closed forms cancel catastrophically near zero
    if th < 1e-4:
        V = np.eye(3) + 0.5 * P + P @ P / 6.0
    else:
        V = (np.eye(3) + (1 - np.cos(th)) / th ** 2 * P
             + (th - np.sin(th)) / th ** 3 * P @ P)
    T = np.eye(4)
    T[:3, :3] = so3_exp(phi)
    T[:3, 3] = V @ rho
    return T


def se3_log(T) -> np.ndarray:
    T = np.asarray(T, dtype=float)
    phi = so3_log(T[:3, :3])
    th = np.linalg.norm(phi)
    P = skew(phi)
    if th < 1e-4:
        Vinv = np.eye(3) - 0.5 * P + P @ P / 12.0
    else:
        Vinv = (np.eye(3) - 0.5 * P
                + (1 - th * np.sin(th) / (2 * (1 - np.cos(th)))) / th ** 2 * P @ P)
    return np.concatenate([Vinv @ T[:3, 3], phi])


def _se3_log_batch(T: np.ndarray) -> np.ndarray:
    """Vectorized ``se3_log`` over a stack (..., 4, 4)."""
    shape = T.shape[:-2]
    T = T.reshape(-1, 4, 4)
    R = T[:, :3, :3]
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = 0.5 * np.linalg.norm(v, axis=1)
    c = 0.5 * (np.trace(R, axis1=1, axis2=2) - 1.0)
    th = np.arctan2(s, c)
    small = th < 1e-4
    f = np.where(small, 0.5 + th ** 2 / 12.0, th / (2 * np.where(small, 1.0, np.sin(th))))
    phi = f[:, None] * v
    for n in np.flatnonzero(th > np.pi - 1e-3):
        phi[n] = so3_log(R[n])
    th = np.linalg.norm(phi, axis=1)
    small = th < 1e-4
    ths = np.where(small, 1.0, th)
    k = np.where(small, 1.0 / 12.0 + th ** 2 / 720.0,
                 (1 - ths * np.sin(ths) / (2 * (1 - np.cos(ths)))) / ths ** 2)
    P = np.zeros((len(T), 3, 3))
    P[:, 0, 1], P[:, 0, 2], P[:, 1, 2] = -phi[:, 2], phi[:, 1], -phi[:, 0]
    P[:, 1, 0], P[:, 2, 0], P[:, 2, 1] = phi[:, 2], -phi[:, 1], phi[:, 0]
    Vinv = np.eye(3) - 0.5 * P + k[:, None, None] * (P @ P)
    rho = np.einsum("nij,nj->ni", Vinv, T[:, :3, 3])
    return np.concatenate([rho, phi], axis=1).reshape(*shape, 6)


def inv_T(T) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = T[:3, :3].T
    out[:3, 3] = -T[:3, :3].T @ T[:3, 3]
    return out


@dataclass
class Edge:
    i: int
    j: int
    Z: np.ndarray
    info: np.ndarray
    kind: str = "odometry"

    def residual(self, Ti, Tj) -> np.ndarray:
        return se3_log(inv_T(self.Z) @ inv_T(Ti) @ Tj)


@dataclass
class PoseGraph:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    anchor: int | None = None

    def add_node(self, node_id: int, T) -> None:
        self.nodes[node_id] = np.asarray(T, dtype=float).copy()
        if self.anchor is None:
            self.anchor = node_id

    def add_edge(self, i: int, j: int, Z, info=1.0, kind: str = "odometry") -> Edge:
        if i not in self.nodes or j not in self.nodes:
            raise KeyError(f"edge ({i}, {j}) references a missing node")
        info = np.broadcast_to(np.asarray(info, dtype=float), (6,)).copy()
        e = Edge(i, j, np.asarray(Z, dtype=float).copy(), info, kind)
        self.edges.append(e)
        return e

    def cost(self, nodes=None) -> float:
        nodes = self.nodes if nodes is None else nodes
        total = 0.0
        for e in self.edges:
            r = e.residual(nodes[e.i], nodes[e.j])
            total += float(r @ (e.info * r))
        return total

    def copy(self) -> "PoseGraph":
        g = PoseGraph({k: v.copy() for k, v in self.nodes.items()},
                      [Edge(e.i, e.j, e.Z.copy(), e.info.copy(), e.kind) for e in self.edges],
                      self.anchor)
        return g


@dataclass
class GraphResult:
    nodes: dict
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    costs: list


def _inv_batch(T: np.ndarray) -> np.ndarray:
    out = np.zeros_like(T)
    Rt = np.swapaxes(T[..., :3, :3], -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


class _Batch:
    """Stacked edge data for vectorized residuals and Jacobians."""

    def __init__(self, graph: "PoseGraph", h: float = 1e-6):
        self.ii = [e.i for e in graph.edges]
        self.jj = [e.j for e in graph.edges]
        self.Zinv = _inv_batch(np.array([e.Z for e in graph.edges]))
        self.W = np.array([e.info for e in graph.edges])
        self.h = h
        eye = np.eye(6) * h
        self.Ep = np.array([se3_exp(d) for d in eye])
        self.Em = np.array([se3_exp(-d) for d in eye])

    def _D(self, nodes):
        Ti = np.array([nodes[i] for i in self.ii])
        Tj = np.array([nodes[j] for j in self.jj])
        return _inv_batch(Ti) @ Tj

    def residuals(self, nodes) -> np.ndarray:
        return _se3_log_batch(self.Zinv @ self._D(nodes))

    def cost(self, nodes) -> float:
        r = self.residuals(nodes)
        return float(np.sum(self.W * r * r))

    def jacobians(self, nodes):
        """Central differences under right perturbations: (E, 6, 6) for each endpoint."""
        D = self._D(nodes)[:, None]
        Zi = self.Zinv[:, None]
        # T_i <- T_i Exp(d): r = log(Z^-1 Exp(-d) T_i^-1 T_j)
        ri_p = _se3_log_batch(Zi @ self.Em[None] @ D)
        ri_m = _se3_log_batch(Zi @ self.Ep[None] @ D)
        rj_p = _se3_log_batch(Zi @ D @ self.Ep[None])
        rj_m = _se3_log_batch(Zi @ D @ self.Em[None])
        Ji = np.swapaxes((ri_p - ri_m) / (2 * self.h), 1, 2)
        Jj = np.swapaxes((rj_p - rj_m) / (2 * self.h), 1, 2)
        return Ji, Jj


def optimize_graph(graph: PoseGraph, max_iterations: int = 20, tol: float = 1e-14) -> GraphResult:
    """Damped Gauss-Newton over all non-anchored nodes (right perturbations).

    Steps that would raise the cost are rejected and the damping increased,
    so the recorded cost sequence is non-increasing. Raises
    ``OptimizationDiverged`` if the cost turns non-finite.
    """
    if graph.anchor is None:
        raise ValueError("graph has no nodes")
    ids = [k for k in sorted(graph.nodes) if k != graph.anchor]
    index = {k: n for n, k in enumerate(ids)}
    nodes = {k: v.copy() for k, v in graph.nodes.items()}
    cost = graph.cost(nodes)
    initial = cost
    costs = [cost]
    if not np.isfinite(cost):
        raise OptimizationDiverged("initial cost is not finite")
    lam = 0.0
    converged = False
    it = 0
    N = 6 * len(ids)
    if N == 0 or not graph.edges:
        return GraphResult(nodes, cost, cost, 0, True, costs)
    batch = _Batch(graph)
    while it < max_iterations:
        it += 1
        H = np.zeros((N, N))
        b = np.zeros(N)
        r_all = batch.residuals(nodes)
        Ji_all, Jj_all = batch.jacobians(nodes)
        for e, r, W, Ji, Jj in zip(graph.edges, r_all, batch.W, Ji_all, Jj_all):
            blocks = []
            if e.i in index:
                blocks.append((index[e.i], Ji))
            if e.j in index:
                blocks.append((index[e.j], Jj))
            for a, Ja in blocks:
                b[6 * a:6 * a + 6] += Ja.T @ (W * r)
                for c, Jc in blocks:
                    H[6 * a:6 * a + 6, 6 * c:6 * c + 6] += Ja.T @ (W[:, None] * Jc)
        if np.max(np.abs(b)) < 1e-15:
            converged = True
            break
        while True:
            A = H + lam * np.diag(np.diag(H)) if lam > 0 else H
            try:
                dx = -np.linalg.solve(A, b)
            except np.linalg.LinAlgError:
                dx = -np.linalg.lstsq(A, b, rcond=None)[0]
            trial = dict(nodes)
            for k, n in index.items():
                trial[k] = nodes[k] @ se3_exp(dx[6 * n:6 * n + 6])
            t_cost = batch.cost(trial)
            if not np.isfinite(t_cost):
                raise OptimizationDiverged("cost became non-finite")
            if t_cost <= cost:
                break
            lam = 1e-4 if lam == 0 else lam * 10
            if lam > 1e8:
                dx = None
                break
        if dx is None:
            converged = True  # no descent direction left at working precision
            break
        rel = (cost - t_cost) / max(cost, 1e-300)
        nodes, cost = trial, t_cost
        costs.append(cost)
        lam = lam / 10 if lam > 1e-6 else 0.0
        if np.max(np.abs(dx)) < 1e-12 or rel < tol:
            converged = True
            break
    return GraphResult(nodes, initial, cost, it, converged, costs)
