"""Agent-object pose graph construction and nonlinear least-squares solve.

Matched detections become shared landmarks (merged transitively across
agent pairs with union-find); each detection contributes an observation
edge weighted by its information matrix, and each sender contributes a
relative-pose edge to the receiving agent built from the exchanged poses.
The weighted objective is minimized with Levenberg-Marquardt while the
receiving agent's pose stays fixed to pin the gauge.

Every residual has the same shape: for an edge with measurement pose m and
node poses (alpha, beta), the error transform is m^-1 * alpha^-1 * beta,
reduced to (tx, ty, wrapped angle). Observation edges use (agent, object),
inter-agent edges use (sender, receiver).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import (
    DetectedBox,
    Pose2,
    compose,
    from_matrix,
    invert_matrix,
    relative,
    to_matrix,
    wrap_angle,
)
from .matching import Assignment
from .scenario import CollabMessage


@dataclass(frozen=True)
class ObsEdge:
    agent_id: int
    object_id: int
    T_meas: np.ndarray  # 3x3, object pose measured in the agent frame
    omega: np.ndarray  # 3x3 diagonal information matrix


@dataclass(frozen=True)
class AgentEdge:
    sender_id: int
    receiver_id: int
    T_rel: np.ndarray  # 3x3, receiver pose measured in the sender frame
    omega: np.ndarray


@dataclass
class PoseGraphProblem:
    agent_nodes: dict[int, Pose2]
    object_nodes: dict[int, Pose2]
    obs_edges: list[ObsEdge]
    agent_edges: list[AgentEdge]
    anchor: int

    def __post_init__(self):
        if self.anchor not in self.agent_nodes:
            raise ValueError(f"anchor agent {self.anchor} is not a node")
        for e in self.obs_edges:
            if e.agent_id not in self.agent_nodes:
                raise ValueError(f"obs edge references unknown agent {e.agent_id}")
            if e.object_id not in self.object_nodes:
                raise ValueError(f"obs edge references unknown object {e.object_id}")
            if np.any(np.diag(e.omega) <= 0):
                raise ValueError("information matrix diagonal must be positive")
        for e in self.agent_edges:
            if e.sender_id not in self.agent_nodes or e.receiver_id not in self.agent_nodes:
                raise ValueError("agent edge references unknown agent")
            if np.any(np.diag(e.omega) <= 0):
                raise ValueError("information matrix diagonal must be positive")


@dataclass
class GraphState:
    agents: dict[int, Pose2]
    objects: dict[int, Pose2]

    def copy(self) -> "GraphState":
        return GraphState(dict(self.agents), dict(self.objects))


@dataclass
class SolveReport:
    iterations: int
    initial_cost: float
    final_cost: float
    converged: bool
    cost_trace: tuple[float, ...]
    message: str = ""


@dataclass(frozen=True)
class SolverOptions:
    max_iter: int = 1000
    cost_tol: float = 1e-8
    grad_tol: float = 1e-8
    init_damping: float = 1e-3
    max_damping: float = 1e12


class SolverError(RuntimeError):
    """Normal equations stayed singular/rejected past the damping ceiling."""


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic representative: smaller key wins
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def _circular_mean(angles: list[float]) -> float:
    return math.atan2(
        sum(math.sin(a) for a in angles), sum(math.cos(a) for a in angles)
    )


def build_pose_graph(
    assignments: dict[tuple[int, int], Assignment],
    messages: Iterable[CollabMessage],
    ego_boxes: list[DetectedBox],
    ego_id: int,
    ego_pose: Pose2,
    pose_prior_sigma: tuple[float, float, float] = (0.2, 0.2, 0.02),
) -> PoseGraphProblem:
    """Assemble the optimization problem from pairwise assignments.

    assignments maps an ordered agent pair (a, b) to the Assignment whose
    pairs index (a's boxes, b's boxes). Matched detections are merged into
    landmarks via union-find, so chains across pairs collapse transitively
    into a single object node. Landmarks are initialized at the mean of
    their members' world-frame estimates (circular mean for heading).
    Each sender gets one relative-pose edge to the ego agent weighted by
    the supplied pose prior.
    """
    msg_by_id = {m.sender_id: m for m in messages}
    boxes_by_agent: dict[int, list[DetectedBox]] = {ego_id: ego_boxes}
    reported: dict[int, Pose2] = {ego_id: ego_pose}
    for sid, msg in msg_by_id.items():
        boxes_by_agent[sid] = list(msg.boxes)
        reported[sid] = msg.reported_pose

    uf = _UnionFind()
    for (a, b), assign in assignments.items():
        if a not in boxes_by_agent or b not in boxes_by_agent:
            raise ValueError(f"assignment references unknown agents ({a}, {b})")
        for p, q, _ in assign.pairs:
            uf.union((a, p), (b, q))

    groups: dict = {}
    for key in list(uf.parent):
        groups.setdefault(uf.find(key), []).append(key)

    object_nodes: dict[int, Pose2] = {}
    obs_edges: list[ObsEdge] = []
    for obj_id, root in enumerate(sorted(groups)):
        members = sorted(groups[root])
        world = [
            compose(reported[aid], boxes_by_agent[aid][idx].center)
            for aid, idx in members
        ]
        object_nodes[obj_id] = Pose2(
            sum(w.x for w in world) / len(world),
            sum(w.y for w in world) / len(world),
            _circular_mean([w.theta for w in world]),
        )
        for aid, idx in members:
            box = boxes_by_agent[aid][idx]
            obs_edges.append(
                ObsEdge(aid, obj_id, to_matrix(box.center), box.information())
            )

    sx, sy, st = (max(s, 1e-6) for s in pose_prior_sigma)
    prior_omega = np.diag([sx**-2, sy**-2, st**-2])
    agent_edges = [
        AgentEdge(
            sid,
            ego_id,
            to_matrix(relative(reported[sid], reported[ego_id])),
            prior_omega,
        )
        for sid in sorted(msg_by_id)
    ]

    return PoseGraphProblem(
        agent_nodes=dict(sorted(reported.items())),
        object_nodes=object_nodes,
        obs_edges=obs_edges,
        agent_edges=agent_edges,
        anchor=ego_id,
    )


def residual_obs(E_agent: np.ndarray, T_meas: np.ndarray, X_obj: np.ndarray) -> np.ndarray:
    """(tx, ty, wrapped angle) of T_meas^-1 * E_agent^-1 * X_obj."""
    R = invert_matrix(T_meas) @ invert_matrix(E_agent) @ X_obj
    return np.array([R[0, 2], R[1, 2], wrap_angle(math.atan2(R[1, 0], R[0, 0]))])


def residual_agent(E_j: np.ndarray, E_i: np.ndarray, T_ji: np.ndarray) -> np.ndarray:
    """(tx, ty, wrapped angle) of T_ji^-1 * E_j^-1 * E_i."""
    R = invert_matrix(T_ji) @ invert_matrix(E_j) @ E_i
    return np.array([R[0, 2], R[1, 2], wrap_angle(math.atan2(R[1, 0], R[0, 0]))])


def edge_residual(meas_inv: Pose2, alpha: Pose2, beta: Pose2) -> np.ndarray:
    """Residual of the generic edge: meas_inv * alpha^-1 * beta."""
    e = compose(meas_inv, relative(alpha, beta))
    return np.array([e.x, e.y, e.theta])


def edge_jacobians(
    meas_inv: Pose2, alpha: Pose2, beta: Pose2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual and its analytic Jacobians wrt (alpha, beta), each 3x3."""
    ca, sa = math.cos(alpha.theta), math.sin(alpha.theta)
    dx, dy = beta.x - alpha.x, beta.y - alpha.y
    rx = ca * dx + sa * dy
    ry = -sa * dx + ca * dy

    J_r_alpha = np.array([[-ca, -sa, ry], [sa, -ca, -rx], [0.0, 0.0, -1.0]])
    J_r_beta = np.array([[ca, sa, 0.0], [-sa, ca, 0.0], [0.0, 0.0, 1.0]])

    cm, sm = math.cos(meas_inv.theta), math.sin(meas_inv.theta)
    Rm = np.array([[cm, -sm], [sm, cm]])
    J_alpha = J_r_alpha.copy()
    J_alpha[:2] = Rm @ J_r_alpha[:2]
    J_beta = J_r_beta.copy()
    J_beta[:2] = Rm @ J_r_beta[:2]

    e = compose(meas_inv, Pose2(rx, ry, beta.theta - alpha.theta))
    return np.array([e.x, e.y, e.theta]), J_alpha, J_beta


def _edge_terms(problem: PoseGraphProblem):
    """Yield (meas_inv pose, alpha key, beta key, omega) for every edge.

    Keys are ('agent', id) or ('object', id); the per-edge measurement is
    pre-inverted once.
    """
    for e in problem.obs_edges:
        yield (
            from_matrix(invert_matrix(e.T_meas)),
            ("agent", e.agent_id),
            ("object", e.object_id),
            e.omega,
        )
    for e in problem.agent_edges:
        yield (
            from_matrix(invert_matrix(e.T_rel)),
            ("agent", e.sender_id),
            ("agent", e.receiver_id),
            e.omega,
        )


def _lookup(state: GraphState, key) -> Pose2:
    kind, node = key
    return state.agents[node] if kind == "agent" else state.objects[node]


def _cost_from_terms(terms, state: GraphState) -> float:
    cost = 0.0
    for meas_inv, ka, kb, omega in terms:
        e = edge_residual(meas_inv, _lookup(state, ka), _lookup(state, kb))
        cost += float(e @ omega @ e)
    return cost


def total_cost(problem: PoseGraphProblem, state: GraphState) -> float:
    """Sum over edges of e^T Omega e."""
    return _cost_from_terms(_edge_terms(problem), state)


def initial_state(problem: PoseGraphProblem) -> GraphState:
    return GraphState(dict(problem.agent_nodes), dict(problem.object_nodes))


def solve_lm(
    problem: PoseGraphProblem, options: SolverOptions = SolverOptions()
) -> tuple[GraphState, SolveReport]:
    """Levenberg-Marquardt minimization of the weighted graph objective.

    The anchor agent is held fixed. Damping is multiplied by 10 on each
    rejected step and divided by 10 on acceptance; accepted steps never
    increase the cost. Raises SolverError if the damping ceiling is hit
    without finding an acceptable step.
    """
    state = initial_state(problem)
    free = [("agent", a) for a in sorted(problem.agent_nodes) if a != problem.anchor]
    free += [("object", o) for o in sorted(problem.object_nodes)]
    index = {key: 3 * i for i, key in enumerate(free)}
    n_var = 3 * len(free)

    edges = list(_edge_terms(problem))
    cost = _cost_from_terms(edges, state)
    trace = [cost]
    if n_var == 0:
        return state, SolveReport(0, cost, cost, True, tuple(trace), "no free variables")
    lam = options.init_damping
    converged = False
    message = "max iterations reached"
    iterations = 0

    for iterations in range(1, options.max_iter + 1):
        J = np.zeros((3 * len(edges), n_var))
        r = np.zeros(3 * len(edges))
        w = np.zeros(3 * len(edges))
        for row, (meas_inv, ka, kb, omega) in enumerate(edges):
            e, J_a, J_b = edge_jacobians(meas_inv, _lookup(state, ka), _lookup(state, kb))
            sl = slice(3 * row, 3 * row + 3)
            r[sl] = e
            w[sl] = np.diag(omega)
            if ka in index:
                J[sl, index[ka] : index[ka] + 3] = J_a
            if kb in index:
                J[sl, index[kb] : index[kb] + 3] = J_b

        g = J.T @ (w * r)
        if np.max(np.abs(g)) < options.grad_tol:
            converged, message = True, "gradient below tolerance"
            break
        H = J.T @ (w[:, None] * J)

        accepted = False
        while not accepted:
            try:
                delta = np.linalg.solve(H + lam * np.eye(n_var), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None and np.all(np.isfinite(delta)):
                trial = state.copy()
                for key, col in index.items():
                    p = _lookup(state, key)
                    q = Pose2(p.x + delta[col], p.y + delta[col + 1], p.theta + delta[col + 2])
                    if key[0] == "agent":
                        trial.agents[key[1]] = q
                    else:
                        trial.objects[key[1]] = q
                new_cost = _cost_from_terms(edges, trial)
                if math.isfinite(new_cost) and new_cost <= cost:
                    state = trial
                    drop = cost - new_cost
                    cost = new_cost
                    trace.append(cost)
                    lam = max(lam / 10.0, 1e-15)
                    accepted = True
                    if drop < options.cost_tol * max(cost, 1.0):
                        converged, message = True, "cost change below tolerance"
                    break
            lam *= 10.0
            if lam > options.max_damping:
                raise SolverError(
                    f"damping exceeded {options.max_damping:.0e} at iteration "
                    f"{iterations} (cost {cost:.6g}); normal equations are "
                    "singular or no downhill step exists"
                )
        if converged:
            break

    return state, SolveReport(
        iterations, trace[0], cost, converged, tuple(trace), message
    )


def corrected_relative_pose(xi_i: Pose2, xi_j_opt: Pose2) -> Pose2:
    """Corrected sender-to-receiver relative pose: xi_i^-1 * xi_j'."""
    return relative(xi_i, xi_j_opt)


def dump_pose_graph(problem: PoseGraphProblem, path: str | Path) -> None:
    """Plain-text edge list, one node or edge per line.

    Format:
        ANCHOR <agent id>
        AGENT <id> <x> <y> <theta>
        OBJECT <id> <x> <y> <theta>
        EDGE_OBS <agent> <object> <tx> <ty> <ttheta> <wx> <wy> <wtheta>
        EDGE_AGENT <sender> <receiver> <tx> <ty> <ttheta> <wx> <wy> <wtheta>
    """
    lines = [f"ANCHOR {problem.anchor}"]
    for aid, p in problem.agent_nodes.items():
        lines.append(f"AGENT {aid} {p.x!r} {p.y!r} {p.theta!r}")
    for oid, p in problem.object_nodes.items():
        lines.append(f"OBJECT {oid} {p.x!r} {p.y!r} {p.theta!r}")

    def fmt(kind, a, b, T, omega):
        p = from_matrix(T)
        wv = np.diag(omega)
        return f"{kind} {a} {b} {p.x!r} {p.y!r} {p.theta!r} {wv[0]!r} {wv[1]!r} {wv[2]!r}"

    for e in problem.obs_edges:
        lines.append(fmt("EDGE_OBS", e.agent_id, e.object_id, e.T_meas, e.omega))
    for e in problem.agent_edges:
        lines.append(fmt("EDGE_AGENT", e.sender_id, e.receiver_id, e.T_rel, e.omega))
    Path(path).write_text("\n".join(lines) + "\n")
