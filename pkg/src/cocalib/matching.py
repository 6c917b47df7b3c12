"""Cross-agent object association via star-graph matching.

Detections from a collaborator are first transformed into the receiver's
frame with the (noisy) relative pose estimate. A distance-gated initial
association then seeds two similarity measures between the star graphs of
candidate detections - edge consistency of relative transforms and center
distance - and a global optimal assignment resolves conflicts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import DetectedBox, Pose2, compose, invert_matrix, relative, to_matrix


@dataclass(frozen=True)
class MatchParams:
    tau1: float = 0.5  # similarity threshold for retained pairs
    tau2: float = 3.0  # meters; initial association distance gate
    lam: float = 1.0  # weight of distance similarity vs edge similarity
    k_neighbors: int = 5  # star graph size (capped at n - 1)


@dataclass(frozen=True)
class StarGraph:
    """One detection (center) plus the relative transforms to its K nearest
    neighbors. leaf_ids[i] indexes the same box list the center came from."""

    center: int
    leaf_ids: tuple[int, ...]
    edge_transforms: tuple[np.ndarray, ...]  # 3x3, center -> leaf

    def edge_to(self, leaf: int) -> np.ndarray:
        return self.edge_transforms[self.leaf_ids.index(leaf)]


@dataclass(frozen=True)
class Assignment:
    """One-to-one pairs (p, q, score) between two box lists; every retained
    pair scored at or above the tau1 used to produce it."""

    pairs: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        ps = [p for p, _, _ in self.pairs]
        qs = [q for _, q, _ in self.pairs]
        if len(set(ps)) != len(ps) or len(set(qs)) != len(qs):
            raise ValueError("assignment must be one-to-one")

    def as_dict(self) -> dict[int, int]:
        return {p: q for p, q, _ in self.pairs}

    def pair_set(self) -> set[tuple[int, int]]:
        return {(p, q) for p, q, _ in self.pairs}


def transform_boxes(boxes: list[DetectedBox], rel: Pose2) -> list[DetectedBox]:
    """Re-express boxes through `rel` (frame change); uncertainty and extents
    ride along unchanged."""
    return [
        DetectedBox(
            compose(rel, b.center), b.half_length, b.half_width, b.sigma, b.confidence
        )
        for b in boxes
    ]


def _center_distance(a: DetectedBox, b: DetectedBox) -> float:
    return math.hypot(a.center.x - b.center.x, a.center.y - b.center.y)


def build_star_graph(center_idx: int, boxes: list[DetectedBox], k: int) -> StarGraph:
    """Star graph with the K nearest other boxes as leaves (ties broken by
    index); a single box yields an empty leaf set."""
    if not boxes:
        raise ValueError("boxes must be nonempty")
    if not 0 <= center_idx < len(boxes):
        raise ValueError(f"center index {center_idx} out of range")
    center = boxes[center_idx]
    others = sorted(
        (
            (_center_distance(center, boxes[j]), j)
            for j in range(len(boxes))
            if j != center_idx
        )
    )
    leaves = [j for _, j in others[: max(k, 0)]]
    transforms = tuple(
        to_matrix(relative(center.center, boxes[j].center)) for j in leaves
    )
    return StarGraph(center_idx, tuple(leaves), transforms)


def initial_match(
    boxes_i: list[DetectedBox], boxes_j: list[DetectedBox], tau2: float
) -> dict[int, int]:
    """Nearest-neighbor candidate map: p -> closest q within tau2 meters.

    Purely distance-based and not necessarily injective; used to pair up
    star-graph leaves before the global assignment.
    """
    out: dict[int, int] = {}
    for p, bp in enumerate(boxes_i):
        best, best_d = None, math.inf
        for q, bq in enumerate(boxes_j):
            d = _center_distance(bp, bq)
            if d <= tau2 and d < best_d:
                best, best_d = q, d
        if best is not None:
            out[p] = best
    return out


def edge_consistency(T_pm: np.ndarray, T_qn: np.ndarray) -> float:
    """exp(-||T_pm @ T_qn^-1 - I||_F), in (0, 1]; 1 iff the transforms agree.

    For rigid transforms the value is symmetric in its arguments even though
    ||A - I||_F != ||A^-1 - I||_F for general matrices: with A = [[R, t]],
    ||A^-1 - I||_F^2 = ||R^T - I||_F^2 + ||R^T t||^2 = ||R - I||_F^2 + ||t||^2.
    """
    if np.array_equal(T_pm, T_qn):
        return 1.0  # T T^-1 = I holds exactly; skip the rounding of the product
    dev = T_pm @ invert_matrix(T_qn) - np.eye(3)
    return math.exp(-float(np.linalg.norm(dev)))


def edge_similarity(
    g_p: StarGraph, g_q: StarGraph, candidates: dict[int, int]
) -> float:
    """Mean edge consistency over leaves of g_p whose candidate counterpart
    is a leaf of g_q; 0.0 when no leaf pairs up (the mean is undefined there,
    and an unmatched neighborhood carries no evidence)."""
    q_leaves = set(g_q.leaf_ids)
    total, count = 0.0, 0
    for m, T_pm in zip(g_p.leaf_ids, g_p.edge_transforms):
        n = candidates.get(m)
        if n is None or n not in q_leaves:
            continue
        total += edge_consistency(T_pm, g_q.edge_to(n))
        count += 1
    return total / count if count else 0.0


def distance_similarity(p: DetectedBox, q: DetectedBox) -> float:
    """exp(-centroid distance), in (0, 1]."""
    return math.exp(-_center_distance(p, q))


def graph_similarity(
    p: DetectedBox,
    q: DetectedBox,
    g_p: StarGraph,
    g_q: StarGraph,
    candidates: dict[int, int],
    lam: float = 1.0,
) -> float:
    """Combined score S = S_edge + lam * S_dis.

    S_edge is evaluated from g_p against g_q through the candidate map; the
    swapped-argument form is numerically identical for rigid edge transforms
    (see edge_consistency).
    """
    return edge_similarity(g_p, g_q, candidates) + lam * distance_similarity(p, q)


def optimal_assignment(scores: np.ndarray, tau1: float) -> Assignment:
    """Maximum-total-score one-to-one assignment, then prune pairs < tau1.

    Rectangular inputs are padded to square with zero-score dummies; the
    global optimum is found with the Hungarian method. Pruning happens after
    the assignment so weak pairs never distort the global optimum.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return Assignment(())
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n, m = scores.shape
    side = max(n, m)
    padded = np.zeros((side, side))
    padded[:n, :m] = scores
    rows, cols = linear_sum_assignment(padded, maximize=True)
    pairs = [
        (int(r), int(c), float(scores[r, c]))
        for r, c in zip(rows, cols)
        if r < n and c < m and scores[r, c] >= tau1
    ]
    return Assignment(tuple(sorted(pairs)))


def match_agents(
    boxes_i: list[DetectedBox],
    boxes_j: list[DetectedBox],
    rel_j_to_i: Pose2,
    params: MatchParams = MatchParams(),
) -> Assignment:
    """Full association pipeline between two agents' detections.

    boxes_j (in the sender frame) are brought into frame i with rel_j_to_i,
    candidates are gated by tau2, star graphs are scored, and the optimal
    assignment is pruned at tau1. Deterministic; empty inputs give an empty
    assignment.
    """
    if not boxes_i or not boxes_j:
        return Assignment(())
    in_i = transform_boxes(boxes_j, rel_j_to_i)
    candidates = initial_match(boxes_i, in_i, params.tau2)
    k = params.k_neighbors
    stars_i = [build_star_graph(p, boxes_i, k) for p in range(len(boxes_i))]
    stars_j = [build_star_graph(q, in_i, k) for q in range(len(in_i))]
    scores = np.zeros((len(boxes_i), len(in_i)))
    for p, bp in enumerate(boxes_i):
        for q, bq in enumerate(in_i):
            scores[p, q] = graph_similarity(
                bp, bq, stars_i[p], stars_j[q], candidates, params.lam
            )
    return optimal_assignment(scores, params.tau1)
