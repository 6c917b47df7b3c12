"""Synthetic multi-agent scenes, pose/delay noise models, and messages.

Stands in for the driving scenes of the original problem: static agents
observe moving rectangular objects, exchange detections plus a reported
(noisy) pose and a deterministic bird's-eye-view feature map. Object motion
is constant-velocity, which is what the communication-delay model rolls
back along.

All randomness goes through explicitly passed numpy Generators, so distinct
trials are reproducible and safely parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import DetectedBox, Pose2, relative, rotated_iou

SCENE_SCHEMA = "cocalib-scene-v1"

# Detection sigmas are floored so box information matrices stay finite even
# when a config asks for exactly zero detection noise.
SIGMA_FLOOR = 1e-3


@dataclass(frozen=True)
class AgentState:
    id: int
    pose: Pose2
    sensing_range: float

    def __post_init__(self):
        if self.sensing_range <= 0:
            raise ValueError("sensing_range must be positive")


@dataclass(frozen=True)
class SceneObject:
    id: int
    pose: Pose2
    velocity: tuple[float, float]
    half_length: float
    half_width: float

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValueError("object extents must be positive")

    def footprint(self, sigma=(SIGMA_FLOOR,) * 3) -> DetectedBox:
        return DetectedBox(self.pose, self.half_length, self.half_width, sigma)

    def pose_at(self, dt: float) -> Pose2:
        """Pose after dt seconds of constant-velocity motion."""
        vx, vy = self.velocity
        return Pose2(self.pose.x + vx * dt, self.pose.y + vy * dt, self.pose.theta)


@dataclass(frozen=True)
class Scene:
    agents: tuple[AgentState, ...]
    objects: tuple[SceneObject, ...]
    timestamp: float = 0.0

    def __post_init__(self):
        ids = [a.id for a in self.agents] + [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("agent/object ids must be unique")

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(f"no agent with id {agent_id}")


@dataclass(frozen=True)
class NoiseConfig:
    """Noise and delay model parameters.

    sigma_t: std of Gaussian noise added to reported pose x and y, meters.
    sigma_r: std of Gaussian noise added to reported heading, degrees.
    delay: communication delay, seconds; senders describe the world as it
        was `delay` seconds ago.
    detection_sigma: per-box detection noise std (x m, y m, theta rad).
    """

    sigma_t: float = 0.0
    sigma_r: float = 0.0
    delay: float = 0.0
    detection_sigma: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rng_seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_r < 0 or self.delay < 0:
            raise ValueError("sigma_t, sigma_r and delay must be >= 0")
        if len(self.detection_sigma) != 3 or any(s < 0 for s in self.detection_sigma):
            raise ValueError("detection_sigma entries must be >= 0")

    def box_sigma(self) -> tuple[float, float, float]:
        """Detection sigmas floored for use as box uncertainty."""
        return tuple(max(s, SIGMA_FLOOR) for s in self.detection_sigma)


@dataclass(frozen=True)
class GridConfig:
    height: int = 64
    width: int = 64
    channels: int = 64
    resolution: float = 2.0  # meters per cell

    def __post_init__(self):
        if min(self.height, self.width, self.channels) <= 0:
            raise ValueError("grid dims must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")


@dataclass(frozen=True)
class FeatureMap:
    """H x W x C grid of reals anchored at `origin` in its owning frame."""

    grid: np.ndarray
    resolution: float
    origin: Pose2 = field(default_factory=Pose2.identity)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != 3 or min(grid.shape) <= 0:
            raise ValueError("feature grid must be H x W x C with positive dims")
        if not np.all(np.isfinite(grid)):
            raise ValueError("feature grid entries must be finite")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class CollabMessage:
    """What a sender broadcasts: detections in its own frame, its reported
    pose, a feature map of the (delayed) view, and the capture timestamp."""

    sender_id: int
    boxes: tuple[DetectedBox, ...]
    reported_pose: Pose2
    feature: FeatureMap
    capture_time: float


@dataclass(frozen=True)
class SceneParams:
    """Scene generation knobs (density controls included)."""

    n_agents: int = 2
    n_objects: int = 10
    extent: float = 80.0
    sensing_range: float = 60.0
    max_speed: float = 10.0
    min_center_dist: float = 2.5
    half_length_range: tuple[float, float] = (1.8, 2.4)
    half_width_range: tuple[float, float] = (0.8, 1.0)
    max_placement_tries: int = 200

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if self.extent <= 0:
            raise ValueError("extent must be positive")


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed without overlap."""


def generate_scene(params: SceneParams, seed: int) -> Scene:
    """Generate a random scene; deterministic for a fixed seed.

    Objects are rejection-sampled until their footprints are disjoint and
    their centers are at least params.min_center_dist apart. Raises
    PlacementError when the requested density is infeasible.
    """
    rng = np.random.default_rng(seed)
    half = params.extent / 2.0

    agents = []
    for i in range(params.n_agents):
        pose = Pose2(
            rng.uniform(-half / 2, half / 2),
            rng.uniform(-half / 2, half / 2),
            rng.uniform(-math.pi, math.pi),
        )
        agents.append(AgentState(i, pose, params.sensing_range))

    objects: list[SceneObject] = []
    placed: list[DetectedBox] = []
    for k in range(params.n_objects):
        for attempt in range(params.max_placement_tries):
            pose = Pose2(
                rng.uniform(-half, half),
                rng.uniform(-half, half),
                rng.uniform(-math.pi, math.pi),
            )
            hl = rng.uniform(*params.half_length_range)
            hw = rng.uniform(*params.half_width_range)
            cand = DetectedBox(pose, hl, hw)
            ok = True
            for prev in placed:
                if (
                    math.hypot(prev.center.x - pose.x, prev.center.y - pose.y)
                    < params.min_center_dist
                    or rotated_iou(cand, prev) > 0.0
                ):
                    ok = False
                    break
            if ok:
                speed = rng.uniform(0.0, params.max_speed)
                heading = rng.uniform(-math.pi, math.pi)
                vel = (speed * math.cos(heading), speed * math.sin(heading))
                objects.append(
                    SceneObject(params.n_agents + k, pose, vel, hl, hw)
                )
                placed.append(cand)
                break
        else:
            raise PlacementError(
                f"could not place object {k + 1}/{params.n_objects} after "
                f"{params.max_placement_tries} tries; lower the density"
            )

    return Scene(tuple(agents), tuple(objects), timestamp=0.0)


def perturb_pose(p: Pose2, cfg: NoiseConfig, rng: np.random.Generator) -> Pose2:
    """Add Gaussian noise N(0, sigma_t^2) to x, y and N(0, sigma_r^2) to the
    heading (sigma_r given in degrees)."""
    return Pose2(
        p.x + rng.normal(0.0, cfg.sigma_t) if cfg.sigma_t > 0 else p.x,
        p.y + rng.normal(0.0, cfg.sigma_t) if cfg.sigma_t > 0 else p.y,
        p.theta + rng.normal(0.0, math.radians(cfg.sigma_r)) if cfg.sigma_r > 0 else p.theta,
    )


def observe(
    scene: Scene,
    agent_id: int,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    time_offset: float = 0.0,
) -> list[DetectedBox]:
    """Detections of one agent, in its own frame.

    One box per object within sensing range, centered at the true object
    pose (optionally advanced by time_offset seconds) transformed into the
    agent frame plus detection noise. Confidence decays with range.
    """
    agent = scene.agent(agent_id)
    sx, sy, st = cfg.detection_sigma
    boxes = []
    for obj in scene.objects:
        pose = obj.pose_at(time_offset)
        dist = math.hypot(pose.x - agent.pose.x, pose.y - agent.pose.y)
        if dist > agent.sensing_range:
            continue
        local = relative(agent.pose, pose)
        noisy = Pose2(
            local.x + (rng.normal(0.0, sx) if sx > 0 else 0.0),
            local.y + (rng.normal(0.0, sy) if sy > 0 else 0.0),
            local.theta + (rng.normal(0.0, st) if st > 0 else 0.0),
        )
        conf = 1.0 - dist / agent.sensing_range + rng.normal(0.0, 0.05)
        boxes.append(
            DetectedBox(
                noisy,
                obj.half_length,
                obj.half_width,
                cfg.box_sigma(),
                confidence=min(1.0, max(0.0, conf)),
            )
        )
    return boxes


def visible_ids(scene: Scene, agent_id: int, time_offset: float = 0.0) -> list[int]:
    """Ids of objects within sensing range, in the same order observe()
    emits their boxes (ground-truth correspondence for evaluation)."""
    agent = scene.agent(agent_id)
    out = []
    for obj in scene.objects:
        pose = obj.pose_at(time_offset)
        if math.hypot(pose.x - agent.pose.x, pose.y - agent.pose.y) <= agent.sensing_range:
            out.append(obj.id)
    return out


def synthesize_feature(
    boxes: list[DetectedBox], grid: GridConfig, origin: Pose2 | None = None
) -> FeatureMap:
    """Deterministic BEV feature map: one isotropic Gaussian bump per box.

    Each box adds a bump of peak 1.0 and width equal to its half-diagonal,
    replicated over all channels, centered at the cell containing the box
    center. Boxes outside the grid contribute nothing. The grid is centered
    on the frame origin (or `origin` if given).
    """
    org = origin if origin is not None else Pose2.identity()
    H, W, C = grid.height, grid.width, grid.channels
    plane = np.zeros((H, W))
    rows = (np.arange(H) - H / 2 + 0.5) * grid.resolution
    cols = (np.arange(W) - W / 2 + 0.5) * grid.resolution
    for box in boxes:
        local = relative(org, box.center)
        r = local.y / grid.resolution + H / 2 - 0.5
        c = local.x / grid.resolution + W / 2 - 0.5
        ri, ci = round(r), round(c)
        if not (0 <= ri < H and 0 <= ci < W):
            continue
        width = math.hypot(box.half_length, box.half_width)
        dy = rows - rows[ri]
        dx = cols - cols[ci]
        bump = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * width**2))
        plane = np.maximum(plane, bump)
    return FeatureMap(np.repeat(plane[:, :, None], C, axis=2), grid.resolution, org)


def build_message(
    scene: Scene,
    sender_id: int,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    grid: GridConfig | None = None,
) -> CollabMessage:
    """Assemble the sender's broadcast under the configured noise and delay.

    Boxes describe the world cfg.delay seconds ago (objects rolled back along
    their constant velocities); the reported pose carries the configured
    Gaussian pose noise; the feature map renders the same delayed view.
    """
    grid = grid or GridConfig()
    boxes = observe(scene, sender_id, cfg, rng, time_offset=-cfg.delay)
    reported = perturb_pose(scene.agent(sender_id).pose, cfg, rng)
    feature = synthesize_feature(boxes, grid)
    return CollabMessage(
        sender_id=sender_id,
        boxes=tuple(boxes),
        reported_pose=reported,
        feature=feature,
        capture_time=scene.timestamp - cfg.delay,
    )


def scene_to_dict(scene: Scene, seed: int | None = None) -> dict:
    """JSON-ready scene description; floats survive round-trips bit-exact."""
    return {
        "schema": SCENE_SCHEMA,
        "seed": seed,
        "timestamp": scene.timestamp,
        "agents": [
            {
                "id": a.id,
                "pose": [a.pose.x, a.pose.y, a.pose.theta],
                "sensing_range": a.sensing_range,
            }
            for a in scene.agents
        ],
        "objects": [
            {
                "id": o.id,
                "pose": [o.pose.x, o.pose.y, o.pose.theta],
                "velocity": list(o.velocity),
                "half_length": o.half_length,
                "half_width": o.half_width,
            }
            for o in scene.objects
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    if data.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"unsupported scene schema: {data.get('schema')!r}")
    agents = tuple(
        AgentState(a["id"], Pose2(*a["pose"]), a["sensing_range"])
        for a in data["agents"]
    )
    objects = tuple(
        SceneObject(
            o["id"],
            Pose2(*o["pose"]),
            tuple(o["velocity"]),
            o["half_length"],
            o["half_width"],
        )
        for o in data["objects"]
    )
    return Scene(agents, objects, timestamp=data.get("timestamp", 0.0))


def save_scene(scene: Scene, path: str | Path, seed: int | None = None) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene, seed), indent=2) + "\n")


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
