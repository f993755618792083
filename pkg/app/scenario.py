"""
Synthetic multi-agent driving scenes, a 2D ray-cast LiDAR, and the
communication noise models (latency and pose error) applied to shared metadata.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from app import geometry
from app.geometry import GridSpec, Pose2D, RotatedBox
from app.tensor import Tensor
from app.util import ConfigError, GenerationError, UsageError, make_rng

logger = logging.getLogger(__name__)

EGO_ID = 1
AGENT_TYPES = ("I", "V")
SCENE_SCHEMA_VERSION = 1
NOISE_MODES = ("perfect", "simple", "mild", "harsh")

# ranges accepted for user-supplied (harsh) noise
MAX_LATENCY_MS = 500.0
MAX_SIGMA_HDG_DEG = 1.0
MAX_SIGMA_LOC_M = 0.5

VEHICLE_SIZE = (1.8, 4.2, 1.5)
VEHICLE_Z = -1.0


#
# Types
#


@dataclass(frozen=True)
class AgentMeta:
    id: int
    agent_type: str
    pose: Pose2D
    timestamp: int
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.agent_type not in AGENT_TYPES:
            raise ConfigError(f"agent type must be one of {AGENT_TYPES}, got {self.agent_type}")


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp: int
    agents: tuple[AgentMeta, ...]
    objects: tuple[RotatedBox, ...]

    def agent(self, agent_id: int) -> AgentMeta:
        for meta in self.agents:
            if meta.id == agent_id:
                return meta
        raise UsageError(f"agent {agent_id} is not in frame {self.index}")


@dataclass(frozen=True)
class Scene:
    seed: int
    frames: tuple[Frame, ...]
    occluders: tuple[RotatedBox, ...]
    frame_rate: float
    target_index: int = 0

    @property
    def duration(self) -> int:
        return len(self.frames)

    @property
    def sample_frame(self) -> Frame:
        return self.frames[-1]

    @property
    def agent_ids(self) -> list[int]:
        return [meta.id for meta in self.frames[0].agents]


@dataclass(frozen=True)
class SensorConfig:
    resolution_deg: float = 0.5
    vehicle_range: float = 40.0
    infra_range: float = 60.0

    def max_range(self, agent_type: str) -> float:
        return self.infra_range if agent_type == "I" else self.vehicle_range


@dataclass(frozen=True)
class SceneConfig:
    grid: GridSpec
    n_aux: int = 2
    n_objects: int = 6
    n_occluders: int = 2
    frames: int = 6
    frame_rate: float = 10.0
    max_agents: int = 4
    max_speed: float = 10.0
    infra_prob: float = 0.4
    world_half_x: float = 90.0
    world_half_y: float = 60.0
    max_retries: int = 200
    sensor: SensorConfig = field(default_factory=SensorConfig)

    def validate(self):
        if self.n_aux < 1:
            raise ConfigError("a scene needs at least one aux agent (L >= 2)")
        if 1 + self.n_aux > self.max_agents:
            raise ConfigError(f"{1 + self.n_aux} agents exceed max_agents={self.max_agents}")
        if self.n_objects < 1 or self.n_occluders < 1:
            raise ConfigError("a scene needs at least one object and one occluder")
        if self.frames < 1 or self.frame_rate <= 0:
            raise ConfigError("frames and frame_rate must be positive")
        footprint = (self.n_objects + self.n_occluders) * 40.0
        usable = 0.5 * (self.grid.x_max - self.grid.x_min) * (self.grid.y_max - self.grid.y_min)
        if footprint > usable:
            raise GenerationError(
                f"{self.n_objects} objects and {self.n_occluders} occluders do not fit the world"
            )


@dataclass(frozen=True)
class NoiseSetting:
    mode: str = "perfect"
    t_lag: float = 0.0
    sigma_hdg: float = 0.0
    sigma_loc: float = 0.0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ConfigError(f"noise mode must be one of {NOISE_MODES}, got {self.mode}")
        if min(self.t_lag, self.sigma_hdg, self.sigma_loc) < 0:
            raise ConfigError(f"noise parameters must be nonnegative: {self}")
        if self.mode == "perfect" and (self.t_lag or self.sigma_hdg or self.sigma_loc):
            raise ConfigError("the perfect setting carries no noise")
        if self.mode == "harsh" and (
            self.t_lag > MAX_LATENCY_MS
            or self.sigma_hdg > MAX_SIGMA_HDG_DEG
            or self.sigma_loc > MAX_SIGMA_LOC_M
        ):
            raise ConfigError(
                f"harsh noise must stay within t_lag<={MAX_LATENCY_MS}, "
                f"sigma_hdg<={MAX_SIGMA_HDG_DEG}, sigma_loc<={MAX_SIGMA_LOC_M}: {self}"
            )

    @classmethod
    def preset(cls, mode: str, t_lag=0.0, sigma_hdg=0.0, sigma_loc=0.0) -> "NoiseSetting":
        match mode:
            case "perfect":
                return cls("perfect")
            case "simple":
                return cls("simple", 100.0, 0.2, 0.2)
            case "mild":
                return cls("mild", 200.0, 0.2, 0.2)
            case "harsh":
                return cls("harsh", float(t_lag), float(sigma_hdg), float(sigma_loc))
        raise ConfigError(f"unknown noise mode {mode}")


@dataclass(frozen=True)
class PseudoImage:
    tensor: Tensor
    grid: GridSpec


@dataclass(frozen=True)
class RayHits:
    angles: np.ndarray
    ranges: np.ndarray
    points: np.ndarray
    shape: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return self.shape >= 0


#
# Noise models
#


def sample_latency(rng: np.random.Generator, setting: NoiseSetting) -> float:
    """Latency in ms; one draw is consumed in every mode."""
    draw = rng.uniform(0.0, 1.0)
    if setting.mode == "perfect" or setting.t_lag == 0:
        return 0.0
    if setting.mode == "simple":
        return float(setting.t_lag)
    return float(draw * setting.t_lag)


def apply_pose_noise(rng: np.random.Generator, pose: Pose2D, setting: NoiseSetting) -> Pose2D:
    """Gaussian localisation and heading error; three draws are consumed in every mode."""
    dx, dy, dyaw = rng.standard_normal(3)
    if setting.sigma_loc == 0 and setting.sigma_hdg == 0:
        return pose
    return Pose2D(
        pose.x + setting.sigma_loc * dx,
        pose.y + setting.sigma_loc * dy,
        pose.yaw + math.radians(setting.sigma_hdg) * dyaw,
    )


def serve_frame(scene: Scene, ego_time: float, latency: float) -> Frame:
    """Newest buffered frame captured at or before ego_time - latency."""
    deadline = ego_time - latency
    chosen = scene.frames[0]
    for frame in scene.frames:
        if frame.timestamp <= deadline:
            chosen = frame
    return chosen


#
# Ray casting
#


def _slab_distances(origin: np.ndarray, dirs: np.ndarray, boxes: list[RotatedBox]) -> np.ndarray:
    """Entry distance of every ray into every box footprint, inf on a miss. [rays, boxes]"""
    out = np.full((len(dirs), len(boxes)), np.inf)
    for j, box in enumerate(boxes):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, -s], [s, c]])
        o = (origin - np.array([box.cx, box.cy])) @ rot
        d = dirs @ rot
        half = np.array([box.l / 2.0, box.w / 2.0])
        t_enter = np.full(len(dirs), -np.inf)
        t_exit = np.full(len(dirs), np.inf)
        for axis in range(2):
            da = d[:, axis]
            parallel = np.abs(da) < 1e-12
            safe = np.where(parallel, 1.0, da)
            t1 = (-half[axis] - o[axis]) / safe
            t2 = (half[axis] - o[axis]) / safe
            lo = np.where(parallel, np.where(abs(o[axis]) <= half[axis], -np.inf, np.inf), np.minimum(t1, t2))
            hi = np.where(parallel, np.where(abs(o[axis]) <= half[axis], np.inf, -np.inf), np.maximum(t1, t2))
            t_enter = np.maximum(t_enter, lo)
            t_exit = np.minimum(t_exit, hi)
        hit = (t_enter <= t_exit) & (t_exit > 0)
        out[:, j] = np.where(hit, np.maximum(t_enter, 0.0), np.inf)
    return out


def cast_rays(
    pose: Pose2D, boxes: list[RotatedBox], max_range: float, resolution_deg: float
) -> RayHits:
    """360-degree fan from pose; each ray stops at the first footprint it enters."""
    count = int(round(360.0 / resolution_deg))
    angles = pose.yaw + np.radians(resolution_deg) * np.arange(count)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    origin = np.array([pose.x, pose.y])
    if boxes:
        dist = _slab_distances(origin, dirs, boxes)
        nearest = np.argmin(dist, axis=1)
        ranges = dist[np.arange(count), nearest]
    else:
        nearest = np.zeros(count, dtype=np.int64)
        ranges = np.full(count, np.inf)
    hit = ranges <= max_range
    shape = np.where(hit, nearest, -1)
    ranges = np.where(hit, ranges, np.inf)
    points = origin + dirs * np.where(hit, ranges, 0.0)[:, None]
    return RayHits(angles, ranges, points, shape)


def scene_shapes(scene: Scene, frame: Frame) -> list[RotatedBox]:
    """Ray-blocking footprints of a frame: moving objects first, then occluders."""
    return list(frame.objects) + list(scene.occluders)


def rasterize(
    scene: Scene,
    frame: Frame,
    agent_id: int,
    grid: GridSpec,
    sensor: SensorConfig,
) -> PseudoImage:
    """Bin an agent's ray hits into its own body-frame grid.

    Channels: occupancy, log(1 + hit count), mean hit range over the agent's max range.
    """
    meta = frame.agent(agent_id)
    max_range = sensor.max_range(meta.agent_type)
    hits = cast_rays(meta.pose, scene_shapes(scene, frame), max_range, sensor.resolution_deg)
    return _bin_hits(hits, meta.pose, grid, max_range)


def _bin_hits(hits: RayHits, pose: Pose2D, grid: GridSpec, max_range: float) -> PseudoImage:
    counts = np.zeros((grid.height, grid.width))
    range_sum = np.zeros((grid.height, grid.width))
    if hits.hit.any():
        local = pose.to_local(hits.points[hits.hit])
        inside = grid.contains(local[:, 0], local[:, 1])
        rows = np.floor((local[inside, 1] - grid.y_min) / grid.cell).astype(np.int64)
        cols = np.floor((local[inside, 0] - grid.x_min) / grid.cell).astype(np.int64)
        rows = np.clip(rows, 0, grid.height - 1)
        cols = np.clip(cols, 0, grid.width - 1)
        np.add.at(counts, (rows, cols), 1.0)
        np.add.at(range_sum, (rows, cols), hits.ranges[hits.hit][inside])
    occupancy = (counts > 0).astype(np.float64)
    mean_range = np.where(counts > 0, range_sum / np.maximum(counts, 1.0), 0.0) / max_range
    image = np.stack([occupancy, np.log1p(counts), mean_range], axis=-1)
    return PseudoImage(Tensor(image), grid)


def visible_shapes(hits: RayHits) -> set[int]:
    return {int(s) for s in hits.shape[hits.hit]}


#
# Scene generation
#


class _Retry(Exception):
    pass


def generate_scene(seed: int, config: SceneConfig) -> Scene:
    """Deterministic scene in which object 0 is hidden from the ego by an occluder
    while aux agent 2 sees it."""
    config.validate()
    rng = make_rng(seed, 1)
    for attempt in range(config.max_retries):
        try:
            scene = _build_scene(rng, seed, config)
        except _Retry as e:
            logger.debug(f"Scene {seed}: attempt {attempt} rejected ({e})")
            continue
        logger.debug(f"Scene {seed}: generated after {attempt + 1} attempts")
        return scene
    raise GenerationError(f"scene {seed}: no feasible layout after {config.max_retries} attempts")


def _vehicle_box(rng, x, y, yaw) -> RotatedBox:
    w, l, h = VEHICLE_SIZE  # noqa: E741
    return RotatedBox(
        x, y, VEHICLE_Z, w + rng.uniform(-0.1, 0.2), l + rng.uniform(-0.3, 0.4), h, yaw
    )


def _radius(box: RotatedBox) -> float:
    return 0.5 * math.hypot(box.w, box.l)


def _clear(x, y, r, placed: list[tuple[float, float, float]]) -> bool:
    return all(math.hypot(x - px, y - py) > r + pr + 0.5 for px, py, pr in placed)


def _build_scene(rng: np.random.Generator, seed: int, config: SceneConfig) -> Scene:
    grid = config.grid
    sensor = config.sensor
    ego = Pose2D(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-math.pi / 12, math.pi / 12))
    ego_speed = rng.uniform(0.0, config.max_speed)
    placed: list[tuple[float, float, float]] = [(ego.x, ego.y, 2.5)]

    # hidden target ahead of the ego
    bearing = rng.uniform(-math.pi / 6, math.pi / 6)
    far = min(24.0, 0.8 * grid.x_max)
    distance = rng.uniform(min(14.0, 0.6 * far), far)
    los = ego.yaw + bearing
    tx, ty = ego.x + distance * math.cos(los), ego.y + distance * math.sin(los)
    target = _vehicle_box(rng, tx, ty, rng.uniform(-math.pi, math.pi))
    placed.append((tx, ty, _radius(target)))

    # occluder across the line of sight
    d_occ = rng.uniform(0.35, 0.55) * distance
    half_angle = math.asin(min(1.0, (_radius(target) + 0.3) / distance))
    half_width = d_occ * math.tan(half_angle) + 0.6
    ox, oy = ego.x + d_occ * math.cos(los), ego.y + d_occ * math.sin(los)
    occluders = [RotatedBox(ox, oy, 0.0, 2.0 * half_width, 1.0, 2.5, los)]
    placed.append((ox, oy, half_width))

    # witness agent beside the target
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    lateral = rng.uniform(8.0, 14.0)
    along = rng.uniform(-4.0, 4.0)
    wx = tx + along * math.cos(los) - side * lateral * math.sin(los)
    wy = ty + along * math.sin(los) + side * lateral * math.cos(los)
    if not _clear(wx, wy, 2.5, placed):
        raise _Retry("witness overlaps")
    witness_type = "I" if rng.uniform() < config.infra_prob else "V"
    witness_yaw = math.atan2(ty - wy, tx - wx) + rng.uniform(-0.3, 0.3)
    agents = [(EGO_ID, "V", ego, ego_speed), (2, witness_type, Pose2D(wx, wy, witness_yaw), None)]
    placed.append((wx, wy, 2.5))

    for agent_id in range(3, 2 + config.n_aux):
        for _ in range(20):
            r = rng.uniform(10.0, 30.0)
            a = rng.uniform(-math.pi, math.pi)
            ax, ay = ego.x + r * math.cos(a), ego.y + r * math.sin(a)
            if _clear(ax, ay, 2.5, placed):
                break
        else:
            raise _Retry("aux agent placement")
        kind = "I" if rng.uniform() < config.infra_prob else "V"
        agents.append((agent_id, kind, Pose2D(ax, ay, rng.uniform(-math.pi, math.pi)), None))
        placed.append((ax, ay, 2.5))

    objects = [target]
    for _ in range(config.n_objects - 1):
        for _ in range(50):
            local = np.array(
                [rng.uniform(grid.x_min + 3, grid.x_max - 3), rng.uniform(grid.y_min + 3, grid.y_max - 3)]
            )
            x, y = ego.transform_points(local)
            box = _vehicle_box(rng, x, y, rng.uniform(-math.pi, math.pi))
            if _clear(x, y, _radius(box), placed):
                break
        else:
            raise _Retry("object placement")
        objects.append(box)
        placed.append((box.cx, box.cy, _radius(box)))

    for _ in range(config.n_occluders - 1):
        for _ in range(50):
            local = np.array(
                [rng.uniform(grid.x_min + 3, grid.x_max - 3), rng.uniform(grid.y_min + 3, grid.y_max - 3)]
            )
            x, y = ego.transform_points(local)
            block = RotatedBox(
                x, y, 0.0, rng.uniform(2.0, 6.0), rng.uniform(1.0, 3.0), 2.5, rng.uniform(-math.pi, math.pi)
            )
            if _clear(x, y, _radius(block), placed):
                break
        else:
            raise _Retry("occluder placement")
        occluders.append(block)
        placed.append((block.cx, block.cy, _radius(block)))

    speeds = [rng.uniform(0.0, config.max_speed) for _ in objects]
    object_velocity = [(v * math.cos(b.yaw), v * math.sin(b.yaw)) for v, b in zip(speeds, objects)]
    agent_velocity = {}
    for agent_id, kind, pose, speed in agents:
        if kind == "I":
            agent_velocity[agent_id] = (0.0, 0.0)
        else:
            v = speed if speed is not None else rng.uniform(0.0, config.max_speed)
            agent_velocity[agent_id] = (v * math.cos(pose.yaw), v * math.sin(pose.yaw))

    final = _frame(config.frames - 1, config, agents, agent_velocity, objects, object_velocity)
    scene_shapes_final = list(final.objects) + occluders
    ego_hits = cast_rays(final.agent(EGO_ID).pose, scene_shapes_final, sensor.vehicle_range, sensor.resolution_deg)
    if 0 in visible_shapes(ego_hits):
        raise _Retry("target visible to ego")
    witness = final.agent(2)
    witness_hits = cast_rays(
        witness.pose, scene_shapes_final, sensor.max_range(witness.agent_type), sensor.resolution_deg
    )
    if 0 not in visible_shapes(witness_hits):
        raise _Retry("target hidden from witness")

    frames = tuple(
        _frame(k, config, agents, agent_velocity, objects, object_velocity) for k in range(config.frames)
    )
    for frame in frames:
        for box in frame.objects:
            if abs(box.cx) > config.world_half_x or abs(box.cy) > config.world_half_y:
                raise _Retry("object leaves the world")
    return Scene(seed, frames, tuple(occluders), config.frame_rate, target_index=0)


def _frame(index, config, agents, agent_velocity, objects, object_velocity) -> Frame:
    """Constant-velocity state at frame index, extrapolated from the final frame."""
    period_ms = 1000.0 / config.frame_rate
    timestamp = int(round(index * period_ms))
    dt = (index - (config.frames - 1)) * period_ms / 1000.0
    metas = []
    for agent_id, kind, pose, _ in agents:
        vx, vy = agent_velocity[agent_id]
        metas.append(AgentMeta(agent_id, kind, Pose2D(pose.x + vx * dt, pose.y + vy * dt, pose.yaw), timestamp, (vx, vy)))
    boxes = tuple(
        RotatedBox(b.cx + vx * dt, b.cy + vy * dt, b.cz, b.w, b.l, b.h, b.yaw)
        for b, (vx, vy) in zip(objects, object_velocity)
    )
    return Frame(index, timestamp, tuple(metas), boxes)


def ego_occluded_targets(scene: Scene, sensor: SensorConfig) -> list[int]:
    """Objects of the sample frame that no ego ray hits but some aux ray does."""
    frame = scene.sample_frame
    shapes = scene_shapes(scene, frame)
    ego = frame.agent(EGO_ID)
    seen_by_ego = visible_shapes(cast_rays(ego.pose, shapes, sensor.vehicle_range, sensor.resolution_deg))
    seen_by_aux: set[int] = set()
    for meta in frame.agents:
        if meta.id != EGO_ID:
            hits = cast_rays(meta.pose, shapes, sensor.max_range(meta.agent_type), sensor.resolution_deg)
            seen_by_aux |= visible_shapes(hits)
    return sorted(i for i in range(len(frame.objects)) if i not in seen_by_ego and i in seen_by_aux)


#
# Scene files
#

_box_schema = {
    "type": "object",
    "properties": {k: {"type": "number"} for k in ("cx", "cy", "cz", "w", "l", "h", "yaw")},
    "required": ["cx", "cy", "cz", "w", "l", "h", "yaw"],
}

scene_schema = {
    "type": "object",
    "properties": {
        "schema_version": {"const": SCENE_SCHEMA_VERSION},
        "seed": {"type": "integer"},
        "frame_rate": {"type": "number", "exclusiveMinimum": 0},
        "target_index": {"type": "integer", "minimum": 0},
        "occluders": {"type": "array", "items": _box_schema},
        "frames": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "index": {"type": "integer"},
                    "timestamp": {"type": "integer"},
                    "agents": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "properties": {
                                "id": {"type": "integer", "minimum": 1},
                                "type": {"enum": list(AGENT_TYPES)},
                                "x": {"type": "number"},
                                "y": {"type": "number"},
                                "yaw": {"type": "number"},
                                "vx": {"type": "number"},
                                "vy": {"type": "number"},
                            },
                            "required": ["id", "type", "x", "y", "yaw", "vx", "vy"],
                        },
                    },
                    "objects": {"type": "array", "items": _box_schema},
                },
                "required": ["index", "timestamp", "agents", "objects"],
            },
        },
    },
    "required": ["schema_version", "seed", "frame_rate", "occluders", "frames"],
}


def _box_dict(box: RotatedBox) -> dict:
    return {"cx": box.cx, "cy": box.cy, "cz": box.cz, "w": box.w, "l": box.l, "h": box.h, "yaw": box.yaw}


def _box_from(d: dict) -> RotatedBox:
    return RotatedBox(d["cx"], d["cy"], d["cz"], d["w"], d["l"], d["h"], d["yaw"])


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema_version": SCENE_SCHEMA_VERSION,
        "seed": scene.seed,
        "frame_rate": scene.frame_rate,
        "target_index": scene.target_index,
        "occluders": [_box_dict(b) for b in scene.occluders],
        "frames": [
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "agents": [
                    {
                        "id": a.id,
                        "type": a.agent_type,
                        "x": a.pose.x,
                        "y": a.pose.y,
                        "yaw": a.pose.yaw,
                        "vx": a.velocity[0],
                        "vy": a.velocity[1],
                    }
                    for a in f.agents
                ],
                "objects": [_box_dict(b) for b in f.objects],
            }
            for f in scene.frames
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    try:
        jsonschema.validate(data, scene_schema)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid scene file: {e.message}") from e
    frames = []
    last_time = None
    for f in data["frames"]:
        if last_time is not None and f["timestamp"] <= last_time:
            raise ConfigError("scene frame timestamps must strictly increase")
        last_time = f["timestamp"]
        agents = tuple(
            AgentMeta(a["id"], a["type"], Pose2D(a["x"], a["y"], a["yaw"]), f["timestamp"], (a["vx"], a["vy"]))
            for a in f["agents"]
        )
        if EGO_ID not in {a.id for a in agents}:
            raise ConfigError(f"frame {f['index']} has no ego agent")
        frames.append(Frame(f["index"], f["timestamp"], agents, tuple(_box_from(b) for b in f["objects"])))
    return Scene(
        data["seed"],
        tuple(frames),
        tuple(_box_from(b) for b in data["occluders"]),
        data["frame_rate"],
        data.get("target_index", 0),
    )


def save_scene(path: Path, scene: Scene):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(scene_to_dict(scene), sort_keys=True) + "\n", encoding="utf-8")


def load_scene(path: Path) -> Scene:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read scene {path}: {e}") from e
    return scene_from_dict(data)


def world_to_local_boxes(boxes, pose: Pose2D) -> list[RotatedBox]:
    """World-frame boxes expressed in pose's body frame."""
    origin = Pose2D(0.0, 0.0, 0.0)
    return [geometry.box_to_frame(b, origin, pose) for b in boxes]
